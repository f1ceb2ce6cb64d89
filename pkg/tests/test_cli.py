import json

import pytest

from inferbeam.cli import build_parser, config_from_args, main
from inferbeam.io import load_environment, load_params, read_csv

TINY = ["--family", "toy", "--seeds", "0", "1", "--n-train", "2", "--n-test", "1", "--train-subset", "1",
        "--max-iters", "5", "--n-ues", "20", "--n-blockages", "4", "--sessions-per-blockage", "15"]
OUTPUTS = ["alignment_sessions.csv", "blockage_sessions.csv", "noise_params.csv", "summary.json"]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("INFERBEAM_OUTPUT", str(tmp_path))
    return tmp_path


def test_flags_mirror_config():
    args = build_parser().parse_args(["simulate"] + TINY + ["--train-evidence", "full", "--tied", "false", "--beta", "2.5"])
    cfg = config_from_args(args)
    assert cfg.family == "toy" and cfg.seeds == (0, 1) and cfg.train_evidence == "full"
    assert cfg.tied is False and cfg.beta == 2.5 and cfg.max_iters == 5


def test_config_file_with_override(root):
    (root / "study.json").write_text(json.dumps({"family": "toy", "n_ues": 7, "seeds": [3]}))
    args = build_parser().parse_args(["simulate", "--config", str(root / "study.json"), "--n-ues", "9"])
    cfg = config_from_args(args)
    assert cfg.n_ues == 9 and cfg.seeds == (3,)


def test_pipeline(root, capsys):
    assert main(["gen-env", "--family", "toy", "--count", "3", "--n-train", "2", "--out", "envs"]) == 0
    man = json.loads((root / "envs" / "manifest.json").read_text())
    assert man["train"] == ["env_000.json", "env_001.json"] and man["test"] == ["env_002.json"]
    env_path = str(root / "envs" / "env_002.json")
    env = load_environment(env_path)

    main(["sweep", "--env", env_path, "--out", "gt.csv"])
    assert len(read_csv(root / "gt.csv")) == env.grid.n_nodes

    main(["train"] + TINY + ["--out", "model"])
    summary = json.loads((root / "model" / "training_summary.json").read_text())
    assert load_params(root / "model" / "theta_bs.txt").w.tolist() == summary["bs"]["w"]
    assert (root / "model" / "training_history.csv").exists()

    theta = ["--theta-bs", str(root / "model" / "theta_bs.txt"), "--theta-sec", str(root / "model" / "theta_sec.txt")]
    main(["infer", "--env", env_path] + theta + ["--nodes", "0", "5", "--top", "3", "--out", "map.csv",
                                                 "--sample-fraction", "0.05", "--samples-out", "samples.csv"])
    rows = read_csv(root / "map.csv")
    assert [(r["node_index"], r["rank"]) for r in rows] == [(v, str(k)) for v in ("0", "5") for k in (1, 2, 3)]
    main(["infer", "--env", env_path] + theta + ["--samples", str(root / "samples.csv"), "--out", "map2.csv",
                                                 "--nodes", "0", "5", "--top", "3"])
    assert (root / "map.csv").read_bytes() == (root / "map2.csv").read_bytes()

    main(["simulate"] + TINY + theta + ["--study", "all", "--deltas", "0", "1", "--out", "run"])
    for name in OUTPUTS:
        assert (root / "run" / name).exists()
    main(["report", "--input", "run", "--max-trials", "6"])
    cdf = read_csv(root / "run" / "trials_cdf.csv")
    assert len(cdf) == 2 * 6
    lat = read_csv(root / "run" / "latency_report.csv")
    assert [float(r["delta_m"]) for r in lat] == [0.0, 1.0]
    assert "reduction" in capsys.readouterr().out


def test_simulate_is_byte_identical(root):
    base = ["simulate"] + TINY + ["--study", "all"]
    main(base + ["--out", "a"])
    main(base + ["--out", "b"])
    main(base + ["--out", "c", "--workers", "2"])
    for name in OUTPUTS:
        ref = (root / "a" / name).read_bytes()
        assert (root / "b" / name).read_bytes() == ref
        assert (root / "c" / name).read_bytes() == ref


def test_mismatched_theta_flags(root):
    with pytest.raises(SystemExit):
        main(["simulate"] + TINY + ["--theta-bs", "x.txt", "--out", "bad"])
