import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inferbeam.labels import (
    BeamSelectionMap, BeamTuple, LabelSpace, MapEntry, sector_add, sector_range, sector_within, sort_map,
)


@given(st.integers(1, 6), st.integers(1, 16), st.integers(1, 16), st.data())
def test_beam_id_roundtrip(n_bs, n_sb, n_su, data):
    sp = LabelSpace(n_bs, n_sb, n_su)
    b = data.draw(st.integers(0, sp.n_beams - 1))
    t = BeamTuple.from_beam_id(b, sp)
    assert sp.contains(t.bs_id, t.sec_bs_id, t.sec_ue_id)
    assert t.beam_id(sp) == b
    assert sp.n_beams == n_bs * n_sb * n_su


def test_sector_circle():
    assert sector_add(11, 1, 12) == 0
    assert sector_add(0, -1, 12) == 11
    assert sector_range(0, 1, 12) == [11, 0, 1]
    assert bool(sector_within(11, 0, 1, 12))
    assert not bool(sector_within(10, 0, 1, 12))
    assert np.array_equal(sector_within(np.array([0, 5, 6]), 0, 5, 12), [True, True, False])
    with pytest.raises(ValueError):
        sector_range(0, 2, 4)


def test_label_space_rejects_empty():
    with pytest.raises(ValueError):
        LabelSpace(0, 4, 4)


def test_map_order_and_ties():
    sp = LabelSpace(2, 2, 1)
    probs = np.array([[0.1, 0.4, 0.4, 0.1]])
    B = BeamSelectionMap(probs, sp)
    assert B.order(0).tolist() == [1, 2, 0, 3]
    assert B.rank_of(0, 2) == 2
    entries = B.sorted_entries(0)
    assert entries == sort_map(entries)
    assert entries[0] == MapEntry(0, 1, 0, 0.4)
    with pytest.raises(ValueError):
        BeamSelectionMap(np.ones((2, 3)), sp)
