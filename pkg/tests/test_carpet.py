import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carpetlab import carpet as cp


def recursive_cells(dim, n):
    """Substitution construction: copies of the previous generation in every non-central block."""
    cells = {(0,) * dim}
    for k in range(n):
        step = 3**k
        new = set()
        for shift in itertools.product(range(3), repeat=dim):
            if all(s == 1 for s in shift):
                continue
            for c in cells:
                new.add(tuple(ci + si * step for ci, si in zip(c, shift)))
        cells = new
    return cells


@pytest.mark.parametrize("coords, n, expected", [((1, 1), 1, False), ((0, 0), 3, True), ((4, 4), 2, False),
                                                 ((3, 6), 2, True), ((3, 4), 2, False), ((13, 13), 3, False)])
def test_cell_in_carpet_examples(coords, n, expected):
    assert cp.cell_in_carpet(2, coords, n) is expected


def test_cell_in_carpet_rejects_out_of_range():
    with pytest.raises(ValueError):
        cp.cell_in_carpet(2, (9, 0), 2)
    with pytest.raises(ValueError):
        cp.cell_in_carpet(2, (-1, 0), 2)


@pytest.mark.parametrize("dim, n", [(2, 0), (2, 1), (2, 2), (2, 3), (3, 1), (3, 2)])
def test_matches_recursive_construction(dim, n):
    g = cp.build_precarpet(cp.CarpetSpec(dim, n))
    assert {tuple(int(x) for x in c) for c in g.coords} == recursive_cells(dim, n)


@pytest.mark.parametrize("dim, n, cells", [(2, 2, 64), (3, 1, 26), (2, 0, 1), (2, 3, 512)])
def test_cell_counts(dim, n, cells):
    spec = cp.CarpetSpec(dim, n)
    g = cp.build_precarpet(spec)
    assert g.num_vertices == cells == spec.cell_count
    assert g.is_connected()
    if n == 0:
        assert len(g.edges) == 0


def test_spec_constants():
    spec = cp.CarpetSpec(2, 4)
    assert spec.m_d == 8
    assert spec.d_f == pytest.approx(math.log(8) / math.log(3))
    assert cp.CarpetSpec(3, 0).d_f == pytest.approx(math.log(26) / math.log(3))
    with pytest.raises(ValueError):
        cp.CarpetSpec(1, 2)


def test_budget_exceeded():
    with pytest.raises(cp.BudgetExceeded):
        cp.build_precarpet(cp.CarpetSpec(2, 4), budget=100)


def test_adjacency_is_face_adjacency(carpet2_3):
    g = carpet2_3
    diff = np.abs(g.coords[g.edges[:, 0]] - g.coords[g.edges[:, 1]]).sum(axis=1)
    assert np.all(diff == 1)
    A = g.adjacency
    assert (A - A.T).nnz == 0
    assert g.coords.min() >= 0 and g.coords.max() <= 26
    assert tuple(g.coords[g.origin]) == (0, 0)


def test_corner_block_is_lower_generation(carpet2_4):
    small = cp.build_precarpet(cp.CarpetSpec(2, 2))
    inside = np.all(carpet2_4.coords < 9, axis=1)
    assert {tuple(c) for c in carpet2_4.coords[inside]} == {tuple(c) for c in small.coords}


def test_ball_examples(carpet2_3):
    g = carpet2_3
    verts, vol = cp.ball(g, g.origin, 0)
    assert verts.tolist() == [g.origin] and vol == 1.0
    _, vol1 = cp.ball(g, g.origin, 1)
    assert vol1 == 3.0


def test_sup_ball_around_corner_is_block(carpet2_4):
    g = carpet2_4
    for k in range(1, 4):
        _, vol = cp.ball(g, g.origin, 3**k - 1, metric="sup")
        assert vol == 8**k


def test_volume_profile_matches_ball(carpet2_3):
    g = carpet2_3
    radii = [0, 1, 2, 5, 7.5, 20]
    prof = cp.volume_profile(g, 17, radii)
    assert prof.tolist() == [cp.ball(g, 17, r)[1] for r in radii]


def test_metric_distortion_bounded(carpet2_4):
    worst = cp.max_metric_distortion(carpet2_4, [carpet2_4.origin, 100, 2000])
    assert 1.0 <= worst <= 4.0


def test_graph_distance_dominates_sup_distance(carpet2_3):
    g = carpet2_3
    d = g.distances_from(40)
    s = g.distances_from(40, metric="sup")
    assert np.all(d >= s)


def test_vd_scan_examples(carpet2_3):
    single = cp.Graph(num_vertices=1, edges=np.zeros((0, 2), dtype=np.int64), measure=np.ones(1))
    assert cp.vd_scan(single, 1, [1, 2]).c_d_estimate == 1.0
    assert cp.vd_scan(carpet2_3, 20, [100]).c_d_estimate == 1.0
    rep = cp.vd_scan(carpet2_3, 30, [1, 3, 9], seed=1)
    assert 1.0 < rep.c_d_estimate < 8.0 and rep.samples == 30


def test_vd_scan_stable_across_generations(carpet2_4):
    g5 = cp.build_precarpet(cp.CarpetSpec(2, 5))
    a = cp.vd_scan(carpet2_4, 100, [3, 9, 27], seed=0).c_d_estimate
    b = cp.vd_scan(g5, 100, [3, 9, 27], seed=0).c_d_estimate
    assert max(a, b) / min(a, b) < 1.5


def test_outer_shell(carpet2_3):
    shell = cp.outer_shell(carpet2_3)
    assert np.all(carpet2_3.coords[shell].max(axis=1) == 26)


def test_to_csv(tmp_path, carpet2_3):
    path = tmp_path / "g.csv"
    carpet2_3.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,x0,x1,measure,neighbors"
    assert len(lines) == 513


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 80), st.integers(0, 80))
def test_membership_agrees_with_digits(x, y):
    digits_central = any((x // 3**k) % 3 == 1 and (y // 3**k) % 3 == 1 for k in range(4))
    assert cp.cell_in_carpet(2, (x, y), 4) is (not digits_central)
