import numpy as np
import pytest

from carpetlab import carpet as cp
from carpetlab import estimates as es
from carpetlab import form as fm
from carpetlab.scaling import ScalingFunction

SF = ScalingFunction(2.0, 2.1)


@pytest.fixture(scope="module")
def lattice():
    return fm.DirichletForm(cp.build_lattice(2, 243))


def test_loglog_fit_exact_power():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    rep = es.loglog_fit(x, 3 * x**1.7)
    assert rep.exponent == pytest.approx(1.7) and rep.r_squared == pytest.approx(1.0)
    assert np.allclose(rep.residuals(), 0, atol=1e-12)
    with pytest.raises(ValueError):
        es.loglog_fit([2.0, 2.0], [1.0, 2.0])


def test_lattice_walk_dimension_is_two(lattice):
    rep = es.fit_walk_dimension(lattice, lattice.graph.origin, [8, 26, 80])
    assert rep.exponent == pytest.approx(2.0, abs=0.15)


def test_walk_dimension_rejects_bad_radii(form2_4):
    x0 = form2_4.graph.origin
    with pytest.raises(ValueError):
        es.fit_walk_dimension(form2_4, x0, [8, 8, 8])
    with pytest.raises(ValueError):
        es.fit_walk_dimension(form2_4, x0, [2, 8])
    with pytest.raises(ValueError):
        es.fit_walk_dimension(form2_4, x0, [2, 8, 100])


def test_carpet_walk_dimension_above_two(form2_4):
    rep = es.fit_walk_dimension(form2_4, form2_4.graph.origin, [2, 8, 26])
    assert 2.0 < rep.exponent < 1 + np.log(8) / np.log(3)


def test_reference_estimator_on_lattice_is_exactly_two(lattice):
    rep = es.fit_walk_dimension(lattice, lattice.graph.origin, [8, 26, 80], reference=lattice)
    assert rep.exponent == pytest.approx(2.0, abs=1e-12)


def test_lattice_ondiag_slope(lattice):
    rep = es.ondiag_fit(lattice, lattice.graph.origin, np.logspace(1, 3, 8))
    assert rep.exponent == pytest.approx(-1.0, abs=0.15)


def test_ondiag_needs_window(form2_4):
    with pytest.raises(ValueError):
        es.ondiag_fit(form2_4, 0, [1e7, 1e8, 1e9])
    t, _ = es.saturation_window(form2_4, 0, [1.0, 1e8])
    assert t.tolist() == [1.0]


def test_scaling_covariance(form2_4):
    """Doubling conductances and halving time leaves every fitted exponent unchanged."""
    fast = form2_4.with_conductances(2.0 * form2_4.c)
    x0 = form2_4.graph.origin
    a = es.fit_walk_dimension(form2_4, x0, [2, 8, 26]).exponent
    b = es.fit_walk_dimension(fast, x0, [2, 8, 26]).exponent
    assert a == pytest.approx(b, abs=1e-10)
    times = np.logspace(1, 3, 6)
    s1 = es.ondiag_fit(form2_4, x0, times).exponent
    s2 = es.ondiag_fit(fast, x0, times / 2.0).exponent
    assert s1 == pytest.approx(s2, abs=1e-8)


def test_dg_small_time_overlap_vanishes(form2_4):
    g = form2_4.graph
    pairs = es.dg_pairs(g, g.origin, [16], [1.0], SF, per_radius=1)
    x1, x2, _ = pairs[0]
    rep = es.dg_check(form2_4, SF, [(x1, x2, t) for t in (1e-2, 1.0, 10.0)])
    overlaps = [row[2] for row in rep.pairs]
    assert overlaps[0] < 1e-12 and overlaps[0] < overlaps[1] < overlaps[2]


def test_dg_regression(form2_4):
    g = form2_4.graph
    pairs = es.dg_pairs(g, g.origin, [8, 12, 16], np.linspace(1, 10, 4), SF, per_radius=4)
    rep = es.dg_check(form2_4, SF, pairs)
    assert len(rep.points) == 12
    assert rep.slope > 0


def test_dg_rejects_overlapping_balls(form2_4):
    with pytest.raises(ValueError):
        es.dg_check(form2_4, SF, [(0, 0, 1.0)])


def test_time_for_phi_inverts_phi():
    from carpetlab.scaling import phi
    t = es.time_for_phi(SF, 20.0, 3.0)
    assert phi(SF, 20.0, t) == pytest.approx(3.0, rel=1e-9)


def test_uhk_envelope(carpet2_3):
    df = fm.DirichletForm(carpet2_3)
    x0 = carpet2_3.origin
    sample = [(y, t) for y in (0, 30, 200, 400) for t in (2.0, 20.0, 200.0)]
    rep = es.uhk_check(df, SF, x0, sample, grid_points=9)
    assert rep.dominated and rep.max_violation <= 0
    assert es.uhk_violations(df, SF, x0, sample, rep.c1, rep.c2) == 0.0


def test_escape_probability(form2_4):
    x0 = form2_4.graph.vertex_at((40, 0))
    assert es.escape_probability(form2_4, x0, 9, 0.0) == 0.0
    probs = [es.escape_probability(form2_4, x0, 9, s) for s in (1.0, 10.0, 100.0, 1000.0)]
    assert all(a <= b + 1e-12 for a, b in zip(probs, probs[1:]))
    assert 0.0 <= probs[0] < 1e-3 and probs[-1] > 0.9


def test_escape_prob_check(form2_4):
    x0 = form2_4.graph.vertex_at((40, 0))
    rep = es.escape_prob_check(form2_4, x0, 9, [0.01, 0.05, 0.1, 0.3, 1.0], SF)
    assert rep.eps_admissible is not None
    for e, p in zip(rep.eps_grid, rep.escape_probs):
        if e <= rep.eps_admissible:
            assert p <= e
    with pytest.raises(ValueError):
        es.escape_prob_check(form2_4, x0, 9, [0.0], SF)
