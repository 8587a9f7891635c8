import math

import numpy as np
import pytest

from ising_analytic import CoarseLattice, ModelParams, SpaceTimeGraph, TorusGeom, sample_updates
from ising_analytic import coarsegrain as cg
from ising_analytic.glauber import UpdateRealization
from ising_analytic.infoperc import coupling_time, upd
from ising_analytic.lattice import default_eps


# ---------------------------------------------------------------- block event

def _forced_sweeps(g, ages, skip=()):
    # mark ~0 sets a site to +1 whatever its neighbours do (beta <= 1, d = 1)
    return [(v, a + 1e-3 * v, 1e-4) for a in ages for v in range(g.n_sites) if v not in skip]


def test_block_event_vacuous_without_dependence():
    g = TorusGeom(1, 10)
    real = UpdateRealization.from_events(g, 3.5, _forced_sweeps(g, (0.5, 1.5, 2.5)))
    for p in (ModelParams(0.0), ModelParams(1.0)):
        assert cg.check_block_event(real, p, 0, 0.0, 2, eps=1.0)
        assert cg.check_block_event_global(real, p, 0, 0.0, 2, eps=1.0)


def test_block_event_adversarial_path():
    g = TorusGeom(1, 10)
    # 2 reads 3, 3 reads 4, 4 reads 5: the path leaves the region B_3(0)
    chain = [(2, 0.1, 0.5), (3, 0.2, 0.5), (4, 0.3, 0.5)]
    real = UpdateRealization.from_events(g, 3.5, chain + _forced_sweeps(g, (0.5, 1.5, 2.5)))
    p = ModelParams(1.0)
    assert not cg.check_block_event(real, p, 0, 0.0, 2, eps=1.0)
    assert not cg.check_block_event_global(real, p, 0, 0.0, 2, eps=1.0)


def test_block_event_never_coupled_is_bad():
    g = TorusGeom(1, 10)
    real = UpdateRealization.from_events(g, 3.5, [])
    assert not cg.check_block_event(real, ModelParams(0.3), 0, 0.0, 2, eps=1.0)


def test_block_event_needs_window():
    real = sample_updates(TorusGeom(1, 10), 1.0, seed=1)
    with pytest.raises(ValueError):
        cg.check_block_event(real, ModelParams(0.3), 0, 0.0, 2, eps=1.0)


def test_local_matches_global_evaluation():
    g = TorusGeom(1, 10)
    rng = np.random.default_rng(4)
    seen = set()
    for rep in range(150):
        p = ModelParams(float(rng.choice([0.0, 0.2, 0.6])), 0.1)
        eps = float(rng.choice([1.0, 3.0, 6.0]))
        real = sample_updates(g, 0.5 + 1.5 * 2 * eps, seed=5, replica=rep)
        local = cg.check_block_event(real, p, 0, 0.5, 2, eps=eps)
        assert local == cg.check_block_event_global(real, p, 0, 0.5, 2, eps=eps)
        seen.add(local)
    assert seen == {True, False}


def test_block_event_locality():
    # resampling events away from B_3L(w) x [t' - 3/2 eps L, t' + 3/2 eps L] never matters
    g = TorusGeom(1, 10)
    L, eps, t0 = 2, 3.0, 2.0
    near = set(g.box(0, 3 * L).tolist())
    lo, hi = t0 - 1.5 * eps * L, t0 + 1.5 * eps * L
    p = ModelParams(0.3, 0.1)
    flips = 0
    for rep in range(1000):
        a = sample_updates(g, hi + 1.0, seed=6, replica=rep)
        b = sample_updates(g, hi + 1.0, seed=7, replica=rep)
        keep = [(int(s), float(t), float(u)) for s, t, u in zip(a.sites, a.ages, a.marks)
                if int(s) in near and lo <= t <= hi]
        other = [(int(s), float(t), float(u)) for s, t, u in zip(b.sites, b.ages, b.marks)
                 if not (int(s) in near and lo <= t <= hi)]
        mixed = UpdateRealization.from_events(g, a.window, keep + other)
        flips += (cg.check_block_event(a, p, 0, t0, L, eps=eps)
                  != cg.check_block_event(mixed, p, 0, t0, L, eps=eps))
    assert flips == 0


# ---------------------------------------------------------------- painting

def test_paint_matches_single_box_checks():
    coarse = CoarseLattice(TorusGeom(1, 10), 2)
    p = ModelParams(0.2)
    for rep in range(5):
        cfg = cg.paint_boxes(p, coarse, 3, seed=2, replica=rep, eps=4.0)
        gam = cfg.graph
        real = sample_updates(coarse.geom, cg.paint_window(gam), 2, rep)
        for z in range(gam.n_vertices):
            b, k = gam.split(z)
            good = cg.check_block_event(real, p, coarse.center(b), k * gam.dt, 2, eps=4.0)
            assert cfg.open[z] == (not good)


def test_bad_fraction_decreases_with_L():
    fr = []
    for L in (1, 2, 3):
        c = CoarseLattice(TorusGeom(1, 105), L)
        fr.append(np.mean([cg.paint_boxes(ModelParams(0.0), c, 2, seed=1, replica=r,
                                          eps=4.0).bad_fraction for r in range(100)]))
    assert fr[0] > fr[1] > fr[2]


def test_default_eps_makes_every_box_bad_at_desk_scale():
    c = CoarseLattice(TorusGeom(2, 5), 2)
    cfg = cg.paint_boxes(ModelParams(0.0), c, 2, seed=1)
    assert cfg.graph.eps == default_eps(2)
    assert cfg.bad_fraction == 1.0


# ---------------------------------------------------------------- clusters

def _gamma():
    return SpaceTimeGraph(CoarseLattice(TorusGeom(1, 9), 1), 3)


def test_clusters_all_closed():
    gam = _gamma()
    cfg = cg.PercolationConfig(gam, np.zeros(gam.n_vertices, bool))
    cl = cg.clusters(cfg, [0, 7])
    assert cl.C == frozenset() and cl.boundary == {0, 7}
    assert cl.proj == {gam.split(0)[0], gam.split(7)[0]}


def test_clusters_all_open():
    gam = _gamma()
    cfg = cg.PercolationConfig(gam, np.ones(gam.n_vertices, bool))
    cl = cg.clusters(cfg, [0])
    assert cl.C == set(range(gam.n_vertices)) and cl.boundary == frozenset()
    assert cl.truncated


def test_clusters_match_bfs():
    gam = _gamma()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        cfg = cg.PercolationConfig(gam, rng.random(gam.n_vertices) < rng.uniform(0.2, 0.7))
        V = set(rng.choice(gam.n_vertices, 2).tolist())
        cl = cg.clusters(cfg, V)
        assert cl.C == cg.clusters_bfs(cfg, V)
        for z in cl.boundary:
            assert not cfg.open[z]
            assert z in V or any(y in cl.C for y in gam.neighbours(z))


def test_config_shape_checked():
    with pytest.raises(ValueError):
        cg.PercolationConfig(_gamma(), np.zeros(3, bool))


def test_tail_estimate_monotone():
    sizes = np.random.default_rng(1).geometric(0.3, size=5000)
    t = cg.tail_estimate(sizes, L=2)
    assert np.all(np.diff(t.survival) <= 0)
    assert t.ci[0] <= -math.log(0.7) <= t.ci[1]
    assert t.rate_per_ML == pytest.approx(t.rate / 2)


# ---------------------------------------------------------------- KUPD containment

def test_containment_counterexample():
    # a path drifts through neighbouring good boxes before the set couples
    coarse = CoarseLattice(TorusGeom(1, 10), 2)
    rep = cg.kupd_coarse_containment(ModelParams(0.0), coarse, [0], 1, seed=11, eps=10.0)
    assert rep.n_checked == 1 and rep.violations == 1
    res = coupling_time(coarse.geom, ModelParams(0.0), coarse.expand([0]), 0.0, 100.0, 11, 0)
    K = upd(res.realization(coarse.geom), res.tau, 0.0, coarse.expand([0]))
    assert {3, 4} <= K and not K <= set(coarse.geom.box(0, 5).tolist())


def test_containment_vacuous_at_default_eps():
    coarse = CoarseLattice(TorusGeom(1, 10), 2)
    rep = cg.kupd_coarse_containment(ModelParams(0.0), coarse, [0], 200, seed=11)
    assert rep.good_fraction == 0.0
    assert rep.n_checked == 0 and rep.n_truncated == 200


def test_coarse_kupd_at_least_V():
    coarse = CoarseLattice(TorusGeom(2, 6), 1)
    sizes = cg.kupd_coarse_sizes(ModelParams(0.2), coarse, [0, 1], 300, seed=4)
    assert np.all(sizes >= 2)
    rep = cg.kupd_coarse_containment(ModelParams(0.2), coarse, [0, 1], 50, seed=4, eps=4.0)
    assert rep.min_size_ok


def test_coarse_sizes_tail_positive():
    sizes = cg.kupd_coarse_sizes(ModelParams(0.2), CoarseLattice(TorusGeom(2, 15), 1), [0],
                                 500, seed=8)
    t = cg.tail_estimate(sizes[sizes >= 0])
    assert t.rate > 0 and t.ci[0] > 0


# ---------------------------------------------------------------- lattice animals

def _animals_brute(nb, root, K):
    level = {frozenset([root])}
    for _ in range(K - 1):
        level = {s | {y} for s in level for x in s for y in nb(x) if y not in s}
    return len(level)


def test_lattice_animals_examples():
    sq = cg.square_lattice(2)
    assert cg.count_lattice_animals(sq, (0, 0), 1) == 1
    assert cg.count_lattice_animals(sq, (0, 0), 2) == 4
    assert cg.count_lattice_animals(sq, (0, 0), 3) == 18


@pytest.mark.parametrize("d,K", [(2, 4), (2, 5), (2, 6), (3, 4), (1, 6)])
def test_lattice_animals_vs_brute_force(d, K):
    sq = cg.square_lattice(d)
    root = (0,) * d
    assert cg.count_lattice_animals(sq, root, K) == _animals_brute(sq, root, K)


def test_lattice_animals_on_gamma_and_tables():
    gam = _gamma()
    nb = gam.neighbours
    for K in (1, 2, 3, 4):
        assert cg.count_lattice_animals(gam, 5, K) == _animals_brute(nb, 5, K)
    table = TorusGeom(2, 3).nbr
    assert cg.count_lattice_animals(table, 0, 3) == 18


def test_lattice_animal_growth_is_exponential():
    sq = cg.square_lattice(2)
    counts = [cg.count_lattice_animals(sq, (0, 0), K) for K in range(1, 9)]
    assert counts == [1, 4, 18, 76, 315, 1296, 5320, 21800]
    c = max(math.log(a) / k for k, a in enumerate(counts, start=1))
    assert math.isfinite(c) and c < math.log(2 * 2 * math.e)


def test_lattice_animal_cap():
    with pytest.raises(ValueError):
        cg.count_lattice_animals(cg.square_lattice(2), (0, 0), cg.ANIMAL_CAP + 1)


# ---------------------------------------------------------------- Bernoulli percolation

def _ten_vertex_window():
    return SpaceTimeGraph(CoarseLattice(TorusGeom(1, 15), 1), 1)


def test_bernoulli_extremes():
    gam = _ten_vertex_window()
    assert gam.n_vertices == 10
    M = np.arange(1, 11)
    zero = cg.bernoulli_cluster_tail(0.0, gam, [0], M, 200, seed=1)
    one = cg.bernoulli_cluster_tail(1.0, gam, [0], M, 200, seed=1)
    assert np.all(zero.estimate == 0) and np.all(one.estimate == 1)
    assert np.allclose(zero.exact, 0) and np.allclose(one.exact, 1)


def test_bernoulli_ten_vertex_exact():
    gam = cg.TableGraph([[(i - 1) % 10, (i + 1) % 10, (i + 5) % 10] for i in range(10)])
    bt = cg.bernoulli_cluster_tail(0.3, gam, [0], [3], 40_000, seed=2)
    assert abs(bt.estimate[0] - bt.exact[0]) <= 3 * bt.se[0]
    # hand count for M = 1: the root is open
    assert cg.bernoulli_tail_exact(0.3, gam, [0], [1])[0] == pytest.approx(0.3)


def test_bernoulli_rejects_bad_p():
    with pytest.raises(ValueError):
        cg.bernoulli_cluster_tail(1.5, _gamma(), [0], [1], 10, seed=1)


# ---------------------------------------------------------------- domination

def test_domination_beta_zero_near_independent():
    rep = cg.domination_check(ModelParams(0.0), CoarseLattice(TorusGeom(1, 10), 2), 3, 300,
                              seed=3, eps=4.0)
    p = rep.p_uncond
    assert 0 < p < 0.5
    for k, c in rep.classes.items():
        if k not in rep.flagged:
            assert abs(c["p"] - p) <= 3.5 * math.sqrt(p * (1 - p) / c["count"])
    assert rep.passes


def test_domination_tail_comparison_beta_positive():
    # at desk scale nearly every box is bad once beta > 0, so p_hat is close to 1
    rep = cg.domination_check(ModelParams(0.2), CoarseLattice(TorusGeom(1, 10), 2), 2, 60,
                              seed=5, eps=4.0, min_class=20)
    assert rep.passes and rep.p_hat > 0.9


def test_domination_p_hat_decreases_with_L():
    p = [cg.domination_check(ModelParams(0.0), CoarseLattice(TorusGeom(1, N), L), 2, 150,
                             seed=9, eps=4.0, min_class=30).p_hat for L, N in ((2, 10), (3, 21))]
    assert p[0] > p[1]
