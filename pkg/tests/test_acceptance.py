"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting.
"""
from fractions import Fraction
import math
import time

import numpy as np
from scipy import stats as sps

from ising_analytic import CoarseLattice, ModelParams, TorusGeom
from ising_analytic import coarsegrain as cg
from ising_analytic import fkfield as fk
from ising_analytic import infoperc as ip
from ising_analytic import oracle
from ising_analytic import polymer as pm


def interval_model(n_sites, lam, max_len):
    sets = [tuple(range(a, a + k)) for k in range(1, max_len + 1)
            for a in range(n_sites - k + 1)]
    return pm.PolymerModel.from_sets(sets, [lam ** len(s) for s in sets], [len(s) for s in sets])


def test_1_polymer_identity(record):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(1, 7))
        phi = pm.random_block_encoding(n, rng) if i % 2 == 0 else pm.random_reach_encoding(n, rng)
        funcs = []
        for _ in range(int(rng.integers(1, 4))):
            k = int(rng.integers(1, min(3, n) + 1))
            funcs.append(pm.random_local_function(rng.choice(n, k, replace=False), rng))
        worst = max(worst, pm.verify_polymer_identity(phi, funcs).residual)
    dt = time.time() - t0
    ok = worst < 1e-10 and dt < 60
    record(1, "polymer identity", ok, f"max residual {worst:.2e} over 100 encodings, {dt:.1f}s")
    assert ok


def test_2_cluster_expansion_convergence(record):
    t0 = time.time()
    models = [interval_model(6, 0.05, 2), interval_model(4, 0.05, 4),
              interval_model(5, 0.05, 3), interval_model(12, 0.1, 1)]
    gaps = []
    for m in models:
        assert len(m) <= 12
        assert pm.kp_check(m).passes
        Z = pm.polymer_z_exact(m)
        gap = math.inf
        n_star = 1
        while gap >= 1e-8 and n_star < 9:
            n_star += 1
            gap = abs(np.exp(pm.log_z_truncated(m, n_star).value) - Z)
        gaps.append((len(m), n_star, gap))
    dt = time.time() - t0
    worst = max(g for _, _, g in gaps)
    ok = worst < 1e-8 and dt < 60
    detail = ", ".join(f"|G|={k} n*={n} gap={g:.1e}" for k, n, g in gaps)
    record(2, "cluster expansion", ok, f"{detail}; {dt:.1f}s")
    assert ok


def test_3_ursell_fixtures(record):
    u1 = pm.ursell([[0]])
    u2 = pm.ursell([[0, 0], [0, 0]])
    u3 = pm.ursell([[0] * 3 for _ in range(3)])
    ok = (u1 == 1 and u2 == Fraction(-1, 2) and u3 == Fraction(1, 3)
          and all(isinstance(u, Fraction) for u in (u1, u2, u3)))
    record(3, "Ursell fixtures", ok, f"U1={u1} U2={u2} U3={u3}")
    assert ok


def test_4_cftp_marginals(record):
    t0 = time.time()
    g = TorusGeom(2, 2)
    worst = 0.0
    censored = 0
    for beta in (0.2, 0.35):
        for h in (0.0, 0.2):
            p = ModelParams(beta, h)
            res = ip.cftp_batch(g, p, np.arange(16), 0.0, 1000.0, seed=7, replicas=100_000)
            censored += int((~res.coupled).sum())
            s = res.samples[res.coupled].astype(np.float64)
            ex = oracle.enumerate_ising(g, p, [[0, 1]])
            m = s[:, 0]
            c = s[:, 0] * s[:, 1]
            for x, target in ((m, ex.magnetization[0]), (c, ex.observables[0])):
                z = abs(x.mean() - target) / (x.std() / math.sqrt(len(x)))
                worst = max(worst, z)
    dt = time.time() - t0
    ok = worst <= 3.0 and censored == 0 and dt < 600
    record(4, "CFTP marginals", ok,
           f"max |z| {worst:.2f} (site magnetization and bond correlation, 4 parameter sets), "
           f"{censored} censored, {dt:.0f}s")
    assert ok


def test_5_beta_zero_closed_forms(record):
    g = TorusGeom(2, 2)
    p = ModelParams(0.0, 0.0)
    grid = np.array([0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0])
    fit = ip.estimate_sup_decay(p, g, grid, 20_000, seed=5)
    z = np.abs(fit.p_hat - np.exp(-grid)) / np.where(fit.se > 0, fit.se, np.inf)
    zero_ok = fit.p_hat[0] == 1.0
    res = ip.cftp_batch(g, p, [0], 0.0, 200.0, seed=3, replicas=20_000)
    ks = sps.kstest(res.tau, "expon")
    ok = bool(np.all(z <= 3.0) and zero_ok and ks.pvalue > 0.01)
    record(5, "beta=0 closed forms", ok,
           f"max |z| {z.max():.2f} over lags, KS p={ks.pvalue:.3f}")
    assert ok


def test_6_coarse_inclusion(record):
    # boxes are only ever good here with eps far above its proof value (see notes)
    coarse = CoarseLattice(TorusGeom(1, 10), 2)
    rep = cg.kupd_coarse_containment(ModelParams(0.0, 0.0), coarse, [0], 10_000, seed=11,
                                     eps=10.0)
    ok = (rep.n_checked >= rep.n_replicas // 2 and rep.violations == 0
          and rep.coarse_violations == 0 and rep.card_flags == 0)
    record(6, "coarse-graining inclusion", ok,
           f"{rep.n_checked} checked: {rep.violations} inclusion violations, "
           f"{rep.coarse_violations} coarse violations, {rep.card_flags} cardinality flags")
    assert ok


def test_7_kupd_tail(record):
    t0 = time.time()
    coarse = CoarseLattice(TorusGeom(2, 30), 1)
    sizes = cg.kupd_coarse_sizes(ModelParams(0.2, 0.0), coarse, [0], 3000, seed=5)
    sizes = sizes[sizes >= 0]
    full = float(np.mean(sizes == coarse.n_blocks))
    tail = cg.tail_estimate(sizes, L=1)
    dt = time.time() - t0
    ok = tail.rate > 0 and tail.ci[0] > 0 and full < 0.05 and dt < 1800
    record(7, "KUPD tail", ok,
           f"rate {tail.rate:.4f} CI ({tail.ci[0]:.4f}, {tail.ci[1]:.4f}) per block, "
           f"{100 * full:.1f}% span the torus, {dt:.0f}s")
    assert ok


def _two_triangles():
    # cut edge (2, 3) separates {0, 1, 2} from {3, 4, 5}
    return fk.FkGraph(6, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)])


def test_8_fk_colouring(record):
    worst = 0.0
    fe_ok = True
    for g in fk.fixture_graphs().values():
        for beta, h in ((0.3, 0.0), (0.5, 0.2), (0.8, -0.4)):
            p = ModelParams(beta, h)
            d = fk.enumerate_fk(g, p)
            worst = max(worst, float(np.abs(d.spin_marginal() - fk.ising_on_graph(g, p)).max()))
            if g.n_edges:
                fe_ok &= fk.finite_energy(g, p).holds
    dec = 0.0
    rng = np.random.default_rng(8)
    for g, V1 in ((_two_triangles(), [0, 1, 2]), (fk.fixture_graphs()["path4"], [0, 1])):
        for _ in range(5):
            a, b = rng.normal(size=2)
            f = lambda m, a=a: float(np.exp(a * m.sum()))
            gg = lambda m, b=b: float(1 + b * m.any())
            lhs, rhs = fk.decoupling_check(g, V1, ModelParams(0.6, 0.3), f, gg)
            dec = max(dec, abs(lhs - rhs))
    ok = worst < 1e-12 and fe_ok and dec < 1e-12
    record(8, "FK colouring", ok,
           f"max colouring error {worst:.1e}, finite energy {'ok' if fe_ok else 'FAILED'}, "
           f"decoupling error {dec:.1e}")
    assert ok


def test_9_magnetization_relaxation(record):
    t0 = time.time()
    tab = fk.relax_gap(range(1, 31), ModelParams(0.5, 0.2))
    order = bool(np.all(tab.minus <= tab.free + 1e-12) and np.all(tab.free <= tab.plus + 1e-12)
                 and np.all(tab.free >= 0))
    dt = time.time() - t0
    ok = tab.rate > 0 and tab.ci[0] > 0 and order and dt < 60
    record(9, "magnetization relaxation", ok,
           f"nu {tab.rate:.4f} CI ({tab.ci[0]:.4f}, {tab.ci[1]:.4f}), ordering "
           f"{'holds' if order else 'FAILS'}")
    assert ok


def test_10_pressure_series(record):
    t0 = time.time()
    g2 = TorusGeom(2, 2)
    p2 = ModelParams(0.3, 0.1)
    z2 = 0.05
    r2 = pm.pressure_perturbation(p2, z2, CoarseLattice(g2, 0), 4, 20_000, seed=3, max_size=2)
    ed = oracle.energy_density(g2, p2).value
    z_first = abs(r2.first_order / z2 - ed) / (r2.first_order_se / z2)

    g1 = TorusGeom(1, 6)
    p1 = ModelParams(0.3, 0.1)
    z1 = 0.1
    r1 = pm.pressure_perturbation(p1, z1, CoarseLattice(g1, 1), 6, 20_000, seed=3)
    dpsi = (oracle.transfer_pressure_1d(ModelParams(p1.beta + z1, p1.h)).value
            - oracle.transfer_pressure_1d(p1).value)
    # finite-ring offset from the same transfer matrix, added to the error budget
    ring = (oracle.ring_log_z(g1.n_sites, ModelParams(p1.beta + z1, p1.h)).value
            - oracle.ring_log_z(g1.n_sites, p1).value) / g1.n_sites
    comb = math.hypot(3 * r1.se, ring - dpsi)
    dt = time.time() - t0
    ok = z_first <= 3.0 and abs(r1.value - dpsi) <= comb and dt < 1200
    record(10, "pressure series", ok,
           f"first order |z| {z_first:.2f}; d=1 series {r1.value:.6f} +- {r1.se:.6f} vs "
           f"transfer {dpsi:.6f}, {dt:.0f}s")
    assert ok
