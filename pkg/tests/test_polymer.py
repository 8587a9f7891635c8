from fractions import Fraction
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ising_analytic import CoarseLattice, ModelParams, TorusGeom
from ising_analytic import oracle
from ising_analytic import polymer as pm


def _sym(n, draw_entry):
    D = [[0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            D[i][j] = D[j][i] = draw_entry()
    return D


# ---------------------------------------------------------------- Ursell functions

def test_ursell_examples():
    assert pm.ursell([[0]]) == 1
    assert pm.ursell([[0, 0], [0, 0]]) == Fraction(-1, 2)
    assert pm.ursell([[0] * 3 for _ in range(3)]) == Fraction(1, 3)
    assert pm.ursell([[0, 1], [1, 0]]) == 0


def test_ursell_cap():
    with pytest.raises(ValueError):
        pm.ursell([[0] * 11 for _ in range(11)])


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 2**32))
def test_ursell_vs_edge_subsets(n, seed):
    rng = np.random.default_rng(seed)
    D = _sym(n, lambda: int(rng.integers(0, 2)))
    assert pm.ursell(D) == pm.ursell_brute(D)
    F = _sym(n, lambda: float(rng.uniform(-1, 1)))
    assert float(pm.ursell(F)) == pytest.approx(float(pm.ursell_brute(F)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 2**32))
def test_all_graph_sum_is_pair_product(n, seed):
    rng = np.random.default_rng(seed)
    D = _sym(n, lambda: float(rng.uniform(-1, 1)))
    prod = math.prod(D[i][j] for i in range(n) for j in range(i + 1, n))
    assert pm.all_graph_sum(D) == pytest.approx(prod, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(k=st.integers(1, 3), seed=st.integers(0, 2**32), exact=st.booleans())
def test_multiset_recursion_matches_expanded_sum(k, seed, exact):
    rng = np.random.default_rng(seed)
    if exact:
        D = _sym(k, lambda: int(rng.integers(0, 2)))
    else:
        D = _sym(k, lambda: float(rng.uniform(-1, 1)))
    counts = [int(c) for c in rng.integers(1, 4, size=k)]
    full = [i for i in range(k) for _ in range(counts[i])]
    E = [[D[a][b] for b in full] for a in full]
    got = pm.multiset_connected_sum(np.array(D, dtype=object if exact else float), counts)
    want = pm.connected_sum(E)
    if exact:
        assert got == want
    else:
        assert float(got) == pytest.approx(float(want), abs=1e-10)


# ---------------------------------------------------------------- partition function and KP

def test_polymer_z_examples():
    assert pm.polymer_z_exact(pm.PolymerModel.from_sets([], [])) == 1
    assert pm.polymer_z_exact(pm.PolymerModel.from_sets([{0}], [0.3])) == pytest.approx(1.3)
    m = pm.PolymerModel.from_sets([{0, 1}, {1, 2}], [0.2, 0.5])
    assert pm.polymer_z_exact(m) == pytest.approx(1.7)
    m = pm.PolymerModel.from_sets([{0}, {2}], [0.2, 0.5])
    assert pm.polymer_z_exact(m) == pytest.approx(1.2 * 1.5)


def test_polymer_z_matches_hard_core_recursion():
    rng = np.random.default_rng(3)
    sets = [frozenset(c) for k in (1, 2) for c in itertools.combinations(range(5), k)]
    w = rng.normal(size=len(sets)) * 0.3
    m = pm.PolymerModel.from_sets(sets, w)
    table = np.zeros(2 ** 5)
    for s, x in zip(sets, w):
        table[sum(1 << v for v in s)] = x
    assert pm.polymer_z_exact(m) == pytest.approx(pm.hard_core_z(table, 5), abs=1e-12)


def test_model_validation_and_json():
    with pytest.raises(ValueError):
        pm.PolymerModel(["a", "b"], np.array([0.1, 0.2]), np.array([[0, 1], [0, 0]]))
    m = pm.PolymerModel.from_sets([{0, 1}, {2}], [0.1 + 0.2j, 0.3])
    back = pm.PolymerModel.from_json(m.to_json())
    assert np.allclose(back.weights, m.weights)
    assert np.array_equal(back.delta, m.delta)


def _interval_model(n, lam, max_len):
    sets = [tuple(range(a, a + k)) for k in range(1, max_len + 1) for a in range(n - k + 1)]
    return pm.PolymerModel.from_sets(sets, [lam ** len(s) for s in sets], [len(s) for s in sets])


def _kp_margin_by_hand(n, lam, max_len):
    iv = [(a, a + k) for k in range(1, max_len + 1) for a in range(n - k + 1)]
    margins = []
    for a2, b2 in iv:
        tot = sum(math.exp(b - a) * lam ** (b - a) for a, b in iv if a < b2 and a2 < b)
        margins.append((b2 - a2) - tot)
    return min(margins)


def test_kp_trivial_cases():
    m = _interval_model(5, 0.0, 3)
    r = pm.kp_check(m)
    assert r.passes and np.allclose(r.margins, m.g)
    far = pm.PolymerModel.from_sets([{0}, {2}, {4}], [1e-3] * 3)
    far.delta[:] = 1.0
    assert pm.kp_check(far).passes


def test_kp_interval_threshold():
    lams = np.linspace(0.01, 0.3, 30)
    verdicts = [pm.kp_check(_interval_model(8, lam, 3)).passes for lam in lams]
    by_hand = [_kp_margin_by_hand(8, lam, 3) >= 0 for lam in lams]
    assert verdicts == by_hand
    assert verdicts[0] and not verdicts[-1]
    assert sorted(verdicts, reverse=True) == verdicts
    for lam in lams[::7]:
        assert pm.kp_check(_interval_model(8, lam, 3)).slack == pytest.approx(
            _kp_margin_by_hand(8, lam, 3))


# ---------------------------------------------------------------- cluster expansion

def test_truncated_single_polymer_is_log_series():
    w = 0.2
    m = pm.PolymerModel.from_sets([{0}], [w])
    r = pm.log_z_truncated(m, 3)
    assert r.value == pytest.approx(w - w ** 2 / 2 + w ** 3 / 3)
    assert r.value == pytest.approx(pm.log1p_series(w, 3))
    assert abs(np.exp(pm.log_z_truncated(m, 30).value) - pm.polymer_z_exact(m)) < 1e-14


def test_truncated_zero_weights():
    assert pm.log_z_truncated(_interval_model(5, 0.0, 2), 4).value == 0


def test_truncated_converges_to_exact():
    m = _interval_model(6, 0.05, 2)
    Z = pm.polymer_z_exact(m)
    gaps = [abs(np.exp(pm.log_z_truncated(m, k).value) - Z) for k in range(1, 7)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-8


def test_truncated_flags_non_certified():
    r = pm.log_z_truncated(_interval_model(5, 0.5, 2), 2)
    assert not r.certified


def test_cluster_series_exact_coefficients():
    m = _interval_model(3, 0.1, 2)
    ser = pm.cluster_series(m, 3)
    assert all(isinstance(c, Fraction) for _, _, c in ser.terms)
    w = m.weights
    eps = 1e-6
    g = ser.grad(w)
    for i in range(len(w)):
        wp, wm = w.copy(), w.copy()
        wp[i] += eps
        wm[i] -= eps
        assert g[i] == pytest.approx((ser.value(wp) - ser.value(wm)) / (2 * eps), abs=1e-7)


# ---------------------------------------------------------------- synthetic dependency encodings

def test_identity_trivial_functions():
    rng = np.random.default_rng(0)
    phi = pm.random_block_encoding(4, rng)
    ones = pm.LocalFunction((0, 1), {k: 1.0 for k in itertools.product((-1, 1), repeat=2)})
    r = pm.verify_polymer_identity(phi, [ones])
    assert r.lhs == pytest.approx(1) and r.residual < 1e-15


def test_identity_product_measure():
    rng = np.random.default_rng(1)
    phi = pm.DependencyEncoding.independent_sites([0.3, 0.6, 0.5, 0.9])
    funcs = [pm.random_local_function([v], rng) for v in range(4)]
    funcs.append(pm.random_local_function([0, 2], rng))
    assert pm.verify_polymer_identity(phi, funcs).residual < 1e-12


def test_identity_block_encodings():
    rng = np.random.default_rng(2)
    for _ in range(20):
        phi = pm.random_block_encoding(6, rng)
        funcs = [pm.random_local_function(rng.choice(6, int(rng.integers(1, 4)), replace=False),
                                          rng) for _ in range(3)]
        assert pm.verify_polymer_identity(phi, funcs).residual < 1e-10


def test_weights_exact_vs_direct():
    rng = np.random.default_rng(5)
    for make in (pm.random_block_encoding, pm.random_reach_encoding):
        phi = make(4, rng)
        funcs = [pm.random_local_function(rng.choice(4, 2, replace=False), rng) for _ in range(2)]
        assert np.allclose(pm.polymer_weights_exact(phi, funcs),
                           pm.polymer_weights_direct(phi, funcs), atol=1e-14)


def test_encoding_rejects_broken_factorization():
    # X_v = {v} but the two spins are perfectly correlated
    with pytest.raises(ValueError):
        pm.DependencyEncoding(2, [[1, 1], [-1, -1]], [[1, 2], [1, 2]], [0.5, 0.5])
    with pytest.raises(ValueError):
        pm.DependencyEncoding(2, [[1, 1]], [[2, 2]], [1.0])


# ---------------------------------------------------------------- block energy split

@pytest.mark.parametrize("d,N,L", [(1, 6, 1), (2, 3, 1), (2, 3, 0), (2, 5, 2)])
def test_energy_decomposition(d, N, L):
    coarse = CoarseLattice(TorusGeom(d, N), L)
    dec = pm.BlockEnergyDecomposition(coarse)
    s = np.random.default_rng(0).choice([-1, 1], size=(10_000, coarse.geom.n_sites))
    vals = dec.values(s)
    assert np.array_equal(vals.sum(axis=1), dec.total(s))
    assert np.abs(vals).max() <= dec.bound


def test_energy_decomposition_rejects_side_two():
    with pytest.raises(ValueError):
        pm.BlockEnergyDecomposition(CoarseLattice(TorusGeom(2, 1), 0))


# ---------------------------------------------------------------- Monte Carlo weights

@pytest.fixture(scope="module")
def ring_samples():
    coarse = CoarseLattice(TorusGeom(1, 6), 1)
    return coarse, pm.sample_phi_L(ModelParams(0.3, 0.1), coarse, 20_000, seed=4)


def test_phi_samples_contain_own_block(ring_samples):
    coarse, ph = ring_samples
    assert ph.n_censored == 0
    for b in range(coarse.n_blocks):
        assert np.all(ph.X[:, b] >> b & 1)


def test_weight_zero_at_z_zero(ring_samples):
    coarse, ph = ring_samples
    w = pm.estimate_weight((0,), ModelParams(0.3, 0.1), 0.0, coarse, 0, 0, samples=ph)
    assert w.mean == 0 and w.se == 0


def test_weight_zero_for_disconnected_set(ring_samples):
    coarse, ph = ring_samples
    w = pm.estimate_weight((0, 2), ModelParams(0.3, 0.1), 0.1, coarse, 0, 0, samples=ph)
    assert w.mean == 0


def test_small_polymers_have_zero_weight(ring_samples):
    # KUPD of a block always reads across its faces, so X_v covers both neighbours
    coarse, ph = ring_samples
    for C in ((0,), (0, 1)):
        assert pm.estimate_weight(C, ModelParams(0.3, 0.1), 0.05, coarse, 0, 0,
                                  samples=ph).mean == 0


def test_weights_decay_with_size():
    coarse = CoarseLattice(TorusGeom(1, 12), 1)
    p = ModelParams(0.2, 0.1)
    ph = pm.sample_phi_L(p, coarse, 20_000, seed=4)
    w3, w4 = (pm.estimate_weight(C, p, 0.05, coarse, 0, 0, samples=ph)
              for C in ((0, 1, 2), (0, 1, 2, 3)))
    assert abs(w3.mean) - abs(w4.mean) > 2 * math.hypot(w3.se, w4.se)


def test_pressure_zero_shift(ring_samples):
    coarse, ph = ring_samples
    r = pm.pressure_perturbation(ModelParams(0.3, 0.1), 0.0, coarse, 4, 0, 0, samples=ph)
    assert r.value == 0 and r.first_order == 0


def test_pressure_first_order_matches_oracle(ring_samples):
    coarse, ph = ring_samples
    p = ModelParams(0.3, 0.1)
    r = pm.pressure_perturbation(p, 0.05, coarse, 6, 0, 0, samples=ph)
    ed = oracle.energy_density(coarse.geom, p).value
    assert abs(r.energy_density - ed) <= 3 * r.energy_density_se
    assert r.first_order == pytest.approx(0.05 * r.energy_density)


def test_correlation_empty_and_zero_shift(ring_samples):
    coarse, ph = ring_samples
    p = ModelParams(0.3, 0.1)
    assert pm.correlation_perturbation([], p, 0.0, coarse, 4, 0, 0, samples=ph).value == 1.0
    r = pm.correlation_perturbation([0], p, 0.0, coarse, 4, 0, 0, samples=ph)
    exact = oracle.enumerate_ising(coarse.geom, p).magnetization[0]
    assert r.cancel_ok
    assert abs(r.direct - exact) <= 3 * r.direct_se
    assert abs(r.value - exact) <= 3 * math.hypot(r.se, r.direct_se)


def test_correlation_small_field_shift(ring_samples):
    coarse, ph = ring_samples
    p = ModelParams(0.3, 0.1)
    r = pm.correlation_perturbation([0, 1], p, 0.05, coarse, 4, 0, 0, samples=ph)
    exact = oracle.exact_expectation(coarse.geom, ModelParams(0.3, 0.15), [0, 1]).value
    assert r.cancel_ok
    assert abs(r.value - exact) <= 3 * math.hypot(r.se, r.direct_se)
