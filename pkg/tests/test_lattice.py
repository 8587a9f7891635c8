import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ising_analytic import BoxGeom, CoarseLattice, TorusGeom
from ising_analytic.lattice import (coarsen, gamma_graph, is_connected, make_torus,
                                    default_eps)


def test_make_torus_sizes():
    g = make_torus(1, 2)
    assert g.n_sites == 4 and g.nbr.shape == (4, 2)
    g = make_torus(2, 2)
    assert g.n_sites == 16 and g.nbr.shape == (16, 4)


def test_torus_3d_matches_hand_built_cube():
    g = make_torus(3, 1)
    assert g.n_sites == 8
    # side 2: each coordinate flip is reached twice (once per direction)
    for i in range(8):
        c = np.array(np.unravel_index(i, (2, 2, 2)))
        expected = []
        for k in range(3):
            e = c.copy()
            e[k] ^= 1
            expected += [int(np.ravel_multi_index(e, (2, 2, 2)))] * 2
        assert sorted(g.nbr[i].tolist()) == sorted(expected)


@pytest.mark.parametrize("d,N", [(0, 2), (2, 0)])
def test_make_torus_rejects(d, N):
    with pytest.raises(ValueError):
        make_torus(d, N)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 3), N=st.integers(1, 3), data=st.data())
def test_torus_symmetric_and_translation_invariant(d, N, data):
    g = TorusGeom(d, N)
    nb = g.nbr
    assert nb.shape == (g.n_sites, 2 * d)
    for i in range(g.n_sites):
        for j in nb[i]:
            assert np.sum(nb[j] == i) == np.sum(nb[i] == j)
    shift = data.draw(st.lists(st.integers(-5, 5), min_size=d, max_size=d))
    perm = g.translate(np.arange(g.n_sites), shift)
    assert sorted(perm.tolist()) == list(range(g.n_sites))
    for i in range(g.n_sites):
        assert sorted(perm[nb[i]].tolist()) == sorted(nb[perm[i]].tolist())


def test_coords_displayed_in_half_open_cube():
    g = TorusGeom(2, 3)
    c = g.coords(np.arange(g.n_sites))
    assert c.min() == -2 and c.max() == 3
    assert np.array_equal(g.index(c), np.arange(g.n_sites))


def test_box_boundaries():
    b = BoxGeom(2, 2, "plus")
    inside = {tuple(x) for x in b.coords(np.arange(b.n_sites))}
    assert b.interior_boundary <= set(range(b.n_sites))
    assert not (b.exterior_boundary & inside)
    for i, c in b.edge_boundary:
        assert tuple(b.coords(i)) in inside and c not in inside
        assert np.abs(np.array(c) - b.coords(i)).sum() == 1
    assert len(b.edge_boundary) == 4 * 5
    assert b.field(0.5, 0.1)[b.origin] == pytest.approx(0.1)
    corner = b.index([2, 2])
    assert b.field(0.5, 0.1)[corner] == pytest.approx(0.1 + 0.5 * 2)


def test_box_rejects_bad_bc():
    with pytest.raises(ValueError):
        BoxGeom(1, 2, "periodic")


@pytest.mark.parametrize("d,N,L", [(1, 3, 0), (1, 3, 1), (2, 3, 1), (2, 5, 2), (3, 3, 1)])
def test_blocks_partition_torus(d, N, L):
    c = CoarseLattice(TorusGeom(d, N), L)
    m = c.members
    assert m.shape == (c.n_blocks, (2 * L + 1) ** d)
    assert sorted(m.ravel().tolist()) == list(range(c.geom.n_sites))
    for b in range(c.n_blocks):
        assert set(c.box_around(b, L).tolist()) == set(m[b].tolist())


def test_coarse_rejects_divisibility():
    with pytest.raises(ValueError):
        CoarseLattice(TorusGeom(1, 4), 1)


def test_coarsen_examples():
    c = CoarseLattice(TorusGeom(1, 6), 1)
    assert coarsen(c, []) == frozenset()
    for b in range(c.n_blocks):
        assert coarsen(c, c.block_sites(b)) == {b}
    # sites 1 and 2 lie in blocks centred at 0 and 3
    assert coarsen(c, [1, 2]) == {c.block_of[1], c.block_of[2]}
    assert c.block_of[1] != c.block_of[2]


@settings(max_examples=50, deadline=None)
@given(st.sets(st.integers(0, 35)), st.sets(st.integers(0, 35)))
def test_coarsen_monotone(a, b):
    c = CoarseLattice(TorusGeom(2, 3), 1)
    assert coarsen(c, a) <= coarsen(c, a | b)
    assert set(c.expand(coarsen(c, a)).tolist()) >= a


def _random_animal(g, rng, size):
    s = {int(rng.integers(g.n_sites))}
    while len(s) < size:
        x = list(s)[rng.integers(len(s))]
        s.add(int(g.nbr[x, rng.integers(g.nbr.shape[1])]))
    return s


def test_coarsen_preserves_connectivity():
    g = TorusGeom(2, 6)
    c = CoarseLattice(g, 1)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        A = _random_animal(g, rng, int(rng.integers(1, 12)))
        assert is_connected(g.nbr, A)
        assert is_connected(g.nbr, c.expand(coarsen(c, A)))


def test_gamma_degrees():
    gam = gamma_graph(CoarseLattice(TorusGeom(1, 9), 1), 3)
    assert gam.n_blocks == 6
    assert gam.degree(gam.vertex(0, 1)) == 8
    assert gam.degree(gam.vertex(0, 0)) == 8 - 3
    assert gam.max_degree_bound == 8


def test_gamma_far_blocks_not_adjacent():
    gam = gamma_graph(CoarseLattice(TorusGeom(1, 15), 1), 2)
    # centres 0 and 6 are two block widths apart
    assert gam.vertex(2, 0) not in gam.neighbours(gam.vertex(0, 0))
    assert gam.vertex(1, 0) in gam.neighbours(gam.vertex(0, 0))


@pytest.mark.parametrize("d,K,H", [(1, 4, 3), (1, 6, 2), (2, 2, 2), (2, 4, 3)])
def test_gamma_is_star_adjacency(d, K, H):
    # side 2N = 3K, so K coarse sites per axis
    coarse = CoarseLattice(TorusGeom(d, 3 * K // 2), 1)
    gam = gamma_graph(coarse, H)
    for z in range(gam.n_vertices):
        b, k = gam.split(z)
        jb = coarse.block_coords(b)
        want = set()
        for off in itertools.product((-1, 0, 1), repeat=d + 1):
            if not any(off) or not 0 <= k + off[-1] < H:
                continue
            b2 = int(coarse.block_index(jb + np.array(off[:-1])))
            want.add(gam.vertex(b2, k + off[-1]))
        want.discard(z)
        assert set(gam.neighbours(z)) == want
        assert gam.degree(z) <= gam.max_degree_bound


def test_gamma_needs_positive_horizon():
    with pytest.raises(ValueError):
        gamma_graph(CoarseLattice(TorusGeom(1, 3), 1), 0)


def test_default_eps_value():
    assert default_eps(2) == pytest.approx(np.exp(-2) / 4)
