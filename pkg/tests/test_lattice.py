import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revkam.lattice import (LatticeConfig, PhasePoint, momentum, momentum_vector, site_norm,
                            weighted_seq_norm)

sites2 = st.tuples(st.integers(-6, 6), st.integers(-6, 6))
seqs = st.dictionaries(sites2, st.complex_numbers(max_magnitude=10, allow_nan=False,
                                                  allow_infinity=False), max_size=6)


def test_site_norm_examples():
    assert site_norm((0, 0)) == 0
    assert site_norm((3, 4)) == 5
    assert site_norm((1, 1)) == pytest.approx(math.sqrt(2), abs=1e-15)


@given(sites2)
def test_site_norm_symmetric(j):
    assert site_norm(j) == site_norm(tuple(-x for x in j))


def test_weighted_seq_norm_examples():
    assert weighted_seq_norm({}, 0.5) == 0
    assert weighted_seq_norm({(1, 0): 1}, 0.0) == 1
    assert weighted_seq_norm({(3, 4): 2}, 0.1) == pytest.approx(2 * math.exp(0.5), rel=1e-14)
    assert weighted_seq_norm({(3, 4): 2}, 0.1) == pytest.approx(3.2974, abs=1e-4)


def test_weighted_seq_norm_rejects_negative_rho():
    with pytest.raises(ValueError):
        weighted_seq_norm({(0, 0): 1}, -0.1)


@given(seqs, seqs, st.floats(0, 1), st.complex_numbers(max_magnitude=5, allow_nan=False,
                                                       allow_infinity=False))
def test_weighted_seq_norm_homogeneous_subadditive(a, b, rho, lam):
    na, nb = weighted_seq_norm(a, rho), weighted_seq_norm(b, rho)
    scaled = {j: lam * v for j, v in a.items()}
    assert weighted_seq_norm(scaled, rho) == pytest.approx(abs(lam) * na, rel=1e-12, abs=1e-12)
    total = {j: a.get(j, 0) + b.get(j, 0) for j in set(a) | set(b)}
    assert weighted_seq_norm(total, rho) <= na + nb + 1e-9 * (1 + na + nb)


def test_config_defaults_and_index_classes():
    cfg = LatticeConfig()
    assert (cfg.d, cfg.radius, cfg.n, cfg.m) == (2, 5, 2, 2)
    assert len(cfg.sites) == 121
    s1, s2, sh = set(cfg.normal1), set(cfg.normal2), set(cfg.shared)
    assert sh == s1 & s2
    assert s1 - s2 == {(0, 1)} and s2 - s1 == {(1, 0)}


@pytest.mark.parametrize("kwargs", [
    dict(tangential1=((1, 0),), tangential2=((0, 0),)),
    dict(tangential1=((0, 0), (0, 0)), tangential2=((0, 0),)),
    dict(tangential1=((0, 0), (9, 0)), tangential2=((0, 0),)),
    dict(tangential1=((0, 0, 0),), tangential2=((0, 0),)),
])
def test_config_invariants_rejected(kwargs):
    with pytest.raises(ValueError):
        LatticeConfig(**kwargs)


def test_config_roundtrip():
    cfg = LatticeConfig(d=2, radius=3, tangential1=((0, 0), (1, 1)), tangential2=((0, 0),))
    assert LatticeConfig.from_dict(cfg.to_dict()) == cfg


def test_momentum_examples():
    cfg = LatticeConfig()
    empty = cfg.monomial()
    for axis in range(cfg.d):
        assert momentum(cfg, empty, cfg.comp("I", 0), axis) == 0
    # z_(0,1) z_(1,1) on component z_(1,2): zero-sum sites
    mi = cfg.monomial(z={(0, 1): 1, (1, 1): 1})
    for axis in range(cfg.d):
        assert momentum(cfg, mi, cfg.comp("z", (1, 2)), axis) == 0
    # z_(0,1) on component z_(0,2): violation on the second axis
    mi = cfg.monomial(z={(0, 1): 1})
    assert momentum(cfg, mi, cfg.comp("z", (0, 2)), 0) == 0
    assert momentum(cfg, mi, cfg.comp("z", (0, 2)), 1) == -1
    with pytest.raises(IndexError):
        momentum(cfg, mi, 0, 2)


def test_momentum_counts_fourier_modes_and_conjugates():
    cfg = LatticeConfig()
    # e^{i theta_2} carries site (1, 0); zbar_(2,0) carries -(2, 0)
    mi = cfg.monomial(k=(0, 1, 0, 0), zbar={(2, 0): 1})
    assert list(momentum_vector(cfg, mi, cfg.comp("theta", 0))) == [-1, 0]
    # a conjugate component wbar_j subtracts -j
    assert list(momentum_vector(cfg, mi, cfg.comp("wbar", (1, 0)))) == [0, 0]
    assert list(momentum_vector(cfg, mi, cfg.comp("wbar", (-1, 0)))) == [-2, 0]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.sampled_from(["z", "zbar", "w", "wbar"]),
                          st.sampled_from([(0, 2), (-1, 1), (2, -3), (1, 1)]),
                          st.integers(1, 2)), min_size=1, max_size=4),
       st.lists(st.tuples(st.sampled_from(["z", "zbar", "w", "wbar"]),
                          st.sampled_from([(0, 2), (-1, 1), (2, -3), (1, 1)]),
                          st.integers(1, 2)), min_size=1, max_size=4),
       st.tuples(st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2)))
def test_momentum_additive_under_products(fa, fb, k):
    cfg = LatticeConfig()

    def mono(parts, kk=None):
        nrm = {}
        for kind, s, e in parts:
            nrm.setdefault(kind, {})
            nrm[kind][s] = nrm[kind].get(s, 0) + e
        return cfg.monomial(k=kk, **nrm)

    comp = cfg.comp("I", 0)
    prod = mono(fa + fb, k)
    lhs = momentum_vector(cfg, prod, comp)
    rhs = momentum_vector(cfg, mono(fa, k), comp) + momentum_vector(cfg, mono(fb), comp)
    assert np.array_equal(lhs, rhs)


def test_phase_point_roundtrip_and_reality():
    cfg = LatticeConfig(d=1, radius=2, tangential1=((0,),), tangential2=((0,),))
    rng = np.random.default_rng(0)
    z = rng.normal(size=4) + 1j * rng.normal(size=4)
    w = rng.normal(size=4) + 1j * rng.normal(size=4)
    pt = PhasePoint(np.array([0.1]), np.array([0.2]), np.array([0.0]), np.array([0.0]),
                    z, np.conj(z), w, np.conj(w))
    x = pt.to_vector()
    assert len(x) == cfg.dim
    back = PhasePoint.from_vector(cfg, x)
    assert np.array_equal(back.to_vector(), x)
    assert back.is_real()
    back.zbar[0] += 1
    assert not back.is_real()
