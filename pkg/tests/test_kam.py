import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from revkam.kam import (Embedding, KamBase, KamState, StepFailure, ZetaExcluded, delta_at,
                        extract_embedding, flow, initial_state, iterate, k_cutoff, kam_step,
                        phase_distance, rho_at, schedule_step, schedule_table, trivial_point)
from revkam.vfield import DomainParams, NormalFormData, PolyVectorField, check_reversible


def test_schedule_examples():
    assert delta_at(1.0, 0) == 1 / 8
    assert k_cutoff(1e-6, 1 / 8) == 56
    st0 = schedule_step(KamBase(r=1.0, s=0.1, eps0=1e-6), 0)
    assert st0.delta == 1 / 8 and st0.K == 56
    assert st0.s_next == pytest.approx(2.5e-4, rel=1e-12)
    assert st0.r_next == pytest.approx(0.75, rel=1e-15)


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        k_cutoff(1.5, 0.1)
    with pytest.raises(ValueError):
        schedule_step(KamBase(), -1)
    with pytest.raises(ValueError):
        KamBase(gamma=0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(1e-12, 1e-3), st.floats(1e-12, 1e-2),
       st.floats(0.05, 1.0), st.integers(1, 6))
def test_schedule_identities(r, eps0, s, rho, nu_max):
    base = KamBase(r=r, s=s, rho=rho, eps0=eps0, gamma=1e-3, tau=5.0)
    rows = schedule_table(base, nu_max)
    r_nu, s_nu, L_nu = r, s, 0.0
    for nu, c in enumerate(rows):
        assert c.delta == pytest.approx(r / 2 ** (nu + 3), rel=1e-14)
        assert c.r == pytest.approx(r_nu, rel=1e-12)
        assert c.s == pytest.approx(s_nu, rel=1e-12)
        assert c.r_next == pytest.approx(c.r - 2 * c.delta, rel=1e-12)
        assert c.eta == pytest.approx(c.eps ** (1 / 3), rel=1e-12)
        assert c.s_next == pytest.approx(c.eta * c.s / 4, rel=1e-12)
        assert c.rho == pytest.approx(rho * (1 - sum(2.0 ** -i for i in range(2, nu + 2))),
                                      rel=1e-12)
        assert c.L_next == pytest.approx(c.L + c.eps, rel=1e-12)
        assert c.L == pytest.approx(L_nu, rel=1e-12, abs=1e-300)
        # K is the smallest integer with exp(-K delta) <= eps^(1/2)
        assert math.exp(-c.K * c.delta) <= math.sqrt(c.eps) * (1 + 1e-9)
        assert c.K == 1 or math.exp(-(c.K - 1) * c.delta) > math.sqrt(c.eps)
        r_nu, s_nu, L_nu = c.r_next, c.s_next, c.L_next
    assert rho_at(rho, 0) == rho


def test_schedule_update_formula():
    base = KamBase(r=0.5, gamma=1e-3, tau=47.0, eps0=1e-4, c=1.0)
    c = schedule_step(base, 0)
    a = math.log(1.0) - 5 * math.log(1e-3) - math.log(c.delta) + 254 * math.log(c.K) \
        + 5 / 3 * math.log(1e-4)
    b = 7 / 6 * math.log(1e-4)
    assert c.log_eps_next == pytest.approx(max(a, b) + math.log1p(math.exp(min(a, b) - max(a, b))),
                                           rel=1e-12)


def test_zero_perturbation_step():
    nf = NormalFormData.unperturbed(SMALL, [0.3], [0.4])
    base = KamBase(s=0.1, eps0=1e-6)
    st0 = initial_state(nf, PolyVectorField(SMALL), base)
    st1, rep = kam_step(st0, base)
    assert st1.nu == 1
    assert st1.P.is_zero() and st1.transforms[0].is_zero()
    assert np.array_equal(st1.nf.freqs, nf.freqs)
    assert st1.dom.r < st0.dom.r
    res = iterate(st0, base, nu_max=3)
    assert res.norms == [0.0] and res.reports == []


def test_large_perturbation_rejected():
    nf = NormalFormData.unperturbed(SMALL, [0.3], [0.4])
    base = KamBase(s=0.1)
    P = PolyVectorField(SMALL, {(0, SMALL.monomial()): 5.0})
    with pytest.raises(StepFailure) as err:
        kam_step(initial_state(nf, P, base), base)
    assert err.value.nu == 0


def test_resonant_zeta_excluded():
    cfg = SMALL
    nf = NormalFormData.unperturbed(cfg, [0.5], [0.5])
    base = KamBase(s=0.1, eps0=1e-6)
    P = PolyVectorField(cfg, {(cfg.comp("I", 0), cfg.monomial(k=(1, -1))): 1e-8,
                              (cfg.comp("I", 0), cfg.monomial(k=(-1, 1))): 1e-8})
    st0 = initial_state(nf, P, base)
    with pytest.raises(ZetaExcluded) as err:
        kam_step(st0, base)
    assert err.value.nu == 0
    res = iterate(st0, base, nu_max=2, raise_errors=False)
    assert isinstance(res.error, ZetaExcluded)
    assert not res.state.accepted


def test_nls_iteration_contracts(kam_run, base):
    norms = np.array(kam_run.norms)
    assert len(norms) == 4 and kam_run.error is None
    dec = kam_run.log_decrements
    assert np.all(dec > 0)
    assert np.all(np.diff(dec) > 0)
    assert norms.sum() <= 2 * norms[0]
    for rep in kam_run.reports:
        assert rep.ratio_76 <= base.c
        assert max(rep.drift.values()) <= rep.R_norm <= rep.eps
        assert rep.momentum_violations == 0
        assert rep.reversibility <= 1e-9 * rep.eps_next
        assert rep.toeplitz_max <= rep.toeplitz_budget


def test_nls_iteration_state(kam_run, seed):
    nf0, _ = seed
    state = kam_run.state
    assert state.nu == 3 and len(state.transforms) == 3
    assert check_reversible(state.P, samples=2, scale=1e-6) <= 1e-9 * max(1.0, state.eps)
    assert len(kam_run.frequencies) == 4
    assert np.max(np.abs(kam_run.frequencies[-1] - nf0.freqs)) <= sum(kam_run.norms)


def test_flow_of_constant_field():
    cfg = SMALL
    c = 0.3
    F = PolyVectorField(cfg, {(cfg.comp("I", 0), cfg.monomial()): c})
    x = trivial_point(cfg, [0.1, 0.2])
    y = flow(F, x)
    assert y[cfg.nt] == pytest.approx(c, abs=1e-14)
    assert np.array_equal(flow(PolyVectorField(cfg), x), x)


def test_trivial_embedding():
    cfg = SMALL
    nf = NormalFormData.unperturbed(cfg, [0.3], [0.4])
    state = KamState(0, nf, PolyVectorField(cfg), DomainParams(0.5, 0.1, 0.3))
    emb = extract_embedding(state)
    a = np.array([0.4, 1.3])
    assert np.array_equal(emb(a), trivial_point(cfg, a))
    assert emb.distance_from_trivial() == 0
    assert np.array_equal(emb.frequencies, nf.freqs)


def test_nls_embedding_close_to_trivial(kam_run, base):
    emb = extract_embedding(kam_run.state)
    d = emb.distance_from_trivial(samples=2)
    assert np.isfinite(d)
    assert d <= base.eps0 / base.gamma ** 20


def test_phase_distance_wraps_angles():
    cfg = SMALL
    x = trivial_point(cfg, [0.0, 0.0])
    y = trivial_point(cfg, [2 * np.pi - 1e-3, 0.0])
    assert phase_distance(cfg, x, y) == pytest.approx(1e-3, rel=1e-9)
    y[-1] = 0.5
    assert phase_distance(cfg, x, y) == 0.5


def test_embedding_composition_order():
    cfg = SMALL
    F0 = PolyVectorField(cfg, {(cfg.comp("I", 0), cfg.monomial()): 0.1})
    F1 = PolyVectorField(cfg, {(0, cfg.monomial(l=(1, 0))): 1.0})
    emb = Embedding(cfg, [F0, F1], np.array([0.3, 0.4]))
    x = emb(np.zeros(cfg.nt))
    # F1 acts first at I = 0 (no motion), then F0 shifts I
    assert x[0] == pytest.approx(0.0, abs=1e-14)
    assert x[cfg.nt] == pytest.approx(0.1, abs=1e-14)
