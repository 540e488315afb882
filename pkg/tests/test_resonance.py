import itertools
import math

import numpy as np
import pytest

from revkam.lattice import LatticeConfig, site_norm
from revkam.nls import ParamPoint, normal_form
from revkam.resonance import (FAMILIES, FAMILY_SPECS, DecompositionError, DeterminantCertificate,
                              DirectionDecomposition, ResonanceTuple, check_tau, class_sites,
                              clopper_pearson, decompose_direction, det4, divisor_report,
                              excluded_fraction, expression, family_labels, family_polys,
                              fit_exponent, k_vectors, limit_determinant, margin, parse_label,
                              scaling_study, tau_lower_bound_single, tau_lower_bound_total)
from revkam.vfield import NormalFormData

CFG = LatticeConfig()
# unshared sites on both sides so every family is populated
MIXED = LatticeConfig(d=1, radius=2, tangential1=((0,), (-1,)), tangential2=((0,), (1,)))


def coupled(cfg, omega, omegatilde, seed=0, scale=0.05):
    rng = np.random.default_rng(seed)
    nf = NormalFormData.unperturbed(cfg, omega, omegatilde)
    nf.Omega[:] += rng.uniform(-scale, scale, len(nf.Omega))
    nf.Omegatilde[:] += rng.uniform(-scale, scale, len(nf.Omegatilde))
    nf.A[:] = rng.uniform(-scale, scale, len(nf.A))
    nf.Atilde[:] = rng.uniform(-scale, scale, len(nf.Atilde))
    return nf


def all_tuples(cfg, K_lo, K_hi, max_sep):
    """Every condition of the resonant-set union for a step window."""
    ks = [tuple(int(a) for a in v) for v in k_vectors(cfg.n, cfg.m, K_lo, K_hi)]
    for lab in family_labels():
        name, sign = parse_label(lab)
        cls = FAMILY_SPECS[name].classes
        site_lists = [class_sites(cfg, c) for c in cls]
        for sites in itertools.product(*site_lists):
            if sign == -1 and len(sites) == 2 and \
                    site_norm(tuple(a - b for a, b in zip(*sites))) > max_sep:
                continue
            for v in ks:
                yield ResonanceTuple(name, v[:cfg.n], v[cfg.n:], *sites, sign=sign) \
                    if len(sites) == 2 else \
                    ResonanceTuple(name, v[:cfg.n], v[cfg.n:], *sites, None, sign)


def test_family_structure():
    assert len(FAMILIES) == 10
    labels = family_labels()
    assert len(labels) == 16 and len(set(labels)) == 16
    assert FAMILY_SPECS["R34"].classes == ("Z1&Z2", "Z1&Z2")
    assert FAMILY_SPECS["R34"].kind == "det4"
    assert [f for f in FAMILIES if FAMILY_SPECS[f].kind == "det2"] == ["R3", "R13", "R23"]
    assert sum(FAMILY_SPECS[f].signed for f in FAMILIES) == 6


def test_tuple_validation():
    with pytest.raises(ValueError):
        ResonanceTuple("R34", (1, 0), (0, 0), (1, 1), (1, 1))
    with pytest.raises(ValueError):
        ResonanceTuple("R1", (1, 0), (0, 0))
    with pytest.raises(ValueError):
        ResonanceTuple("R9", (1, 0), (0, 0))
    t = ResonanceTuple("R34", (1, 0), (0, 0), (1, 1), (0, 1), sign=1)
    assert t.label == "R34+"
    with pytest.raises(ValueError):
        t.validate(CFG)
    ResonanceTuple("R34", (1, 0), (0, 0), (1, 1), (2, 1), sign=1).validate(CFG)


def test_margin_examples():
    nf = NormalFormData.unperturbed(CFG, [1.5, 1.7], [0.4, 1.2])
    t = ResonanceTuple("R0", (1, 0), (0, 0))
    assert margin(nf, t, 1e-3, 10, 10) == pytest.approx(1.5 - 1e-13, abs=1e-15)
    x = 1.5 - 2 * 0.4
    t = ResonanceTuple("R3", (1, 0), (-2, 0), (2, 1))
    assert expression(nf, t) == pytest.approx((x + 5) * (x + 5), rel=1e-14)
    nf.Omegatilde[CFG.normal2.index((2, 1))] += 0.3
    assert expression(nf, t) == pytest.approx((x + 5) * (x + 5.3), rel=1e-14)


def test_zero_mode_scalar_passes():
    nf = NormalFormData.unperturbed(CFG, [0.3, 1.7], [0.4, 1.2])
    t = ResonanceTuple("R2", (0, 0), (0, 0), (1, 0))
    assert margin(nf, t, 0.999, 3, 1) > 0
    t = ResonanceTuple("R1", (0, 0), (0, 0), (0, 1))
    assert margin(nf, t, 0.999, 3, 1) > 0


def test_det4_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        Mi, Mj = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        x = rng.normal()
        for sign in (1, -1):
            mu, nu = np.linalg.eigvals(Mi), np.linalg.eigvals(Mj)
            prod = np.prod([x + a + sign * b for a in mu for b in nu])
            assert det4(x, Mi, Mj, sign) == pytest.approx(prod.real, rel=1e-12, abs=1e-12)


def test_det4_uncoupled_factorisation():
    nf = NormalFormData.unperturbed(CFG, [0.3, 1.7], [0.4, 1.2])
    nf.Omega[:] += 0.01 * np.arange(len(nf.Omega)) / len(nf.Omega)
    nf.Omegatilde[:] -= 0.02
    i, j = (2, 1), (-1, 3)
    x = 0.37
    Oi, Oti = nf.Omega_at(i), nf.Omegatilde_at(i)
    Oj, Otj = nf.Omega_at(j), nf.Omegatilde_at(j)
    for sign in (1, -1):
        t = ResonanceTuple("R34", (1, 0), (0, 0), i, j, sign=sign)
        x = 0.3
        prod = (x + Oi + sign * Oj) * (x + Oi + sign * Otj) * (x + Oti + sign * Oj) \
            * (x + Oti + sign * Otj)
        assert expression(nf, t) == pytest.approx(prod, rel=1e-10)


def test_family_polys_match_expressions():
    nf = coupled(MIXED, [0.31, 0.72], [0.45, 0.13], seed=2)
    rng = np.random.default_rng(0)
    for lab in family_labels():
        fp = family_polys(nf, lab, max_sep=2)
        assert len(fp.coefs) > 0, lab
        name, sign = parse_label(lab)
        for u, sites in enumerate(fp.witness):
            k = (1, -1)
            kt = (int(rng.integers(-1, 2)), 0)
            x = float(np.dot(k, nf.omega) + np.dot(kt, nf.omegatilde))
            args = list(sites) + [None] * (2 - len(sites))
            t = ResonanceTuple(name, k, kt, *args, sign=sign)
            got = fp.evaluate(np.array([u]), np.array([x]))[0, 0]
            assert got == pytest.approx(abs(expression(nf, t)), rel=1e-9, abs=1e-12)


def _oracle_fraction(nf_family, Z, gamma, tau, K_range):
    thr = gamma / K_range[1] ** tau
    tuples = None
    hits = 0
    for z in Z:
        nf = nf_family(z)
        if tuples is None:
            tuples = list(all_tuples(nf.cfg, K_range[0], K_range[1], K_range[1]))
        hits += any(abs(expression(nf, t)) < thr for t in tuples)
    return hits


@pytest.mark.parametrize("vary_normal", [False, True])
def test_excluded_fraction_matches_bruteforce(vary_normal):
    base = coupled(MIXED, [0.0, 0.0], [0.0, 0.0], seed=4)

    def fam(z):
        nf = base.copy()
        nf.omega = np.array([0.0, 1.0]) + z[:2]
        nf.omegatilde = np.array([0.0, 1.0]) + z[2:]
        if vary_normal:
            nf.A = base.A + 0.02 * z[0]
        return nf

    from revkam.resonance import sample_parameters
    Z = sample_parameters(4, 100, 3)
    est = excluded_fraction(fam, 0.05, 1.0, (0, 1), samples=100, seed=3, n_params=4)
    assert 0 < est.excluded < 100
    assert est.excluded == _oracle_fraction(fam, Z, 0.05, 1.0, (0, 1))
    assert est.ci[0] <= est.fraction <= est.ci[1]


def nls_family(cfg):
    return lambda z: normal_form(cfg, ParamPoint.from_vector(cfg, z))


def test_excluded_fraction_basic_properties():
    fam = nls_family(MIXED)
    with pytest.raises(ValueError):
        excluded_fraction(fam, 1e-2, 2, (0, 1), samples=50, n_params=4)
    assert excluded_fraction(fam, 0.0, 2, (0, 2), samples=200, n_params=4).fraction == 0
    fr = [excluded_fraction(fam, g, 2, (0, 2), samples=400, n_params=4).excluded
          for g in (1e-1, 1e-2, 1e-3)]
    assert fr[0] >= fr[1] >= fr[2]
    thr = 1e-2
    a = excluded_fraction(fam, 1.0, 1, (0, 1), samples=400, n_params=4, threshold_override=thr)
    b = excluded_fraction(fam, 1.0, 1, (0, 2), samples=400, n_params=4, threshold_override=thr)
    assert b.excluded >= a.excluded
    again = excluded_fraction(fam, 1e-2, 2, (0, 2), samples=400, n_params=4)
    assert again.excluded == fr[1]


def test_scaling_study_output():
    study = scaling_study(nls_family(MIXED), [1e-1, 1e-2, 1e-3], 2, (0, 2), samples=200,
                          n_params=4)
    csv = study.to_csv().splitlines()
    assert csv[0].startswith("gamma,fraction")
    assert csv[-1].startswith("# fitted_exponent,")
    assert len(csv) == 5


def test_clopper_pearson_and_fit():
    lo, hi = clopper_pearson(0, 100)
    assert lo == 0 and hi == pytest.approx(1 - 0.025 ** (1 / 100), rel=1e-10)
    lo, hi = clopper_pearson(100, 100)
    assert hi == 1 and lo == pytest.approx(0.025 ** (1 / 100), rel=1e-10)
    g = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    assert fit_exponent(g, 3 * g ** 0.25) == pytest.approx(0.25, rel=1e-12)
    assert math.isnan(fit_exponent([1e-2], [0.1]))


def test_tau_bounds():
    assert tau_lower_bound_single(2) == 12
    assert tau_lower_bound_total(2, 2, 2) == 46
    check_tau(47, 2, 2, 2)
    with pytest.raises(ValueError):
        check_tau(46, 2, 2, 2)


def test_k_vectors():
    ks = k_vectors(2, 2, 0, 1)
    assert len(ks) == 8
    assert len(k_vectors(1, 1, 1, 2)) == 8
    assert not np.any(np.all(k_vectors(2, 2, 0, 3) == 0, axis=1))


def test_divisor_report_zero_mode_rules():
    nf = NormalFormData.unperturbed(CFG, [0.2371, 1.618], [0.4142, 1.7321])
    rep = divisor_report(nf, 1, 1e-3, 2, include_zero_mode=True)
    # R0 never uses k = 0 and R12- at k = 0 vanishes for |i| = |j|
    assert rep.family_min["R0"] > 0
    assert rep.family_min["R12-"] < 0
    rep0 = divisor_report(nf, 1, 1e-3, 2)
    assert rep0.family_min["R0"] == rep.family_min["R0"]
    rows = list(rep0.rows())
    assert {r["family"] for r in rows} <= set(family_labels())


def test_decomposition_examples():
    dec = decompose_direction((3, 2), (3, 2), 2)
    assert isinstance(dec, DirectionDecomposition)
    assert dec.i0 == dec.j0 and dec.sites() == ((3, 2), (3, 2))
    dec = decompose_direction((5, 0), (3, 0), 4)
    assert dec.sites() == ((5, 0), (3, 0))
    assert tuple(a - b for a, b in zip(dec.i0, dec.j0)) == (2, 0)
    assert dec.within(3 * 4 ** 2)
    with pytest.raises(ValueError):
        decompose_direction((5, 0), (0, 0), 4)
    with pytest.raises(ValueError):
        decompose_direction((1, 0, 0), (1, 0, 0), 2)


def _bruteforce_witness(i, j, K):
    Q = 3 * K * K
    best = None
    for c in itertools.product(range(-Q, Q + 1), repeat=2):
        cc = c[0] ** 2 + c[1] ** 2
        if cc == 0 or cc > Q * Q:
            continue
        for t in range(-4 * Q, 4 * Q + 1):
            i0 = (i[0] - t * c[0], i[1] - t * c[1])
            j0 = (j[0] - t * c[0], j[1] - t * c[1])
            ni, nj = i0[0] ** 2 + i0[1] ** 2, j0[0] ** 2 + j0[1] ** 2
            if ni <= Q * Q and nj <= Q * Q:
                key = (ni + nj, cc, c, t)
                if best is None or key < best:
                    best = key
    return best


@pytest.mark.parametrize("i,j,K", [((7, -4), (6, -4), 1), ((20, 3), (19, 4), 2), ((2, 9), (2, 8), 1)])
def test_decomposition_is_lexicographic_minimum(i, j, K):
    dec = decompose_direction(i, j, K)
    key = _bruteforce_witness(i, j, K)
    ni = sum(a * a for a in dec.i0)
    nj = sum(a * a for a in dec.j0)
    c = dec.directions[0]
    assert (ni + nj, c[0] ** 2 + c[1] ** 2, c, dec.ts[0]) == key


def test_decomposition_dichotomy_random():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        K = int(rng.integers(1, 4))
        i = tuple(int(a) for a in rng.integers(-60, 61, 2))
        while True:
            e = tuple(int(a) for a in rng.integers(-K, K + 1, 2))
            # i = j is left out: D then carries the factor x^2 and is bounded through R0
            if 0 < site_norm(e) <= K:
                break
        j = (i[0] - e[0], i[1] - e[1])
        res = decompose_direction(i, j, K)
        if isinstance(res, DirectionDecomposition):
            assert res.sites() == (i, j)
            assert res.within(3 * K * K)
        else:
            assert res.min_abs_det >= 1


def test_decomposition_equal_far_sites_unresolved():
    # x^2 divides det D when i = j, so no certificate exists on |x| <= 2K
    with pytest.raises(DecompositionError):
        decompose_direction((-45, 36), (-45, 36), 1)


def test_decomposition_certificate_in_one_dimension():
    res = decompose_direction((10,), (9,), 1)
    assert isinstance(res, DeterminantCertificate)
    assert res.min_abs_det == pytest.approx(17.0 ** 4, rel=1e-9)
    assert isinstance(decompose_direction((2,), (1,), 1), DirectionDecomposition)


def test_limit_determinant_symbolic():
    dec = DirectionDecomposition((1, 1), (2, 0), ((1, 1),), (5,))
    a, b, c, e = 0.01, -0.02, 0.005, 0.03
    li = {"Omega0": a, "Omegatilde0": b, "A": 0.0, "Atilde": 0.0}
    lj = {"Omega0": c, "Omegatilde0": e, "A": 0.0, "Atilde": 0.0}
    x = 0.7
    sh = 2 - 4
    got = limit_determinant(x, dec, li, lj).value
    expect = (x + sh + a - c) * (x + sh + a - e) * (x + sh + b - c) * (x + sh + b - e)
    assert got == pytest.approx(expect, rel=1e-12)
    zero = {"Omega0": 0.0, "Omegatilde0": 0.0, "A": 0.0, "Atilde": 0.0}
    assert limit_determinant(x, dec, zero, zero).value == pytest.approx((x + sh) ** 4, rel=1e-12)
    drift = DirectionDecomposition((1, 0), (0, 0), ((1, 0),), (5,))
    assert limit_determinant(x, drift, zero, zero).value == math.inf


def test_limit_determinant_lipschitz_defect():
    eps, K = 1e-3, 4
    nf = NormalFormData.unperturbed(CFG, [0.3, 1.7], [0.4, 1.2])
    for idx, s in enumerate(CFG.shared):
        w = eps / max(site_norm(s), 1.0)
        nf.A[idx] = w
        nf.Atilde[idx] = -w
    for idx, s in enumerate(CFG.normal1):
        nf.Omega[idx] += eps / max(site_norm(s), 1.0)
    zero = {"Omega0": 0.0, "Omegatilde0": 0.0, "A": 0.0, "Atilde": 0.0}
    rng = np.random.default_rng(0)
    for t in (1, 2, 3):
        dec = DirectionDecomposition((1, 1), (1, 1), ((1, 0),), (t,))
        i, j = dec.sites()
        for x in rng.uniform(-K, K, 5):
            finite = det4(x, nf.block(i), nf.block(j), -1)
            lim = limit_determinant(x, dec, zero, zero).value
            assert abs(finite - lim) <= eps * K ** 4 / t


def test_limit_determinant_branches():
    zero = {"Omega0": 0.0, "Omegatilde0": 0.0, "A": 0.0, "Atilde": 0.0}
    far = DirectionDecomposition((1, 1), (1, 1), ((1, 0),), (30,))
    near = DirectionDecomposition((1, 1), (1, 1), ((1, 0),), (3,))
    r = limit_determinant(0.5, far, zero, zero, K=2, tau=1)
    assert r.branch == 1 and r.case_threshold == pytest.approx(2 ** 4.5)
    assert limit_determinant(0.5, near, zero, zero, K=2, tau=1).branch == 2
    miss = limit_determinant(0.5, far, None, zero, K=2, tau=1)
    assert miss.skipped and miss.value is None and miss.branch == 1
