"""Small-divisor conditions, resonant sets and excluded-measure estimates.

Every condition is a monic polynomial ``P`` in the tangential combination
``x = <k, omega> + <ktilde, omegatilde>``:

* scalar families: ``x + a`` (``a`` a normal frequency, a sum or a difference);
* 2x2 families: ``det((x + c) I_2 + sigma M_j)``;
* 4x4 families: ``det(x I_4 + M_i (x) I_2 + sigma I_2 (x) M_j^T)``.

A parameter is resonant for a tuple when ``|P(x)| < gamma / K^tau``.  As
``|P(x)| >= dist(x, roots)^deg`` for a monic ``P``, only polynomials with a
root within ``(gamma / K^tau)^(1 / deg)`` of the reachable ``x`` range need
to be evaluated.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import beta as beta_dist

from .lattice import LatticeConfig, site_norm
from .vfield import NormalFormData


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilySpec:
    """Shape of one resonant-set family.

    ``kind`` is ``scalar``, ``det2`` or ``det4``; ``classes`` lists the
    index class of each site (``Z1``, ``Z2``, ``Z1-Z2``, ``Z2-Z1``, ``Z1&Z2``);
    ``freq`` tells which normal frequency each scalar site contributes.
    """

    name: str
    kind: str
    classes: tuple
    freq: tuple = ()
    signed: bool = False
    nonzero_k: bool = True


FAMILY_SPECS = {
    "R0": FamilySpec("R0", "scalar", ()),
    "R1": FamilySpec("R1", "scalar", ("Z1",), ("Omega",)),
    "R2": FamilySpec("R2", "scalar", ("Z2",), ("Omegatilde",)),
    "R11": FamilySpec("R11", "scalar", ("Z1-Z2", "Z1-Z2"), ("Omega", "Omega"), True),
    "R12": FamilySpec("R12", "scalar", ("Z1-Z2", "Z2-Z1"), ("Omega", "Omegatilde"), True),
    "R22": FamilySpec("R22", "scalar", ("Z2-Z1", "Z2-Z1"), ("Omegatilde", "Omegatilde"), True),
    "R3": FamilySpec("R3", "det2", ("Z1&Z2",)),
    "R13": FamilySpec("R13", "det2", ("Z1-Z2", "Z1&Z2"), ("Omega",), True),
    "R23": FamilySpec("R23", "det2", ("Z2-Z1", "Z1&Z2"), ("Omegatilde",), True),
    "R34": FamilySpec("R34", "det4", ("Z1&Z2", "Z1&Z2"), (), True),
}
FAMILIES = tuple(FAMILY_SPECS)

# the small-divisor conditions of the homological equation use the same
# expressions, with scalar single-site conditions restricted to unshared sites
MEL_CLASSES = {"R1": ("Z1-Z2",), "R2": ("Z2-Z1",)}


def family_labels() -> list:
    """All signed family labels, e.g. ``R34-``."""
    out = []
    for name, sp in FAMILY_SPECS.items():
        out += [name + "+", name + "-"] if sp.signed else [name]
    return out


def parse_label(label: str):
    if label[-1] in "+-":
        return label[:-1], (1 if label[-1] == "+" else -1)
    return label, None


def class_sites(cfg: LatticeConfig, cls: str) -> list:
    n1, n2 = set(cfg.normal1), set(cfg.normal2)
    sel = {"Z1": n1, "Z2": n2, "Z1-Z2": n1 - n2, "Z2-Z1": n2 - n1, "Z1&Z2": n1 & n2}[cls]
    return [s for s in cfg.sites if s in sel]


@dataclass(frozen=True)
class ResonanceTuple:
    """One condition: family, sign, Fourier modes, sites and step index."""

    family: str
    k: tuple
    ktilde: tuple
    i: Optional[tuple] = None
    j: Optional[tuple] = None
    sign: Optional[int] = None
    nu: int = 0

    def __post_init__(self):
        sp = FAMILY_SPECS.get(self.family)
        if sp is None:
            raise ValueError(f"unknown family {self.family}")
        if sp.signed and self.sign not in (1, -1):
            raise ValueError(f"family {self.family} needs a sign")
        if not sp.signed and self.sign is not None:
            raise ValueError(f"family {self.family} has no sign")
        nsites = len(sp.classes)
        if (self.i is None) != (nsites < 1) or (self.j is None) != (nsites < 2):
            raise ValueError(f"family {self.family} takes {nsites} site(s)")

    @property
    def label(self) -> str:
        if self.sign is None:
            return self.family
        return self.family + ("+" if self.sign > 0 else "-")

    def sites(self) -> tuple:
        return tuple(s for s in (self.i, self.j) if s is not None)

    def validate(self, cfg: LatticeConfig, classes: Optional[tuple] = None) -> None:
        """Raise ``ValueError`` if a site is outside its index class."""
        cls = classes or FAMILY_SPECS[self.family].classes
        for s, c in zip(self.sites(), cls):
            if s not in set(class_sites(cfg, c)):
                raise ValueError(f"site {s} is not in class {c} for {self.label}")
        if len(self.k) != cfg.n or len(self.ktilde) != cfg.m:
            raise ValueError("Fourier mode lengths must match n and m")


def tangential_combination(nf: NormalFormData, k, ktilde) -> float:
    return float(np.dot(k, nf.omega) + np.dot(ktilde, nf.omegatilde))


def _freq(nf: NormalFormData, which: str, site) -> float:
    return nf.Omega_at(site) if which == "Omega" else nf.Omegatilde_at(site)


def det4(x: float, Mi: np.ndarray, Mj: np.ndarray, sign: int) -> float:
    """``det(x I_4 + M_i (x) I_2 + sign I_2 (x) M_j^T)``."""
    I2 = np.eye(2)
    D = x * np.eye(4) + np.kron(Mi, I2) + sign * np.kron(I2, Mj.T)
    return float(np.real(np.linalg.det(D)))


def expression(nf: NormalFormData, t: ResonanceTuple) -> float:
    """Value of the scalar divisor or determinant of a tuple."""
    x = tangential_combination(nf, t.k, t.ktilde)
    sp = FAMILY_SPECS[t.family]
    sg = t.sign if t.sign is not None else 1
    if t.family == "R0":
        return x
    if sp.kind == "scalar":
        val = x + _freq(nf, sp.freq[0], t.i)
        if t.j is not None:
            val += sg * _freq(nf, sp.freq[1], t.j)
        return val
    if t.family == "R3":
        return float(np.linalg.det(x * np.eye(2) + nf.block(t.i)))
    if sp.kind == "det2":
        c = x + _freq(nf, sp.freq[0], t.i)
        return float(np.linalg.det(c * np.eye(2) + sg * nf.block(t.j)))
    return det4(x, nf.block(t.i), nf.block(t.j), sg)


def threshold(gamma: float, tau: float, K: float) -> float:
    return gamma / K ** tau


def margin(nf: NormalFormData, t: ResonanceTuple, gamma: float, tau: float, K: float) -> float:
    """``|expression| - gamma / K^tau``; negative means resonant."""
    return abs(expression(nf, t)) - threshold(gamma, tau, K)


# ---------------------------------------------------------------------------
# polynomial form
# ---------------------------------------------------------------------------

@dataclass
class FamilyPolys:
    """Distinct monic polynomials of one signed family.

    ``coefs[u]`` (highest power first) belongs to the sites ``witness[u]``;
    ``roots[u]`` are its roots.
    """

    label: str
    coefs: np.ndarray
    roots: np.ndarray
    witness: list

    @property
    def degree(self) -> int:
        return self.coefs.shape[1] - 1 if len(self.coefs) else 0

    def evaluate(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """``|P_u(x)|``, shape ``(len(idx), len(x))``."""
        c = self.coefs[idx]
        out = np.broadcast_to(c[:, :1], (len(idx), len(x))).astype(complex)
        for a in range(1, c.shape[1]):
            out = out * x[None, :] + c[:, a:a + 1]
        return np.abs(out)


def _poly_from_roots(roots: np.ndarray) -> np.ndarray:
    """Monic coefficients of ``prod (x - r)``, batched over rows."""
    c = np.ones((roots.shape[0], 1), complex)
    for a in range(roots.shape[1]):
        r = roots[:, a:a + 1]
        c = np.concatenate([c, np.zeros((len(c), 1))], axis=1) - np.concatenate(
            [np.zeros((len(c), 1)), c * r], axis=1)
    return c


def _dedup(coefs: np.ndarray, witness: list):
    if not len(coefs):
        return coefs, witness
    key = np.round(np.concatenate([coefs.real, coefs.imag], axis=1), 10)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    return coefs[first], [witness[i] for i in first]


def _pairs(cfg, ca, cb, sign, max_sep, same):
    A, B = class_sites(cfg, ca), class_sites(cfg, cb)
    out = []
    for a in A:
        for b in B:
            if sign < 0 and max_sep is not None and \
                    site_norm(tuple(x - y for x, y in zip(a, b))) > max_sep:
                continue
            out.append((a, b))
    return out


def family_polys(nf: NormalFormData, label: str, max_sep: Optional[float] = None,
                 classes: Optional[tuple] = None) -> FamilyPolys:
    """Distinct polynomials of a signed family over all admissible sites.

    ``max_sep`` restricts difference families (sign ``-``) to pairs with
    ``|i - j| <= max_sep``.
    """
    cfg = nf.cfg
    name, sign = parse_label(label)
    sp = FAMILY_SPECS[name]
    cls = classes or sp.classes
    sg = sign if sign is not None else 1
    if name == "R0":
        coefs, wit = np.array([[1.0, 0.0]], complex), [()]
    elif sp.kind == "scalar" and len(cls) == 1:
        S = class_sites(cfg, cls[0])
        coefs = np.array([[1.0, _freq(nf, sp.freq[0], s)] for s in S], complex).reshape(-1, 2)
        wit = [(s,) for s in S]
    elif sp.kind == "scalar":
        P = _pairs(cfg, cls[0], cls[1], sg, max_sep, False)
        coefs = np.array([[1.0, _freq(nf, sp.freq[0], a) + sg * _freq(nf, sp.freq[1], b)]
                          for a, b in P], complex).reshape(-1, 2)
        wit = P
    elif name == "R3":
        S = class_sites(cfg, cls[0])
        rows = []
        for s in S:
            M = nf.block(s)
            rows.append([1.0, np.trace(M), np.linalg.det(M)])
        coefs, wit = np.array(rows, complex).reshape(-1, 3), [(s,) for s in S]
    elif sp.kind == "det2":
        P = _pairs(cfg, cls[0], cls[1], sg, max_sep, False)
        rows = []
        for a, b in P:
            c = _freq(nf, sp.freq[0], a)
            M = nf.block(b)
            tr, dt = sg * np.trace(M), np.linalg.det(M)
            rows.append([1.0, 2 * c + tr, c * c + tr * c + dt])
        coefs, wit = np.array(rows, complex).reshape(-1, 3), P
    else:
        P = _pairs(cfg, cls[0], cls[1], sg, max_sep, False)
        if P:
            I2 = np.eye(2)
            B = np.array([np.kron(nf.block(a), I2) + sg * np.kron(I2, nf.block(b).T) for a, b in P])
            mu = np.linalg.eigvals(B)
            coefs = _poly_from_roots(-mu)
        else:
            coefs = np.zeros((0, 5), complex)
        wit = P
    coefs, wit = _dedup(coefs, wit)
    deg = coefs.shape[1] - 1
    roots = np.array([np.roots(c) for c in coefs]).reshape(len(coefs), deg) if len(coefs) \
        else np.zeros((0, deg), complex)
    return FamilyPolys(label, coefs, roots, wit)


def k_vectors(n: int, m: int, K_lo: int, K_hi: int) -> np.ndarray:
    """All ``(k, ktilde)`` with ``K_lo < |k| + |ktilde| <= K_hi`` (l1 norm)."""
    nt = n + m
    out = []
    rng = range(-K_hi, K_hi + 1)
    for v in itertools.product(rng, repeat=nt):
        s = sum(abs(a) for a in v)
        if K_lo < s <= K_hi:
            out.append(v)
    return np.array(out, dtype=float).reshape(-1, nt)


# ---------------------------------------------------------------------------
# divisor report (single parameter)
# ---------------------------------------------------------------------------

@dataclass
class DivisorReport:
    """Minimal margin per family and overall, with the arg-min tuple."""

    threshold: float
    family_min: dict = field(default_factory=dict)
    family_arg: dict = field(default_factory=dict)

    @property
    def min_margin(self) -> float:
        return min(self.family_min.values(), default=math.inf)

    @property
    def argmin(self) -> Optional[ResonanceTuple]:
        if not self.family_min:
            return None
        lab = min(self.family_min, key=self.family_min.get)
        return self.family_arg[lab]

    @property
    def passed(self) -> bool:
        return self.min_margin >= 0

    def rows(self):
        for lab in self.family_min:
            yield {"family": lab, "min_margin": self.family_min[lab],
                   "tuple": repr(self.family_arg[lab]), "threshold": self.threshold}


def divisor_report(nf: NormalFormData, K: int, gamma: float, tau: float,
                   include_zero_mode: bool = False, mel_classes: bool = True,
                   max_sep: Optional[float] = None) -> DivisorReport:
    """Minimal margins over ``0 < |k| + |ktilde| <= K`` and all admissible sites.

    With ``include_zero_mode`` the mode ``k = ktilde = 0`` is added for the
    families that do not exclude it (every family but R0, R11, R22, R34).
    """
    cfg = nf.cfg
    thr = threshold(gamma, tau, K)
    ks = k_vectors(cfg.n, cfg.m, 0, K)
    freqs = nf.freqs
    xs_nz = ks @ freqs
    rep = DivisorReport(thr)
    for lab in family_labels():
        name, sign = parse_label(lab)
        cls = MEL_CLASSES.get(name) if mel_classes else None
        fp = family_polys(nf, lab, max_sep, cls)
        if not len(fp.coefs):
            continue
        use_zero = include_zero_mode and name not in ("R0", "R11", "R22", "R34")
        xs = np.concatenate([xs_nz, [0.0]]) if use_zero else xs_nz
        kk = np.vstack([ks, np.zeros((1, cfg.nt))]) if use_zero else ks
        best, arg = math.inf, None
        for start in range(0, len(fp.coefs), 256):
            idx = np.arange(start, min(start + 256, len(fp.coefs)))
            vals = fp.evaluate(idx, xs)
            u, q = np.unravel_index(np.argmin(vals), vals.shape)
            if vals[u, q] < best:
                best, arg = float(vals[u, q]), (idx[u], q)
        u, q = arg
        kv = tuple(int(a) for a in kk[q])
        sites = fp.witness[u]
        t = ResonanceTuple(name, kv[:cfg.n], kv[cfg.n:], sites[0] if sites else None,
                           sites[1] if len(sites) > 1 else None, sign)
        rep.family_min[lab] = best - thr
        rep.family_arg[lab] = t
    return rep


# ---------------------------------------------------------------------------
# excluded measure
# ---------------------------------------------------------------------------

@dataclass
class ExclusionEstimate:
    """Monte Carlo estimate of the resonant fraction of the parameter cube.

    This is a numerical surrogate for the analytic measure bound: the
    parameter cube is sampled and each sample tested against every
    enumerated condition.
    """

    gamma: float
    tau: float
    K_range: tuple
    samples: int
    excluded: int
    ci: tuple
    family_counts: dict
    threshold: float

    @property
    def fraction(self) -> float:
        return self.excluded / self.samples

    def row(self) -> dict:
        return {"gamma": self.gamma, "fraction": self.fraction, "ci_lo": self.ci[0],
                "ci_hi": self.ci[1], "samples": self.samples, "excluded": self.excluded,
                "tau": self.tau, "K_lo": self.K_range[0], "K_hi": self.K_range[1]}


def clopper_pearson(x: int, n: int, alpha: float = 0.05) -> tuple:
    lo = 0.0 if x == 0 else float(beta_dist.ppf(alpha / 2, x, n - x + 1))
    hi = 1.0 if x == n else float(beta_dist.ppf(1 - alpha / 2, x + 1, n - x))
    return lo, hi


def sample_parameters(n_params: int, samples: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, (samples, n_params))


def _same_normal_part(nfs) -> bool:
    a = nfs[0]
    return all(np.array_equal(b.Omega, a.Omega) and np.array_equal(b.Omegatilde, a.Omegatilde)
               and np.array_equal(b.A, a.A) and np.array_equal(b.Atilde, a.Atilde) for b in nfs)


def excluded_fraction(nf_family: Callable[[np.ndarray], NormalFormData], gamma: float,
                      tau: float, K_range: tuple, samples: int = 10_000, seed: int = 0,
                      n_params: Optional[int] = None, threshold_override: Optional[float] = None,
                      labels: Optional[Sequence[str]] = None,
                      max_sep: Optional[float] = None) -> ExclusionEstimate:
    """Fraction of ``zeta`` in the union of resonant sets of a step window.

    Parameters
    ----------
    nf_family : callable
        ``zeta`` vector in ``[0, 1]^(n+m)`` to the normal form at that parameter.
    gamma, tau : float
        Threshold ``gamma / K_hi^tau``.
    K_range : (int, int)
        Window ``K_lo < |k| + |ktilde| <= K_hi``.
    samples, seed : int
        Monte Carlo size and seed (the same seed gives the same samples).
    threshold_override : float, optional
        Use this threshold instead of ``gamma / K_hi^tau``.
    max_sep : float, optional
        Pair restriction ``|i - j| <= max_sep`` for difference families;
        defaults to ``K_hi``.
    """
    if samples < 100:
        raise ValueError("at least 100 samples are required")
    K_lo, K_hi = K_range
    if not 0 <= K_lo < K_hi:
        raise ValueError("need 0 <= K_lo < K_hi")
    if n_params is None:
        raise ValueError("n_params must be given")
    Z = sample_parameters(n_params, samples, seed)
    thr = threshold_override if threshold_override is not None else threshold(gamma, tau, K_hi)
    labels = list(labels or family_labels())
    counts = {lab: 0 for lab in labels}
    if gamma <= 0 and threshold_override is None:
        return ExclusionEstimate(gamma, tau, (K_lo, K_hi), samples, 0, clopper_pearson(0, samples),
                                 counts, 0.0)
    nfs = [nf_family(z) for z in Z]
    cfg = nfs[0].cfg
    ks = k_vectors(cfg.n, cfg.m, K_lo, K_hi)
    W = np.array([nf.freqs for nf in nfs])
    X = W @ ks.T
    sep = K_hi if max_sep is None else max_sep
    excluded = np.zeros(samples, bool)
    groups = [(nfs[0], np.arange(samples))] if _same_normal_part(nfs) else \
        [(nf, np.array([s])) for s, nf in enumerate(nfs)]
    for nf, rows in groups:
        for lab in labels:
            fp = family_polys(nf, lab, sep)
            if not len(fp.coefs):
                continue
            q = fp.degree
            h = thr ** (1.0 / q)
            rre = fp.roots.real.ravel()
            rim = np.abs(fp.roots.imag.ravel())
            pid = np.repeat(np.arange(len(fp.coefs)), fp.roots.shape[1])
            keep = rim <= h
            rre, pid = rre[keep], pid[keep]
            order = np.argsort(rre)
            rre, pid = rre[order], pid[order]
            hit = np.zeros(len(rows), bool)
            for kidx in range(len(ks)):
                x = X[rows, kidx]
                lo = np.searchsorted(rre, x.min() - h, "left")
                hi = np.searchsorted(rre, x.max() + h, "right")
                if hi <= lo:
                    continue
                cand = np.unique(pid[lo:hi])
                vals = fp.evaluate(cand, x)
                hit |= np.any(vals < thr, axis=0)
            counts[lab] += int(hit.sum())
            excluded[rows] |= hit
    nexc = int(excluded.sum())
    return ExclusionEstimate(gamma, tau, (K_lo, K_hi), samples, nexc,
                             clopper_pearson(nexc, samples), counts, thr)


def fit_exponent(gammas, fractions) -> float:
    """Least-squares slope of ``log f`` against ``log gamma`` (positive entries only)."""
    g = np.asarray(gammas, float)
    f = np.asarray(fractions, float)
    ok = (g > 0) & (f > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(g[ok]), np.log(f[ok]), 1)[0])


@dataclass
class ScalingStudy:
    rows: list
    exponent: float

    def to_csv(self) -> str:
        head = ["gamma", "fraction", "ci_lo", "ci_hi", "samples", "excluded", "tau", "K_lo", "K_hi"]
        lines = [",".join(head)]
        for r in self.rows:
            lines.append(",".join(repr(r[h]) if isinstance(r[h], float) else str(r[h]) for h in head))
        lines.append(f"# fitted_exponent,{self.exponent!r}")
        return "\n".join(lines) + "\n"


def scaling_study(nf_family, gammas: Sequence[float], tau: float, K_range: tuple,
                  samples: int = 10_000, seed: int = 0, n_params: Optional[int] = None) -> ScalingStudy:
    """Excluded fraction for each ``gamma`` on one sample set, plus the fitted exponent."""
    rows = [excluded_fraction(nf_family, g, tau, K_range, samples, seed, n_params).row()
            for g in gammas]
    exp = fit_exponent([r["gamma"] for r in rows], [r["fraction"] for r in rows])
    return ScalingStudy(rows, exp)


# ---------------------------------------------------------------------------
# tau bounds
# ---------------------------------------------------------------------------

def tau_lower_bound_single(d: int) -> float:
    """``4 (d-1) (d+1)! / ((d-1)! (d+1) - 1)``."""
    den = math.factorial(d - 1) * (d + 1) - 1
    return 4 * (d - 1) * math.factorial(d + 1) / den


def tau_lower_bound_total(d: int, n: int, m: int) -> float:
    """``d! (2 d (d+1) + n + m + 1) + 4 (d-1) (d+1)! / ((d-1)! (d+1) - 1)``."""
    return math.factorial(d) * (2 * d * (d + 1) + n + m + 1) + tau_lower_bound_single(d)


def check_tau(tau: float, d: int, n: int, m: int) -> None:
    """Raise ``ValueError`` unless ``tau`` exceeds the total-measure bound."""
    b = tau_lower_bound_total(d, n, m)
    if not tau > b:
        raise ValueError(f"tau = {tau} must exceed {b} for d={d}, n={n}, m={m}")


# ---------------------------------------------------------------------------
# direction decomposition and limit determinants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionDecomposition:
    """``i = i0 + sum t_l c_l``, ``j = j0 + sum t_l c_l`` with small ``i0, j0, c_l``."""

    i0: tuple
    j0: tuple
    directions: tuple
    ts: tuple

    def sites(self) -> tuple:
        shift = [0] * len(self.i0)
        for t, c in zip(self.ts, self.directions):
            shift = [a + t * b for a, b in zip(shift, c)]
        return (tuple(a + b for a, b in zip(self.i0, shift)),
                tuple(a + b for a, b in zip(self.j0, shift)))

    def within(self, bound: float) -> bool:
        return all(site_norm(s) <= bound for s in (self.i0, self.j0) + tuple(self.directions))


@dataclass(frozen=True)
class DeterminantCertificate:
    """``min |det D|`` over ``|x| <= x_bound`` is at least ``1``."""

    min_abs_det: float
    x_bound: float


class DecompositionError(RuntimeError):
    """Neither a decomposition nor the determinant certificate was found."""


def _asymptotic_block(site) -> np.ndarray:
    return float(sum(a * a for a in site)) * np.eye(2)


def min_abs_on_interval(coefs: np.ndarray, X: float) -> float:
    """``min_{|x| <= X} |P(x)|`` for a real-coefficient polynomial."""
    c = np.real_if_close(np.asarray(coefs))
    pts = [-X, X]
    for r in np.roots(c):
        if abs(r.imag) < 1e-12 and abs(r.real) <= X:
            return 0.0
    for r in np.roots(np.polyder(c)) if len(c) > 1 else []:
        if abs(r.imag) < 1e-12 and abs(r.real) <= X:
            pts.append(r.real)
    return float(min(abs(np.polyval(c, x)) for x in pts))


def decompose_direction(i, j, K: int, nf: Optional[NormalFormData] = None,
                        x_bound: Optional[float] = None):
    """Decomposition ``i = i0 + t c``, ``j = j0 + t c`` with ``|i0|, |j0|, |c| <= 3 K^2``,
    or a certificate ``|det D| >= 1``.

    The witness minimises ``(|i0|^2 + |j0|^2, |c|^2, c, t)``.  The certificate
    evaluates ``det(x I_4 + M_i (x) I_2 - I_2 (x) M_j^T)`` over
    ``|x| <= x_bound`` (default ``2 K``) with the blocks of ``nf``, or
    ``|site|^2 I_2`` when no normal form is given.

    Raises
    ------
    DecompositionError
        Neither alternative holds (a counterexample candidate).
    """
    i, j = tuple(int(a) for a in i), tuple(int(a) for a in j)
    d = len(i)
    if d > 2:
        raise ValueError("the decomposition search supports d <= 2")
    if site_norm(tuple(a - b for a, b in zip(i, j))) > K:
        raise ValueError("requires |i - j| <= K")
    Q = 3 * K * K
    if d == 1:
        if abs(i[0]) <= Q and abs(j[0]) <= Q:
            return DirectionDecomposition(i, j, (), ())
    else:
        rng = np.arange(-Q, Q + 1)
        C = np.array(np.meshgrid(rng, rng, indexing="ij")).reshape(2, -1).T
        C = C[(np.sum(C * C, 1) <= Q * Q) & np.any(C != 0, 1)]
        iv, jv = np.array(i), np.array(j)
        cc = np.sum(C * C, 1)
        t0 = np.rint((C @ (iv + jv)) / (2 * cc)).astype(int)
        best = None
        for dt in (-1, 0, 1):
            t = t0 + dt
            I0 = iv[None, :] - t[:, None] * C
            J0 = jv[None, :] - t[:, None] * C
            ni, nj = np.sum(I0 * I0, 1), np.sum(J0 * J0, 1)
            ok = (ni <= Q * Q) & (nj <= Q * Q)
            for idx in np.flatnonzero(ok):
                key = (int(ni[idx] + nj[idx]), int(cc[idx]), tuple(int(a) for a in C[idx]), int(t[idx]))
                if best is None or key < best[0]:
                    best = (key, idx, int(t[idx]))
        # t = 0 with any direction is also admissible when both sites are small
        if best is not None:
            _, idx, t = best
            c = tuple(int(a) for a in C[idx])
            i0 = tuple(int(a) for a in iv - t * C[idx])
            j0 = tuple(int(a) for a in jv - t * C[idx])
            return DirectionDecomposition(i0, j0, (c,), (t,))
    X = 2.0 * K if x_bound is None else x_bound
    Mi = nf.block(i) if nf is not None else _asymptotic_block(i)
    Mj = nf.block(j) if nf is not None else _asymptotic_block(j)
    I2 = np.eye(2)
    B = np.kron(Mi, I2) - np.kron(I2, Mj.T)
    coefs = np.real(_poly_from_roots(-np.linalg.eigvals(B)[None, :])[0])
    mn = min_abs_on_interval(coefs, X)
    if mn >= 1.0:
        return DeterminantCertificate(mn, X)
    raise DecompositionError(f"no decomposition and min |det| = {mn:.3e} < 1 for i={i}, j={j}")


@dataclass
class LimitDeterminant:
    """Limit of ``det D(t)`` along a decomposition and the applicable case."""

    value: Optional[float]
    branch: Optional[int]
    case_threshold: Optional[float]
    skipped: bool = False
    reason: str = ""


def limit_block(limits: Optional[dict]) -> Optional[np.ndarray]:
    """``[[Omega0, A], [Atilde, Omegatilde0]]`` from limit data, ``None`` if incomplete."""
    if limits is None:
        return None
    try:
        return np.array([[limits["Omega0"], limits["A"]], [limits["Atilde"], limits["Omegatilde0"]]], float)
    except KeyError:
        return None


def limit_determinant(x: float, dec: DirectionDecomposition, limits_i: Optional[dict],
                      limits_j: Optional[dict], K: Optional[float] = None,
                      tau: Optional[float] = None, l: int = 1) -> LimitDeterminant:
    """``lim_{t -> inf} det(x I_4 + M_{i0+tc} (x) I_2 - I_2 (x) M_{j0+tc}^T)``.

    ``M_{s} = |s|^2 I_2 + M0_s`` with ``M0`` replaced by its limit along
    ``c``.  The limit is finite only when ``<i0 - j0, c> = 0``; otherwise
    ``|det|`` grows without bound and ``inf`` is returned.  With ``K`` and
    ``tau``, the case of the shift ``t_l`` is reported: branch ``l`` when
    ``|t_l| > K^(l! tau / d! + 4)`` (the limit governs), branch ``d``
    otherwise (the finite determinant governs).
    """
    d = len(dec.i0)
    if not dec.directions:
        return LimitDeterminant(None, None, None, True, "no direction")
    Mi0, Mj0 = limit_block(limits_i), limit_block(limits_j)
    branch, cthr = None, None
    if K is not None and tau is not None:
        cthr = K ** (math.factorial(l) * tau / math.factorial(d) + 4)
        branch = l if abs(dec.ts[l - 1]) > cthr else d
    if Mi0 is None or Mj0 is None:
        return LimitDeterminant(None, branch, cthr, True, "limit data unavailable")
    c = dec.directions[l - 1]
    drift = sum((a - b) * e for a, b, e in zip(dec.i0, dec.j0, c))
    if drift != 0:
        return LimitDeterminant(math.inf, branch, cthr)
    shift = float(sum(a * a for a in dec.i0) - sum(b * b for b in dec.j0))
    I2 = np.eye(2)
    D = (x + shift) * np.eye(4) + np.kron(Mi0, I2) - np.kron(I2, Mj0.T)
    return LimitDeterminant(float(np.linalg.det(D)), branch, cthr)
