"""Coupled NLS lattice model: coefficients, action-angle transform, simulation.

The model is the Galerkin truncation (sup-norm box) of

    q'_h = i lambda_h q_h + Q^(q_h),    p'_h = i lambdatilde_h p_h + Qtilde^(p_h)

with ``Q^(q_h) = 2i <|u|^2 |v|^2 u, phi_h>`` and
``Qtilde^(p_h) = i <|u|^2 v, phi_h>`` for ``u = sum q_h phi_h``,
``v = sum p_h phi_h`` and ``phi_h = (2 pi)^(-d/2) exp(i <h, x>)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy.optimize import minimize_scalar

from .lattice import LatticeConfig, site_norm
from .vfield import (DomainParams, NormalFormData, PolyVectorField, check_momentum,
                     conjugate_field, reversibility_defect, toeplitz_probe)


# ---------------------------------------------------------------------------
# model data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamPoint:
    """Parameter ``zeta = (xi, xitilde)`` in ``[0, 1]^n x [0, 1]^m``."""

    xi: tuple
    xitilde: tuple

    def __post_init__(self):
        xi = tuple(float(x) for x in self.xi)
        xt = tuple(float(x) for x in self.xitilde)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "xitilde", xt)
        if any(not 0.0 <= x <= 1.0 for x in xi + xt):
            raise ValueError("parameters must lie in [0, 1]")

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.xi + self.xitilde)

    @classmethod
    def from_vector(cls, cfg: LatticeConfig, v) -> "ParamPoint":
        v = [float(x) for x in v]
        return cls(tuple(v[:cfg.n]), tuple(v[cfg.n:cfg.n + cfg.m]))


GENERIC_ZETA = (0.2371, 0.6180, 0.4142, 0.7321, 0.1732, 0.5772, 0.3010, 0.8415)


def default_zeta(cfg: LatticeConfig) -> "ParamPoint":
    """A fixed parameter point away from low-order resonances."""
    v = [GENERIC_ZETA[i % len(GENERIC_ZETA)] for i in range(cfg.n + cfg.m)]
    return ParamPoint.from_vector(cfg, v)


@dataclass(frozen=True)
class NlsModel:
    """Coupled NLS lattice with ``G1 = |u|^4 |v|^2`` and ``G2 = |u|^2 |v|^2``.

    Parameters
    ----------
    lattice : LatticeConfig
    s : float
        Size of the action/normal domain; the amplitudes satisfy
        ``s < I0_b, J0_b < 2 s``.
    I0, J0 : tuple of float, optional
        Torus amplitudes (default ``amp_ratio * s``).
    amp_ratio : float
        Default amplitude in units of ``s``.
    taylor_degree : int
        Degree of the expansion of ``sqrt(I + I0)`` products in the actions.
    normal_degree : int
        Keep only monomials of degree at most this in the normal variables
        when building the transformed field.
    tail_tol : float
        Largest accepted value of ``(s / min I0)^(taylor_degree + 1)``.
    """

    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    s: float = 2e-10
    I0: Optional[tuple] = None
    J0: Optional[tuple] = None
    amp_ratio: float = 1.8
    taylor_degree: int = 3
    normal_degree: int = 1
    tail_tol: float = 0.25

    def __post_init__(self):
        cfg = self.lattice
        I0 = tuple(self.I0) if self.I0 is not None else (self.amp_ratio * self.s,) * cfg.n
        J0 = tuple(self.J0) if self.J0 is not None else (self.amp_ratio * self.s,) * cfg.m
        object.__setattr__(self, "I0", tuple(float(x) for x in I0))
        object.__setattr__(self, "J0", tuple(float(x) for x in J0))
        if len(self.I0) != cfg.n or len(self.J0) != cfg.m:
            raise ValueError("amplitude vectors must match the tangential sets")
        if not self.s > 0:
            raise ValueError("s must be positive")
        for a in self.I0 + self.J0:
            if not self.s < a < 2 * self.s:
                raise ValueError("amplitudes must satisfy s < I0, J0 < 2s")
        if self.taylor_degree < 0 or self.normal_degree < 0:
            raise ValueError("degrees must be nonnegative")

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array(self.I0 + self.J0)

    def lam(self, zeta: ParamPoint) -> np.ndarray:
        """Eigenvalues ``lambda_h`` on all box sites (order of ``lattice.sites``)."""
        cfg = self.lattice
        out = np.array([float(sum(x * x for x in s)) for s in cfg.sites])
        pos = {s: i for i, s in enumerate(cfg.sites)}
        for b, s in enumerate(cfg.tangential1):
            out[pos[s]] += zeta.xi[b]
        return out

    def lamtilde(self, zeta: ParamPoint) -> np.ndarray:
        cfg = self.lattice
        out = np.array([float(sum(x * x for x in s)) for s in cfg.sites])
        pos = {s: i for i, s in enumerate(cfg.sites)}
        for b, s in enumerate(cfg.tangential2):
            out[pos[s]] += zeta.xitilde[b]
        return out

    def taylor_tail(self) -> float:
        """Ratio bound ``(s / min amplitude)^(degree + 1)`` of the dropped tail."""
        return (self.s / float(np.min(self.amplitudes))) ** (self.taylor_degree + 1)


def quintic_coefficient(d: int, i, j, k, l, m, h) -> complex:
    """``Q^(q_h)_{ijklm}``: ``2i/(2 pi)^(2d)`` when ``i+j+k-l-m-h = 0`` else 0."""
    tot = [a + b + c - e - f - g for a, b, c, e, f, g in zip(i, j, k, l, m, h)]
    return 2j / (2 * math.pi) ** (2 * d) if not any(tot) else 0j


def cubic_coefficient(d: int, i, j, k, h) -> complex:
    """``Qtilde^(p_h)_{ijk}``: ``i/(2 pi)^d`` when ``i+j-k-h = 0`` else 0."""
    tot = [a + b - c - g for a, b, c, g in zip(i, j, k, h)]
    return 1j / (2 * math.pi) ** d if not any(tot) else 0j


QUINTIC_SLOTS = (("q", 1), ("q", 1), ("p", 1), ("q", -1), ("p", -1))
CUBIC_SLOTS = (("q", 1), ("p", 1), ("q", -1))


def lattice_space(cfg: LatticeConfig) -> LatticeConfig:
    """Variable space of the lattice form: every box site is a ``q`` (``z``) and ``p`` (``w``) site."""
    return LatticeConfig(cfg.d, cfg.radius, (), (), require_origin=False)


def enumerate_tuples(cfg: LatticeConfig, slots, max_normal: Optional[int] = None):
    """Index tuples of a nonlinearity, with the output site ``h``.

    Yields ``(sites, h)`` where ``sites`` has one site per slot and
    ``h = sum sign * site`` lies in the box.  A slot of field ``q`` is
    tangential when its site is in ``tangential1`` (``p``: ``tangential2``);
    at most ``max_normal`` slots may be normal.
    """
    box = set(cfg.sites)
    tang = {"q": list(cfg.tangential1), "p": list(cfg.tangential2)}
    nrm = {"q": list(cfg.normal1), "p": list(cfg.normal2)}
    ns = len(slots)
    top = ns if max_normal is None else min(max_normal, ns)
    d = cfg.d
    for size in range(top + 1):
        for nset in itertools.combinations(range(ns), size):
            choices = [nrm[f] if idx in nset else tang[f] for idx, (f, _) in enumerate(slots)]
            for combo in itertools.product(*choices):
                h = tuple(sum(sg * site[a] for site, (_, sg) in zip(combo, slots)) for a in range(d))
                if h in box:
                    yield combo, h


def lattice_tuples(cfg: LatticeConfig, which: str = "quintic"):
    """All generated ``(h, sites, coefficient)`` for the lattice form on the box.

    The coefficient is produced by the exact rule; only momentum-conserving
    tuples with ``h`` in the box are emitted.
    """
    space = lattice_space(cfg)
    slots = QUINTIC_SLOTS if which == "quintic" else CUBIC_SLOTS
    coef = quintic_coefficient if which == "quintic" else cubic_coefficient
    for combo, h in enumerate_tuples(space, slots):
        yield h, combo, coef(cfg.d, *combo, h)


def build_lattice_perturbation(model: NlsModel, max_tuples: int = 2_000_000) -> PolyVectorField:
    """The lattice-form perturbation ``P^0`` on the variable space of :func:`lattice_space`.

    Components ``z_h`` / ``w_h`` stand for ``q_h`` / ``p_h``.  Coefficients of
    repeated factors (``q_i q_j`` with ``i != j``) are accumulated, so every
    stored coefficient is the rule value times the number of ordered tuples
    giving the same monomial.
    """
    cfg = model.lattice
    nsites = len(cfg.sites)
    if nsites ** 5 > max_tuples * nsites:
        raise ValueError("lattice too large to materialise the lattice-form field")
    space = lattice_space(cfg)
    kind = {("q", 1): "z", ("q", -1): "zbar", ("p", 1): "w", ("p", -1): "wbar"}
    zero = (0,) * space.nt
    half = {}
    for which, comp_kind, slots in (("quintic", "z", QUINTIC_SLOTS), ("cubic", "w", CUBIC_SLOTS)):
        for h, combo, c in lattice_tuples(cfg, which):
            ex = {}
            for site, slot in zip(combo, slots):
                v = space.var(kind[slot], site)
                ex[v] = ex.get(v, 0) + 1
            key = (space.comp(comp_kind, h), (zero, zero, tuple(sorted(ex.items()))))
            half[key] = half.get(key, 0j) + c
    H = PolyVectorField(space, half)
    return H + conjugate_field(H)


def evaluate_lattice_nonlinearity(model: NlsModel, q: np.ndarray, p: np.ndarray):
    """``(Q^(q_h), Qtilde^(p_h))`` on the box by direct tuple summation (small boxes)."""
    cfg = model.lattice
    pos = {s: i for i, s in enumerate(cfg.sites)}
    Q = np.zeros(len(cfg.sites), complex)
    Qt = np.zeros(len(cfg.sites), complex)
    for h, (i, j, k, l, m), c in lattice_tuples(cfg, "quintic"):
        Q[pos[h]] += c * q[pos[i]] * q[pos[j]] * p[pos[k]] * np.conj(q[pos[l]]) * np.conj(p[pos[m]])
    for h, (i, j, k), c in lattice_tuples(cfg, "cubic"):
        Qt[pos[h]] += c * q[pos[i]] * p[pos[j]] * np.conj(q[pos[k]])
    return Q, Qt


# ---------------------------------------------------------------------------
# action-angle transform
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _amp_series(twice_p: tuple, amps: tuple, degree: int):
    """Taylor coefficients of ``prod_a (amp_a + I_a)^(twice_p_a / 2)`` up to total degree.

    Returns a list of ``(l, coefficient)``.
    """
    terms = [((), 1.0)]
    for tp, a0 in zip(twice_p, amps):
        p = tp / 2.0
        uni = []
        c = 1.0
        for nn in range(degree + 1):
            if nn > 0:
                c *= (p - nn + 1) / nn
            if c == 0.0:
                break
            uni.append((nn, c * a0 ** (p - nn)))
        new = []
        for l, cl in terms:
            used = sum(l)
            for nn, cu in uni:
                if used + nn <= degree:
                    new.append((l + (nn,), cl * cu))
        terms = new
    return terms


def action_angle(model: NlsModel, zeta: Optional[ParamPoint] = None, P0=None):
    """Transformed field ``P`` and normal form ``N`` after the action-angle map.

    ``q_{i(b)} = sqrt(I_b + I0_b) e^{i theta_b}``, ``p_{itilde(b)} =
    sqrt(J_b + J0_b) e^{i phi_b}``, other amplitudes become ``z``/``w``.  The
    amplitude factors are expanded in the actions to ``model.taylor_degree``
    and only monomials of normal degree at most ``model.normal_degree`` are
    generated.  ``P0`` is accepted for interface symmetry but not needed: the
    transformed field is assembled directly from the coefficient rule.

    Returns
    -------
    (NormalFormData, PolyVectorField)
    """
    if model.taylor_tail() > model.tail_tol:
        raise ValueError(f"Taylor tail {model.taylor_tail():.3g} exceeds tolerance {model.tail_tol}")
    cfg = model.lattice
    n, m, nt = cfg.n, cfg.m, cfg.nt
    zeta = zeta or default_zeta(cfg)
    ang1 = {s: b for b, s in enumerate(cfg.tangential1)}
    ang2 = {s: n + b for b, s in enumerate(cfg.tangential2)}
    amps = tuple(model.amplitudes.tolist())
    kind = {("q", 1): "z", ("q", -1): "zbar", ("p", 1): "w", ("p", -1): "wbar"}
    half = {}
    deg = model.taylor_degree
    for which, slots in (("quintic", QUINTIC_SLOTS), ("cubic", CUBIC_SLOTS)):
        fld = "q" if which == "quintic" else "p"
        angmap = ang1 if fld == "q" else ang2
        cval = (2j / (2 * math.pi) ** (2 * cfg.d) if which == "quintic"
                else 1j / (2 * math.pi) ** cfg.d)
        for combo, h in enumerate_tuples(cfg, slots, model.normal_degree):
            ep = [0] * nt
            em = [0] * nt
            ex = {}
            for site, (f, sg) in zip(combo, slots):
                amap = ang1 if f == "q" else ang2
                a = amap.get(site)
                if a is not None:
                    if sg > 0:
                        ep[a] += 1
                    else:
                        em[a] += 1
                else:
                    v = cfg.var(kind[(f, sg)], site)
                    ex[v] = ex.get(v, 0) + 1
            nrm = tuple(sorted(ex.items()))
            a = angmap.get(h)
            if a is None:
                targets = [(cfg.comp("z" if fld == "q" else "w", h), ep, em, cval)]
            else:
                ep1 = list(ep)
                ep1[a] -= 1
                em1 = list(em)
                em1[a] += 1
                targets = [(a, ep1, em, cval / 2j), (nt + a, ep, em1, cval)]
            for comp, e_p, e_m, c in targets:
                k = tuple(x - y for x, y in zip(e_p, e_m))
                twice_p = tuple(x + y for x, y in zip(e_p, e_m))
                for l, cl in _amp_series(twice_p, amps, deg):
                    key = (comp, (k, l, nrm))
                    half[key] = half.get(key, 0j) + c * cl
    H = PolyVectorField(cfg, half)
    return normal_form(cfg, zeta), H + conjugate_field(H)


def normal_form(cfg: LatticeConfig, zeta: ParamPoint) -> NormalFormData:
    """``omega_b = |i(b)|^2 + xi_b``, ``omegatilde_b = |itilde(b)|^2 + xitilde_b``,
    ``Omega_h = Omegatilde_h = |h|^2`` and no coupling."""
    return NormalFormData.unperturbed(
        cfg, [sum(x * x for x in s) + zeta.xi[b] for b, s in enumerate(cfg.tangential1)],
        [sum(x * x for x in s) + zeta.xitilde[b] for b, s in enumerate(cfg.tangential2)])


def psi_map(model: NlsModel, x: np.ndarray):
    """Lattice amplitudes ``(q, p)`` on the box from a phase-space vector.

    Uses the exact square roots (no Taylor expansion).
    """
    cfg = model.lattice
    nt = cfg.nt
    n = cfg.n
    x = np.asarray(x, dtype=complex)
    pos = {s: i for i, s in enumerate(cfg.sites)}
    q = np.zeros(len(cfg.sites), complex)
    p = np.zeros(len(cfg.sites), complex)
    amps = model.amplitudes
    for b, s in enumerate(cfg.tangential1):
        q[pos[s]] = np.sqrt(x[nt + b] + amps[b]) * np.exp(1j * x[b])
    for b, s in enumerate(cfg.tangential2):
        p[pos[s]] = np.sqrt(x[nt + n + b] + amps[n + b]) * np.exp(1j * x[n + b])
    n1 = len(cfg.normal1)
    base = 2 * nt
    for idx, s in enumerate(cfg.normal1):
        q[pos[s]] = x[base + idx]
    for idx, s in enumerate(cfg.normal2):
        p[pos[s]] = x[base + 2 * n1 + idx]
    return q, p


def psi_inverse(model: NlsModel, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Phase-space vector (real subspace) of lattice amplitudes; inverse of :func:`psi_map`."""
    cfg = model.lattice
    nt, n = cfg.nt, cfg.n
    pos = {s: i for i, s in enumerate(cfg.sites)}
    x = np.zeros(cfg.dim, complex)
    amps = model.amplitudes
    for b, s in enumerate(cfg.tangential1):
        x[b] = np.angle(q[pos[s]])
        x[nt + b] = abs(q[pos[s]]) ** 2 - amps[b]
    for b, s in enumerate(cfg.tangential2):
        x[n + b] = np.angle(p[pos[s]])
        x[nt + n + b] = abs(p[pos[s]]) ** 2 - amps[n + b]
    n1, n2 = len(cfg.normal1), len(cfg.normal2)
    base = 2 * nt
    zq = np.array([q[pos[s]] for s in cfg.normal1])
    wp = np.array([p[pos[s]] for s in cfg.normal2])
    x[base:base + n1] = zq
    x[base + n1:base + 2 * n1] = np.conj(zq)
    x[base + 2 * n1:base + 2 * n1 + n2] = wp
    x[base + 2 * n1 + n2:] = np.conj(wp)
    return x


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    """One assumption check: ``value`` compared against ``threshold``."""

    name: str
    passed: bool
    value: float = 0.0
    threshold: float = 0.0
    witness: object = None


@dataclass
class AssumptionReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def rows(self):
        for c in self.checks:
            yield {"check": c.name, "passed": c.passed, "value": c.value,
                   "threshold": c.threshold, "witness": repr(c.witness) if c.witness else ""}


def _toeplitz_items(cfg: LatticeConfig, rho: float):
    """Probe families and base pairs used by :func:`verify_assumptions`."""
    R = cfg.radius
    fams = [("z", "z", 1), ("w", "w", 1), ("z", "w", 1), ("w", "z", 1),
            ("z", "zbar", -1), ("w", "wbar", -1)]
    pairs = [((0, 0), (0, 0)), ((1, 0), (0, 0)), ((0, 1), (1, 0)), ((-1, 1), (0, 1))]
    out = []
    for fam in fams:
        for i, j in pairs:
            if len(i) != cfg.d:
                i, j = (0,) * cfg.d, (0,) * cfg.d
            for axis in range(cfg.d):
                c = tuple(1 if a == axis else 0 for a in range(cfg.d))
                out.append((fam, i, j, c, math.exp(-rho * site_norm(tuple(a - fam[2] * b for a, b in zip(i, j))))))
    for b in range(cfg.n):
        for axis in range(cfg.d):
            c = tuple(1 if a == axis else 0 for a in range(cfg.d))
            out.append(((("theta", b), "z", 1), (0,) * cfg.d, (0,) * cfg.d, c, 1.0))
    return out, range(1, R + 1)


def verify_assumptions(nf: NormalFormData, P: PolyVectorField, zeta_samples: Sequence = (),
                       dom: Optional[DomainParams] = None, s: Optional[float] = None,
                       c_reg: float = 10.0, L: float = 1e-2, fd_step: float = 1e-4,
                       jac_tol: float = 1e-9) -> AssumptionReport:
    """Check the standing assumptions on the transformed field.

    * A1: finite-difference Jacobian of ``zeta -> (omega, omegatilde)`` is the identity;
    * A2: ``|Omega - |j|^2|`` and the tilde analogue are at most ``L``;
    * A4: ``||A|| < 1`` and ``||P|| <= c_reg s^(1/2)``;
    * A5: no momentum-violating term;
    * A6: Toplitz-Lipschitz defects of ``P`` within ``||P|| e^{-|i -+ j| rho}``.

    Small-divisor conditions are handled by :mod:`revkam.resonance`.
    """
    cfg = nf.cfg
    dom = dom or DomainParams(0.5, s if s is not None else 2e-10, 0.3)
    s = dom.s if s is None else s
    rep = AssumptionReport()
    samples = list(zeta_samples) or [default_zeta(cfg)]
    worst, wit = 0.0, None
    for z in samples:
        base = normal_form(cfg, z).freqs
        v = z.vector
        for a in range(cfg.nt):
            h = fd_step if v[a] + fd_step <= 1 else -fd_step
            vp = v.copy()
            vp[a] += h
            col = (normal_form(cfg, ParamPoint.from_vector(cfg, vp)).freqs - base) / h
            e = np.zeros(cfg.nt)
            e[a] = 1.0
            d = float(np.max(np.abs(col - e)))
            if d > worst:
                worst, wit = d, (z, a)
    rep.checks.append(CheckResult("A1 jacobian", worst <= jac_tol, worst, jac_tol,
                                  wit if worst > jac_tol else None))
    O0 = float(max(np.max(np.abs(nf.Omega0), initial=0.0), np.max(np.abs(nf.Omegatilde0), initial=0.0)))
    rep.checks.append(CheckResult("A2 normal asymptotics", O0 <= L, O0, L))
    A_norm = float(max(np.max(np.abs(nf.A), initial=0.0), np.max(np.abs(nf.Atilde), initial=0.0)))
    rep.checks.append(CheckResult("A4 coupling", A_norm < 1.0, A_norm, 1.0))
    eps = P.norm(dom)
    rep.checks.append(CheckResult("A4 regularity", eps <= c_reg * math.sqrt(s), eps,
                                  c_reg * math.sqrt(s)))
    bad = check_momentum(P)
    rep.checks.append(CheckResult("A5 momentum", not bad, float(len(bad)), 0.0,
                                  bad[0] if bad else None))
    worst, wit = 0.0, None
    if P.terms:
        items, ts = _toeplitz_items(cfg, dom.rho)
        for fam, i, j, c, decay in items:
            pr = toeplitz_probe(P, fam, i, j, c, ts, dom)
            ratio = pr.max_defect / (eps * decay)
            if ratio > worst:
                worst, wit = ratio, (fam, i, j, c)
    rep.checks.append(CheckResult("A6 toplitz", worst <= 1.0, worst, 1.0,
                                  wit if worst > 1.0 else None))
    return rep


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

class SimulationError(RuntimeError):
    """Raised when the mass proxy blows up (step size too large)."""


@dataclass
class SimState:
    """Amplitudes ``q_h``, ``p_h`` on the box sites and the time."""

    q: np.ndarray
    p: np.ndarray
    time: float = 0.0

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.p.copy(), self.time)

    def masses(self) -> tuple:
        return float(np.sum(np.abs(self.q) ** 2)), float(np.sum(np.abs(self.p) ** 2))


@dataclass
class Trajectory:
    """Sampled states: ``q[k]``, ``p[k]`` at ``times[k]``."""

    cfg: LatticeConfig
    times: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def state(self, k: int) -> SimState:
        return SimState(self.q[k].copy(), self.p[k].copy(), float(self.times[k]))

    def masses(self) -> np.ndarray:
        return np.stack([np.sum(np.abs(self.q) ** 2, axis=1), np.sum(np.abs(self.p) ** 2, axis=1)], 1)

    def to_csv(self) -> str:
        """``t`` followed by the real and imaginary part of every retained mode."""
        lines = []
        head = ["t"]
        for f in ("q", "p"):
            for s in self.cfg.sites:
                tag = f"{f}[{','.join(map(str, s))}]"
                head += [f"re {tag}", f"im {tag}"]
        lines.append(",".join(f'"{h}"' for h in head))
        for k, t in enumerate(self.times):
            row = [repr(float(t))]
            for arr in (self.q[k], self.p[k]):
                for z in arr:
                    row += [repr(float(z.real)), repr(float(z.imag))]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


class _Grid:
    """Pseudo-spectral evaluation of the nonlinearity on ``N^d`` points.

    ``N >= 6 R + 2`` keeps the projected products of five box modes free of
    aliasing.
    """

    def __init__(self, cfg: LatticeConfig, N: Optional[int] = None):
        R = cfg.radius
        need = 6 * R + 2
        self.N = N or 1 << (need - 1).bit_length()
        if self.N < need:
            raise ValueError(f"grid size {self.N} aliases; need at least {need}")
        self.d = cfg.d
        self.idx = tuple(np.array([s[a] % self.N for s in cfg.sites]) for a in range(cfg.d))
        self.c_phys = (2 * math.pi) ** (-cfg.d / 2) * self.N ** cfg.d
        self.c_proj = (2 * math.pi) ** (cfg.d / 2) / self.N ** cfg.d
        self.axes = tuple(range(-cfg.d, 0))

    def phys(self, a: np.ndarray) -> np.ndarray:
        shape = a.shape[:-1] + (self.N,) * self.d
        g = np.zeros(shape, complex)
        g[(Ellipsis,) + self.idx] = a
        return self.c_phys * sfft.ifftn(g, axes=self.axes, workers=-1)

    def proj(self, g: np.ndarray) -> np.ndarray:
        return self.c_proj * sfft.fftn(g, axes=self.axes, workers=-1)[(Ellipsis,) + self.idx]


class _Flow:
    """Right-hand sides of the lattice system and its variational equations."""

    def __init__(self, model: NlsModel, zeta: ParamPoint, coupling: float = 1.0,
                 grid: Optional[int] = None):
        self.lam = model.lam(zeta)
        self.lamt = model.lamtilde(zeta)
        self.grid = _Grid(model.lattice, grid)
        self.coupling = coupling

    def nonlinear(self, q, p):
        g = self.grid
        u, v = g.phys(q), g.phys(p)
        au, av = np.abs(u) ** 2, np.abs(v) ** 2
        c = self.coupling
        return c * 2j * g.proj(au * av * u), c * 1j * g.proj(au * v)

    def tangent(self, q, p, dq, dp):
        g = self.grid
        u, v = g.phys(q), g.phys(p)
        du, dv = g.phys(dq), g.phys(dp)
        au, av = np.abs(u) ** 2, np.abs(v) ** 2
        dau = 2 * np.real(np.conj(u) * du)
        dav = 2 * np.real(np.conj(v) * dv)
        c = self.coupling
        d1 = dau * av * u + au * dav * u + au * av * du
        d2 = dau * v + au * dv
        return c * 2j * g.proj(d1), c * 1j * g.proj(d2)

    def rotate(self, q, p, h):
        return np.exp(1j * self.lam * h) * q, np.exp(1j * self.lamt * h) * p


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(tuple(a + 0.5 * h * b for a, b in zip(y, k1)))
    k3 = f(tuple(a + 0.5 * h * b for a, b in zip(y, k2)))
    k4 = f(tuple(a + h * b for a, b in zip(y, k3)))
    return tuple(a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSHIDA_W0 = -(2.0 ** (1.0 / 3.0)) * _YOSHIDA_W1


def _composition(order: int):
    if order == 2:
        return (1.0,)
    if order == 4:
        return (_YOSHIDA_W1, _YOSHIDA_W0, _YOSHIDA_W1)
    raise ValueError("order must be 2 or 4")


def _split_step(fl: _Flow, y: tuple, h: float, weights, rhs) -> tuple:
    """Strang (or its order-4 composition): rotate, nonlinear RK4, rotate.

    ``y = (q, p, ...)``; entries after the first two are tangent vectors
    rotated by the same linear part.
    """
    for w in weights:
        hw = w * h
        rot = []
        for idx, a in enumerate(y):
            lamv = fl.lam if idx % 2 == 0 else fl.lamt
            rot.append(np.exp(0.5j * lamv * hw) * a)
        y = _rk4(rhs, tuple(rot), hw)
        y = tuple(np.exp(0.5j * (fl.lam if idx % 2 == 0 else fl.lamt) * hw) * a
                  for idx, a in enumerate(y))
    return y


def simulate(model: NlsModel, zeta: Optional[ParamPoint], state0: SimState, T: float, dt: float,
             order: int = 2, sample_every: int = 1, coupling: float = 1.0,
             blowup: float = 10.0, grid: Optional[int] = None) -> Trajectory:
    """Integrate the lattice system ``q' = i lambda q + Q``, ``p' = i lambdatilde p + Qtilde``.

    The linear part is rotated exactly; the nonlinear substep uses RK4;
    ``order`` 2 is the symmetric splitting, 4 its triple-jump composition.
    ``T`` may be negative (backward integration).  ``coupling`` scales the
    nonlinearity (0 gives the linear flow).

    Raises
    ------
    SimulationError
        If the total mass grows by a factor above ``blowup`` or turns non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = model.lattice
    zeta = zeta or default_zeta(cfg)
    nsites = len(cfg.sites)
    q0 = np.asarray(state0.q, complex)
    p0 = np.asarray(state0.p, complex)
    if q0.shape != (nsites,) or p0.shape != (nsites,):
        raise ValueError("state must live on the box sites")
    fl = _Flow(model, zeta, coupling, grid)
    nsteps = max(1, int(round(abs(T) / dt)))
    h = T / nsteps
    weights = _composition(order)
    y = (q0, p0)
    m0 = float(np.sum(np.abs(q0) ** 2) + np.sum(np.abs(p0) ** 2))

    def rhs(yy):
        return fl.nonlinear(yy[0], yy[1])

    times, qs, ps = [state0.time], [q0.copy()], [p0.copy()]
    for k in range(1, nsteps + 1):
        y = _split_step(fl, y, h, weights, rhs)
        if k % sample_every == 0 or k == nsteps:
            m = float(np.sum(np.abs(y[0]) ** 2) + np.sum(np.abs(y[1]) ** 2))
            if not math.isfinite(m) or m > blowup * max(m0, 1e-300):
                raise SimulationError(f"mass proxy blew up at t={state0.time + k * h:.4g}")
            times.append(state0.time + k * h)
            qs.append(y[0].copy())
            ps.append(y[1].copy())
    return Trajectory(cfg, np.array(times), np.array(qs), np.array(ps))


def linear_stability(model: NlsModel, zeta: Optional[ParamPoint], embedding, T: float,
                     dt: float = 0.1, directions: Optional[np.ndarray] = None,
                     angles=None, order: int = 2, coupling: float = 1.0) -> np.ndarray:
    """Finite-time growth exponents ``log ||dy(T)|| / T`` of the variational equations.

    Parameters
    ----------
    embedding : callable or SimState
        Torus embedding (evaluated at ``angles``, default 0, and mapped by
        :func:`psi_map`) or an initial lattice state.
    directions : array, shape (k, 2 * nsites), optional
        Initial tangent vectors ``(dq, dp)``, normalised internally.  The
        default is every unit vector ``dq_h`` and ``dp_h``.
    """
    cfg = model.lattice
    zeta = zeta or default_zeta(cfg)
    nsites = len(cfg.sites)
    if isinstance(embedding, SimState):
        q0, p0 = np.asarray(embedding.q, complex), np.asarray(embedding.p, complex)
    else:
        a = np.zeros(cfg.nt) if angles is None else np.asarray(angles, float)
        q0, p0 = psi_map(model, embedding(a))
    if directions is None:
        directions = np.eye(2 * nsites, dtype=complex)
    D = np.asarray(directions, complex)
    D = D / np.linalg.norm(D, axis=1, keepdims=True)
    fl = _Flow(model, zeta, coupling)
    nsteps = max(1, int(round(T / dt)))
    h = T / nsteps
    weights = _composition(order)

    def rhs(yy):
        q, p, dq, dp = yy
        a, b = fl.nonlinear(q, p)
        c, d = fl.tangent(q, p, dq, dp)
        return a, b, c, d

    y = (q0, p0, D[:, :nsites].copy(), D[:, nsites:].copy())
    for _ in range(nsteps):
        y = _split_step(fl, y, h, weights, rhs)
        if not np.all(np.isfinite(y[2])):
            raise SimulationError("tangent vectors blew up")
    norms = np.sqrt(np.sum(np.abs(y[2]) ** 2, axis=1) + np.sum(np.abs(y[3]) ** 2, axis=1))
    return np.log(norms) / T


def sim_state_from_phase(model: NlsModel, x: np.ndarray, time: float = 0.0) -> SimState:
    q, p = psi_map(model, x)
    return SimState(q, p, time)


# ---------------------------------------------------------------------------
# frequency analysis
# ---------------------------------------------------------------------------

def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1))


def refine_frequency(t: np.ndarray, f: np.ndarray, pad: int = 8):
    """Dominant (signed) angular frequency of a uniformly sampled signal.

    Hann-windowed FFT peak, quadratic interpolation of the log magnitude,
    then maximisation of the windowed projection ``|sum w f e^{-i nu t}|``
    within one padded bin.

    Returns
    -------
    (nu, amplitude, peak_ok)
    """
    n = len(t)
    h = float(t[1] - t[0])
    w = _hann(n)
    spec = np.fft.fft(w * f, pad * n)
    mag = np.abs(spec)
    kmax = int(np.argmax(mag))
    freqs = 2 * np.pi * np.fft.fftfreq(pad * n, d=h)
    bin_w = 2 * np.pi / (pad * n * h)
    a, b, c = (np.log(mag[(kmax + j) % len(mag)] + 1e-300) for j in (-1, 0, 1))
    den = a - 2 * b + c
    off = 0.5 * (a - c) / den if den != 0 else 0.0
    nu0 = freqs[kmax] + off * bin_w
    tt = t - t[0]
    wsum = float(np.sum(w))

    def obj(nu):
        return -abs(np.dot(w * f, np.exp(-1j * nu * tt)))

    res = minimize_scalar(obj, bounds=(nu0 - bin_w, nu0 + bin_w), method="bounded",
                          options={"xatol": 1e-14 * max(1.0, abs(nu0))})
    nu = float(res.x)
    amp = np.dot(w * f, np.exp(-1j * nu * tt)) / wsum
    ok = bool(res.success) and abs(nu - nu0) < bin_w
    return nu, amp * np.exp(-1j * nu * t[0]), ok


@dataclass
class QuasiPeriodicityReport:
    frequencies: np.ndarray
    expected: np.ndarray
    deviations: np.ndarray
    residual_power: np.ndarray
    resolved: np.ndarray
    tol: float
    residual_tol: float
    span_rule: bool = True

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.deviations, initial=0.0))

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual_power, initial=0.0))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.resolved)) and self.max_deviation <= self.tol \
            and self.max_residual <= self.residual_tol


def quasiperiodicity_diagnostic(traj: Trajectory, expected_freqs, tol: float = 1e-3,
                                residual_tol: float = 1e-2) -> QuasiPeriodicityReport:
    """Compare the tangential mode frequencies of a trajectory with the expected ones.

    Modes are ``q`` on ``tangential1`` then ``p`` on ``tangential2``.  The
    residual power is the windowed fraction of the signal not explained by
    the fitted tone.  A mode is unresolved when the peak refinement leaves
    its bin.  ``span_rule`` records whether the time span reaches
    ``50 / gap`` for the smallest gap of the expected frequencies; it is
    informational because each tangential mode carries a single dominant tone.
    """
    cfg = traj.cfg
    pos = {s: i for i, s in enumerate(cfg.sites)}
    sig = [traj.q[:, pos[s]] for s in cfg.tangential1] + [traj.p[:, pos[s]] for s in cfg.tangential2]
    expected = np.asarray(expected_freqs, float)
    if len(expected) != len(sig):
        raise ValueError("one expected frequency per tangential mode")
    t = np.asarray(traj.times, float)
    span = float(t[-1] - t[0])
    ex = np.sort(expected)
    gap = float(np.min(np.diff(ex))) if len(ex) > 1 else math.inf
    span_ok = gap == math.inf or span * gap >= 50.0
    w = _hann(len(t))
    found, dev, resid, res_ok = [], [], [], []
    for f, e in zip(sig, expected):
        nu, amp, ok = refine_frequency(t, f)
        found.append(nu)
        dev.append(abs(nu - e) / max(abs(e), 1e-300))
        fit = amp * np.exp(1j * nu * t)
        tot = float(np.sum(w * np.abs(f) ** 2))
        resid.append(float(np.sum(w * np.abs(f - fit) ** 2)) / tot if tot > 0 else 1.0)
        res_ok.append(ok)
    return QuasiPeriodicityReport(np.array(found), expected, np.array(dev), np.array(resid),
                                  np.array(res_ok), tol, residual_tol, span_ok)
