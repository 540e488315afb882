"""KAM iteration: step schedule, one step of the scheme, driver and embedding.

One step at parameter ``zeta`` does the following:

1. truncate ``P`` to ``R`` (Fourier cutoff ``K`` and the jet rule);
2. solve ``[N + A, F] + R = [R]``;
3. move ``[R]`` into the normal form;
4. transport the rest by the time-1 flow of ``F``.

Write ``Y_1 = [R] - R + [P, F]`` and ``Y_n = [Y_{n-1}, F] / n``.  Then

    P_+ = (P - R) + [P, F] + sum_{n >= 2} Y_n,

which is the nested-bracket form of the transformed remainder.  It avoids
forming ``[N + A, F]``, which the homological equation already fixes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .homological import (HomologicalError, SolveReport, TruncationSpec, normal_part,
                          solve_homological, truncate_R)
from .lattice import LatticeConfig
from .vfield import (BracketStats, DomainParams, NormalFormData, PolyVectorField,
                     check_momentum, lie_bracket, reversibility_defect, toeplitz_probe)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KamBase:
    """Base constants of the iteration.

    Parameters
    ----------
    r, s, rho : float
        Initial angle width, action/normal size and weight exponent.
    gamma, tau : float
        Diophantine constants of the divisor thresholds ``gamma / K^tau``.
    eps0 : float
        Size of the initial perturbation.
    L : float
        Initial Lipschitz-type bound carried along the scheme.
    c : float
        Constant in the theoretical update of ``eps``.
    """

    r: float = 0.5
    s: float = 2e-10
    rho: float = 0.3
    gamma: float = 1e-3
    tau: float = 47.0
    eps0: float = 1e-4
    L: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("r", "s", "rho", "gamma", "tau", "eps0", "c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.L < 0:
            raise ValueError("L must be nonnegative")


@dataclass(frozen=True)
class StepConstants:
    """Constants of step ``nu`` and the values handed to step ``nu + 1``.

    ``log_eps_next`` is the natural log of the theoretical update
    ``c gamma^-5 delta^-1 K^(5 tau + 19) eps^(5/3) + eps^(7/6)``; it may be
    far above 0 for desk-scale parameters, hence kept in log form.
    """

    nu: int
    delta: float
    r: float
    eps: float
    K: int
    eta: float
    s: float
    rho: float
    L: float
    r_next: float
    s_next: float
    rho_next: float
    L_next: float
    log_eps_next: float

    @property
    def eps_next(self) -> float:
        return math.exp(self.log_eps_next) if self.log_eps_next < 700 else math.inf

    @property
    def domain(self) -> DomainParams:
        return DomainParams(self.r, self.s, self.rho)

    @property
    def domain_next(self) -> DomainParams:
        return DomainParams(self.r_next, self.s_next, self.rho_next)


def delta_at(r: float, nu: int) -> float:
    return r / 2 ** (nu + 3)


def rho_at(rho: float, nu: int) -> float:
    """``rho (1 - sum_{i=2}^{nu+1} 2^-i)``."""
    return rho * (1.0 - sum(2.0 ** -i for i in range(2, nu + 2)))


def k_cutoff(eps: float, delta: float) -> int:
    """Smallest integer ``K`` with ``exp(-K delta) <= eps^(1/2)``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return max(1, math.ceil(-0.5 * math.log(eps) / delta - 1e-12))


def _step(base: KamBase, nu: int, r: float, s: float, eps: float, L: float) -> StepConstants:
    delta = delta_at(base.r, nu)
    K = k_cutoff(eps, delta)
    eta = eps ** (1.0 / 3.0)
    le = math.log(eps)
    a = (math.log(base.c) - 5 * math.log(base.gamma) - math.log(delta)
         + (5 * base.tau + 19) * math.log(K) + 5.0 / 3.0 * le)
    b = 7.0 / 6.0 * le
    log_next = max(a, b) + math.log1p(math.exp(min(a, b) - max(a, b)))
    return StepConstants(nu, delta, r, eps, K, eta, s, rho_at(base.rho, nu), L,
                         r - 2 * delta, eta * s / 4, rho_at(base.rho, nu + 1), L + eps,
                         log_next)


def schedule_step(base: KamBase, nu: int, eps: Optional[float] = None) -> StepConstants:
    """Constants of step ``nu`` of the theoretical schedule.

    The recursion starts from the base values and advances ``eps`` by the
    theoretical update.  Passing ``eps`` overrides the value at step ``nu``
    only (the driver uses measured norms).
    """
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    r, s, e, L = base.r, base.s, base.eps0, base.L
    for k in range(nu):
        st = _step(base, k, r, s, e, L)
        r, s, L = st.r_next, st.s_next, st.L_next
        e = st.eps_next
        if not 0 < e < 1:
            raise ValueError(f"theoretical eps leaves (0, 1) at step {k + 1}")
    return _step(base, nu, r, s, e if eps is None else eps, L)


def schedule_table(base: KamBase, nu_max: int) -> list:
    """Schedule constants for ``nu = 0..nu_max`` with the recursion run on
    ``eps`` at its own step (``eps`` fixed at ``eps0`` when the theoretical
    update leaves the unit interval)."""
    out = []
    r, s, L = base.r, base.s, base.L
    e = base.eps0
    for nu in range(nu_max + 1):
        st = _step(base, nu, r, s, e, L)
        out.append(st)
        r, s, L = st.r_next, st.s_next, st.L_next
        en = st.eps_next
        e = en if 0 < en < 1 else e
    return out


# ---------------------------------------------------------------------------
# state and step
# ---------------------------------------------------------------------------

@dataclass
class KamOptions:
    """Numerical options of a step.

    Attributes
    ----------
    order : int
        Highest nested bracket kept in the transformed remainder.
    prune_rel : float
        Terms of ``P`` and ``F`` with norm weight below ``prune_rel`` times
        the field norm are dropped.
    cut_rel : float
        Bracket pair cut relative to ``||P||`` on the new domain.
    series_tol : float
        Nested-bracket terms below ``series_tol * ||P||`` end the series.
    check_divisors : bool
        Refuse blocks below ``gamma / K^tau``.
    toeplitz_probes : int
        Number of probes drawn for the structure check.
    """

    order: int = 6
    prune_rel: float = 1e-16
    cut_rel: float = 1e-14
    series_tol: float = 1e-14
    check_divisors: bool = True
    toeplitz_probes: int = 6


@dataclass
class KamState:
    """State of the iteration at step ``nu``.

    ``dom`` is the step domain, ``P`` the perturbation and ``transforms``
    the list of generators ``F_0, F_1, ...`` already applied.
    """

    nu: int
    nf: NormalFormData
    P: PolyVectorField
    dom: DomainParams
    zeta: object = None
    L: float = 0.0
    accepted: bool = True
    transforms: list = field(default_factory=list)

    @property
    def eps(self) -> float:
        return self.P.norm(self.dom)


@dataclass
class StepReport:
    """Measurements of one step.

    ``drift`` holds the largest changes of ``omega``, ``Omega`` (both
    families) and the couplings; ``R_norm`` bounds all of them.
    """

    nu: int
    constants: StepConstants
    eps: float
    eps_next: float
    R_norm: float
    F_norm: float
    drift: dict
    reversibility: float
    momentum_violations: int
    toeplitz_max: float
    toeplitz_budget: float
    series_norms: list
    skipped_bound: float
    pruned: float
    solve: SolveReport
    terms: int

    @property
    def ratio_76(self) -> float:
        """``eps_next / eps^(7/6)``."""
        return self.eps_next / self.eps ** (7.0 / 6.0) if self.eps > 0 else 0.0

    def row(self) -> dict:
        c = self.constants
        return {"nu": self.nu, "eps": self.eps, "eps_next": self.eps_next,
                "ratio_7_6": self.ratio_76, "K": c.K, "delta": c.delta, "r": c.r,
                "s": c.s, "rho": c.rho, "eta": c.eta, "R_norm": self.R_norm,
                "F_norm": self.F_norm, "reversibility": self.reversibility,
                "momentum_violations": self.momentum_violations,
                "toeplitz_max": self.toeplitz_max, "skipped_bound": self.skipped_bound,
                "pruned": self.pruned, "terms": self.terms,
                **{f"drift_{k}": v for k, v in self.drift.items()}}


class ZetaExcluded(RuntimeError):
    """The parameter fails a divisor threshold at this step."""

    def __init__(self, msg, nu, cause):
        super().__init__(msg)
        self.nu = nu
        self.cause = cause


class StepFailure(RuntimeError):
    """A step failed for numerical reasons; ``nu`` is the step index."""

    def __init__(self, msg, nu):
        super().__init__(msg)
        self.nu = nu


def initial_state(nf: NormalFormData, P: PolyVectorField, base: KamBase, zeta=None) -> KamState:
    return KamState(0, nf, P, DomainParams(base.r, base.s, base.rho), zeta, base.L)


def _drift(old: NormalFormData, new: NormalFormData) -> dict:
    def mx(a, b):
        return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))
    return {"omega": max(mx(old.omega, new.omega), mx(old.omegatilde, new.omegatilde)),
            "Omega": max(mx(old.Omega, new.Omega), mx(old.Omegatilde, new.Omegatilde)),
            "A": max(mx(old.A, new.A), mx(old.Atilde, new.Atilde))}


def toeplitz_check(P: PolyVectorField, dom: DomainParams, probes: int = 6,
                   seed: int = 0) -> float:
    """Largest defect over probes ``d P^(z_{i+tc}) / d z_{j+tc}`` and the
    ``w`` and mixed analogues along lattice axes."""
    cfg = P.cfg
    if not P.terms or probes <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    fams = [("z", "z", 1), ("w", "w", 1), ("z", "w", 1), ("w", "z", 1),
            ("z", "zbar", -1), ("w", "wbar", -1)]
    worst = 0.0
    R = cfg.radius
    for p in range(probes):
        fam = fams[p % len(fams)]
        axis = p % cfg.d
        c = tuple(1 if a == axis else 0 for a in range(cfg.d))
        i = tuple(int(x) for x in rng.integers(-R // 2, R // 2 + 1, cfg.d))
        j = tuple(int(x) for x in rng.integers(-R // 2, R // 2 + 1, cfg.d))
        pr = toeplitz_probe(P, fam, i, j, c, range(1, R + 1), dom)
        worst = max(worst, pr.max_defect)
    return worst


def kam_step(state: KamState, base: KamBase, options: Optional[KamOptions] = None):
    """One KAM step.

    Returns
    -------
    (KamState, StepReport)

    Raises
    ------
    ZetaExcluded
        A divisor of the step falls below ``gamma / K^tau``.
    StepFailure
        The nested-bracket series grows.
    """
    opt = options or KamOptions()
    nu = state.nu
    dom = state.dom
    P = state.P
    eps = P.norm(dom)
    if eps <= 0.0:
        st = _step(base, nu, dom.r, dom.s, 0.5, state.L)
        new = KamState(nu + 1, state.nf, P, st.domain_next, state.zeta, state.L,
                       state.accepted, list(state.transforms) + [PolyVectorField(P.cfg)])
        rep = StepReport(nu, st, 0.0, 0.0, 0.0, 0.0, {"omega": 0.0, "Omega": 0.0, "A": 0.0},
                         0.0, 0, 0.0, 0.0, [], 0.0, 0.0, SolveReport(), 0)
        return new, rep
    if eps >= 1.0:
        raise StepFailure(f"perturbation norm {eps:.3e} is not small", nu)
    st = _step(base, nu, dom.r, dom.s, eps, state.L)
    dom_new = st.domain_next

    Pk = P.drop_below(dom, opt.prune_rel * eps)
    pruned = (P - Pk).norm(dom) if len(Pk) != len(P) else 0.0
    R = truncate_R(Pk, TruncationSpec(st.K))
    R_norm = R.norm(dom)
    delta, NR = normal_part(R)
    solve_rep = SolveReport()
    try:
        if opt.check_divisors:
            F = solve_homological(state.nf, R, state.zeta, base.gamma, base.tau, st.K, solve_rep)
        else:
            F = solve_homological(state.nf, R, state.zeta, report=solve_rep)
    except HomologicalError as exc:
        raise ZetaExcluded(f"step {nu}: {exc}", nu, exc) from exc
    nf_new = delta.apply(state.nf)
    F = F.drop_below(dom, opt.prune_rel * max(F.norm(dom), 1e-300))

    cut = opt.cut_rel * eps
    stats = BracketStats()
    PF = lie_bracket(Pk, F, dom=dom_new, cut=cut, stats=stats)
    Pn = (Pk - R) + PF
    Y = NR - R + PF
    series = []
    tol = opt.series_tol * eps
    prev = math.inf
    for n in range(2, opt.order + 1):
        Y = lie_bracket(Y, F, dom=dom_new, cut=cut * n, stats=stats).scale(1.0 / n)
        cur = Y.norm(dom_new)
        series.append(cur)
        if cur > prev and cur > tol:
            raise StepFailure(f"step {nu}: bracket series term {n} grows ({cur:.3e})", nu)
        prev = cur
        Pn = Pn + Y
        if cur <= tol:
            break
    e_raw = Pn.norm(dom_new)
    Pn = Pn.drop_below(dom_new, opt.prune_rel * e_raw)
    eps_new = Pn.norm(dom_new)

    rep = StepReport(
        nu=nu, constants=st, eps=eps, eps_next=eps_new, R_norm=R_norm, F_norm=F.norm(dom),
        drift=_drift(state.nf, nf_new),
        reversibility=reversibility_defect(Pn, dom_new),
        momentum_violations=len(check_momentum(Pn)),
        toeplitz_max=toeplitz_check(Pn, dom_new, opt.toeplitz_probes, seed=nu),
        toeplitz_budget=eps_new, series_norms=series,
        skipped_bound=stats.skipped_bound, pruned=pruned, solve=solve_rep, terms=len(Pn))
    new = KamState(nu + 1, nf_new, Pn, dom_new, state.zeta, st.L_next, True,
                   list(state.transforms) + [F])
    return new, rep


@dataclass
class IterationResult:
    """Output of :func:`iterate`."""

    norms: list
    reports: list
    state: KamState
    frequencies: list
    Omega_drift: list
    error: Optional[Exception] = None

    @property
    def log_decrements(self) -> np.ndarray:
        lg = np.log(np.asarray(self.norms))
        return -np.diff(lg)


def iterate(state0: KamState, base: KamBase, nu_max: int = 6, target: float = 1e-12,
            options: Optional[KamOptions] = None, raise_errors: bool = True) -> IterationResult:
    """Run steps until ``nu_max`` steps are done or ``||P|| <= target``.

    Errors carry the step index.  With ``raise_errors`` off the partial
    result is returned with ``error`` set.
    """
    if nu_max < 1:
        raise ValueError("nu_max must be at least 1")
    state = state0
    norms = [state.eps]
    freqs = [state.nf.freqs.copy()]
    om = [0.0]
    reports = []
    err = None
    nf0 = state0.nf
    while state.nu < state0.nu + nu_max and norms[-1] > target:
        try:
            state, rep = kam_step(state, base, options)
        except (ZetaExcluded, StepFailure) as exc:
            if raise_errors:
                raise
            err = exc
            state.accepted = not isinstance(exc, ZetaExcluded)
            break
        reports.append(rep)
        norms.append(rep.eps_next)
        freqs.append(state.nf.freqs.copy())
        om.append(max(float(np.max(np.abs(state.nf.Omega - nf0.Omega), initial=0.0)),
                      float(np.max(np.abs(state.nf.Omegatilde - nf0.Omegatilde), initial=0.0))))
    return IterationResult(norms, reports, state, freqs, om, err)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def trivial_point(cfg: LatticeConfig, angles) -> np.ndarray:
    x = np.zeros(cfg.dim, complex)
    x[:cfg.nt] = np.asarray(angles, float)
    return x


def flow(F: PolyVectorField, x: np.ndarray, t: float = 1.0, rtol: float = 1e-12,
         atol: float = 1e-20) -> np.ndarray:
    """Time-``t`` flow of ``F`` from ``x``."""
    if F.is_zero():
        return np.asarray(x, complex).copy()
    n = F.cfg.dim

    def rhs(_, y):
        v = F.evaluate(y[:n] + 1j * y[n:])
        return np.concatenate([v.real, v.imag])

    x = np.asarray(x, complex)
    sol = solve_ivp(rhs, (0.0, t), np.concatenate([x.real, x.imag]), method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    y = sol.y[:, -1]
    return y[:n] + 1j * y[n:]


@dataclass
class Embedding:
    """Torus embedding ``(theta, phi) -> phase point`` and its frequencies."""

    cfg: LatticeConfig
    transforms: list
    frequencies: np.ndarray

    def __call__(self, angles) -> np.ndarray:
        x = trivial_point(self.cfg, angles)
        for F in reversed(self.transforms):
            x = flow(F, x)
        return x

    def distance_from_trivial(self, samples: int = 4, seed: int = 0) -> float:
        """Sup over random angles of the non-angle part plus the angle shift."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(samples):
            a = rng.uniform(0, 2 * np.pi, self.cfg.nt)
            worst = max(worst, float(np.max(np.abs(self(a) - trivial_point(self.cfg, a)))))
        return worst


def extract_embedding(state: KamState) -> Embedding:
    """Compose the accumulated time-1 flows into a torus embedding.

    The embedding is ``phi_{F_0} o phi_{F_1} o ... o phi_{F_nu}`` applied
    to the trivial torus ``I = J = z = w = 0``.
    """
    return Embedding(state.nf.cfg, list(state.transforms), state.nf.freqs.copy())


def phase_distance(cfg: LatticeConfig, x: np.ndarray, y: np.ndarray) -> float:
    """Sup distance of two phase points, angles taken modulo ``2 pi``."""
    d = np.abs(np.asarray(x) - np.asarray(y))
    nt = cfg.nt
    ang = np.abs((np.real(np.asarray(x)[:nt] - np.asarray(y)[:nt]) + np.pi) % (2 * np.pi) - np.pi)
    return float(max(np.max(ang, initial=0.0), np.max(d[nt:], initial=0.0)))


@dataclass
class TorusCheck:
    """Distance of a simulated orbit from the embedded torus and its frequencies."""

    times: np.ndarray
    distances: np.ndarray
    trajectory: object

    @property
    def max_distance(self) -> float:
        return float(np.max(self.distances, initial=0.0))


def torus_orbit_check(model, zeta, emb: Embedding, T: float = 50.0, dt: float = 0.05,
                      angles=None, checkpoints: int = 11, order: int = 4) -> TorusCheck:
    """Simulate the lattice system from ``emb(angles)`` and compare with
    ``emb(angles + omega t)`` at evenly spaced checkpoints."""
    from .nls import psi_inverse, sim_state_from_phase, simulate

    cfg = emb.cfg
    a0 = np.zeros(cfg.nt) if angles is None else np.asarray(angles, float)
    x0 = emb(a0)
    traj = simulate(model, zeta, sim_state_from_phase(model, x0), T, dt, order=order)
    idx = np.unique(np.linspace(0, len(traj.times) - 1, checkpoints).round().astype(int))
    dist = []
    for k in idx:
        t = traj.times[k]
        x_sim = psi_inverse(model, traj.q[k], traj.p[k])
        dist.append(phase_distance(cfg, x_sim, emb(a0 + emb.frequencies * t)))
    return TorusCheck(traj.times[idx], np.array(dist), traj)
