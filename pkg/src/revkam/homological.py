"""Truncation, normal part and the homological equation ``[N + A, F] + R = [R]``.

The operator ``L F = [N + A, F]`` maps a Fourier-Taylor mode of ``F`` to a
combination of at most four modes: the couplings ``A_j``, ``Atilde_j`` mix
``z_j`` with ``w_j`` on shared sites, both in the component and in the
monomial.  Modes are grouped into closed blocks of size 1, 2 or 4 and each
block is solved directly.  The block families are

* ``sheq1``: scalar, no normal variable involved (pure Fourier division);
* ``sheq2``: scalar with a normal frequency;
* ``sheq3``: 2x2 systems (one shared site involved);
* ``sheq4``: 4x4 systems (shared site in component and monomial).
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lattice import LatticeConfig
from .vfield import (DomainParams, NormalFormData, PolyVectorField, as_vector_field,
                     lie_bracket)


class HomologicalError(ArithmeticError):
    """Raised when a needed block is (nearly) singular.

    Attributes
    ----------
    family : str
        Block family label.
    k : tuple
        Fourier mode of the offending block.
    basis : list
        ``(component, monomial)`` basis of the block.
    det : float
        Absolute determinant of the block.
    """

    def __init__(self, msg, family=None, k=None, basis=None, det=None):
        super().__init__(msg)
        self.family = family
        self.k = k
        self.basis = basis
        self.det = det


@dataclass(frozen=True)
class TruncationSpec:
    """Fourier cutoff ``|k| + |ktilde| <= K`` and the jet rule."""

    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")


def in_jet(cfg: LatticeConfig, comp: int, mono) -> bool:
    """Jet rule: degree 0 on angle components, degree at most 1 elsewhere."""
    deg = sum(mono[1]) + sum(e for _, e in mono[2])
    return deg == 0 if comp < cfg.nt else deg <= 1


def truncate_R(P: PolyVectorField, spec: TruncationSpec) -> PolyVectorField:
    """Keep the monomials of ``P`` satisfying the jet rule with ``|k|_1 <= K``."""
    cfg = P.cfg
    K = spec.K
    return P.filter(lambda v, m: sum(abs(x) for x in m[0]) <= K and in_jet(cfg, v, m))


# ---------------------------------------------------------------------------
# normal part
# ---------------------------------------------------------------------------

@dataclass
class NormalFormDelta:
    """Increments of the normal form produced by ``[R]``."""

    domega: np.ndarray
    dOmega: np.ndarray
    dOmegatilde: np.ndarray
    dA: np.ndarray
    dAtilde: np.ndarray

    def apply(self, nf: NormalFormData) -> NormalFormData:
        n = nf.cfg.n
        return NormalFormData(nf.cfg, nf.omega + self.domega[:n], nf.omegatilde + self.domega[n:],
                              nf.Omega + self.dOmega, nf.Omegatilde + self.dOmegatilde,
                              nf.A + self.dA, nf.Atilde + self.dAtilde)

    def max_abs(self) -> dict:
        return {k: float(np.max(np.abs(getattr(self, k)), initial=0.0))
                for k in ("domega", "dOmega", "dOmegatilde", "dA", "dAtilde")}

    def is_zero(self) -> bool:
        return all(v == 0 for v in self.max_abs().values())


def _is_normal_part(cfg: LatticeConfig, comp: int, mono) -> bool:
    k, l, nrm = mono
    if any(k):
        return False
    nt = cfg.nt
    if comp < nt:
        return not any(l) and not nrm
    if comp < 2 * nt or any(l) or len(nrm) != 1 or nrm[0][1] != 1:
        return False
    v = comp - 2 * nt
    u = nrm[0][0]
    if u == v:
        return True
    # cross term at the same shared site with the same sign
    kv, sv = cfg.var_info(v)
    ku, su = cfg.var_info(u)
    return sv == su and {kv, ku} in ({"z", "w"}, {"zbar", "wbar"})


def normal_part(R: PolyVectorField, imag_tol: float = 1e-8):
    """Normal part ``[R]`` as a field and as normal-form increments.

    ``omega_+ = omega + [R^theta]``, ``Omega_+ = Omega - i [R^{zz}]``,
    ``A_+ = A - i [R^{zw}]``, ``Atilde_+ = Atilde - i [R^{wz}]`` (and the
    ``w`` analogues).  Conjugate entries are checked for consistency.

    Raises
    ------
    ValueError
        If an increment has an imaginary part above ``imag_tol`` relative to
        the largest increment (a reversibility violation upstream).
    """
    cfg = R.cfg
    nt = cfg.nt
    n1, n2 = len(cfg.normal1), len(cfg.normal2)
    shared_pos = {s: i for i, s in enumerate(cfg.shared)}
    NR = R.filter(lambda v, m: _is_normal_part(cfg, v, m))
    domega = np.zeros(nt, complex)
    dOm = np.zeros(n1, complex)
    dOmt = np.zeros(n2, complex)
    dA = np.zeros(len(cfg.shared), complex)
    dAt = np.zeros(len(cfg.shared), complex)
    conj_vals = []
    for (v, m), c in NR.terms.items():
        if v < nt:
            domega[v] += c
            continue
        kv, sv = cfg.comp_info(v)
        ku, _ = cfg.var_info(m[2][0][0])
        sign = 1 if kv in ("z", "w") else -1
        inc = -1j * c if sign > 0 else 1j * c
        if sign < 0:
            conj_vals.append(((kv, ku, sv), inc))
            continue
        if kv == "z" and ku == "z":
            dOm[cfg._pos1[sv]] += inc
        elif kv == "w" and ku == "w":
            dOmt[cfg._pos2[sv]] += inc
        elif kv == "z":
            dA[shared_pos[sv]] += inc
        else:
            dAt[shared_pos[sv]] += inc
    allinc = np.concatenate([domega, dOm, dOmt, dA, dAt])
    scale = float(np.max(np.abs(allinc), initial=0.0))
    if scale > 0 and float(np.max(np.abs(allinc.imag))) > imag_tol * scale:
        raise ValueError("normal-form increment is not real: reversibility violated upstream")
    # the conjugate entries must reproduce the same real increments
    lookup = {("zbar", "zbar"): (dOm, cfg._pos1), ("wbar", "wbar"): (dOmt, cfg._pos2),
              ("zbar", "wbar"): (dA, shared_pos), ("wbar", "zbar"): (dAt, shared_pos)}
    for (kv, ku, sv), inc in conj_vals:
        arr, pos = lookup[(kv, ku)]
        if abs(inc - arr[pos[sv]]) > imag_tol * max(scale, abs(inc)) + 1e-300:
            raise ValueError("conjugate normal-part entries are inconsistent")
    delta = NormalFormDelta(domega.real.copy(), dOm.real.copy(), dOmt.real.copy(),
                            dA.real.copy(), dAt.real.copy())
    return delta, NR


# ---------------------------------------------------------------------------
# block structure of ad_{N+A}
# ---------------------------------------------------------------------------

@dataclass
class _Ctx:
    cfg: LatticeConfig
    freqs: np.ndarray
    omega_var: np.ndarray      # normal frequency of each normal variable id
    partner: dict              # normal id -> partner id (z_j <-> w_j, same sign) on shared sites
    coup: dict                 # normal id -> coupling entering (N+A)^{u} in front of its partner


def _context(nf: NormalFormData) -> _Ctx:
    cfg = nf.cfg
    n1, n2 = len(cfg.normal1), len(cfg.normal2)
    omv = np.concatenate([nf.Omega, nf.Omega, nf.Omegatilde, nf.Omegatilde])
    partner, coup = {}, {}
    for idx, s in enumerate(cfg.shared):
        for zk, wk in (("z", "w"), ("zbar", "wbar")):
            zv, wv = cfg.var(zk, s), cfg.var(wk, s)
            partner[zv], partner[wv] = wv, zv
            coup[zv] = nf.A[idx]       # (N+A)^{z} = i sigma (Omega z + A w)
            coup[wv] = nf.Atilde[idx]  # (N+A)^{w} = i sigma (Omegatilde w + Atilde z)
    return _Ctx(cfg, nf.freqs, omv, partner, coup)


def _block_basis(ctx: _Ctx, comp: int, mono):
    """All basis elements of the closed block containing ``(comp, mono)``."""
    nt2 = 2 * ctx.cfg.nt
    comps = [comp]
    if comp >= nt2 and (comp - nt2) in ctx.partner:
        comps.append(nt2 + ctx.partner[comp - nt2])
    monos = [mono]
    k, l, nrm = mono
    if len(nrm) == 1 and nrm[0][1] == 1 and nrm[0][0] in ctx.partner:
        monos.append((k, l, ((ctx.partner[nrm[0][0]], 1),)))
    return [(c, m) for c in sorted(comps) for m in sorted(monos, key=lambda x: x[2])]


def _apply_L(ctx: _Ctx, comp: int, mono) -> dict:
    """``[N + A, e]`` for the basis field ``e = mono d/d comp`` as ``{(comp, mono): coef}``."""
    cfg = ctx.cfg
    nt2 = 2 * cfg.nt
    sgn = cfg.var_sign
    k, l, nrm = mono
    out = defaultdict(complex)
    diag = -1j * float(np.dot(k, ctx.freqs))
    if comp >= nt2:
        v = comp - nt2
        diag += 1j * sgn[v] * ctx.omega_var[v]
        if v in ctx.partner:
            # F^{z} feeds (N+A)^{w} through Atilde, F^{w} feeds (N+A)^{z} through A
            out[(nt2 + ctx.partner[v], mono)] += 1j * sgn[v] * ctx.coup[ctx.partner[v]]
    for u, e in nrm:
        diag += -1j * sgn[u] * e * ctx.omega_var[u]
        if u in ctx.partner:
            rest = dict(nrm)
            rest[u] -= 1
            if rest[u] == 0:
                del rest[u]
            p = ctx.partner[u]
            rest[p] = rest.get(p, 0) + 1
            out[(comp, (k, l, tuple(sorted(rest.items()))))] += -1j * sgn[u] * e * ctx.coup[u]
    out[(comp, mono)] += diag
    return dict(out)


def _family(cfg: LatticeConfig, basis) -> str:
    if len(basis) == 4:
        return "sheq4"
    if len(basis) == 2:
        return "sheq3"
    comp, mono = basis[0]
    if comp < 2 * cfg.nt and not mono[2]:
        return "sheq1"
    return "sheq2"


def block_matrix(nf: NormalFormData, comp: int, mono):
    """Basis and matrix of ``[N + A, .]`` on the block containing ``(comp, mono)``."""
    ctx = _context(nf)
    basis = _block_basis(ctx, comp, mono)
    return basis, _matrix(ctx, basis)


def _matrix(ctx, basis):
    index = {b: i for i, b in enumerate(basis)}
    L = np.zeros((len(basis), len(basis)), complex)
    for j, b in enumerate(basis):
        for key, c in _apply_L(ctx, *b).items():
            L[index[key], j] += c
    return L


@dataclass
class SolveReport:
    """Per-family statistics of a homological solve."""

    counts: dict = field(default_factory=dict)
    min_det: dict = field(default_factory=dict)
    max_cond: dict = field(default_factory=dict)
    threshold: Optional[float] = None

    def rows(self):
        for fam in sorted(self.counts):
            yield dict(family=fam, blocks=self.counts[fam], min_det=self.min_det.get(fam),
                       max_cond=self.max_cond.get(fam), threshold=self.threshold)


def solve_homological(nf: NormalFormData, R: PolyVectorField, zeta=None,
                      gamma: Optional[float] = None, tau: Optional[float] = None,
                      K: Optional[int] = None, report: Optional[SolveReport] = None,
                      sing_tol: float = 1e-300) -> PolyVectorField:
    """Solve ``[N + A, F] + R = [R]`` with ``[F] = 0``.

    Parameters
    ----------
    nf : NormalFormData
        Normal form at the sampled parameter (``zeta`` is informational; the
        frequencies in ``nf`` already encode it).
    R : PolyVectorField
        Truncated perturbation.
    gamma, tau, K : optional
        When all given, every block with a nonzero right-hand side must have
        ``|det| >= gamma / K**tau``.
    report : SolveReport, optional
        Filled with per-family block counts, minimal determinants and
        condition numbers.

    Raises
    ------
    HomologicalError
        A needed block has determinant below the threshold.
    """
    cfg = R.cfg
    ctx = _context(nf)
    _, NR = normal_part(R) if R.terms else (None, PolyVectorField(cfg))
    G = R - NR
    thr = None
    if gamma is not None and tau is not None and K is not None:
        thr = math.exp(math.log(gamma) - tau * math.log(K)) if gamma > 0 else 0.0
    if report is not None:
        report.threshold = thr
    seen = set()
    groups = defaultdict(list)
    for key in G.terms:
        if key in seen:
            continue
        basis = _block_basis(ctx, *key)
        seen.update(basis)
        groups[len(basis)].append(basis)
    out = {}
    for size, blocks in groups.items():
        mats = np.array([_matrix(ctx, b) for b in blocks])
        rhs = np.array([[-G.terms.get(e, 0j) for e in b] for b in blocks])
        dets = np.abs(np.linalg.det(mats)) if size > 1 else np.abs(mats[:, 0, 0])
        fams = [_family(cfg, b) for b in blocks]
        for i, b in enumerate(blocks):
            if dets[i] <= sing_tol or (thr is not None and dets[i] < thr):
                raise HomologicalError(
                    f"divisor {dets[i]:.3e} below threshold at k={b[0][1][0]} ({fams[i]})",
                    fams[i], b[0][1][0], b, float(dets[i]))
        if size == 1:
            sol = rhs / mats[:, :, 0]
        elif size == 2:
            a, bb, c, d = mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 0], mats[:, 1, 1]
            det = a * d - bb * c
            sol = np.stack([(d * rhs[:, 0] - bb * rhs[:, 1]) / det,
                            (a * rhs[:, 1] - c * rhs[:, 0]) / det], axis=1)
        else:
            sol = np.linalg.solve(mats, rhs[..., None])[..., 0]
        if report is not None:
            conds = np.linalg.cond(mats) if size > 1 else np.ones(len(blocks))
            for fam, dt, cn in zip(fams, dets, conds):
                report.counts[fam] = report.counts.get(fam, 0) + 1
                report.min_det[fam] = min(report.min_det.get(fam, math.inf), float(dt))
                report.max_cond[fam] = max(report.max_cond.get(fam, 0.0), float(cn))
        for b, x in zip(blocks, sol):
            for e, val in zip(b, x):
                if val != 0:
                    out[e] = complex(val)
    return PolyVectorField(cfg, out)


def residual(nf: NormalFormData, F: PolyVectorField, R: PolyVectorField,
             dom: DomainParams) -> float:
    """``|| [N + A, F] + R - [R] ||`` on ``dom``."""
    _, NR = normal_part(R) if R.terms else (None, PolyVectorField(R.cfg))
    return (lie_bracket(as_vector_field(nf), F) + R - NR).norm(dom)


def dense_sheq4_oracle(a: float, Mi: np.ndarray, Mj: np.ndarray, rho: int, sigma: int,
                       rhs: np.ndarray) -> np.ndarray:
    """Solve ``(a I4 - rho Mi (x) I2 + sigma I2 (x) Mj^T) (i F) = rhs`` densely.

    ``F`` and ``rhs`` are ordered ``(zz, zw, wz, ww)`` where the first letter
    is the component at site ``i`` and the second the variable at site ``j``.
    """
    I2 = np.eye(2)
    T = a * np.eye(4) - rho * np.kron(Mi, I2) + sigma * np.kron(I2, Mj.T)
    return np.linalg.solve(T, rhs) / 1j


def check_divisors(nf: NormalFormData, K: int, gamma: float, tau: float,
                   include_zero_mode: bool = False):
    """Margins ``|divisor| - gamma / K^tau`` of every small-divisor condition.

    Covers the scalar divisors, the 2x2 determinants ``det((x + c) I +- M_j)``
    and the 4x4 determinants over ``0 < |k| + |ktilde| <= K`` and all sites
    in the truncation.  Returns a report with the minimal margin and the
    tuple attaining it; a negative margin flags a resonant parameter.
    """
    from .resonance import divisor_report
    return divisor_report(nf, K, gamma, tau, include_zero_mode=include_zero_mode)
