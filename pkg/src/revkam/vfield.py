"""Sparse Taylor-Fourier polynomial vector fields.

A field is a map ``(component, monomial) -> complex`` where the component is
a coordinate index of :class:`~revkam.lattice.LatticeConfig` and the monomial
is a ``(k, l, nrm)`` tuple (see :mod:`revkam.lattice`).  Fields are treated as
immutable values; every operation returns a new field.

Bracket convention: component ``v`` of ``[X, Y]`` is
``sum_u (Y^u d_u X^v - X^u d_u Y^v)``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .lattice import LatticeConfig, MultiIndexMonomial, site_norm

DROP_TOL = 1e-14


@dataclass(frozen=True)
class DomainParams:
    """Complex neighbourhood ``D_rho(r, s)`` of the trivial torus."""

    r: float
    s: float
    rho: float

    def __post_init__(self):
        if not (self.r > 0 and self.s > 0 and self.rho > 0):
            raise ValueError("r, s and rho must be positive")


# ---------------------------------------------------------------------------
# monomial arithmetic
# ---------------------------------------------------------------------------

def mono_mul(m1, m2):
    """Product of two monomials."""
    k1, l1, n1 = m1
    k2, l2, n2 = m2
    k = tuple([a + b for a, b in zip(k1, k2)])
    l = tuple([a + b for a, b in zip(l1, l2)])
    if not n1:
        nrm = n2
    elif not n2:
        nrm = n1
    else:
        d = dict(n1)
        for v, e in n2:
            d[v] = d.get(v, 0) + e
        nrm = tuple(sorted(d.items()))
    return (k, l, nrm)


def mono_degree(m) -> int:
    """Total degree in actions and normal variables."""
    return sum(m[1]) + sum(e for _, e in m[2])


def normal_degree(m) -> int:
    return sum(e for _, e in m[2])


def _shape_ratio(g, a):
    """Growth of the monomial shape factor when one exponent ``a`` of a group of degree ``g`` drops by one."""
    def pw(x):
        return x ** x if x > 0 else 1.0
    return pw(g) * pw(a - 1) / (pw(g - 1) * pw(a))


def _derivatives(m, nt, bounds=None):
    """Partial derivatives of a monomial: list of ``(coord, factor, weight factor, monomial)``.

    The weight factor bounds the ratio between the norm weight of the
    derivative (on its variable's component) and that of ``m``.
    """
    k, l, nrm = m
    out = []
    for a in range(nt):
        if k[a]:
            out.append((a, 1j * k[a], abs(k[a]), m))
    for a in range(nt):
        if l[a]:
            ll = list(l)
            ll[a] -= 1
            out.append((nt + a, l[a], l[a], (k, tuple(ll), nrm)))
    base = 2 * nt
    gdeg = None
    if bounds is not None:
        gdeg = defaultdict(int)
        for v, e in nrm:
            gdeg[int(np.searchsorted(bounds, v, side="right"))] += e
    for idx, (v, e) in enumerate(nrm):
        if e == 1:
            rest = nrm[:idx] + nrm[idx + 1:]
        else:
            rest = nrm[:idx] + ((v, e - 1),) + nrm[idx + 1:]
        wf = e
        if gdeg is not None:
            wf = e * _shape_ratio(gdeg[int(np.searchsorted(bounds, v, side="right"))], e)
        out.append((base + v, e, wf, (k, l, rest)))
    return out


# ---------------------------------------------------------------------------
# the field type
# ---------------------------------------------------------------------------

class PolyVectorField:
    """Sparse polynomial vector field on the phase space of ``cfg``.

    Parameters
    ----------
    cfg : LatticeConfig
        Variable layout.
    terms : mapping
        ``{(component, monomial): coefficient}``.  Exact zeros are dropped.
    """

    __slots__ = ("cfg", "terms", "_cache")

    def __init__(self, cfg: LatticeConfig, terms: Optional[Mapping] = None):
        self.cfg = cfg
        self.terms = {key: complex(c) for key, c in (terms or {}).items() if c != 0}
        self._cache = {}

    # -- basic protocol ----------------------------------------------------
    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms.items())

    def __repr__(self):
        return f"PolyVectorField({len(self.terms)} terms)"

    def is_zero(self) -> bool:
        return not self.terms

    def coef(self, comp: int, mono) -> complex:
        return self.terms.get((comp, tuple(mono)), 0j)

    def __add__(self, other: "PolyVectorField") -> "PolyVectorField":
        out = dict(self.terms)
        for key, c in other.terms.items():
            out[key] = out.get(key, 0j) + c
        return PolyVectorField(self.cfg, out)

    def __sub__(self, other: "PolyVectorField") -> "PolyVectorField":
        return self + other.scale(-1.0)

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, a: complex) -> "PolyVectorField":
        return PolyVectorField(self.cfg, {key: a * c for key, c in self.terms.items()})

    def filter(self, pred: Callable) -> "PolyVectorField":
        """Keep terms for which ``pred(comp, mono)`` is true."""
        return PolyVectorField(self.cfg, {key: c for key, c in self.terms.items() if pred(*key)})

    def drop(self, rel_tol: float = DROP_TOL) -> "PolyVectorField":
        """Remove coefficients below ``rel_tol`` times the largest one."""
        if not self.terms:
            return self
        cmax = max(abs(c) for c in self.terms.values())
        cut = rel_tol * cmax
        return PolyVectorField(self.cfg, {key: c for key, c in self.terms.items() if abs(c) > cut})

    def by_component(self) -> dict:
        """``{component: [(monomial, coefficient), ...]}``."""
        out = self._cache.get("bycomp")
        if out is None:
            out = defaultdict(list)
            for (v, m), c in self.terms.items():
                out[v].append((m, c))
            out = dict(out)
            self._cache["bycomp"] = out
        return out

    def component_kinds(self) -> dict:
        """Number of terms per component kind."""
        out = defaultdict(int)
        for (v, _m) in self.terms:
            out[self.cfg.comp_info(v)[0]] += 1
        return dict(out)

    def max_abs_diff(self, other: "PolyVectorField") -> float:
        """Largest coefficient-wise difference."""
        keys = set(self.terms) | set(other.terms)
        return max((abs(self.terms.get(k, 0j) - other.terms.get(k, 0j)) for k in keys), default=0.0)

    # -- compiled arrays for fast evaluation and norms -------------------------
    def _compiled(self):
        comp = self._cache.get("compiled")
        if comp is not None:
            return comp
        cfg = self.cfg
        nt = cfg.nt
        T = len(self.terms)
        keys = list(self.terms)
        comps = np.fromiter((v for v, _ in keys), dtype=np.int64, count=T)
        coefs = np.fromiter(self.terms.values(), dtype=complex, count=T)
        K = np.array([m[0] for _, m in keys], dtype=float).reshape(T, nt)
        L = np.array([m[1] for _, m in keys], dtype=np.int64).reshape(T, nt)
        width = max((len(m[2]) for _, m in keys), default=0)
        NV = np.full((T, max(width, 1)), cfg.n_normal_vars, dtype=np.int64)
        NE = np.zeros((T, max(width, 1)), dtype=np.int64)
        for t, (_, m) in enumerate(keys):
            for q, (v, e) in enumerate(m[2]):
                NV[t, q] = v
                NE[t, q] = e
        comp = dict(keys=keys, comps=comps, coefs=coefs, K=K, L=L, NV=NV, NE=NE)
        self._cache["compiled"] = comp
        return comp

    def _norm_profile(self):
        """Per-term data for the majorant norm, independent of the domain."""
        prof = self._cache.get("normprof")
        if prof is not None:
            return prof
        cfg = self.cfg
        c = self._compiled()
        nt = cfg.nt
        vnorm = np.append(cfg.var_norm, 0.0)
        ne = c["NE"]
        nv = c["NV"]
        knorm = np.abs(c["K"]).sum(axis=1)
        ldeg = c["L"].sum(axis=1)
        ndeg = ne.sum(axis=1)
        jweight = (ne * vnorm[nv]).sum(axis=1)
        # group id 0..3 for z, zbar, w, wbar; pad entries carry zero exponent
        n1 = len(cfg.normal1)
        n2 = len(cfg.normal2)
        bounds = np.array([n1, 2 * n1, 2 * n1 + n2])
        grp = np.searchsorted(bounds, nv, side="right")
        gtot = np.zeros((len(ne), 4))
        for g in range(4):
            gtot[:, g] = np.where(grp == g, ne, 0).sum(axis=1)
        gsum = np.take_along_axis(gtot, np.minimum(grp, 3), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(ne > 0, ne / np.where(gsum > 0, gsum, 1), 1.0)
        logshape = (ne * np.log(frac)).sum(axis=1)
        # component weights
        comps = c["comps"]
        is_act = (comps >= nt) & (comps < 2 * nt)
        is_nrm = comps >= 2 * nt
        cnorm = np.zeros(len(comps))
        cnorm[is_nrm] = cfg.var_norm[comps[is_nrm] - 2 * nt]
        prof = dict(absc=np.abs(c["coefs"]), knorm=knorm, deg=ldeg + ndeg,
                    jweight=jweight, logshape=logshape, is_act=is_act,
                    is_nrm=is_nrm, cnorm=cnorm, comps=comps)
        self._cache["normprof"] = prof
        return prof

    def term_weights(self, dom: DomainParams) -> np.ndarray:
        """Norm contribution of every term (same order as ``terms``)."""
        p = self._norm_profile()
        logw = (dom.r * p["knorm"] + p["deg"] * math.log(dom.s)
                - dom.rho * p["jweight"] + p["logshape"])
        cw = np.where(p["is_act"], -math.log(dom.s), 0.0)
        cw = np.where(p["is_nrm"], dom.rho * p["cnorm"] - math.log(dom.s), cw)
        return p["absc"] * np.exp(logw + cw)

    def norm(self, dom: DomainParams) -> float:
        if not self.terms:
            return 0.0
        return float(self.term_weights(dom).sum())

    def norm_by_kind(self, dom: DomainParams) -> dict:
        if not self.terms:
            return {}
        w = self.term_weights(dom)
        comps = self._compiled()["comps"]
        out = defaultdict(float)
        kinds = [k for k, _ in self.cfg.comp_table]
        for cidx in np.unique(comps):
            out[kinds[cidx]] += float(w[comps == cidx].sum())
        return dict(out)

    def drop_below(self, dom: DomainParams, wmin: float) -> "PolyVectorField":
        """Keep only terms whose norm contribution on ``dom`` is at least ``wmin``."""
        if not self.terms:
            return self
        w = self.term_weights(dom)
        keys = self._compiled()["keys"]
        return PolyVectorField(self.cfg, {keys[i]: self.terms[keys[i]]
                                          for i in np.flatnonzero(w >= wmin)})

    def prune(self, dom: DomainParams, rel_tol: float) -> "PolyVectorField":
        """Drop the smallest terms whose combined norm stays below ``rel_tol * norm``.

        The norm of the removed part is at most ``rel_tol`` times the norm of
        the field on ``dom``.
        """
        if not self.terms:
            return self
        w = self.term_weights(dom)
        order = np.argsort(w, kind="stable")
        csum = np.cumsum(w[order])
        ndrop = int(np.searchsorted(csum, rel_tol * csum[-1], side="right"))
        if ndrop == 0:
            return self
        keys = self._compiled()["keys"]
        keep = np.sort(order[ndrop:])
        return PolyVectorField(self.cfg, {keys[i]: self.terms[keys[i]] for i in keep})

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Value of the field at a phase-space vector (see ``PhasePoint``)."""
        cfg = self.cfg
        nt = cfg.nt
        x = np.asarray(x, dtype=complex)
        out = np.zeros(cfg.dim, dtype=complex)
        if not self.terms:
            return out
        c = self._compiled()
        ang = x[:nt]
        act = x[nt:2 * nt]
        nrm = np.append(x[2 * nt:], 1.0)
        val = c["coefs"] * np.exp(1j * (c["K"] @ ang))
        val = val * np.prod(_ipow(act[None, :], c["L"]), axis=1)
        val = val * np.prod(_ipow(nrm[c["NV"]], c["NE"]), axis=1)
        np.add.at(out, c["comps"], val)
        return out

    # -- serialization ------------------------------------------------------
    def to_text(self) -> str:
        """Canonical text form: one line per term, sorted."""
        cfg = self.cfg
        lines = []
        for (v, m), c in self.terms.items():
            kind, idx = cfg.comp_info(v)
            idx_s = _site_str(idx) if isinstance(idx, tuple) else str(idx)
            nrm_s = ";".join(
                f"{cfg.var_info(q)[0]}:{_site_str(cfg.var_info(q)[1])}^{e}" for q, e in m[2])
            lines.append(
                f"{kind} {idx_s} | {' '.join(map(str, m[0]))} | {' '.join(map(str, m[1]))} | "
                f"{nrm_s or '-'} | {c.real!r} {c.imag!r}")
        lines.sort()
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, cfg: LatticeConfig, text: str) -> "PolyVectorField":
        terms = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            head, ks, ls, ns, cs = [p.strip() for p in line.split("|")]
            kind, idx_s = head.split()
            idx = _parse_site(idx_s) if "," in idx_s or idx_s.startswith("(") else int(idx_s)
            comp = cfg.comp(kind, idx)
            k = tuple(int(a) for a in ks.split())
            l = tuple(int(a) for a in ls.split())
            nrm = []
            if ns != "-":
                for item in ns.split(";"):
                    kv, e = item.split("^")
                    vk, vs = kv.split(":")
                    nrm.append((cfg.var(vk, _parse_site(vs)), int(e)))
            re_s, im_s = cs.split()
            key = (comp, (k, l, tuple(sorted(nrm))))
            terms[key] = terms.get(key, 0j) + complex(float(re_s), float(im_s))
        return cls(cfg, terms)


def _site_str(s) -> str:
    return "(" + ",".join(str(int(x)) for x in s) + ")"


def _parse_site(s: str) -> tuple:
    return tuple(int(x) for x in s.strip("()").split(",") if x != "")


def _ipow(base, expo):
    """Integer powers with ``0**0 = 1`` for complex arrays."""
    return np.where(expo == 0, 1.0 + 0j, np.power(base, np.maximum(expo, 1)))


def zero_field(cfg: LatticeConfig) -> PolyVectorField:
    return PolyVectorField(cfg, {})


def vf_norm(X: PolyVectorField, dom: DomainParams) -> float:
    """Weighted majorant norm of a polynomial field on ``D_rho(r, s)``.

    Every term contributes ``|c| e^{|k| r} s^{|l|}`` times the exact maximum
    of its normal monomial over the weighted balls, times the component
    weight (1 for angles, 1/s for actions, e^{|j| rho}/s for normal ones).
    Summing per-term maxima bounds the supremum of the sum from above.
    """
    return X.norm(dom)


# ---------------------------------------------------------------------------
# normal form data
# ---------------------------------------------------------------------------

@dataclass
class NormalFormData:
    """Frequencies and couplings of the linear normal form ``N + A``.

    Attributes
    ----------
    cfg : LatticeConfig
    omega, omegatilde : ndarray
        Tangential frequencies.
    Omega : ndarray
        Normal frequencies on ``cfg.normal1``.
    Omegatilde : ndarray
        Normal frequencies on ``cfg.normal2``.
    A, Atilde : ndarray
        Couplings on ``cfg.shared``.
    """

    cfg: LatticeConfig
    omega: np.ndarray
    omegatilde: np.ndarray
    Omega: np.ndarray
    Omegatilde: np.ndarray
    A: np.ndarray = None
    Atilde: np.ndarray = None

    def __post_init__(self):
        cfg = self.cfg
        self.omega = np.asarray(self.omega, dtype=float).reshape(cfg.n)
        self.omegatilde = np.asarray(self.omegatilde, dtype=float).reshape(cfg.m)
        self.Omega = np.asarray(self.Omega, dtype=float).reshape(len(cfg.normal1))
        self.Omegatilde = np.asarray(self.Omegatilde, dtype=float).reshape(len(cfg.normal2))
        ns = len(cfg.shared)
        self.A = np.zeros(ns) if self.A is None else np.asarray(self.A, dtype=float).reshape(ns)
        self.Atilde = (np.zeros(ns) if self.Atilde is None
                       else np.asarray(self.Atilde, dtype=float).reshape(ns))

    @classmethod
    def unperturbed(cls, cfg: LatticeConfig, omega, omegatilde) -> "NormalFormData":
        sq1 = [float(sum(x * x for x in s)) for s in cfg.normal1]
        sq2 = [float(sum(x * x for x in s)) for s in cfg.normal2]
        return cls(cfg, omega, omegatilde, sq1, sq2)

    @property
    def freqs(self) -> np.ndarray:
        """``(omega, omegatilde)`` concatenated."""
        return np.concatenate([self.omega, self.omegatilde])

    @property
    def Omega0(self) -> np.ndarray:
        return self.Omega - np.array([sum(x * x for x in s) for s in self.cfg.normal1], float)

    @property
    def Omegatilde0(self) -> np.ndarray:
        return self.Omegatilde - np.array([sum(x * x for x in s) for s in self.cfg.normal2], float)

    def Omega_at(self, site) -> float:
        return float(self.Omega[self.cfg._pos1[tuple(site)]])

    def Omegatilde_at(self, site) -> float:
        return float(self.Omegatilde[self.cfg._pos2[tuple(site)]])

    def block(self, site) -> np.ndarray:
        """The 2x2 matrix ``M_j = [[Omega_j, A_j], [Atilde_j, Omegatilde_j]]``."""
        site = tuple(site)
        idx = self.cfg.shared.index(site)
        return np.array([[self.Omega_at(site), self.A[idx]],
                         [self.Atilde[idx], self.Omegatilde_at(site)]])

    def copy(self) -> "NormalFormData":
        return NormalFormData(self.cfg, self.omega.copy(), self.omegatilde.copy(),
                              self.Omega.copy(), self.Omegatilde.copy(),
                              self.A.copy(), self.Atilde.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("omega", "omegatilde", "Omega", "Omegatilde", "A", "Atilde")}


def as_vector_field(nf: NormalFormData) -> PolyVectorField:
    """The linear field ``N + A`` of a normal form."""
    cfg = nf.cfg
    nt = cfg.nt
    zero = (0,) * nt
    terms = {}
    for a, w in enumerate(nf.freqs):
        terms[(a, (zero, zero, ()))] = w

    def lin(comp_kind, var_kind, site, c):
        comp = cfg.comp(comp_kind, site)
        terms[(comp, (zero, zero, ((cfg.var(var_kind, site), 1),)))] = c

    for j, s in enumerate(cfg.normal1):
        lin("z", "z", s, 1j * nf.Omega[j])
        lin("zbar", "zbar", s, -1j * nf.Omega[j])
    for j, s in enumerate(cfg.normal2):
        lin("w", "w", s, 1j * nf.Omegatilde[j])
        lin("wbar", "wbar", s, -1j * nf.Omegatilde[j])
    for j, s in enumerate(cfg.shared):
        lin("z", "w", s, 1j * nf.A[j])
        lin("zbar", "wbar", s, -1j * nf.A[j])
        lin("w", "z", s, 1j * nf.Atilde[j])
        lin("wbar", "zbar", s, -1j * nf.Atilde[j])
    return PolyVectorField(cfg, terms)


# ---------------------------------------------------------------------------
# bracket and Lie series
# ---------------------------------------------------------------------------

def _merge(dm, m2):
    k1, l1, n1 = dm
    k2, l2, n2 = m2
    k = tuple([p + q for p, q in zip(k1, k2)])
    l = tuple([p + q for p, q in zip(l1, l2)])
    if not n1:
        nrm = n2
    elif not n2:
        nrm = n1
    else:
        dd = dict(n1)
        for q, e in n2:
            dd[q] = dd.get(q, 0) + e
        nrm = tuple(sorted(dd.items()))
    return (k, l, nrm)


def _accumulate(out, terms, other, sign, nt, degree_cap, weights=None, cut=0.0,
                bounds=None):
    """Add ``sign * sum_u Y^u d_u X^v`` for ``X = terms`` and ``Y = other``.

    With ``weights`` (term weight of each ``X`` term) and ``cut > 0``, pairs
    whose product bound ``e f w_a w_b`` is below ``cut`` are skipped, ``f``
    being the weight factor of the derivative.
    Returns the summed bound of the skipped pairs.
    """
    cache = {}
    skipped = 0.0
    items = list(terms.items())
    for idx, ((v, m), a) in enumerate(items):
        ders = cache.get(m)
        if ders is None:
            ders = _derivatives(m, nt, bounds)
            cache[m] = ders
        wa = weights[idx] if weights is not None else None
        for u, fac, wf, dm in ders:
            entry = other.get(u)
            if entry is None:
                continue
            lst, negw, suffix = entry
            af = sign * a * fac
            nkeep = len(lst)
            if wa is not None and cut > 0.0:
                scale = math.e * wf * wa
                if scale == 0.0:
                    continue
                nkeep = int(np.searchsorted(negw, -cut / scale, side="right"))
                if nkeep < len(lst):
                    skipped += scale * suffix[nkeep]
            for m2, b in lst[:nkeep]:
                key = (v, _merge(dm, m2))
                if degree_cap is not None and sum(key[1][1]) + sum(e for _, e in key[1][2]) > degree_cap:
                    continue
                out[key] += af * b
    return skipped


def _indexed(Y: "PolyVectorField", dom: Optional[DomainParams]):
    """``{component: (terms sorted by weight, -weights, suffix sums)}``."""
    if dom is None:
        return {u: (lst, None, None) for u, lst in Y.by_component().items()}
    w = Y.term_weights(dom)
    keys = Y._compiled()["keys"]
    groups = defaultdict(list)
    for i, (u, m) in enumerate(keys):
        groups[u].append((w[i], m, Y.terms[(u, m)]))
    out = {}
    for u, lst in groups.items():
        lst.sort(key=lambda t: -t[0])
        ws = np.array([t[0] for t in lst])
        suffix = np.append(np.cumsum(ws[::-1])[::-1], 0.0)
        out[u] = ([(m, c) for _, m, c in lst], -ws, suffix)
    return out


@dataclass
class BracketStats:
    """Bound on the norm of the part of a bracket skipped by the weight cut."""

    skipped_bound: float = 0.0


def lie_bracket(X: PolyVectorField, Y: PolyVectorField,
                degree_cap: Optional[int] = None, dom: Optional[DomainParams] = None,
                cut: float = 0.0, stats: Optional[BracketStats] = None) -> PolyVectorField:
    """Lie bracket ``[X, Y]^v = sum_u (Y^u d_u X^v - X^u d_u Y^v)``.

    Derivatives act symbolically on exponents.  Terms whose total degree in
    actions and normal variables exceeds ``degree_cap`` are discarded.

    With a domain and ``cut > 0`` the product of two terms ``a``, ``b`` is
    skipped when ``e |factor| w_a w_b < cut`` (``w`` = norm contribution on
    ``dom``); this bounds the norm of the skipped product, and the total of
    these bounds is added to ``stats.skipped_bound``.
    """
    cfg = X.cfg
    nt = cfg.nt
    out = defaultdict(complex)
    if X.terms and Y.terms:
        use = dom is not None and cut > 0.0
        wx = X.term_weights(dom) if use else None
        wy = Y.term_weights(dom) if use else None
        bounds = None
        if use:
            n1, n2 = len(cfg.normal1), len(cfg.normal2)
            bounds = np.array([n1, 2 * n1, 2 * n1 + n2])
        sk = _accumulate(out, X.terms, _indexed(Y, dom if use else None), 1.0, nt,
                         degree_cap, wx, cut, bounds)
        sk += _accumulate(out, Y.terms, _indexed(X, dom if use else None), -1.0, nt,
                          degree_cap, wy, cut, bounds)
        if stats is not None:
            stats.skipped_bound += sk
    return PolyVectorField(cfg, out)


class LieSeriesDivergence(RuntimeError):
    """Successive Lie-series terms failed to decrease in norm."""


@dataclass
class LieSeriesInfo:
    term_norms: list = field(default_factory=list)
    tail_bound: float = 0.0
    skipped_bound: float = 0.0


def pushforward(F: PolyVectorField, X: PolyVectorField, order: int = 6, degree_cap: int = 6,
                dom: Optional[DomainParams] = None, drop_tol: float = DROP_TOL,
                first: Optional[PolyVectorField] = None, return_info: bool = False,
                cut: float = 0.0):
    """Lie-series transform ``sum_{n <= order} ad_F^n X / n!`` with ``ad_F Y = [Y, F]``.

    Parameters
    ----------
    F, X : PolyVectorField
    order : int
        Highest bracket order kept.
    degree_cap : int
        Total-degree cap applied inside every bracket.
    dom : DomainParams, optional
        When given, term norms are tracked, a geometric tail bound is
        reported and :class:`LieSeriesDivergence` is raised if a term is
        larger than its predecessor.
    drop_tol : float
        Relative coefficient drop tolerance applied to each new term.
    first : PolyVectorField, optional
        Precomputed ``[X, F]`` (useful when it is known in closed form).
    cut : float
        Pair cut passed to :func:`lie_bracket` (requires ``dom``); the summed
        bounds of skipped products are added to ``info.skipped_bound``.

    Returns
    -------
    PolyVectorField, or ``(PolyVectorField, LieSeriesInfo)`` if ``return_info``.
    """
    if order < 1:
        raise ValueError("order must be at least 1")
    info = LieSeriesInfo()
    total = X
    term = X
    prev = X.norm(dom) if dom is not None else None
    if dom is not None:
        info.term_norms.append(prev)
    if not F.is_zero():
        for nn in range(1, order + 1):
            if nn == 1 and first is not None:
                term = first
            else:
                st = BracketStats()
                term = lie_bracket(term, F, degree_cap, dom=dom, cut=cut * nn,
                                   stats=st).scale(1.0 / nn)
                info.skipped_bound += st.skipped_bound / nn
            term = term.drop(drop_tol)
            if term.is_zero():
                break
            total = total + term
            if dom is not None:
                cur = term.norm(dom)
                info.term_norms.append(cur)
                if nn >= 2 and prev > 0 and cur > prev:
                    raise LieSeriesDivergence(
                        f"Lie series term {nn} has norm {cur:.3e} > {prev:.3e}")
                prev = cur
        if dom is not None and len(info.term_norms) >= 3 and not term.is_zero():
            q = info.term_norms[-1] / info.term_norms[-2] if info.term_norms[-2] else 0.0
            info.tail_bound = info.term_norms[-1] * q / (1 - q) if q < 1 else math.inf
    total = total.drop(drop_tol)
    return (total, info) if return_info else total


# ---------------------------------------------------------------------------
# involution, reversibility, momentum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InvolutionSpec:
    """The involution ``S(theta, phi, I, J, z, w, zbar, wbar) = (-theta, -phi, I, J, zbar, wbar, z, w)``."""

    cfg: LatticeConfig

    def apply(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        nt = cfg.nt
        y = np.asarray(x, dtype=complex).copy()
        y[:nt] = -y[:nt]
        y[2 * nt:] = np.asarray(x)[2 * nt + cfg.conj_var]
        return y

    def tangent(self, v: np.ndarray) -> np.ndarray:
        """``DS . v`` (S is linear, so the same map)."""
        return self.apply(v)


def mono_reflect(m, cfg: LatticeConfig):
    """Exponents of ``m o S`` (also of the conjugate monomial)."""
    k, l, nrm = m
    cv = cfg.conj_var
    return (tuple(-x for x in k), l, tuple(sorted((int(cv[v]), e) for v, e in nrm)))


def reflect_field(X: PolyVectorField) -> PolyVectorField:
    """The field ``y -> DS . X(S y)``."""
    cfg = X.cfg
    nt = cfg.nt
    cc = cfg.conj_comp
    out = {}
    for (v, m), c in X.terms.items():
        sgn = -1.0 if v < nt else 1.0
        out[(int(cc[v]), mono_reflect(m, cfg))] = sgn * c
    return PolyVectorField(cfg, out)


def conjugate_field(X: PolyVectorField) -> PolyVectorField:
    """Real-structure image: conjugate coefficient on conjugate component and monomial."""
    cfg = X.cfg
    cc = cfg.conj_comp
    return PolyVectorField(cfg, {(int(cc[v]), mono_reflect(m, cfg)): np.conj(c)
                                 for (v, m), c in X.terms.items()})


def reality_defect(X: PolyVectorField) -> float:
    """Largest coefficient violation of the real structure."""
    return X.max_abs_diff(conjugate_field(X))


def reversibility_defect(X: PolyVectorField, dom: Optional[DomainParams] = None,
                         invariant: bool = False) -> float:
    """Exact coefficient-level test of ``DS X = -X o S`` (or ``+`` if ``invariant``).

    Returns the norm of the defect field relative to the norm of ``X`` when a
    domain is given, otherwise the largest absolute coefficient defect.
    """
    R = reflect_field(X)
    D = X - R if invariant else X + R
    if dom is None:
        return max((abs(c) for c in D.terms.values()), default=0.0)
    nx = X.norm(dom)
    return D.norm(dom) / nx if nx > 0 else 0.0


def random_phase_points(cfg: LatticeConfig, samples: int, scale: float = 0.1,
                        rng: Optional[np.random.Generator] = None,
                        real: bool = False) -> np.ndarray:
    """Random phase-space vectors, shape ``(samples, dim)``.

    Angles are real; actions and normal variables are complex of size
    ``scale`` (on the real subspace when ``real`` is set).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    nt = cfg.nt
    X = np.empty((samples, cfg.dim), dtype=complex)
    X[:, :nt] = rng.uniform(0, 2 * np.pi, (samples, nt))
    X[:, nt:2 * nt] = scale * rng.uniform(-1, 1, (samples, nt))
    nv = cfg.n_normal_vars
    u = scale * (rng.normal(size=(samples, nv)) + 1j * rng.normal(size=(samples, nv))) / np.sqrt(nv)
    if real:
        n1 = len(cfg.normal1)
        n2 = len(cfg.normal2)
        u[:, n1:2 * n1] = np.conj(u[:, :n1])
        u[:, 2 * n1 + n2:] = np.conj(u[:, 2 * n1:2 * n1 + n2])
    X[:, 2 * nt:] = u
    return X


def check_reversible(X: PolyVectorField, S: Optional[InvolutionSpec] = None, samples: int = 8,
                     scale: float = 0.1, rng=None, invariant: bool = False) -> float:
    """Max over random points of ``|DS X(y) + X(S y)|`` (``-`` if ``invariant``)."""
    if samples < 1:
        raise ValueError("samples must be positive")
    S = S or InvolutionSpec(X.cfg)
    worst = 0.0
    sgn = -1.0 if invariant else 1.0
    for y in random_phase_points(X.cfg, samples, scale, rng):
        res = S.tangent(X.evaluate(y)) + sgn * X.evaluate(S.apply(y))
        worst = max(worst, float(np.max(np.abs(res), initial=0.0)))
    return worst


def check_invariant(X: PolyVectorField, S: Optional[InvolutionSpec] = None, samples: int = 8,
                    scale: float = 0.1, rng=None) -> float:
    """Max over random points of ``|DS X(y) - X(S y)|``."""
    return check_reversible(X, S, samples, scale, rng, invariant=True)


def check_momentum(X: PolyVectorField) -> list:
    """Terms ``(component, monomial)`` with nonzero momentum on some axis."""
    if not X.terms:
        return []
    cfg = X.cfg
    c = X._compiled()
    vm = np.vstack([cfg.var_momentum, np.zeros((1, cfg.d), dtype=int)])
    mom = c["K"] @ cfg.angle_sites
    mom = mom + np.einsum("tq,tqd->td", c["NE"], vm[c["NV"]])
    cm = np.zeros((len(c["comps"]), cfg.d))
    isn = c["comps"] >= 2 * cfg.nt
    cm[isn] = cfg.var_momentum[c["comps"][isn] - 2 * cfg.nt]
    bad = np.nonzero(np.any(np.abs(mom - cm) > 0.5, axis=1))[0]
    return [c["keys"][i] for i in bad]


# ---------------------------------------------------------------------------
# Toplitz-Lipschitz probes
# ---------------------------------------------------------------------------

def function_norm(f: Mapping, cfg: LatticeConfig, dom: Optional[DomainParams]) -> float:
    """Majorant norm of a scalar polynomial ``{monomial: coef}`` (l1 if no domain)."""
    if not f:
        return 0.0
    if dom is None:
        return float(sum(abs(c) for c in f.values()))
    return PolyVectorField(cfg, {(0, m): c for m, c in f.items()}).norm(dom)


def partial_derivative(X: PolyVectorField, comp: int, var: int) -> dict:
    """``d X^comp / d u_var`` as ``{monomial: coef}`` (``var`` is a normal id)."""
    out = {}
    for m, c in X.by_component().get(comp, ()):
        k, l, nrm = m
        for idx, (v, e) in enumerate(nrm):
            if v == var:
                rest = nrm[:idx] + (((v, e - 1),) if e > 1 else ()) + nrm[idx + 1:]
                key = (k, l, rest)
                out[key] = out.get(key, 0j) + e * c
    return out


@dataclass
class ToeplitzProbe:
    """Result of a Toplitz-Lipschitz probe along a direction.

    Attributes
    ----------
    ts : list of int
        Shifts that stayed inside the truncation.
    series : list of dict
        Derivative coefficients for each shift.
    limit : dict
        Stabilised (or extrapolated) limit.
    stabilized_from : int or None
        First shift beyond which the series is constant.
    defects : list of float
        ``|value(t) - limit| * |t|`` for each shift.
    partial : bool
        True when some requested shift left the truncation.
    """

    ts: list
    series: list
    limit: dict
    stabilized_from: Optional[int]
    defects: list
    partial: bool

    @property
    def max_defect(self) -> float:
        return max(self.defects, default=0.0)


def _shift(site, c, t):
    return tuple(a + t * b for a, b in zip(site, c))


def toeplitz_probe(X: PolyVectorField, family: tuple, i, j, c, ts: Iterable[int],
                   dom: Optional[DomainParams] = None) -> ToeplitzProbe:
    """Probe the Toplitz-Lipschitz structure of ``X``.

    Parameters
    ----------
    family : tuple
        ``(comp_kind, var_kind, sign)``.  For a normal ``comp_kind`` (``z``,
        ``zbar``, ``w``, ``wbar``) the probed entry is
        ``d X^(comp_kind_{i + t c}) / d var_kind_{j + sign t c}``.  For
        ``comp_kind = (kind, b)`` with kind in theta, phi, I, J the entry is
        ``d X^(kind_b) / d var_kind_{i + t c}`` and ``j`` is ignored.
    i, j, c : sites
        Base sites and direction (``c`` nonzero).
    ts : iterable of int
        Shifts to evaluate.
    dom : DomainParams, optional
        Norm used for defects (plain l1 of coefficients if omitted).
    """
    cfg = X.cfg
    if not any(c):
        raise ValueError("direction must be nonzero")
    comp_kind, var_kind, sign = family
    used, series, partial = [], [], False
    for t in ts:
        vsite = _shift(j, c, sign * t) if isinstance(comp_kind, str) else _shift(i, c, t)
        if isinstance(comp_kind, str):
            csite = _shift(i, c, t)
            if not (cfg.has_var(comp_kind, csite) and cfg.has_var(var_kind, vsite)):
                partial = True
                continue
            comp = cfg.comp(comp_kind, csite)
        else:
            if not cfg.has_var(var_kind, vsite):
                partial = True
                continue
            comp = cfg.comp(*comp_kind)
        used.append(int(t))
        series.append(partial_derivative(X, comp, cfg.var(var_kind, vsite)))
    limit, t_star = {}, None
    if series:
        order = np.argsort(np.abs(used))
        last = series[order[-1]]
        t_star = used[order[-1]]
        for idx in order[::-1][1:]:
            if series[idx] == last:
                t_star = used[idx]
            else:
                break
        if t_star != used[order[-1]] or len(series) == 1:
            limit = dict(last)
        else:
            # not stabilised: extrapolate value(t) ~ L + B/t from the two largest shifts
            t1, t2 = abs(used[order[-2]]), abs(used[order[-1]])
            d1, d2 = series[order[-2]], series[order[-1]]
            keys = set(d1) | set(d2)
            if t1 != t2:
                limit = {kk: (t2 * d2.get(kk, 0j) - t1 * d1.get(kk, 0j)) / (t2 - t1) for kk in keys}
            else:
                limit = dict(d2)
            t_star = None
    defects = []
    for t, f in zip(used, series):
        keys = set(f) | set(limit)
        diff = {kk: f.get(kk, 0j) - limit.get(kk, 0j) for kk in keys}
        diff = {kk: v for kk, v in diff.items() if v != 0}
        defects.append(function_norm(diff, cfg, dom) * abs(t))
    return ToeplitzProbe(used, series, limit, t_star, defects, partial)
