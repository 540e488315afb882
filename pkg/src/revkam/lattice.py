"""Lattice sites, index sets, multi-indices and momentum bookkeeping.

The phase space carries the variables

    theta_b, phi_b, I_b, J_b, z_j, zbar_j, w_j, wbar_j

where ``b`` runs over the tangential sites and ``j`` over the retained normal
sites of a sup-norm box in Z^d.  Every variable gets an integer coordinate
index, and a vector field component is addressed by the coordinate index of
the variable it differentiates.  The layout is

    [theta (n) | phi (m) | I (n) | J (m) | z (N1) | zbar (N1) | w (N2) | wbar (N2)]

so that angle ``a`` and action ``a`` (``0 <= a < n + m``) sit at coordinates
``a`` and ``n + m + a``, and normal variable ``v`` sits at ``2(n + m) + v``.

A monomial ``exp(i<k, angles>) actions^l prod_v u_v^{e_v}`` is stored as the
tuple ``(k, l, nrm)`` with ``k`` and ``l`` of length ``n + m`` and ``nrm`` a
sorted tuple of ``(normal variable id, exponent)`` pairs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

Site = tuple

KINDS = ("theta", "phi", "I", "J", "z", "zbar", "w", "wbar")
CONJ_KIND = {"theta": "theta", "phi": "phi", "I": "I", "J": "J",
             "z": "zbar", "zbar": "z", "w": "wbar", "wbar": "w"}


class MultiIndexMonomial(NamedTuple):
    """Exponent data of one Taylor-Fourier monomial.

    Attributes
    ----------
    k : tuple of int
        Fourier modes ``(k, ktilde)`` concatenated, length ``n + m``.
    l : tuple of int
        Action exponents ``(l, ltilde)`` concatenated, length ``n + m``.
    nrm : tuple of (int, int)
        Normal exponents ``(variable id, exponent)`` sorted by id.  The split
        into alpha, beta, alphatilde, betatilde is encoded by the variable id.
    """

    k: tuple
    l: tuple
    nrm: tuple = ()


def site_norm(j: Sequence[int]) -> float:
    """Euclidean norm of an integer lattice vector."""
    return math.sqrt(sum(int(x) * int(x) for x in j))


def weighted_seq_norm(z: Mapping, rho: float) -> float:
    """Weighted l1 norm ``sum_j exp(|j| rho) |z_j|`` of a finitely supported map."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return float(sum(math.exp(site_norm(j) * rho) * abs(v) for j, v in z.items()))


def box_sites(d: int, radius: int) -> list:
    """All sites of Z^d with sup-norm at most ``radius`` in lexicographic order."""
    rng = range(-radius, radius + 1)
    return [tuple(p) for p in itertools.product(rng, repeat=d)]


@dataclass(frozen=True)
class LatticeConfig:
    """Truncated lattice with two tangential index sets.

    Parameters
    ----------
    d : int
        Spatial dimension.
    radius : int
        Sites with sup-norm at most ``radius`` are retained.
    tangential1, tangential2 : sequence of sites
        Ordered tangential sets for the ``q`` and ``p`` fields.
    require_origin : bool
        Enforce ``0`` in both tangential sets (the standing hypothesis of the
        model).  Only internal helper spaces switch this off.
    """

    d: int = 2
    radius: int = 5
    tangential1: tuple = ((0, 0), (1, 0))
    tangential2: tuple = ((0, 0), (0, 1))
    require_origin: bool = field(default=True, compare=False)

    def __post_init__(self):
        t1 = tuple(tuple(int(x) for x in s) for s in self.tangential1)
        t2 = tuple(tuple(int(x) for x in s) for s in self.tangential2)
        object.__setattr__(self, "tangential1", t1)
        object.__setattr__(self, "tangential2", t2)
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        for name, ts in (("tangential1", t1), ("tangential2", t2)):
            if len(set(ts)) != len(ts):
                raise ValueError(f"{name} has repeated sites")
            for s in ts:
                if len(s) != self.d:
                    raise ValueError(f"{name}: site {s} has wrong length")
                if max((abs(x) for x in s), default=0) > self.radius:
                    raise ValueError(f"{name}: site {s} outside radius")
        zero = (0,) * self.d
        if self.require_origin and (zero not in t1 or zero not in t2):
            raise ValueError("the origin must belong to both tangential sets")

    # -- index sets -------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.tangential1)

    @property
    def m(self) -> int:
        return len(self.tangential2)

    @property
    def nt(self) -> int:
        """Number of angles ``n + m``."""
        return self.n + self.m

    @cached_property
    def sites(self) -> list:
        return box_sites(self.d, self.radius)

    @cached_property
    def normal1(self) -> list:
        t = set(self.tangential1)
        return [s for s in self.sites if s not in t]

    @cached_property
    def normal2(self) -> list:
        t = set(self.tangential2)
        return [s for s in self.sites if s not in t]

    @cached_property
    def shared(self) -> list:
        """Sites in both normal sets (where the couplings live)."""
        t = set(self.normal2)
        return [s for s in self.normal1 if s in t]

    @cached_property
    def _pos1(self) -> dict:
        return {s: i for i, s in enumerate(self.normal1)}

    @cached_property
    def _pos2(self) -> dict:
        return {s: i for i, s in enumerate(self.normal2)}

    @property
    def n_normal_vars(self) -> int:
        return 2 * len(self.normal1) + 2 * len(self.normal2)

    @property
    def dim(self) -> int:
        """Number of phase-space coordinates."""
        return 2 * self.nt + self.n_normal_vars

    # -- variable registry -------------------------------------------------
    def var(self, kind: str, index) -> int:
        """Normal variable id of ``z``, ``zbar``, ``w`` or ``wbar`` at a site."""
        n1 = len(self.normal1)
        n2 = len(self.normal2)
        site = tuple(index)
        if kind == "z":
            return self._pos1[site]
        if kind == "zbar":
            return n1 + self._pos1[site]
        if kind == "w":
            return 2 * n1 + self._pos2[site]
        if kind == "wbar":
            return 2 * n1 + n2 + self._pos2[site]
        raise KeyError(kind)

    def has_var(self, kind: str, site) -> bool:
        site = tuple(site)
        if kind in ("z", "zbar"):
            return site in self._pos1
        return site in self._pos2

    def comp(self, kind: str, index) -> int:
        """Coordinate index of a variable.

        ``index`` is the tangential position ``b`` (0-based) for angles and
        actions, and a site for normal variables.
        """
        n, m = self.n, self.m
        if kind == "theta":
            return _checked(index, n)
        if kind == "phi":
            return n + _checked(index, m)
        if kind == "I":
            return n + m + _checked(index, n)
        if kind == "J":
            return 2 * n + m + _checked(index, m)
        return 2 * self.nt + self.var(kind, index)

    @cached_property
    def comp_table(self) -> list:
        """List of ``(kind, index)`` for every coordinate index."""
        out = [("theta", b) for b in range(self.n)]
        out += [("phi", b) for b in range(self.m)]
        out += [("I", b) for b in range(self.n)]
        out += [("J", b) for b in range(self.m)]
        out += [("z", s) for s in self.normal1]
        out += [("zbar", s) for s in self.normal1]
        out += [("w", s) for s in self.normal2]
        out += [("wbar", s) for s in self.normal2]
        return out

    def comp_info(self, c: int) -> tuple:
        return self.comp_table[c]

    def var_info(self, v: int) -> tuple:
        return self.comp_table[2 * self.nt + v]

    @cached_property
    def conj_var(self) -> np.ndarray:
        """Normal variable id of the conjugate partner, indexed by id."""
        n1 = len(self.normal1)
        n2 = len(self.normal2)
        a = np.arange(n1)
        b = np.arange(n2)
        return np.concatenate([a + n1, a, 2 * n1 + n2 + b, 2 * n1 + b])

    @cached_property
    def conj_comp(self) -> np.ndarray:
        """Coordinate index of the conjugate partner, indexed by coordinate."""
        base = np.arange(2 * self.nt)
        return np.concatenate([base, 2 * self.nt + self.conj_var])

    @cached_property
    def var_sign(self) -> np.ndarray:
        """``+1`` for z, w and ``-1`` for zbar, wbar, indexed by normal id."""
        n1 = len(self.normal1)
        n2 = len(self.normal2)
        return np.concatenate([np.ones(n1), -np.ones(n1), np.ones(n2), -np.ones(n2)]).astype(int)

    @cached_property
    def var_is_w(self) -> np.ndarray:
        n1 = len(self.normal1)
        n2 = len(self.normal2)
        return np.concatenate([np.zeros(2 * n1, bool), np.ones(2 * n2, bool)])

    @cached_property
    def var_site(self) -> np.ndarray:
        """Site of each normal variable, shape ``(N, d)``."""
        s1 = np.array(self.normal1, dtype=int).reshape(-1, self.d)
        s2 = np.array(self.normal2, dtype=int).reshape(-1, self.d)
        return np.concatenate([s1, s1, s2, s2])

    @cached_property
    def var_norm(self) -> np.ndarray:
        """Euclidean norm ``|j|`` of the site of each normal variable."""
        return np.sqrt((self.var_site.astype(float) ** 2).sum(axis=1))

    @cached_property
    def angle_sites(self) -> np.ndarray:
        """Sites ``i^(b)`` then ``itilde^(b)``, shape ``(n + m, d)``."""
        return np.array(self.tangential1 + self.tangential2, dtype=int).reshape(-1, self.d)

    @cached_property
    def var_momentum(self) -> np.ndarray:
        """Signed site ``rho j`` carried by each normal variable."""
        return self.var_site * self.var_sign[:, None]

    def comp_momentum(self, c: int) -> np.ndarray:
        """Momentum shift of a component: ``rho j`` for normal ones, else 0."""
        if c < 2 * self.nt:
            return np.zeros(self.d, dtype=int)
        return self.var_momentum[c - 2 * self.nt]

    # -- convenience --------------------------------------------------------
    def monomial(self, k=None, l=None, **normal) -> MultiIndexMonomial:
        """Build a monomial from readable parts.

        ``normal`` maps a kind (``z``, ``zbar``, ``w``, ``wbar``) to a mapping
        from site to exponent.
        """
        k = tuple(int(x) for x in (k if k is not None else (0,) * self.nt))
        l = tuple(int(x) for x in (l if l is not None else (0,) * self.nt))
        if len(k) != self.nt or len(l) != self.nt:
            raise ValueError("k and l must have length n + m")
        if any(x < 0 for x in l):
            raise ValueError("action exponents must be nonnegative")
        ex = {}
        for kind, mp in normal.items():
            for s, e in mp.items():
                if e < 0:
                    raise ValueError("normal exponents must be nonnegative")
                if e:
                    v = self.var(kind, s)
                    ex[v] = ex.get(v, 0) + int(e)
        return MultiIndexMonomial(k, l, tuple(sorted(ex.items())))

    def to_dict(self) -> dict:
        return {"d": self.d, "radius": self.radius,
                "tangential1": [list(s) for s in self.tangential1],
                "tangential2": [list(s) for s in self.tangential2]}

    @classmethod
    def from_dict(cls, dct: Mapping) -> "LatticeConfig":
        return cls(d=int(dct["d"]), radius=int(dct["radius"]),
                   tangential1=tuple(tuple(s) for s in dct["tangential1"]),
                   tangential2=tuple(tuple(s) for s in dct["tangential2"]))


def _checked(b, size):
    b = int(b)
    if not 0 <= b < size:
        raise IndexError("tangential index out of range")
    return b


def momentum(cfg: LatticeConfig, mi, comp: int, axis: int) -> int:
    """Momentum ``pi_l`` of a monomial on a component, along one axis.

    Returns ``sum_b i^(b)_l k_b + sum_b itilde^(b)_l ktilde_b
    + sum_j (alpha_j - beta_j) j_l + sum_j (alphatilde_j - betatilde_j) j_l``
    minus ``rho j_l`` when ``comp`` is the normal variable ``z^rho_j`` or
    ``w^rho_j``.  ``axis`` is 0-based.
    """
    if not 0 <= axis < cfg.d:
        raise IndexError("axis out of range")
    return int(momentum_vector(cfg, mi, comp)[axis])


def momentum_vector(cfg: LatticeConfig, mi, comp: int) -> np.ndarray:
    """All ``d`` momentum components of a monomial on a component."""
    k, _, nrm = mi
    out = np.asarray(k, dtype=int) @ cfg.angle_sites
    vm = cfg.var_momentum
    for v, e in nrm:
        out = out + e * vm[v]
    return out - cfg.comp_momentum(comp)


@dataclass
class PhasePoint:
    """A point of the (complexified) phase space.

    ``z`` and ``zbar`` are arrays over ``cfg.normal1``; ``w`` and ``wbar``
    over ``cfg.normal2``.
    """

    theta: np.ndarray
    phi: np.ndarray
    actI: np.ndarray
    actJ: np.ndarray
    z: np.ndarray
    zbar: np.ndarray
    w: np.ndarray
    wbar: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=complex) for a in (
            self.theta, self.phi, self.actI, self.actJ,
            self.z, self.zbar, self.w, self.wbar)])

    @classmethod
    def from_vector(cls, cfg: LatticeConfig, x: np.ndarray) -> "PhasePoint":
        n, m = cfg.n, cfg.m
        n1, n2 = len(cfg.normal1), len(cfg.normal2)
        cuts = np.cumsum([n, m, n, m, n1, n1, n2, n2])[:-1]
        return cls(*np.split(np.asarray(x, dtype=complex), cuts))

    def is_real(self, tol: float = 0.0) -> bool:
        """True on the real subspace (``zbar = conj z``, ``wbar = conj w``)."""
        ok = np.all(np.abs(self.zbar - np.conj(self.z)) <= tol)
        return bool(ok and np.all(np.abs(self.wbar - np.conj(self.w)) <= tol))


def iter_sites(sites: Iterable) -> list:
    """Canonical (lexicographic) ordering of a collection of sites."""
    return sorted(tuple(s) for s in sites)
