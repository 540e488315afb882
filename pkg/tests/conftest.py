import numpy as np
import pytest

from revkam.kam import KamBase, initial_state, iterate
from revkam.lattice import LatticeConfig
from revkam.nls import NlsModel, action_angle, default_zeta
from revkam.vfield import DomainParams, PolyVectorField, reflect_field

# acceptance lines, echoed in the terminal summary
ACCEPTANCE = []

SMALL = LatticeConfig(d=1, radius=2, tangential1=((0,),), tangential2=((0,),))


def random_field(cfg, rng, nterms=6, kmax=2, max_deg=2, angle_only=False, real_coef=False):
    """Random polynomial field with small exponents."""
    terms = {}
    nv = cfg.n_normal_vars
    for _ in range(nterms):
        comp = int(rng.integers(cfg.nt if angle_only else cfg.dim))
        k = tuple(int(x) for x in rng.integers(-kmax, kmax + 1, cfg.nt))
        if angle_only:
            l, nrm = (0,) * cfg.nt, ()
        else:
            deg = int(rng.integers(0, max_deg + 1))
            l = [0] * cfg.nt
            ex = {}
            for _ in range(deg):
                if rng.random() < 0.3:
                    l[int(rng.integers(cfg.nt))] += 1
                else:
                    v = int(rng.integers(nv))
                    ex[v] = ex.get(v, 0) + 1
            l, nrm = tuple(l), tuple(sorted(ex.items()))
        c = rng.normal() if real_coef else rng.normal() + 1j * rng.normal()
        terms[(comp, (k, l, nrm))] = terms.get((comp, (k, l, nrm)), 0) + c
    return PolyVectorField(cfg, terms)


def reversible_part(X):
    return (X - reflect_field(X)).scale(0.5)


@pytest.fixture(scope="session")
def model():
    return NlsModel()


@pytest.fixture(scope="session")
def zeta(model):
    return default_zeta(model.lattice)


@pytest.fixture(scope="session")
def seed(model, zeta):
    """Normal form and transformed perturbation of the default NLS model."""
    return action_angle(model, zeta)


@pytest.fixture(scope="session")
def base(model, seed):
    _, P = seed
    return KamBase(eps0=P.norm(DomainParams(0.5, model.s, 0.3)))


@pytest.fixture(scope="session")
def kam_run(seed, base, zeta):
    nf, P = seed
    return iterate(initial_state(nf, P, base, zeta), base, nu_max=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
