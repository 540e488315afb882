"""Command-line front end: configuration, orchestration and reports.

Subcommands: ``defaults``, ``build``, ``iterate``, ``measure``, ``validate``,
``dump`` and ``load``.  Every file written carries the config hash and the
schedule manifest in ``#`` header lines; outputs contain no timestamps, so
identical configs give byte-identical files.

Exit codes
----------
0 success, 2 configuration error, 3 precondition refused,
4 numerical failure, 5 validation failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .kam import (Embedding, KamBase, StepFailure, ZetaExcluded, extract_embedding,
                  initial_state, iterate, schedule_table, torus_orbit_check,
                  trivial_point)
from .lattice import LatticeConfig
from .nls import (NlsModel, ParamPoint, SimState, SimulationError, action_angle, default_zeta,
                  linear_stability, normal_form, quasiperiodicity_diagnostic, sim_state_from_phase,
                  simulate, verify_assumptions)
from .resonance import fit_exponent, excluded_fraction, tau_lower_bound_total
from .vfield import DomainParams, PolyVectorField, check_momentum, reversibility_defect

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4
EXIT_VALIDATION = 5


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class PreconditionError(ValueError):
    """The configuration is valid but the model violates a precondition."""


DEFAULTS = {
    "lattice": {"d": 2, "radius": 5, "tangential1": [[0, 0], [1, 0]],
                "tangential2": [[0, 0], [0, 1]]},
    "model": {"amp_ratio": 1.8, "taylor_degree": 3, "normal_degree": 1},
    "domain": {"r": 0.5, "s": 2e-10, "rho": 0.3},
    "kam": {"gamma": 1e-3, "tau": 47.0, "eps0": None, "c": 1.0, "nu_max": 3,
            "target": 1e-12, "seed_field": "nls", "zeta": None, "zeta_samples": 1},
    "resonance": {"samples": 10000, "gammas": [0.0, 1e-2, 1e-3, 1e-4, 1e-5], "seed": 0,
                  "tau": 24.0, "K_lo": 0, "K_hi": 2},
    "sim": {"T": 50.0, "dt": 0.05, "order": 4, "tolerance": 1e-3, "stability_T": 200.0,
            "stability_dt": 0.5, "stability_tol": 1e-3, "checkpoints": 11},
    "output": "revkam-out",
    "seed": 0,
}


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown key {path + k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k} must be a block")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _positive(cfg: dict, block: str, keys) -> None:
    for k in keys:
        v = cfg[block][k]
        if not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"{block}.{k} must be positive")


def validate_config(cfg: dict) -> dict:
    """Check a merged config; raises :class:`ConfigError`."""
    try:
        lat = LatticeConfig.from_dict(cfg["lattice"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"lattice: {exc}") from exc
    _positive(cfg, "domain", ("r", "s", "rho"))
    _positive(cfg, "kam", ("gamma", "tau", "c", "nu_max", "target"))
    _positive(cfg, "sim", ("T", "dt", "tolerance", "stability_T", "stability_dt"))
    _positive(cfg, "resonance", ("samples", "tau", "K_hi"))
    bound = tau_lower_bound_total(lat.d, lat.n, lat.m)
    if not cfg["kam"]["tau"] > bound:
        raise ConfigError(f"kam.tau must exceed {bound:g} for d={lat.d}, n={lat.n}, m={lat.m}")
    if cfg["kam"]["seed_field"] not in ("nls", "zero"):
        raise ConfigError("kam.seed_field must be 'nls' or 'zero'")
    if cfg["sim"]["order"] not in (2, 4):
        raise ConfigError("sim.order must be 2 or 4")
    if cfg["resonance"]["samples"] < 100:
        raise ConfigError("resonance.samples must be at least 100")
    if any(g < 0 for g in cfg["resonance"]["gammas"]):
        raise ConfigError("resonance.gammas must be nonnegative")
    if not 0 <= cfg["resonance"]["K_lo"] < cfg["resonance"]["K_hi"]:
        raise ConfigError("need 0 <= resonance.K_lo < resonance.K_hi")
    z = cfg["kam"]["zeta"]
    if z is not None:
        if len(z) != lat.n + lat.m or any(not 0 <= a <= 1 for a in z):
            raise ConfigError("kam.zeta must have n + m entries in [0, 1]")
    return cfg


def load_config(path: Optional[str]) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (if any), validated."""
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    return validate_config(_merge(DEFAULTS, user))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def lattice_of(cfg: dict) -> LatticeConfig:
    return LatticeConfig.from_dict(cfg["lattice"])


def model_of(cfg: dict) -> NlsModel:
    m = cfg["model"]
    try:
        return NlsModel(lattice_of(cfg), s=cfg["domain"]["s"], amp_ratio=m["amp_ratio"],
                        taylor_degree=m["taylor_degree"], normal_degree=m["normal_degree"])
    except ValueError as exc:
        raise PreconditionError(str(exc)) from exc


def base_of(cfg: dict, eps0: float) -> KamBase:
    k, d = cfg["kam"], cfg["domain"]
    return KamBase(r=d["r"], s=d["s"], rho=d["rho"], gamma=k["gamma"], tau=k["tau"],
                   eps0=k["eps0"] or eps0, c=k["c"])


def zetas_of(cfg: dict) -> list:
    lat = lattice_of(cfg)
    k = cfg["kam"]
    first = ParamPoint.from_vector(lat, k["zeta"]) if k["zeta"] is not None else default_zeta(lat)
    out = [first]
    rng = np.random.default_rng(cfg["seed"])
    for _ in range(int(k["zeta_samples"]) - 1):
        out.append(ParamPoint.from_vector(lat, rng.uniform(0, 1, lat.n + lat.m)))
    return out


def manifest(cfg: dict, eps0: Optional[float] = None) -> dict:
    """Schedule constants of the configured run (theoretical update)."""
    eps = cfg["kam"]["eps0"] or eps0 or 1e-4
    base = base_of(cfg, eps)
    rows = []
    try:
        for st in schedule_table(base, int(cfg["kam"]["nu_max"])):
            rows.append({"nu": st.nu, "delta": st.delta, "K": st.K, "r": st.r, "s": st.s,
                         "rho": st.rho, "eps": st.eps})
    except ValueError:
        pass
    return {"eps0": eps, "steps": rows}


class Output:
    """Writes files under the output directory with the common header."""

    def __init__(self, cfg: dict, outdir: Optional[str] = None, eps0: Optional[float] = None):
        self.cfg = cfg
        self.dir = Path(outdir or cfg["output"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = (f"# config_hash: {config_hash(cfg)}\n"
                       f"# manifest: {json.dumps(manifest(cfg, eps0), sort_keys=True)}\n")

    def write(self, name: str, body: str) -> Path:
        p = self.dir / name
        p.write_text(self.header + body)
        return p

    def write_csv(self, name: str, rows: list, fields: Optional[list] = None) -> Path:
        buf = io.StringIO()
        fields = fields or (list(rows[0]) if rows else [])
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return self.write(name, buf.getvalue())


def strip_header(text: str) -> str:
    return "\n".join(ln for ln in text.splitlines() if not ln.startswith("#")) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _seed_field(cfg: dict, model: NlsModel, zeta: ParamPoint):
    nf, P = action_angle(model, zeta)
    if cfg["kam"]["seed_field"] == "zero":
        P = PolyVectorField(model.lattice)
    return nf, P


def cmd_defaults(args) -> int:
    print(json.dumps(DEFAULTS, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = load_config(args.config)
    model = model_of(cfg)
    zeta = zetas_of(cfg)[0]
    nf, P = _seed_field(cfg, model, zeta)
    dom = DomainParams(cfg["domain"]["r"], cfg["domain"]["s"], cfg["domain"]["rho"])
    rep = verify_assumptions(nf, P, [zeta], dom=dom)
    out = Output(cfg, args.out, P.norm(dom))
    out.write("field.txt", P.to_text())
    rows = [{"check": c.name, "passed": c.passed, "value": c.value, "threshold": c.threshold}
            for c in rep.checks]
    out.write_csv("assumptions.csv", rows)
    for r in rows:
        print(f"{r['check']:24s} {'PASS' if r['passed'] else 'FAIL'} "
              f"{r['value']:.3e} (threshold {r['threshold']:.3e})")
    return EXIT_OK if rep.passed else EXIT_PRECONDITION


def cmd_iterate(args) -> int:
    cfg = load_config(args.config)
    model = model_of(cfg)
    dom = DomainParams(cfg["domain"]["r"], cfg["domain"]["s"], cfg["domain"]["rho"])
    norm_rows, step_rows, excl_rows = [], [], []
    out = None
    status = EXIT_OK
    for zi, zeta in enumerate(zetas_of(cfg)):
        nf, P = _seed_field(cfg, model, zeta)
        eps0 = P.norm(dom)
        base = base_of(cfg, eps0 if eps0 > 0 else 1e-4)
        if out is None:
            out = Output(cfg, args.out, base.eps0)
        res = iterate(initial_state(nf, P, base, zeta), base, nu_max=int(cfg["kam"]["nu_max"]),
                      target=cfg["kam"]["target"], raise_errors=False)
        for nu, e in enumerate(res.norms):
            norm_rows.append({"zeta_index": zi, "nu": nu, "eps": e})
        for r in res.reports:
            step_rows.append({"zeta_index": zi, **r.row()})
        if isinstance(res.error, ZetaExcluded):
            excl_rows.append({"zeta_index": zi, "nu": res.error.nu, "reason": str(res.error),
                              "zeta": " ".join(repr(float(a)) for a in zeta.vector)})
            print(f"zeta {zi}: excluded at step {res.error.nu}: {res.error}")
        elif isinstance(res.error, StepFailure):
            print(f"zeta {zi}: step {res.error.nu} failed: {res.error}", file=sys.stderr)
            status = EXIT_NUMERICAL
        if zi == 0 and res.error is None:
            _dump_embedding(out, extract_embedding(res.state), zeta)
        for nu, e in enumerate(res.norms):
            print(f"zeta {zi} nu {nu} eps {e:.6e}")
    out.write_csv("norms.csv", norm_rows, ["zeta_index", "nu", "eps"])
    if step_rows:
        out.write_csv("steps.csv", step_rows)
    out.write_csv("exclusions.csv", excl_rows, ["zeta_index", "nu", "reason", "zeta"])
    return status


def _dump_embedding(out: Output, emb: Embedding, zeta: ParamPoint) -> None:
    files = []
    for k, F in enumerate(emb.transforms):
        name = f"transform_{k}.txt"
        out.write(name, F.to_text())
        files.append(name)
    meta = {"frequencies": [float(a) for a in emb.frequencies], "transforms": files,
            "zeta": [float(a) for a in zeta.vector]}
    out.write("embedding.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_embedding(cfg: dict, path: str):
    d = Path(path)
    meta = json.loads(strip_header((d / "embedding.json").read_text()))
    lat = lattice_of(cfg)
    Fs = [PolyVectorField.from_text(lat, strip_header((d / f).read_text()))
          for f in meta["transforms"]]
    return (Embedding(lat, Fs, np.array(meta["frequencies"])),
            ParamPoint.from_vector(lat, meta["zeta"]))


def cmd_measure(args) -> int:
    cfg = load_config(args.config)
    lat = lattice_of(cfg)
    rc = cfg["resonance"]
    seed = args.seed if args.seed is not None else rc["seed"]

    def fam(z):
        return normal_form(lat, ParamPoint.from_vector(lat, z))

    rows = []
    for g in rc["gammas"]:
        e = excluded_fraction(fam, g, rc["tau"], (rc["K_lo"], rc["K_hi"]), int(rc["samples"]),
                              seed, n_params=lat.n + lat.m)
        rows.append(e.row())
        print(f"gamma {g:.1e} fraction {e.fraction:.4f} CI [{e.ci[0]:.4f}, {e.ci[1]:.4f}]")
    exp = fit_exponent([r["gamma"] for r in rows], [r["fraction"] for r in rows])
    rows.append({"gamma": "fit_exponent", "fraction": exp})
    out = Output(cfg, args.out)
    out.write_csv("scaling.csv", rows, ["gamma", "fraction", "ci_lo", "ci_hi", "samples",
                                        "excluded", "tau", "K_lo", "K_hi"])
    print(f"fitted exponent {exp:.4f} (Monte Carlo surrogate)")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    model = model_of(cfg)
    lat = model.lattice
    sc = cfg["sim"]
    out = Output(cfg, args.out)
    coupling = 0.0 if args.linear else 1.0
    if args.random_state is not None:
        rng = np.random.default_rng(args.random_state)
        n = len(lat.sites)
        amp = args.random_amp
        st = SimState(amp * (rng.normal(size=n) + 1j * rng.normal(size=n)),
                      amp * (rng.normal(size=n) + 1j * rng.normal(size=n)))
        zeta = zetas_of(cfg)[0]
        expected = normal_form(lat, zeta).freqs
        traj = simulate(model, zeta, st, sc["T"], sc["dt"], order=sc["order"], coupling=coupling)
        dist, emb = math.nan, None
    else:
        if args.linear:
            zeta = zetas_of(cfg)[0]
            emb = Embedding(lat, [], normal_form(lat, zeta).freqs)
        else:
            emb, zeta = load_embedding(cfg, args.embedding or str(out.dir))
        expected = emb.frequencies
        if args.linear:
            traj = simulate(model, zeta, sim_state_from_phase(model, trivial_point(lat, np.zeros(lat.nt))),
                            sc["T"], sc["dt"], order=sc["order"], coupling=0.0)
            dist = 0.0
        else:
            tc = torus_orbit_check(model, zeta, emb, T=sc["T"], dt=sc["dt"],
                                   checkpoints=int(sc["checkpoints"]), order=sc["order"])
            traj, dist = tc.trajectory, tc.max_distance
    qp = quasiperiodicity_diagnostic(traj, expected, tol=sc["tolerance"])
    rows = [{"quantity": f"frequency_{a}", "value": float(qp.frequencies[a]),
             "expected": float(expected[a]), "deviation": float(qp.deviations[a]),
             "passed": bool(qp.deviations[a] <= qp.tol and qp.resolved[a])}
            for a in range(len(expected))]
    rows.append({"quantity": "residual_power", "value": qp.max_residual, "expected": 0.0,
                 "deviation": qp.max_residual, "passed": qp.max_residual <= qp.residual_tol})
    rows.append({"quantity": "torus_distance", "value": dist, "expected": 0.0,
                 "deviation": dist, "passed": ""})
    ok = qp.passed
    if emb is not None and not args.skip_stability:
        ex = linear_stability(model, zeta, emb, sc["stability_T"], dt=sc["stability_dt"],
                              coupling=coupling)
        mx = float(np.max(ex))
        rows.append({"quantity": "max_growth_exponent", "value": mx, "expected": 0.0,
                     "deviation": mx, "passed": mx <= sc["stability_tol"]})
        ok = ok and mx <= sc["stability_tol"]
    out.write_csv("diagnostics.csv", rows, ["quantity", "value", "expected", "deviation", "passed"])
    for r in rows:
        flag = "" if r["passed"] == "" else ("PASS" if r["passed"] else "FAIL")
        print(f"{r['quantity']:22s} {r['value']:.6e} {flag}")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_dump(args) -> int:
    cfg = load_config(args.config)
    model = model_of(cfg)
    _, P = _seed_field(cfg, model, zetas_of(cfg)[0])
    text = P.to_text()
    if args.file:
        Path(args.file).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_load(args) -> int:
    cfg = load_config(args.config)
    lat = lattice_of(cfg)
    try:
        P = PolyVectorField.from_text(lat, strip_header(Path(args.file).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot parse field: {exc}") from exc
    dom = DomainParams(cfg["domain"]["r"], cfg["domain"]["s"], cfg["domain"]["rho"])
    print(f"terms {len(P)}")
    print(f"norm {P.norm(dom):.6e}")
    print(f"reversibility_defect {reversibility_defect(P):.3e}")
    print(f"momentum_violations {len(check_momentum(P))}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revkam", description="Reversible KAM engine for coupled NLS.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        if name != "defaults":
            sp.add_argument("--config", "-c", help="JSON config overriding the defaults")
            sp.add_argument("--out", "-o", help="output directory (overrides config)")
        return sp

    add("defaults", cmd_defaults, "print the default configuration")
    add("build", cmd_build, "build the field and check the assumptions")
    add("iterate", cmd_iterate, "run the KAM iteration")
    sp = add("measure", cmd_measure, "estimate excluded parameter fractions")
    sp.add_argument("--seed", type=int, help="master seed (overrides config)")
    sp = add("validate", cmd_validate, "simulate and check the embedded torus")
    sp.add_argument("--embedding", help="directory holding embedding.json")
    sp.add_argument("--linear", action="store_true", help="linear model on the trivial torus")
    sp.add_argument("--random-state", type=int, help="negative control from random data")
    sp.add_argument("--random-amp", type=float, default=0.2,
                    help="per-site amplitude of the random data")
    sp.add_argument("--skip-stability", action="store_true")
    sp = add("dump", cmd_dump, "write the seed field as text")
    sp.add_argument("file", nargs="?")
    sp = add("load", cmd_load, "read a field text file and summarise it")
    sp.add_argument("file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"precondition refused: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (StepFailure, SimulationError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
