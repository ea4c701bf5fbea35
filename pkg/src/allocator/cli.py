"""Command-line front end.

Configuration is resolved from four layers, later ones winning: built-in defaults, an
optional ``--preset``, an optional JSON ``--config`` file (a previous run's
``manifest.json`` works too) and flat ``--key value`` flags.  Every run writes its
tables plus a ``manifest.json`` describing where each setting came from.

Exit codes: 0 success, 1 invalid configuration or parameters, 2 numerical failure or
a floor-breach rate above ``breach_threshold``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import closed_form_policy as cfp
from . import experiments as ex
from . import market_model as mm
from .errors import InvalidParameters, NumericalFailure, WealthBelowFloor
from .io import write_csv, write_json
from .utility import UtilitySpec

PARAM_KEYS = ("kappa", "theta_bar", "sigma_v", "lambda_mpr", "rho_lev", "r")
UTILITY_KEYS = ("gamma", "xbar", "cbar", "w", "discount")


def _floats(v):
    if isinstance(v, str):
        v = [x for x in v.split(",") if x.strip()]
    if not isinstance(v, (list, tuple)):
        v = [v]
    return tuple(float(x) for x in v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v):
    if isinstance(v, bool):
        raise ValueError("booleans are not integers")
    f = float(v)
    if f != int(f):
        raise ValueError(f"not an integer: {v!r}")
    return int(f)


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _opt_float(v):
    return None if v is None or v == "" or v == "null" else float(v)


# key -> (parser, default); ``None`` defaults mark keys that must come from somewhere
SCHEMA = {
    **{k: (float, None) for k in PARAM_KEYS},
    "gamma": (float, None), "xbar": (float, 0.0), "cbar": (float, 0.0), "w": (float, 0.0),
    "discount": (float, 0.0),
    "S0": (float, 100.0), "V0": (_opt_float, "__theta_bar__"), "dt": (float, mm.DT_DAILY),
    "T": (float, 1.0), "t": (float, 0.0), "X": (float, 1.0), "X0": (_opt_float, None),
    "V": (_opt_float, "__theta_bar__"), "path_id": (_int, 0),
    "seed": (_int, "__required__"),
    "n_paths": (_int, 10_000), "x0_ratios": (_floats, (1.0,)), "r_grid": (_floats, ()),
    "T_grid": (_floats, ()), "shuffle_mode": (_str, "none"), "chunk_size": (_int, 500),
    "x0_high": (float, 5.0), "x0_low": (float, 2.0),
    "n_time": (_int, 50), "n_state": (_int, 41), "damping": (float, 0.5), "tol": (float, 1e-5),
    "max_iter": (_int, 50), "tilt": (_opt_float, None), "control_variates": (_bool, True),
    "mc_paths": (_int, 4096), "breach_threshold": (float, 1e-3),
    "out": (_str, "out"), "format": (_str, "csv"),
}

PRESETS = {
    "paper": {
        **mm.CALIBRATED_PARAMS.as_dict(),
        "gamma": 4.0, "xbar": 1.0, "T": 10.0,
        "x0_ratios": tuple(float(k) for k in range(1, 11)),
        "x0_high": 5.0, "x0_low": 2.0,
    },
}

STOCHASTIC = {"simulate", "solve-theta-u", "mc-components", "study", "hysteresis", "quantiles",
              "ratio-study"}
COMMANDS = ("validate", "simulate", "policy", "solve-theta-u", "mc-components", "study",
            "hysteresis", "quantiles", "ratio-study")


class ConfigError(ValueError):
    pass


class BreachRateExceeded(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _coerce(key, value, where):
    if key not in SCHEMA:
        raise ConfigError(f"{where}.{key}: unknown key")
    try:
        return SCHEMA[key][0](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.{key}: invalid value {value!r} ({exc})") from None


def _load_file(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    if "config" in data and "sources" in data:
        data = data["config"]          # a manifest from an earlier run
    return data


def resolve_config(command, preset=None, config_path=None, flags=None):
    """Merge the configuration layers; returns ``(config, sources, overridden)``."""
    values, sources, overridden = {}, {}, {}
    layers = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        layers.append(("preset", PRESETS[preset]))
    if config_path is not None:
        layers.append(("config", _load_file(config_path)))
    layers.append(("flag", flags or {}))
    for where, layer in layers:
        for key, raw in layer.items():
            val = _coerce(key, raw, where)
            if sources.get(key) == "preset" and val != values[key]:
                overridden[key] = {"preset": values[key], where: val}
            values[key] = val
            sources[key] = where

    missing = [k for k in PARAM_KEYS + ("gamma",) if k not in values and command != "validate"]
    if command == "validate":
        missing = [k for k in PARAM_KEYS if k not in values]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing)
                          + " (use --preset paper, --config FILE or --KEY VALUE)")
    if command in STOCHASTIC and "seed" not in values:
        raise ConfigError("seed: required for stochastic commands (pass --seed N)")
    for key, (_, default) in SCHEMA.items():
        if key in values or default in (None, "__required__") and (key in PARAM_KEYS or key in ("gamma", "seed")):
            continue
        if default == "__theta_bar__":
            default = values.get("theta_bar")
        values[key] = default
        sources[key] = "default"
    if values["format"] not in ("csv", "json"):
        raise ConfigError(f"format: must be csv or json (got {values['format']!r})")
    return values, sources, overridden


# ---------------------------------------------------------------------------
# builders


def _params(cfg):
    return mm.HestonParams(**{k: cfg[k] for k in PARAM_KEYS})


def _spec(cfg):
    return UtilitySpec(**{k: cfg[k] for k in UTILITY_KEYS})


def _study_config(cfg):
    return ex.StudyConfig(params=_params(cfg), spec=_spec(cfg), x0_ratios=cfg["x0_ratios"],
                          r_grid=cfg["r_grid"] or None, T_grid=cfg["T_grid"] or (cfg["T"],),
                          n_paths=cfg["n_paths"], dt=cfg["dt"], seed=cfg["seed"],
                          shuffle_mode=cfg["shuffle_mode"], S0=cfg["S0"], V0=cfg["V0"],
                          chunk_size=cfg["chunk_size"])


def _mc(cfg):
    from .malliavin_engine import MCConfig
    return MCConfig(n_paths=cfg["mc_paths"], dt=cfg["dt"], seed=cfg["seed"], tilt=cfg["tilt"],
                    control_variates=cfg["control_variates"])


class _Writer:
    def __init__(self, out, fmt):
        self.out = Path(out)
        self.fmt = fmt
        self.files = []

    def table(self, name, header, rows):
        rows = [list(r) for r in rows]
        if self.fmt == "csv":
            path = write_csv(self.out / f"{name}.csv", header, rows)
        else:
            path = write_json(self.out / f"{name}.json", [dict(zip(header, r)) for r in rows])
        self.files.append(path.name)
        return path

    def json(self, name, obj):
        path = write_json(self.out / f"{name}.json", obj)
        self.files.append(path.name)
        return path


def _cell(v):
    return "" if v is None else v


def _breach_check(cfg, breaches, total):
    rate = breaches / total if total else 0.0
    if rate > cfg["breach_threshold"]:
        raise BreachRateExceeded(f"floor-breach rate {rate:.6g} exceeds {cfg['breach_threshold']:g}")
    return rate


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg, w):
    p = _params(cfg)
    bad = mm.validate(p)
    print(f"feller_margin {p.feller_margin:.17g}")
    for msg in bad:
        print(f"invalid: {msg}")
    if "gamma" in cfg:
        _spec(cfg)
    if bad:
        raise InvalidParameters(bad)
    return {"feller_margin": p.feller_margin, "violations": bad}


def cmd_simulate(cfg, w):
    p, spec = _params(cfg), _spec(cfg)
    path = mm.simulate_heston_path(p, cfg["S0"], cfg["V0"], cfg["T"], cfg["dt"], cfg["seed"], cfg["path_id"])
    path.to_csv(w.out / "path.csv")
    w.files.append("path.csv")
    X0 = cfg["X0"] if cfg["X0"] is not None else (cfg["x0_ratios"][0] * spec.xbar if spec.xbar else 1.0)
    wealth = cfp.evolve_wealth(path, spec, X0)
    wealth.to_csv(w.out / "wealth.csv")
    w.files.append("wealth.csv")
    st = ex.performance_stats(wealth.X, cfg["dt"], p.r)
    w.json("stats", st.as_dict())
    if wealth.breached:
        _breach_check(cfg, 1, 1)
    return {"stats": st.as_dict(), "breached": wealth.breached}


def cmd_policy(cfg, w):
    p, spec = _params(cfg), _spec(cfg)
    crra = cfp.crra_policy(cfg["t"], cfg["T"], p, spec.gamma).as_dict()
    hara = cfp.hara_policy(cfg["t"], cfg["X"], cfg["T"], p, spec).as_dict()
    names = list(cfp.COMPONENTS) + ["theta_hedge", "total"]
    w.table("policy", ["component", "crra", "hara"], [(n, crra[n], hara[n]) for n in names])
    return {"crra": crra, "hara": hara}


def cmd_mc_components(cfg, w):
    from .malliavin_engine import AnalyticThetaU, mc_policy_components
    p, spec = _params(cfg), _spec(cfg)
    model = mm.HestonModel(p)
    field = AnalyticThetaU(p, spec.gamma, cfg["T"])
    pc = mc_policy_components(model, field, spec, cfg["t"], [cfg["V"]], cfg["X"], _mc(cfg))
    ref = (cfp.crra_policy(cfg["t"], cfg["T"], p, spec.gamma) if spec.is_crra
           else cfp.hara_policy(cfg["t"], cfg["X"], cfg["T"], p, spec)).as_dict()
    est = pc.as_dict()
    names = list(cfp.COMPONENTS) + ["theta_hedge", "total"]
    w.table("components", ["component", "estimate", "se", "closed_form"],
            [(n, est[n], pc.se.get(n, 0.0), ref[n]) for n in names])
    return {"estimate": est, "closed_form": ref, "lambda_star": pc.lambda_star}


def cmd_solve_theta_u(cfg, w):
    from .malliavin_engine import heston_grid, residual_diagnostics, solve_theta_u
    p, spec = _params(cfg), _spec(cfg)
    model = mm.HestonModel(p)
    grid = heston_grid(p, cfg["T"], cfg["n_time"], cfg["n_state"])
    mc = replace(_mc(cfg), n_paths=cfg["mc_paths"])
    field = solve_theta_u(model, spec, grid, mc, damping=cfg["damping"], tol=cfg["tol"],
                          max_iter=cfg["max_iter"])
    field.to_csv(w.out / "theta_u.csv")
    w.files.append("theta_u.csv")
    mid_t = 0.5 * (grid.times[0] + grid.times[1])
    mid_v = 0.5 * (grid.states[1] + grid.states[2])
    report = residual_diagnostics(model, field, spec, mc, y0=[p.theta_bar], points=[(mid_t, [mid_v])])
    if spec.gamma > 1:
        exact = cfp.theta_u_closed_form(grid.times[:, None], grid.states[None, :], cfg["T"], p, spec.gamma)
        err = np.abs(field.values - exact)
        tol = np.maximum(3.0 * field.se, 2e-3)
        report["closed_form"] = {"max_abs_error": float(err.max()),
                                 "max_error_over_tolerance": float((err / tol).max()),
                                 "nodes_outside_tolerance": int((err > tol).sum())}
    report["solver"] = field.info
    w.json("residual_report", report)
    return report


def _study_rows(rows):
    return [[_cell(r[h]) for h in ex.STUDY_HEADER] for r in rows]


def cmd_study(cfg, w):
    sc = _study_config(cfg)
    rows = ex.run_study(sc)
    w.table("study", ex.STUDY_HEADER, _study_rows(rows))
    breaches = sum(r["breaches"] for r in rows)
    _breach_check(cfg, breaches, sc.n_paths * len(rows))
    return {"rows": rows}


def cmd_hysteresis(cfg, w):
    sc = _study_config(cfg)
    res = ex.hysteresis_study(sc)
    w.table("hysteresis", ["scenario"] + ex.STUDY_HEADER,
            [[r["scenario"]] + [_cell(r[h]) for h in ex.STUDY_HEADER] for r in res["rows"]])
    gh = list(res["gaps"][0].keys())
    w.table("hysteresis_gaps", gh, [[_cell(g[h]) for h in gh] for g in res["gaps"]])
    breaches = sum(r["breaches"] for r in res["rows"])
    _breach_check(cfg, breaches, sc.n_paths * len(res["rows"]))
    return res


def cmd_quantiles(cfg, w):
    sc = _study_config(cfg)
    res = ex.scaled_policy_quantiles(sc)
    for ratio, rows in res.items():
        name = "quantiles_crra" if math.isinf(ratio) else f"quantiles_x0_{ratio:g}"
        w.table(name, ex.quantile_header(), rows)
    return {str(k): v for k, v in res.items()}


def cmd_ratio_study(cfg, w):
    sc = _study_config(cfg)
    res = ex.policy_ratio_study(sc, cfg["x0_high"], cfg["x0_low"])
    summary = {k: v for k, v in res.items() if not k.startswith("per_path")}
    keys = list(summary)
    w.table("ratio_study", keys, [[_cell(summary[k]) for k in keys]])
    w.table("ratio_study_paths", ["path", "corr_S", "corr_RV"],
            [(i, a, b) for i, (a, b) in enumerate(zip(res["per_path_corr_S"], res["per_path_corr_RV"]))])
    _breach_check(cfg, res["breaches"], sc.n_paths)
    return summary


HANDLERS = {
    "validate": cmd_validate, "simulate": cmd_simulate, "policy": cmd_policy,
    "solve-theta-u": cmd_solve_theta_u, "mc-components": cmd_mc_components, "study": cmd_study,
    "hysteresis": cmd_hysteresis, "quantiles": cmd_quantiles, "ratio-study": cmd_ratio_study,
}


def _standard_errors(obj, prefix=""):
    """Collect every ``*_se`` entry (and ``se`` dicts) of a result for the manifest."""
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            key = f"{prefix}{k}"
            if k == "se" or k.endswith("_se"):
                out[key] = v
            elif isinstance(v, (dict, list)):
                out.update(_standard_errors(v, key + "."))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            out.update(_standard_errors(v, f"{prefix}{i}."))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="allocator", description="Optimal allocation under stochastic volatility.",
                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, allow_abbrev=False)
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--config", metavar="FILE")
        for key in SCHEMA:
            flag = "--" + key.replace("_", "-")
            dests = [flag] if flag == "--" + key else [flag, "--" + key]
            sp.add_argument(*dests, dest=key, default=argparse.SUPPRESS, metavar="VALUE")
    return parser


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def main(argv=None) -> int:
    started = time.perf_counter()
    try:
        ns = build_parser().parse_args(argv)
        flags = {k: v for k, v in vars(ns).items() if k in SCHEMA}
        cfg, sources, overridden = resolve_config(ns.command, ns.preset, ns.config, flags)
        writer = _Writer(cfg["out"], cfg["format"])
        status, error, result = 0, None, None
        try:
            result = HANDLERS[ns.command](cfg, writer)
        except (BreachRateExceeded, NumericalFailure, WealthBelowFloor, FloatingPointError) as exc:
            status, error = 2, str(exc)
        if ns.command != "validate" or "out" in flags:
            manifest = {"command": ns.command, "config": cfg, "sources": sources,
                        "preset": ns.preset, "overridden_preset_values": overridden,
                        "seed": cfg.get("seed"), "version": _version(),
                        "wall_time_s": time.perf_counter() - started, "outputs": writer.files,
                        "standard_errors": _standard_errors(result) if result else {},
                        "exit_code": status, "error": error}
            write_json(Path(cfg["out"]) / "manifest.json", manifest)
        if error:
            print(f"error: {error}", file=sys.stderr)
        return status
    except (ConfigError, InvalidParameters, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
