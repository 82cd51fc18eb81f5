"""Command-line front end: ``rcp {flow,register,synth,eval,bench}``.

Every solver and synthesis setting lives in one flat table of keys. A config
file sets them with ``key = value`` lines, and each key can be overridden
with a ``--key-name`` flag. Metrics print as ``key=value`` lines.

Exit codes: 0 success, 2 input or parse error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from rcp.data_io import (
    PairSpec, random_shape, read_cloud, read_flow, read_motion, read_weights, synth_pair,
    synth_scene_flow_scene, write_cloud, write_flow, write_motion,
)
from rcp.errors import DegenerateFit, InvalidInput, NumericalFailure, ParseError
from rcp.metrics import flow_metrics, reg_metrics
from rcp.pointwise import UpdateMode
from rcp.solver import (
    GraphLaplacian, Handcrafted, RecurrentSetConv, SetConv, SolverConfig, run_registration,
    run_scene_flow,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.__name__ = "choice"
    return parse


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


# Defaults mirror SolverConfig and PairSpec.
KEYS = {
    "iterations": Key(int, 7, "solver iterations K"),
    "update_mode": Key(_choice("attention", "bilateral", "hard"), "attention", "point-wise update rule"),
    "tau": Key(float, 1.0, "attention temperature"),
    "sigma_f": Key(float, 0.5, "bilateral feature bandwidth"),
    "sigma_u": Key(float, 0.5, "bilateral displacement bandwidth (m)"),
    "regularizer": Key(_choice("laplacian", "recurrent"), "laplacian", "regularizer kind"),
    "lambda": Key(float, 1.0, "graph Laplacian weight"),
    "sweeps": Key(int, 10, "Jacobi sweeps per iteration"),
    "smooth_k": Key(int, 8, "neighbors in the smoothing graph"),
    "regularizer_weights": Key(str, "", "weight manifest for the recurrent regularizer"),
    "group_k": Key(int, 0, "recurrent grouping size (0 = from weights)"),
    "features": Key(_choice("handcrafted", "setconv"), "handcrafted", "descriptor provider"),
    "feature_k": Key(int, 16, "neighbors for handcrafted descriptors"),
    "feature_weights": Key(str, "", "weight manifest for the set-conv backbone"),
    "sample_ratio": Key(Fraction, Fraction(1, 4), "backbone subsampling ratio"),
    "backbone_group_k": Key(int, 32, "backbone grouping size"),
    "k_omega": Key(int, 32, "candidate window size"),
    "bands": Key(int, 4, "positional encoding bands"),
    "tau_int": Key(float, 0.01, "feature interpolation temperature"),
    "sinkhorn_epsilon": Key(float, 0.03, "entropic regularization"),
    "sinkhorn_iters": Key(int, 100, "Sinkhorn iteration cap"),
    "sinkhorn_tol": Key(float, 1e-6, "Sinkhorn marginal tolerance"),
    "early_stop": Key(_bool, False, "stop when the mean update falls below early_stop_tol"),
    "early_stop_tol": Key(float, 1e-5, "early stopping threshold (m)"),
    "timing": Key(_bool, False, "record wall time in traces and reports"),
    "rotation_min": Key(float, 0.0, "synthetic rotation angle lower bound (deg)"),
    "rotation_max": Key(float, 45.0, "synthetic rotation angle upper bound (deg)"),
    "translation_min": Key(float, -0.5, "synthetic translation component lower bound (m)"),
    "translation_max": Key(float, 0.5, "synthetic translation component upper bound (m)"),
    "partial_fraction": Key(float, 0.3, "fraction of points cropped from each cloud"),
    "noise_sigma": Key(float, 0.0, "target noise standard deviation (m)"),
    "seed": Key(int, 0, "generator seed"),
}


class ConfigError(ValueError):
    pass


def parse_value(key, text):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return KEYS[key].parse(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    path = Path(path)
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", path, f"line {lineno}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ParseError(str(exc), path, f"line {lineno}") from None
    return out


def resolve(args, overrides=None) -> dict:
    """Defaults, then the config file, then explicit flags, then ``overrides``."""
    values = {k: spec.default for k, spec in KEYS.items()}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for key in KEYS:
        flag = getattr(args, "opt_" + key, None)
        if flag is not None:
            values[key] = parse_value(key, flag)
    if overrides:
        for key, value in overrides.items():
            values[key] = parse_value(key, str(value))
    return values


def solver_config(values: dict) -> SolverConfig:
    kind = values["update_mode"]
    mode = UpdateMode(kind, tau=values["tau"], sigma_f=values["sigma_f"], sigma_u=values["sigma_u"])
    if values["regularizer"] == "recurrent":
        if not values["regularizer_weights"]:
            raise InvalidInput("regularizer=recurrent needs regularizer_weights")
        reg = RecurrentSetConv(read_weights(values["regularizer_weights"]), values["group_k"] or None)
    else:
        reg = GraphLaplacian(values["lambda"], values["sweeps"], values["smooth_k"])
    if values["features"] == "setconv":
        if not values["feature_weights"]:
            raise InvalidInput("features=setconv needs feature_weights")
        feats = SetConv(read_weights(values["feature_weights"]), values["sample_ratio"], values["backbone_group_k"])
    else:
        feats = Handcrafted(values["feature_k"])
    return SolverConfig(
        iterations=values["iterations"], update_mode=mode, regularizer=reg, features=feats,
        k_omega=values["k_omega"], bands=values["bands"], tau_int=values["tau_int"],
        sinkhorn_epsilon=values["sinkhorn_epsilon"], sinkhorn_iters=values["sinkhorn_iters"],
        sinkhorn_tol=values["sinkhorn_tol"], early_stop=values["early_stop"],
        early_stop_tol=values["early_stop_tol"], timing=values["timing"],
    )


def pair_spec(values: dict) -> PairSpec:
    return PairSpec(
        (values["rotation_min"], values["rotation_max"]),
        (values["translation_min"], values["translation_max"]),
        values["partial_fraction"], values["noise_sigma"], values["seed"],
    )


def print_metrics(metrics: dict, out=None):
    out = out or sys.stdout
    for key, value in metrics.items():
        print(f"{key}={value!r}", file=out)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_flow(args):
    cfg = solver_config(resolve(args))
    P, Q = read_cloud(args.src), read_cloud(args.dst)
    gt = read_flow(args.gt) if args.gt else None
    flow, trace = run_scene_flow(P, Q, cfg, gt)
    write_flow(args.out, flow)
    if args.trace:
        trace.write_csv(args.trace)
    if gt is not None:
        print_metrics(flow_metrics(flow, gt).as_dict())
    return EXIT_OK


def cmd_register(args):
    cfg = solver_config(resolve(args))
    P, Q = read_cloud(args.src), read_cloud(args.dst)
    gt = read_motion(args.gt) if args.gt else None
    motion, trace = run_registration(P, Q, cfg, gt)
    write_motion(args.out, motion)
    if args.trace:
        trace.write_csv(args.trace)
    if gt is not None:
        print_metrics(reg_metrics(motion, gt).as_dict())
    return EXIT_OK


def cmd_synth(args):
    values = resolve(args)
    spec = pair_spec(values)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.blobs:
        scene = synth_scene_flow_scene(args.blobs, args.points, spec)
        write_cloud(out / "src.ply", scene.P)
        write_cloud(out / "dst.ply", scene.Q)
        write_flow(out / "gt_flow.csv", scene.flow)
        return EXIT_OK
    source = read_cloud(args.input) if args.input else random_shape(args.points, spec.seed)
    pair = synth_pair(source, spec)
    write_cloud(out / "src.ply", pair.P)
    write_cloud(out / "dst.ply", pair.Q)
    write_motion(out / "gt_motion.json", pair.motion)
    write_flow(out / "gt_flow.csv", pair.flow)
    return EXIT_OK


def cmd_eval(args):
    if args.task == "flow":
        metrics = flow_metrics(read_flow(args.pred), read_flow(args.gt))
    else:
        metrics = reg_metrics(read_motion(args.pred), read_motion(args.gt))
    print_metrics(metrics.as_dict())
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

REPORT_COLUMNS = [
    "case", "config", "task", "iterations", "epe3d", "acc3ds", "acc3dr", "outliers3d",
    "error_r", "error_t", "mae_r", "mae_t", "millis",
]
CASE_FIELDS = {"name", "task", "points", "objects", "seed", "rotation_min", "rotation_max",
               "translation_min", "translation_max", "partial_fraction", "noise_sigma"}


def read_suite(path):
    """Load a bench manifest: ``{"cases": [...], "configs": [...]}``.

    A case names a task (``flow`` on a multi-object scene or ``register`` on
    a random shape), its size, seed and motion ranges. A config has a
    ``name`` and a ``set`` map of config keys. Missing configs mean one run
    with the defaults.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, f"line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise ParseError("suite must be a JSON object", path, "top level")
    cases = doc.get("cases", [])
    configs = doc.get("configs") or [{"name": "default", "set": {}}]
    if not isinstance(cases, list) or not isinstance(configs, list):
        raise ParseError("'cases' and 'configs' must be lists", path, "top level")
    for i, case in enumerate(cases):
        if not isinstance(case, dict) or set(case) - CASE_FIELDS:
            raise ParseError(f"unknown fields {sorted(set(case) - CASE_FIELDS)}", path, f"cases[{i}]")
        if case.get("task", "flow") not in ("flow", "register"):
            raise ParseError("task must be 'flow' or 'register'", path, f"cases[{i}]")
    for i, conf in enumerate(configs):
        if not isinstance(conf, dict) or not isinstance(conf.get("set", {}), dict):
            raise ParseError("config needs a 'name' and an optional 'set' object", path, f"configs[{i}]")
        for key, value in conf.get("set", {}).items():
            try:
                parse_value(key, str(value))
            except ConfigError as exc:
                raise ParseError(str(exc), path, f"configs[{i}]") from None
    return cases, configs


def _case_data(case, values):
    spec_values = dict(values)
    for key in ("seed", "rotation_min", "rotation_max", "translation_min", "translation_max",
                "partial_fraction", "noise_sigma"):
        if key in case:
            spec_values[key] = parse_value(key, str(case[key]))
    spec = pair_spec(spec_values)
    if case.get("task", "flow") == "flow":
        scene = synth_scene_flow_scene(int(case.get("objects", 2)), int(case.get("points", 256)), spec)
        return scene.P, scene.Q, scene.flow
    pair = synth_pair(random_shape(int(case.get("points", 512)), spec.seed), spec)
    return pair.P, pair.Q, pair.motion


def run_case(case, conf, base_values):
    values = dict(base_values)
    for key, value in conf.get("set", {}).items():
        values[key] = parse_value(key, str(value))
    cfg = solver_config(values)
    task = case.get("task", "flow")
    P, Q, gt = _case_data(case, values)
    row = dict.fromkeys(REPORT_COLUMNS, "")
    row.update(case=case.get("name", ""), config=conf.get("name", ""), task=task, iterations=cfg.iterations)
    t0 = time.perf_counter()
    if task == "flow":
        flow, _ = run_scene_flow(P, Q, cfg)
        metrics = flow_metrics(flow, gt).as_dict()
    else:
        motion, _ = run_registration(P, Q, cfg)
        metrics = reg_metrics(motion, gt).as_dict()
    if cfg.timing:
        row["millis"] = f"{(time.perf_counter() - t0) * 1e3:.3f}"
    row.update({k: repr(v) for k, v in metrics.items()})
    return row


def thread_count():
    raw = os.environ.get("RCP_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInput(f"RCP_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidInput("RCP_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def cmd_bench(args):
    cases, configs = read_suite(args.suite)
    base = resolve(args)
    jobs = [(case, conf) for case in cases for conf in configs]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        rows = list(pool.map(lambda job: run_case(job[0], job[1], base), jobs))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_config_flags(parser, keys):
    group = parser.add_argument_group("config overrides")
    for key in keys:
        spec = KEYS[key]
        group.add_argument(
            "--" + key.replace("_", "-"), dest="opt_" + key, metavar="V",
            help=f"{spec.help} (default: {spec.default})",
        )


SOLVER_KEYS = [k for k in KEYS if k not in (
    "rotation_min", "rotation_max", "translation_min", "translation_max", "partial_fraction",
    "noise_sigma", "seed")]
SPEC_KEYS = ["rotation_min", "rotation_max", "translation_min", "translation_max",
             "partial_fraction", "noise_sigma", "seed"]


def build_parser():
    parser = argparse.ArgumentParser(prog="rcp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, helptext, gt_help in (
        ("flow", cmd_flow, "estimate per-point scene flow", "ground-truth flow CSV"),
        ("register", cmd_register, "estimate a rigid motion", "ground-truth motion JSON"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--src", required=True, help="source cloud (PLY)")
        p.add_argument("--dst", required=True, help="target cloud (PLY)")
        p.add_argument("--out", required=True, help="output file")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--gt", help=gt_help)
        p.add_argument("--trace", help="write the per-iteration trace CSV here")
        _add_config_flags(p, SOLVER_KEYS)
        p.set_defaults(func=handler)

    p = sub.add_parser("synth", help="generate a synthetic pair or scene")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="source cloud (PLY); default is a random shape")
    src.add_argument("--blobs", type=int, help="build a scene of N rigid blobs instead of a pair")
    p.add_argument("--points", type=int, default=512, help="random shape size or points per blob (default: 512)")
    p.add_argument("--out-dir", required=True, help="directory for src.ply, dst.ply and ground truth")
    p.add_argument("--config", help="flat key = value config file")
    _add_config_flags(p, SPEC_KEYS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a prediction file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--task", choices=("flow", "register"), required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a suite of seeded synthetic cases")
    p.add_argument("--suite", required=True, help="suite manifest (JSON)")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--config", help="base config file applied before per-config overrides")
    _add_config_flags(p, SOLVER_KEYS)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericalFailure, DegenerateFit, FloatingPointError) as exc:
        print(f"rcp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, ConfigError, InvalidInput, ValueError) as exc:
        print(f"rcp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"rcp: error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INPUT

if __name__ == "__main__":
    sys.exit(main())
