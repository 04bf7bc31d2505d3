"""Command-line front end.

Subcommands: gen-data, train, solve-pde, solve-ocp, solve-qmri,
verify-errors. Every run resolves its configuration from built-in defaults,
an optional key=value file (--config), and the common flags, echoes the
resolved configuration, and writes its outputs under --out. Exit codes:
0 success, 2 configuration error, 3 solver failure, 4 training failure.
All outputs are deterministic for a fixed seed and configuration.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bloch import DICTIONARY_GRIDS, ExactBlochModel, SequenceSpec, build_dictionary, dictionary_grid
from .errbound import verify_rate, write_error_report
from .exceptions import ConfigError, DivergenceError, SolverError, TrainingError
from . import ocp, problems, qmri
from .grid import save_field
from .mlp import load_network, save_network
from .pde import NetworkNonlinearity, solve_state
from .train import TrainOptions


def _parse_list(text: str, conv):
    try:
        return tuple(conv(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse list value {text!r}: {exc}") from None


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            conv = float if (default and isinstance(default[0], float)) else int
            return _parse_list(raw, conv)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from None


def read_config(path) -> dict:
    try:
        with open(path, encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    entries = {}
    for i, line in enumerate(text.splitlines()):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}: line {i + 1}: expected key=value")
        key, _, value = body.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def resolve_config(defaults: dict, args) -> dict:
    cfg = dict(defaults)
    if args.config:
        for key, raw in read_config(args.config).items():
            if key not in cfg:
                known = ", ".join(sorted(cfg))
                raise ConfigError(f"unknown config key {key!r} (known: {known})")
            cfg[key] = _coerce(key, raw, cfg[key])
    cfg["seed"] = args.seed
    cfg["scale"] = args.scale
    print("resolved configuration:")
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        print(f"  {key} = {val}")
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _desk(args) -> bool:
    return args.scale == "desk"


def cmd_gen_data(args) -> int:
    defaults = {
        "problem": "reaction",
        "size": "medium",
        "n": 64 if _desk(args) else 181,
        "mask_fraction": 0.25,
        "sigma": 30.0,
        "h": 2.0 ** -5,
        "amplitude": 1000.0,
    }
    cfg = resolve_config(defaults, args)
    if cfg["problem"] == "reaction":
        data = problems.reaction_samples(cfg["size"])
        table = np.hstack([data.inputs, data.targets])
        np.savetxt(_out_path(args, "samples.csv"), table, fmt="%.17g", delimiter=",")
        print(f"wrote {table.shape[0]} reaction samples")
    elif cfg["problem"] == "allen-cahn":
        data = problems.allen_cahn_samples(cfg["h"], cfg["amplitude"])
        table = np.hstack([data.inputs, data.targets])
        np.savetxt(_out_path(args, "samples.csv"), table, fmt="%.17g", delimiter=",")
        print(f"wrote {table.shape[0]} phase-field samples")
    elif cfg["problem"] == "qmri":
        truth = qmri.synth_phantom(cfg["n"])
        spec = SequenceSpec()
        mask = qmri.cartesian_mask(truth.shape, cfg["mask_fraction"], cfg["seed"],
                                   frames=spec.length)
        model = ExactBlochModel(spec)
        data = qmri.generate_kspace(truth, model, mask, cfg["sigma"], cfg["seed"])
        qmri.save_phantom(_out_path(args, "phantom.csv"), truth)
        qmri.save_mask(_out_path(args, "mask.csv"), mask)
        qmri.save_kspace(_out_path(args, "kspace.bin"), data)
        print(f"wrote {data.num_frames}-frame k-space raster {truth.shape}")
    else:
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    return 0


def cmd_train(args) -> int:
    defaults = {
        "problem": "reaction",
        "size": "medium",
        "hidden": (10, 12, 10),
        "activation": "tansig",
        "max_iter": 200 if _desk(args) else 1000,
        "h": 2.0 ** -5,
        "dict": "medium",
    }
    cfg = resolve_config(defaults, args)
    opts = TrainOptions(max_iter=cfg["max_iter"])
    if cfg["problem"] == "reaction":
        data = problems.reaction_samples(cfg["size"])
        surrogate, report = problems.train_reaction_net(
            data, cfg["hidden"], cfg["seed"], opts, cfg["activation"])
        save_network(_out_path(args, "network.txt"), surrogate.net,
                     in_scaler=surrogate.in_scaler, out_scaler=surrogate.out_scaler)
    elif cfg["problem"] == "allen-cahn":
        data = problems.allen_cahn_samples(cfg["h"])
        surrogate, report = problems.train_allen_cahn_net(
            data, cfg["hidden"], cfg["seed"], opts)
        save_network(_out_path(args, "network.txt"), surrogate.net,
                     in_scaler=surrogate.in_scaler, out_scaler=surrogate.out_scaler)
    elif cfg["problem"] == "drnn":
        t1, t2 = dictionary_grid(cfg["dict"])
        dictionary = build_dictionary(t1, t2, SequenceSpec())
        drnn, reports = qmri.train_drnn(dictionary, list(cfg["hidden"]),
                                        cfg["seed"], opts)
        qmri.save_drnn(_out_path(args, "drnn"), drnn)
        report = reports[-1]
    else:
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    print(f"training finished: iterations={report.iterations} "
          f"termination={report.termination} train_mse={report.train_mse:.6e}")
    return 0


def _load_surrogate(path, mode):
    net, in_sc, out_sc = load_network(path)
    if in_sc is None or out_sc is None:
        raise ConfigError(f"network file {path} lacks scaler blocks")
    return NetworkNonlinearity(net, in_sc, out_sc, mode=mode)


def cmd_solve_pde(args) -> int:
    defaults = {
        "h": 2.0 ** -6 if _desk(args) else 2.0 ** -7,
        "d": 1.21,
        "tol": 1e-12,
        "max_iter": 30,
        "surrogate": "",
    }
    cfg = resolve_config(defaults, args)
    grid = problems.benchmark_grid(cfg["h"])
    f = (_load_surrogate(cfg["surrogate"], "xy") if cfg["surrogate"]
         else problems.benchmark_nonlinearity())
    u = problems.manufactured_control(grid, cfg["d"])
    y, report = solve_state(grid, f, u, tol=cfg["tol"], max_iter=cfg["max_iter"])
    save_field(_out_path(args, "state.csv"), y)
    save_field(_out_path(args, "control.csv"), u)
    print(f"state solve: iterations={report.iterations} "
          f"residual={report.residual:.3e} converged={report.converged}")
    return 0 if report.converged else 3


def cmd_solve_ocp(args) -> int:
    defaults = {
        "problem": "benchmark",
        "h": 2.0 ** -6 if _desk(args) else 2.0 ** -7,
        "alpha": 1e-3,
        "noise": 0.1,
        "threshold": 5.0,
        "max_outer": 30,
        "tol": 1e-10,
        "surrogate": "",
    }
    cfg = resolve_config(defaults, args)
    if cfg["problem"] == "benchmark":
        f = _load_surrogate(cfg["surrogate"], "xy") if cfg["surrogate"] else None
        prob = problems.benchmark_problem(cfg["h"], cfg["alpha"], cfg["noise"],
                                          cfg["seed"], f=f)
    elif cfg["problem"] == "allen-cahn":
        f = _load_surrogate(cfg["surrogate"], "y") if cfg["surrogate"] else None
        prob = problems.allen_cahn_problem(cfg["h"], cfg["alpha"], f=f)
    else:
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    params = ocp.SolverParams(switch_threshold=cfg["threshold"],
                              max_outer=cfg["max_outer"], tol=cfg["tol"])
    point, history = ocp.solve_hybrid(prob, params)
    save_field(_out_path(args, "control.csv"), point.u)
    save_field(_out_path(args, "state.csv"), point.y)
    ocp.write_history(_out_path(args, "history.csv"), history)
    print(f"outer iterations={len(history)} status={history.status} "
          f"residual={point.total_residual:.3e}")
    return 0 if history.status in ("converged", "max_iter") else 3


def cmd_solve_qmri(args) -> int:
    defaults = {
        "n": 64 if _desk(args) else 181,
        "mask_fraction": 0.25,
        "sigma": 30.0,
        "dict": "medium",
        "model": "exact",
        "drnn": "",
        "max_outer": 40,
        "tol": 1e-3,
        "phantom": "",
        "kspace": "",
    }
    cfg = resolve_config(defaults, args)
    seq = SequenceSpec()
    truth = (qmri.load_phantom(cfg["phantom"]) if cfg["phantom"]
             else qmri.synth_phantom(cfg["n"]))
    exact = ExactBlochModel(seq)
    if cfg["kspace"]:
        data = qmri.load_kspace(cfg["kspace"])
    else:
        mask = qmri.cartesian_mask(truth.shape, cfg["mask_fraction"], cfg["seed"],
                                   frames=seq.length)
        data = qmri.generate_kspace(truth, exact, mask, cfg["sigma"], cfg["seed"])
    if cfg["model"] == "drnn":
        if not cfg["drnn"]:
            raise ConfigError("model=drnn needs drnn=<directory>")
        model = qmri.load_drnn(cfg["drnn"])
    elif cfg["model"] == "exact":
        model = exact
    else:
        raise ConfigError(f"unknown model {cfg['model']!r}")
    t1, t2 = dictionary_grid(cfg["dict"])
    dictionary = build_dictionary(t1, t2, seq)
    init = qmri.dictionary_match_init(data, dictionary)
    params = qmri.QmriSqpParams(tol=cfg["tol"], max_outer=cfg["max_outer"])
    rec, history = qmri.solve_qmri_sqp(data, model, init, params=params)
    save_field(_out_path(args, "t1.csv"), rec.t1)
    save_field(_out_path(args, "t2.csv"), rec.t2)
    save_field(_out_path(args, "rho.csv"), rec.rho)
    ocp.write_history(_out_path(args, "history.csv"), history)
    errs = qmri.relative_errors(rec, truth)
    print(f"iterations={len(history)} status={history.status} "
          f"errors: T1={errs['t1']:.4f} T2={errs['t2']:.4f} rho={errs['rho']:.4f}")
    return 0 if history.status in ("converged", "max_iter") else 3


def cmd_verify_errors(args) -> int:
    defaults = {
        "alpha": 1e-3,
        "dim": 12,
        "eps": (1e-1, 3e-2, 1e-2, 3e-3, 1e-3),
        "margin": 0.5,
    }
    cfg = resolve_config(defaults, args)
    family = problems.LinearQuadraticFamily(cfg["dim"], cfg["alpha"], cfg["seed"])
    rows = family.sweep(cfg["eps"])
    report = verify_rate(rows, cfg["alpha"], mode="perfect", margin=cfg["margin"])
    write_error_report(_out_path(args, "error_report.csv"), report)
    print(f"slope={report.slope:.4f} bound_everywhere={report.passed}")
    return 0 if report.passed else 3


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "solve-pde": cmd_solve_pde,
    "solve-ocp": cmd_solve_ocp,
    "solve-qmri": cmd_solve_qmri,
    "verify-errors": cmd_verify_errors,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnocp",
        description="Surrogate-model PDE control and MR parameter mapping.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--scale", choices=("paper", "desk"), default="desk",
                       help="problem size preset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, DivergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
