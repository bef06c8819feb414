"""Command-line entry points: train, grid, verify.

Experiment configs are flat INI files (one section per config group, all
defaults overridable); metrics land in a fixed-schema CSV whose floats are
written with 17 significant digits so parsing the file back reproduces the
records exactly.  The ``SNOPT_SEED`` environment variable overrides the
config seed.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import math
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import adjoint, curvature, kfac, loss, numerics, oracle, optimizer, trainer
from . import vector_field as vf
from .odesolve import SolverConfig
from .trainer import (DatasetConfig, ExperimentConfig, HorizonConfig, LossConfig,
                      ModelConfig, OptimizerConfig, TrainAbort, TrainRecord)

CSV_HEADER = "iteration,wall_clock_s,train_loss,train_acc,test_loss,test_acc,nfe_fwd,nfe_bwd,t1"


class ConfigError(ValueError):
    pass


def _parse_tuple(text: str, cast):
    items = [s.strip() for s in text.split(",") if s.strip()]
    return tuple(cast(s) for s in items)


def _coerce(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        cast = float if (current and isinstance(current[0], float)) else (
            int if (current and isinstance(current[0], int)) else str)
        return _parse_tuple(text, cast)
    if current is None:
        return float(text) if text.strip() else None
    return text.strip()


_SECTIONS = {
    "dataset": ("dataset", DatasetConfig),
    "model": ("model", ModelConfig),
    "loss": ("loss", LossConfig),
    "optimizer": ("optimizer", OptimizerConfig),
    "solver": ("solver", SolverConfig),
    "train": (None, None),  # top-level scalars
    "horizon": ("horizon", HorizonConfig),
}

_TRAIN_KEYS = ("t0", "t1", "iterations", "batch_size", "grid_samples",
               "eval_every", "seed")


def _coerced_updates(cfg: ExperimentConfig, section: str,
                     items: list[tuple[str, str]]) -> dict:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    attr, _ = _SECTIONS[section]
    holder = cfg if attr is None else getattr(cfg, attr)
    valid = set(_TRAIN_KEYS) if attr is None else {f.name for f in fields(holder)}
    updates = {}
    for key, value in items:
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = _coerce(getattr(holder, key), value)
    return updates


def _apply_section(cfg: ExperimentConfig, section: str,
                   items: list[tuple[str, str]]) -> ExperimentConfig:
    """Apply a whole section at once so partial states never get validated."""
    updates = _coerced_updates(cfg, section, items)
    attr, _ = _SECTIONS[section]
    if attr is None:
        return replace(cfg, **updates)
    return replace(cfg, **{attr: replace(getattr(cfg, attr), **updates)})


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from an INI file plus dotted overrides."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    try:
        # coerce everything against the defaults, then construct each group once
        staged: dict[str, list[tuple[str, str]]] = {}
        for section in parser.sections():
            staged.setdefault(section, []).extend(parser.items(section))
        for ov in overrides or []:
            section, key, value = _split_override(ov)
            staged.setdefault(section, []).append((key, value))
        cfg = ExperimentConfig()
        for section, items in staged.items():
            cfg = _apply_section(cfg, section, items)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    if "SNOPT_SEED" in os.environ:
        cfg = replace(cfg, seed=int(os.environ["SNOPT_SEED"]))
    return cfg


def _split_override(spec: str) -> tuple[str, str, str]:
    if "=" not in spec or "." not in spec.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {spec!r}")
    path, value = spec.split("=", 1)
    section, key = path.split(".", 1)
    return section.strip(), key.strip(), value


def apply_override(cfg: ExperimentConfig, spec: str) -> ExperimentConfig:
    """Apply one ``section.key=value`` override to an existing config."""
    section, key, value = _split_override(spec)
    try:
        return _apply_section(cfg, section, [(key, value)])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_records_csv(path: str, records: list[TrainRecord],
                      comments: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(",".join(_fmt(v) for v in (
                r.iteration, r.wall_clock_s, r.train_loss, r.train_acc,
                r.test_loss, r.test_acc, r.nfe_fwd, r.nfe_bwd, r.t1)) + "\n")


def read_records_csv(path: str) -> list[TrainRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("iteration,"):
                continue
            parts = line.split(",")
            records.append(TrainRecord(
                iteration=int(parts[0]), wall_clock_s=float(parts[1]),
                train_loss=float(parts[2]), train_acc=float(parts[3]),
                test_loss=float(parts[4]), test_acc=float(parts[5]),
                nfe_fwd=int(parts[6]), nfe_bwd=int(parts[7]), t1=float(parts[8])))
    return records


def cmd_train(config_path: str, out_path: str, overrides: list[str] | None = None) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        records = trainer.train(cfg)
    except TrainAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    comments = [f"override {ov}" for ov in overrides or []]
    write_records_csv(out_path, records, comments)
    print(f"wrote {len(records)} records to {out_path}")
    return 0


def _grid_cells(grid_path: str) -> list[list[tuple[str, str]]]:
    """Cartesian product of the comma-separated values in [grid]."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(grid_path)
    if not parser.has_section("grid"):
        return []
    axes = []
    for key, values in parser.items("grid"):
        choices = [v.strip() for v in values.split(",") if v.strip()]
        axes.append([(key, v) for v in choices])
    if not axes:
        return []
    return [list(cell) for cell in itertools.product(*axes)]


def _final_metrics(records: list[TrainRecord]) -> tuple[float, float, float, float]:
    if not records:
        return (math.nan,) * 4
    last = records[-1]
    return last.train_loss, last.train_acc, last.test_loss, last.test_acc


def cmd_grid(config_path: str, grid_path: str, out_dir: str,
             overrides: list[str] | None = None) -> int:
    try:
        base = load_config(config_path, overrides)
        if not os.path.exists(grid_path):
            raise ConfigError(f"grid file not found: {grid_path}")
        cells = _grid_cells(grid_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)

    summary_path = os.path.join(out_dir, "summary.csv")
    rows = []
    for idx, cell in enumerate(cells):
        cfg = base
        try:
            for key, value in cell:
                cfg = apply_override(cfg, f"{key}={value}")
        except ConfigError as exc:
            print(f"config error in cell {idx}: {exc}", file=sys.stderr)
            return 1
        label = ";".join(f"{k}={v}" for k, v in cell)
        try:
            records = trainer.train(cfg)
            aborted = 0
        except TrainAbort as exc:
            records = []
            aborted = 1
            print(f"cell {idx} aborted: {exc}", file=sys.stderr)
        write_records_csv(os.path.join(out_dir, f"cell_{idx:03d}.csv"), records,
                          [f"cell {label}"])
        tl, ta, vl, va = _final_metrics(records)
        rows.append((idx, label, tl, ta, vl, va, aborted))

    with open(summary_path, "w") as fh:
        fh.write("cell,settings,final_train_loss,final_train_acc,"
                 "final_test_loss,final_test_acc,aborted\n")
        for idx, label, tl, ta, vl, va, aborted in rows:
            fh.write(f"{idx},\"{label}\",{_fmt(tl)},{_fmt(ta)},{_fmt(vl)},{_fmt(va)},{aborted}\n")

    finished = [r for r in rows if not r[6] and not math.isnan(r[2])]
    if finished:
        best = min(finished, key=lambda r: r[2])
        print(f"best cell {best[0]}: {best[1]} (train loss {best[2]:.6g})")
    print(f"wrote {len(rows)} cells to {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# verification checks: each returns (name, error, tolerance)

def _check_gradient(tol_scale: float):
    spec = vf.MlpSpec(dims=(2, 4, 2), activations=("tanh", "identity"))
    theta = vf.init_params(spec, 0)
    rng = np.random.Generator(np.random.Philox(1))
    x0 = rng.uniform(-1, 1, size=(8, 2))
    target = rng.uniform(-1, 1, size=(8, 2))
    lossfn = loss.TerminalLoss(kind="mse", target=target)
    cfg = SolverConfig(method="rk4", fixed_step=1e-2)

    def fwd(th):
        w = vf.unpack_params(spec, th)
        fld = lambda t, y: vf._forward(spec, w, t, y.reshape(8, 2)).zs[-1].ravel()
        from .odesolve import odesolve
        return odesolve(x0.ravel(), 0.0, 1.0, fld, cfg).terminal_state.reshape(8, 2)

    x1 = fwd(theta)
    grad, _, _, _ = adjoint.adjoint_gradient(spec, theta, x1, loss.grad_x1(lossfn, x1),
                                             0.0, 1.0, cfg)
    fd = oracle.fd_gradient(lambda th: loss.loss_value(lossfn, fwd(th)), theta)
    err = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
    return "adjoint gradient vs finite differences", float(err), 1e-4 * tol_scale


def _check_dense_curvature(tol_scale: float):
    spec = vf.MlpSpec(dims=(2, 4, 2), activations=("tanh", "identity"))
    theta = vf.init_params(spec, 3)
    x0 = np.array([0.4, -0.2])
    cfg = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    from .odesolve import odesolve
    fld = lambda t, y: vf.eval(spec, theta, t, y)[0]
    x1 = odesolve(x0, 0.0, 1.0, fld, cfg).terminal_state
    lossfn = loss.TerminalLoss(kind="mse", target=np.zeros(2))
    curv = loss.terminal_curvature(lossfn, x1, 0.0, 1.0, "exact_rank")
    dense = curvature.dense_sweep(spec, theta, x1, curv, 0.0, 1.0, cfg)
    jac = oracle.fd_flow_jacobian(spec, theta, x0, 0.0, 1.0, cfg)
    ref = jac.T @ curv.hessian() @ jac
    err = np.linalg.norm(dense.quu - ref) / np.linalg.norm(ref)
    return "dense curvature vs flow-jacobian reference", float(err), 1e-3 * tol_scale


def _check_lowrank_equivalence(tol_scale: float):
    spec = vf.MlpSpec(dims=(2, 3, 2), activations=("tanh", "identity"))
    theta = vf.init_params(spec, 5)
    rng = np.random.Generator(np.random.Philox(7))
    x1 = rng.uniform(-1, 1, size=2)
    curv = loss.TerminalCurvature(grad=rng.normal(size=2),
                                  factors=[rng.normal(size=2) for _ in range(2)],
                                  mode="exact_rank")
    cfg = SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10)
    dense = curvature.dense_sweep(spec, theta, x1, curv, 0.0, 1.0, cfg)
    low = curvature.lowrank_sweep(spec, theta, x1, curv, 0.0, 1.0, cfg)
    err = max(
        np.linalg.norm(low.recon_qxx() - dense.qxx) / max(np.linalg.norm(dense.qxx), 1e-300),
        np.linalg.norm(low.recon_qxu() - dense.qxu) / max(np.linalg.norm(dense.qxu), 1e-300),
        np.linalg.norm(low.recon_quu() - dense.quu) / max(np.linalg.norm(dense.quu), 1e-300),
    )
    return "low-rank sweep vs dense sweep", float(err), 1e-6 * tol_scale


def _check_kron_update(tol_scale: float):
    rng = np.random.Generator(np.random.Philox(9))
    p, l = 4, 3
    m = rng.normal(size=(p, p))
    a = m @ m.T + 0.1 * np.eye(p)
    m = rng.normal(size=(l, l))
    b = m @ m.T + 0.1 * np.eye(l)
    grad = rng.normal(size=p * l)
    theta = rng.normal(size=p * l)
    eps = 0.05
    factors = kfac.KroneckerFactors(a_factors=[a], b_factors=[b], dt=0.1,
                                    grid=np.array([1.0, 0.0]))
    state = optimizer.SnoptState(lr=1.0, epsilon=eps, amortization=0.0)
    delta = theta - optimizer.snopt_step(state, factors, grad, theta)
    ea, eb = numerics.sym_eigen(a), numerics.sym_eigen(b)
    basis = numerics.kron(ea.vectors, eb.vectors)
    xg = basis.T @ grad
    want = basis @ (xg / (xg ** 2 + eps))
    err = np.linalg.norm(delta - want) / np.linalg.norm(want)
    return "eigenbasis update vs dense assembly", float(err), 1e-8 * tol_scale


CHECKS = (_check_gradient, _check_dense_curvature, _check_lowrank_equivalence,
          _check_kron_update)


def cmd_verify(tol_scale: float = 1.0) -> int:
    ok = True
    for check in CHECKS:
        name, err, tol = check(tol_scale)
        passed = err < tol
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: error {err:.3e} (tol {tol:.1e})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="snopt-kit",
                                     description="train small Neural ODEs with a "
                                                 "second-order Kronecker-preconditioned optimizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("config", help="INI config file")
    p_train.add_argument("--out", required=True, help="metrics CSV path")
    p_train.add_argument("--override", action="append", default=[],
                         help="section.key=value (repeatable)")

    p_grid = sub.add_parser("grid", help="run a hyperparameter sweep")
    p_grid.add_argument("config", help="INI config file")
    p_grid.add_argument("grid", help="INI grid file with a [grid] section")
    p_grid.add_argument("--out-dir", required=True)
    p_grid.add_argument("--override", action="append", default=[])

    p_verify = sub.add_parser("verify", help="run the derivative and update checks")
    p_verify.add_argument("--tol-scale", type=float, default=1.0,
                          help="multiply every check tolerance")

    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.override)
    if args.command == "grid":
        return cmd_grid(args.config, args.grid, args.out_dir, args.override)
    return cmd_verify(args.tol_scale)


if __name__ == "__main__":
    sys.exit(main())
