"""Training loop: forward solve, backward sweep, update, metrics.

One iteration is one forward solve on a minibatch plus one backward
sweep: the factor-accumulating sweep for the second-order rule, the plain
adjoint for the first-order baselines.  The readout (when present) is
updated in the same iteration by a first-order rule; its curvature is
never tracked.  Train metrics are evaluated on the full training split at
the pre-update parameters, so a zero learning rate yields a constant loss
sequence; test metrics run on the evaluation cadence and on the final
iteration.

Randomness is split into three Philox streams derived from the run seed:
the dataset, parameter/readout initialization (seed+1), and batch
sampling (seed+2).  Two runs with the same config produce identical
records up to wall-clock fields.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import vector_field as vf
from .adjoint import adjoint_gradient
from .curvature import apply_weight_decay
from .horizon import HorizonState, first_order_horizon_step, horizon_step, horizon_terms
from .kfac import accumulate_factors, make_grid
from .loss import (Readout, TerminalLoss, accuracy, grad_x1, init_readout,
                   loss_value, readout_grads, terminal_curvature)
from .odesolve import NonFiniteState, SolveReport, SolverConfig, odesolve
from .optimizer import AdamState, SgdState, SnoptState, adam_step, sgd_step, snopt_step


class TrainAbort(RuntimeError):
    """Training hit a non-finite state; carries the failing iteration."""

    def __init__(self, iteration: int, cause: str):
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class DatasetConfig:
    kind: str = "spirals"            # spirals | circles | regression
    n_per_class: int = 250
    noise_sd: float = 0.05
    radii: tuple[float, ...] = (0.5, 1.0)
    n: int = 400                     # regression sample count
    test_fraction: float = 0.2


@dataclass
class ModelConfig:
    dims: tuple[int, ...] = (2, 16, 16, 2)
    activations: tuple[str, ...] = ("tanh", "tanh", "identity")
    time_input: str = "none"
    bias: bool = True

    def spec(self) -> vf.MlpSpec:
        return vf.MlpSpec(dims=tuple(self.dims), activations=tuple(self.activations),
                          time_input=self.time_input, bias=self.bias)


@dataclass
class LossConfig:
    kind: str = "softmax_ce"
    readout_classes: int = 2         # 0 disables the readout
    curvature: str = "gauss_newton_scaled"


@dataclass
class OptimizerConfig:
    kind: str = "adam"               # adam | sgd | snopt
    lr: float = 1e-3
    weight_decay: float = 0.0
    epsilon: float = 0.05            # snopt Tikhonov damping
    amortization: float = 0.75       # snopt eigenbasis EMA
    momentum: float = 0.9            # sgd
    readout_rule: str = "adam"       # first-order rule for the readout
    readout_lr: float = 0.01         # readout scale differs from the ODE parameters


@dataclass
class HorizonConfig:
    enabled: bool = False
    policy: str = "feedback"         # feedback | first_order
    penalty: float = 0.5
    lr: float = 0.3
    period: int = 75
    t_min: float = 0.05
    t_max: float = 2.0
    ema: float = 0.9


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        method="dopri5", rtol=1e-3, atol=1e-3))
    t0: float = 0.0
    t1: float = 1.0
    iterations: int = 500
    batch_size: int = 128
    grid_samples: int = 33
    eval_every: int = 25
    seed: int = 0
    horizon: HorizonConfig = field(default_factory=HorizonConfig)

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")
        if self.batch_size < 1:
            raise ValueError("need batch_size >= 1")


@dataclass
class TrainRecord:
    iteration: int
    wall_clock_s: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    nfe_fwd: int
    nfe_bwd: int
    t1: float


def build_dataset(cfg: DatasetConfig, seed: int) -> data_mod.Dataset:
    if cfg.kind == "spirals":
        return data_mod.make_spirals(cfg.n_per_class, cfg.noise_sd, seed,
                                     test_fraction=cfg.test_fraction)
    if cfg.kind == "circles":
        return data_mod.make_circles(cfg.n_per_class, tuple(cfg.radii), cfg.noise_sd,
                                     seed, test_fraction=cfg.test_fraction)
    if cfg.kind == "regression":
        return data_mod.make_regression(cfg.n, seed, test_fraction=cfg.test_fraction)
    raise ValueError(f"unknown dataset kind {cfg.kind!r}")


def _loss_for(cfg: LossConfig, labels, readout: Readout | None) -> TerminalLoss:
    return TerminalLoss(kind=cfg.kind, target=labels, readout=readout)


class _Run:
    """Mutable pieces of one training run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.spec = cfg.model.spec()
        self.ds = build_dataset(cfg.dataset, cfg.seed)
        self.theta = vf.init_params(self.spec, cfg.seed + 1)
        if cfg.loss.readout_classes > 0 and cfg.loss.kind == "softmax_ce":
            self.readout = init_readout(self.spec.state_dim, cfg.loss.readout_classes,
                                        cfg.seed + 1)
        else:
            self.readout = None
        self.batch_rng = np.random.Generator(np.random.Philox(cfg.seed + 2))
        self.t1 = cfg.t1

        kind = cfg.optimizer.kind
        if kind == "snopt":
            self.opt_state = SnoptState(lr=cfg.optimizer.lr, epsilon=cfg.optimizer.epsilon,
                                        amortization=cfg.optimizer.amortization)
        elif kind == "adam":
            self.opt_state = AdamState(lr=cfg.optimizer.lr)
        elif kind == "sgd":
            self.opt_state = SgdState(lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")

        ro_lr = cfg.optimizer.readout_lr
        if cfg.optimizer.readout_rule == "adam":
            self.ro_w_state, self.ro_b_state = AdamState(lr=ro_lr), AdamState(lr=ro_lr)
            self.ro_step = adam_step
        elif cfg.optimizer.readout_rule == "sgd":
            self.ro_w_state, self.ro_b_state = SgdState(lr=ro_lr), SgdState(lr=ro_lr)
            self.ro_step = sgd_step
        else:
            raise ValueError(f"unknown readout rule {cfg.optimizer.readout_rule!r}")

        self.horizon = None
        if cfg.horizon.enabled:
            self.horizon = HorizonState(t_bar=cfg.t1, penalty=cfg.horizon.penalty,
                                        lr=cfg.horizon.lr, period=cfg.horizon.period,
                                        t_min=cfg.horizon.t_min, t_max=cfg.horizon.t_max,
                                        ema=cfg.horizon.ema)

    def forward(self, x0: np.ndarray, t1: float | None = None) -> tuple[np.ndarray, SolveReport]:
        t1 = self.t1 if t1 is None else t1
        batch, m = x0.shape
        weights = vf.unpack_params(self.spec, self.theta)

        def fld(t, y):
            return vf._forward(self.spec, weights, t, y.reshape(batch, m)).zs[-1].ravel()

        rep = odesolve(x0.ravel(), self.cfg.t0, t1, fld, self.cfg.solver)
        return rep.terminal_state.reshape(batch, m), rep

    def evaluate(self, idx: np.ndarray) -> tuple[float, float]:
        x1, _ = self.forward(self.ds.inputs[idx])
        lf = _loss_for(self.cfg.loss, self.ds.labels[idx], self.readout)
        return loss_value(lf, x1), accuracy(lf, x1)


def train(config: ExperimentConfig, on_iteration=None) -> list[TrainRecord]:
    """Run the configured experiment and return one record per iteration.

    ``on_iteration(iteration, run)`` is called after each update with the
    live run state; experiment scripts use it to sample internals (for
    example the moving averages of the horizon policy).
    """
    run = _Run(config)
    cfg = config
    records: list[TrainRecord] = []
    started = time.perf_counter()
    gamma = cfg.optimizer.weight_decay

    for it in range(1, cfg.iterations + 1):
        try:
            batch_idx = run.batch_rng.choice(
                run.ds.train_idx, size=min(cfg.batch_size, run.ds.n_train), replace=False)
            x0 = run.ds.inputs[batch_idx]
            lossfn = _loss_for(cfg.loss, run.ds.labels[batch_idx], run.readout)

            x1, rep_fwd = run.forward(x0)
            train_loss, train_acc = run.evaluate(run.ds.train_idx)
            if not np.isfinite(train_loss):
                raise NonFiniteState(f"train loss {train_loss}")

            theta_before = run.theta
            if cfg.optimizer.kind == "snopt":
                curv = terminal_curvature(lossfn, x1, cfg.t0, run.t1,
                                          mode=cfg.loss.curvature)
                grid = make_grid(cfg.t0, run.t1, cfg.grid_samples)
                factors, grad, rep_bwd = accumulate_factors(
                    run.spec, run.theta, x1, curv, grid, cfg.solver)
                grad, factors = apply_weight_decay(grad, factors, gamma, run.theta)
                run.theta = snopt_step(run.opt_state, factors, grad, run.theta)
                phi_grad = curv.grad
            else:
                phi_grad = grad_x1(lossfn, x1)
                grad, _, _, rep_bwd = adjoint_gradient(
                    run.spec, run.theta, x1, phi_grad, cfg.t0, run.t1, cfg.solver)
                grad, _ = apply_weight_decay(grad, None, gamma, run.theta)
                if cfg.optimizer.kind == "adam":
                    run.theta = adam_step(run.opt_state, grad, run.theta)
                else:
                    run.theta = sgd_step(run.opt_state, grad, run.theta)

            if run.readout is not None:
                d_w, d_b = readout_grads(lossfn, x1)
                w_flat = run.ro_step(run.ro_w_state,
                                     d_w.ravel() + gamma * run.readout.weight.ravel(),
                                     run.readout.weight.ravel())
                run.readout.weight = w_flat.reshape(run.readout.weight.shape)
                run.readout.bias = run.ro_step(run.ro_b_state, d_b, run.readout.bias)

            if run.horizon is not None:
                terms = horizon_terms(run.spec, run.theta, x1, phi_grad, grad,
                                      run.horizon.t_bar, run.horizon.penalty)
                run.horizon.observe(terms)
                if it % run.horizon.period == 0:
                    if cfg.horizon.policy == "feedback":
                        run.t1 = horizon_step(run.horizon, terms, run.theta - theta_before)
                    else:
                        run.t1 = first_order_horizon_step(run.horizon, run.horizon.avg_qt)

            test_loss = test_acc = float("nan")
            if (it % cfg.eval_every == 0 or it == cfg.iterations) and run.ds.test_idx.size:
                test_loss, test_acc = run.evaluate(run.ds.test_idx)
        except NonFiniteState as exc:
            raise TrainAbort(it, str(exc)) from exc

        records.append(TrainRecord(
            iteration=it, wall_clock_s=time.perf_counter() - started,
            train_loss=train_loss, train_acc=train_acc,
            test_loss=test_loss, test_acc=test_acc,
            nfe_fwd=rep_fwd.nfe, nfe_bwd=rep_bwd.nfe, t1=run.t1))
        if on_iteration is not None:
            on_iteration(it, run)
    return records


def memory_probe(config: ExperimentConfig, rank_override: int | None = None) -> int:
    """Peak live state of one backward pass, in array elements.

    Measured off the actual packed vectors (plus retained factor storage
    for the second-order rule), so the number is independent of solver
    tolerance and step counts by construction — the test suite checks
    that, not this docstring.
    """
    run = _Run(config)
    cfg = config
    batch_idx = run.batch_rng.choice(run.ds.train_idx,
                                     size=min(cfg.batch_size, run.ds.n_train), replace=False)
    x0 = run.ds.inputs[batch_idx]
    lossfn = _loss_for(cfg.loss, run.ds.labels[batch_idx], run.readout)
    x1, _ = run.forward(x0)

    probe: dict = {}
    if cfg.optimizer.kind == "snopt":
        curv = terminal_curvature(lossfn, x1, cfg.t0, run.t1, mode=cfg.loss.curvature)
        if rank_override is not None:
            curv = replace(curv, factors=_synthetic_factors(curv, rank_override))
        grid = make_grid(cfg.t0, run.t1, cfg.grid_samples)
        accumulate_factors(run.spec, run.theta, x1, curv, grid, cfg.solver, probe=probe)
        return probe["state_elements"] + probe["factor_elements"]
    a1 = grad_x1(lossfn, x1)
    adjoint_gradient(run.spec, run.theta, x1, a1, cfg.t0, run.t1, cfg.solver, probe=probe)
    return probe["state_elements"]


def _synthetic_factors(curv, rank: int) -> list[np.ndarray]:
    base = np.atleast_2d(curv.factors[0])
    return [base * (i + 1.0) for i in range(rank)]
