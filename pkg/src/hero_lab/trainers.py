"""Optimization rules and the training loop.

Four update rules share one momentum/cosine-schedule backbone:

sgd          plain batch gradient plus weight decay.
first_order  gradient taken at a perturbed point W* = W + h z, where z
             points along the batch gradient and is rescaled per layer to
             the layer's weight norm; no curvature term.
grad_l1      batch gradient plus beta * H sign(g), a finite-difference
             curvature push along the gradient sign pattern (the gradient
             of an l1 penalty on the batch gradient, with sign treated as
             locally constant).
hero         the first_order step plus a curvature penalty: with
             d = grad(W*) - grad(W) restricted to weight tensors, the
             penalty value per layer is ||d||^2 and its parameter
             gradient is evaluated as 2 (grad(W* + h d) - grad(W*)),
             one extra backward pass at a shifted point. Constant factors
             of the finite-difference step are absorbed into the penalty
             strength, so reported penalty values scale with h.

Per step, hero therefore costs exactly two loss backward passes plus one
penalty backward pass; the tape counters assert that rather than assume
it. Setting the penalty strength to zero reproduces first_order bit for
bit, and setting beta to zero reproduces sgd bit for bit, because the
extra work is skipped entirely rather than multiplied by zero.

Batch normalization runs in training mode only for the clean pass; the
perturbed and shifted passes reuse the clean pass's batch statistics so
all finite differences compare the same function.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import models, seeding
from .errors import HeroLabError, NumericalError

RULES = ("sgd", "first_order", "grad_l1", "hero")
SCALINGS = ("layer_norm", "elementwise")

# treat a gradient (or weight) block with l2 norm below this as zero when
# it appears in a denominator
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainerConfig:
    rule: str
    lr: float
    total_steps: int
    momentum: float = 0.0
    weight_decay: float = 0.0
    perturb_step: float = 0.0   # h: perturbation scale and FD step
    hessian_reg: float = 0.0    # curvature penalty strength (hero)
    grad_l1_reg: float = 0.0    # gradient-l1 penalty strength (grad_l1)
    perturbation_scaling: str = "layer_norm"

    def __post_init__(self):
        problems = []
        if self.rule not in RULES:
            problems.append(f"rule must be one of {RULES}, got {self.rule!r}")
        if not self.lr >= 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.perturb_step >= 0:
            problems.append(f"perturb_step must be >= 0, got {self.perturb_step}")
        if not self.hessian_reg >= 0:
            problems.append(f"hessian_reg must be >= 0, got {self.hessian_reg}")
        if not self.grad_l1_reg >= 0:
            problems.append(f"grad_l1_reg must be >= 0, got {self.grad_l1_reg}")
        if self.perturbation_scaling not in SCALINGS:
            problems.append(f"perturbation_scaling must be one of {SCALINGS}, "
                            f"got {self.perturbation_scaling!r}")
        if self.rule in ("first_order", "hero") and not self.perturb_step > 0:
            problems.append(f"rule {self.rule!r} needs perturb_step > 0, got {self.perturb_step}")
        if problems:
            raise HeroLabError("; ".join(problems))


@dataclass
class TrainerState:
    t: int = 0
    lr: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    running_stats: dict = field(default_factory=dict)


@dataclass
class StepMetrics:
    loss: float
    accuracy: float | None
    lr: float
    grad_norm: float
    z_norms: dict[str, float] = field(default_factory=dict)
    reg_values: dict[str, float] = field(default_factory=dict)
    reg_total: float | None = None


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float | None
    eval_loss: float | None
    eval_acc: float | None
    hessian_norm: float | None
    lr: float
    z_norms: dict[str, float]
    reg_values: dict[str, float]
    reg_total: float | None
    wall_ms: float


@dataclass
class DiagnosticsConfig:
    hessian_interval: int = 0       # 0 disables curvature tracking
    hessian_batch_size: int = 256
    hessian_step: float | None = None  # defaults to the trainer's perturb_step


@dataclass
class TrainResult:
    params: models.ParamSet
    state: TrainerState
    records: list[EpochMetrics]


def cosine_lr(t: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at t=0 to 0 at t=total_steps."""
    if total_steps < 1:
        raise HeroLabError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= t <= total_steps:
        raise HeroLabError(f"step {t} outside schedule range [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def layer_perturbation(params: models.ParamSet, grads: ad.GradientSet,
                       scaling: str = "layer_norm") -> ad.GradientSet:
    """Ascent direction z, one block per parameter.

    Weight tensors get the normalized gradient direction rescaled so
    ||z|| equals the layer's weight norm ("layer_norm"), or the
    coordinatewise variant w*w/||w|| times g/||g|| ("elementwise").
    Biases and bn parameters always get zeros, as do layers whose
    gradient block is numerically zero.
    """
    if scaling not in SCALINGS:
        raise HeroLabError(f"unknown perturbation scaling {scaling!r}")
    z: ad.GradientSet = {}
    for e in params:
        if not e.trainable:
            continue
        if not e.perturbable:
            z[e.name] = np.zeros_like(e.value)
            continue
        g = grads[e.name]
        gn = float(np.linalg.norm(g))
        wn = float(np.linalg.norm(e.value))
        if gn < NORM_FLOOR or wn < NORM_FLOOR:
            z[e.name] = np.zeros_like(e.value)
        elif scaling == "layer_norm":
            z[e.name] = (wn / gn) * g
        else:
            z[e.name] = (e.value * e.value / wn) * (g / gn)
    return z


class _NetModel:
    """Adapter giving ModelSpec the loss-record interface steps consume."""

    def __init__(self, spec: models.ModelSpec):
        self.spec = spec

    def loss_record(self, params, batch, *, mode="train", running=None, frozen_stats=None):
        return models.model_loss(self.spec, params, batch, mode=mode,
                                 running=running, frozen_stats=frozen_stats)


def _resolve_model(model):
    if isinstance(model, models.ModelSpec):
        return _NetModel(model)
    if hasattr(model, "loss_record"):
        return model
    raise HeroLabError(f"expected a ModelSpec or loss-record provider, got {type(model)!r}")


def _check_finite(rec_loss: float, grads: ad.GradientSet, t: int):
    if not np.isfinite(rec_loss):
        raise NumericalError(f"non-finite loss {rec_loss!r} at step {t}", step=t)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r} at step {t}", step=t)


def _apply(params, state, cfg, update, batch_stats):
    """Momentum + cosine-lr descent; returns the new params and state."""
    lr = cosine_lr(state.t, cfg.total_steps, cfg.lr)
    velocity = {}
    new_values = {}
    for e in params:
        if not e.trainable:
            continue
        u = update[e.name]
        v_prev = state.velocity.get(e.name)
        v = u if v_prev is None else cfg.momentum * v_prev + u
        velocity[e.name] = v
        new_values[e.name] = e.value - lr * v
    running = state.running_stats
    if batch_stats:
        running = models.update_running_stats(running, batch_stats)
    new_state = TrainerState(t=state.t + 1, lr=lr, velocity=velocity, running_stats=running)
    return params.replaced(new_values), new_state, lr


def sgd_step(model, params, state, cfg, batch):
    model = _resolve_model(model)
    rec = model.loss_record(params, batch, mode="train", running=state.running_stats)
    g = ad.backward(rec)
    _check_finite(rec.loss, g, state.t)
    update = {e.name: g[e.name] + cfg.weight_decay * e.value for e in params if e.trainable}
    params, state, lr = _apply(params, state, cfg, update, rec.aux.get("bn_stats"))
    m = StepMetrics(loss=rec.loss, accuracy=rec.aux.get("accuracy"), lr=lr,
                    grad_norm=ad.global_norm(g))
    return params, state, m


def _perturbed_core(model, params, state, cfg, batch, gamma):
    model = _resolve_model(model)
    rec = model.loss_record(params, batch, mode="train", running=state.running_stats)
    g = ad.backward(rec)
    _check_finite(rec.loss, g, state.t)
    z = layer_perturbation(params, g, cfg.perturbation_scaling)
    moved = params.shifted(z, cfg.perturb_step)
    frozen = rec.aux.get("bn_stats")
    rec_p = model.loss_record(moved, batch, mode="frozen", frozen_stats=frozen)
    g_p = ad.backward(rec_p)
    _check_finite(rec_p.loss, g_p, state.t)

    d: ad.GradientSet = {}
    reg_values: dict[str, float] = {}
    for e in params:
        if e.trainable and e.perturbable:
            delta = g_p[e.name] - g[e.name]
            d[e.name] = delta
            reg_values[e.name] = float(np.dot(delta.ravel(), delta.ravel()))
    reg_total = float(sum(reg_values.values()))

    reg_grad = None
    if gamma != 0.0 and reg_total > 0.0:
        # gradient of the penalty at the perturbed point: finite difference
        # along d with the same step h, constant factors absorbed upstream
        shifted = moved.shifted(d, cfg.perturb_step)
        with ad.tape_purpose("reg"):
            rec_r = model.loss_record(shifted, batch, mode="frozen", frozen_stats=frozen)
            g_r = ad.backward(rec_r)
        _check_finite(rec_r.loss, g_r, state.t)
        reg_grad = {name: 2.0 * (g_r[name] - g_p[name]) for name in d}

    update = {}
    for e in params:
        if not e.trainable:
            continue
        u = g_p[e.name] + cfg.weight_decay * e.value
        if reg_grad is not None and e.perturbable:
            u = u + gamma * reg_grad[e.name]
        update[e.name] = u
    params, state, lr = _apply(params, state, cfg, update, frozen)
    m = StepMetrics(loss=rec.loss, accuracy=rec.aux.get("accuracy"), lr=lr,
                    grad_norm=ad.global_norm(g),
                    z_norms={k: float(np.linalg.norm(v)) for k, v in z.items()
                             if params.get(k).perturbable},
                    reg_values=reg_values, reg_total=reg_total)
    return params, state, m


def first_order_step(model, params, state, cfg, batch):
    """Perturbed-gradient step; the curvature penalty is never formed."""
    return _perturbed_core(model, params, state, cfg, batch, gamma=0.0)


def hero_step(model, params, state, cfg, batch):
    """Perturbed-gradient step plus the curvature penalty gradient."""
    return _perturbed_core(model, params, state, cfg, batch, gamma=cfg.hessian_reg)


def grad_l1_step(model, params, state, cfg, batch):
    """Batch gradient plus beta * H sign(g), H applied by finite difference."""
    model = _resolve_model(model)
    rec = model.loss_record(params, batch, mode="train", running=state.running_stats)
    g = ad.backward(rec)
    _check_finite(rec.loss, g, state.t)
    update = {e.name: g[e.name] + cfg.weight_decay * e.value for e in params if e.trainable}
    if cfg.grad_l1_reg != 0.0:
        sign = {k: np.sign(v) for k, v in g.items()}
        w_norm = math.sqrt(sum(float(np.dot(e.value.ravel(), e.value.ravel()))
                               for e in params if e.trainable))
        n = sum(e.value.size for e in params if e.trainable)
        h_fd = 1e-3 * (1.0 + w_norm / math.sqrt(n))

        def loss_fn(p):
            return model.loss_record(p, batch, mode="train", running=state.running_stats)

        with ad.tape_purpose("reg"):
            h_sign = ad.hvp_fd(loss_fn, params, sign, h_fd, base_grads=g)
        _check_finite(rec.loss, h_sign, state.t)
        for k in update:
            update[k] = update[k] + cfg.grad_l1_reg * h_sign[k]
    params, state, lr = _apply(params, state, cfg, update, rec.aux.get("bn_stats"))
    m = StepMetrics(loss=rec.loss, accuracy=rec.aux.get("accuracy"), lr=lr,
                    grad_norm=ad.global_norm(g))
    return params, state, m


STEP_FUNCTIONS = {
    "sgd": sgd_step,
    "first_order": first_order_step,
    "grad_l1": grad_l1_step,
    "hero": hero_step,
}


def _mean_dicts(dicts: Iterable[dict[str, float]]) -> dict[str, float]:
    dicts = list(dicts)
    if not dicts:
        return {}
    keys = dicts[0].keys()
    return {k: float(np.mean([d[k] for d in dicts])) for k in keys}


def train(spec, dataset, cfg: TrainerConfig, seed: int, *, batch_size: int = 128,
          test_dataset=None, diagnostics: DiagnosticsConfig | None = None,
          augment: bool = False, init_params: models.ParamSet | None = None) -> TrainResult:
    """Run cfg.total_steps update steps over shuffled epochs.

    Weight init, per-epoch shuffles and any augmentation draws all derive
    from ``seed`` through fixed named streams, so a repeated call is
    byte-identical. Per-layer step diagnostics are averaged per epoch;
    the lr column records the last step of each epoch.
    """
    model = _resolve_model(spec)
    if init_params is not None:
        params = init_params
    elif isinstance(spec, models.ModelSpec):
        params = models.build(spec, seeding.sub_seed(seed, seeding.INIT))
    else:
        raise HeroLabError("train over a loss-record provider needs init_params")
    running = models.init_running_stats(spec) if isinstance(spec, models.ModelSpec) else {}
    state = TrainerState(running_stats=running)
    step_fn = STEP_FUNCTIONS[cfg.rule]
    diag = diagnostics or DiagnosticsConfig()
    records: list[EpochMetrics] = []
    epoch = 0
    while state.t < cfg.total_steps:
        started = time.perf_counter()
        step_metrics: list[StepMetrics] = []
        for xb, yb in data_mod.batches(dataset, batch_size, data_mod.epoch_seed(seed, epoch),
                                       augment=augment):
            if state.t >= cfg.total_steps:
                break
            params, state, sm = step_fn(model, params, state, cfg, (xb, yb))
            step_metrics.append(sm)
        eval_loss = eval_acc = None
        if test_dataset is not None and isinstance(spec, models.ModelSpec):
            eval_loss, eval_acc = models.evaluate(spec, params, test_dataset,
                                                  running=state.running_stats)
        finished = state.t >= cfg.total_steps
        hessian_norm = None
        if diag.hessian_interval > 0 and (finished or (epoch + 1) % diag.hessian_interval == 0):
            from .robustness import hessian_norm_metric

            h = diag.hessian_step
            if h is None:
                h = cfg.perturb_step if cfg.perturb_step > 0 else 0.5
            hessian_norm = hessian_norm_metric(spec, params, dataset, h,
                                               batch_size=diag.hessian_batch_size,
                                               running=state.running_stats)
        accs = [m.accuracy for m in step_metrics if m.accuracy is not None]
        records.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean([m.loss for m in step_metrics])),
            train_acc=float(np.mean(accs)) if accs else None,
            eval_loss=eval_loss,
            eval_acc=eval_acc,
            hessian_norm=hessian_norm,
            lr=step_metrics[-1].lr,
            z_norms=_mean_dicts(m.z_norms for m in step_metrics),
            reg_values=_mean_dicts(m.reg_values for m in step_metrics),
            reg_total=(float(np.mean([m.reg_total for m in step_metrics]))
                       if step_metrics[0].reg_total is not None else None),
            wall_ms=(time.perf_counter() - started) * 1000.0,
        ))
        epoch += 1
    return TrainResult(params=params, state=state, records=records)
