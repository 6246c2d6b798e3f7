"""Model parameter sets and the two desk-scale architectures.

A ParamSet is an ordered collection of named float64 tensors, each tagged
with a kind (weight / bias / bn_scale / bn_shift). Weight-kind entries are
the ones eligible for perturbation and quantization; biases and bn
parameters are left alone by both.

Two architectures are provided: a fully connected ReLU net ("mlp") and a
small two-stage convolutional net with optional batch normalization
("smallconv"). Both end in a linear head over ``classes`` logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import prod, sqrt

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

KINDS = ("weight", "bias", "bn_scale", "bn_shift")

# smallconv geometry: two 3x3 stride-2 conv stages, then global average
# pooling and a linear head.
CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PAD = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ParamEntry:
    name: str
    value: np.ndarray
    kind: str
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown parameter kind {self.kind!r} for {self.name}", name=self.name)
        v = np.ascontiguousarray(np.asarray(self.value, dtype=np.float64))
        object.__setattr__(self, "value", v)

    @property
    def perturbable(self) -> bool:
        return self.kind == "weight"


class ParamSet:
    """Ordered, name-indexed parameter collection.

    Treated as immutable: updates go through ``shifted`` / ``replaced``,
    which return new sets and leave the original arrays untouched.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        self._index = {}
        for i, e in enumerate(self.entries):
            if e.name in self._index:
                raise ShapeError(f"duplicate parameter name {e.name!r}", name=e.name)
            self._index[e.name] = i

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self._index

    def get(self, name: str) -> ParamEntry:
        return self.entries[self._index[name]]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def perturbable_names(self) -> list[str]:
        return [e.name for e in self.entries if e.perturbable]

    def total_count(self) -> int:
        return sum(e.value.size for e in self.entries)

    def clone(self) -> "ParamSet":
        return ParamSet(replace(e, value=e.value.copy()) for e in self.entries)

    def shifted(self, direction: dict[str, np.ndarray], scale: float = 1.0) -> "ParamSet":
        """New set with value + scale * direction[name] where a direction exists."""
        out = []
        for e in self.entries:
            d = direction.get(e.name)
            out.append(e if d is None else replace(e, value=e.value + scale * np.asarray(d)))
        return ParamSet(out)

    def replaced(self, values: dict[str, np.ndarray]) -> "ParamSet":
        """New set with the named values swapped in (shapes must match)."""
        out = []
        for e in self.entries:
            v = values.get(e.name)
            if v is None:
                out.append(e)
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != e.value.shape:
                raise ShapeError(f"replacement for {e.name} has shape {v.shape}, "
                                 f"expected {e.value.shape}", name=e.name)
            out.append(replace(e, value=v))
        return ParamSet(out)

    def values(self) -> dict[str, np.ndarray]:
        return {e.name: e.value for e in self.entries}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    mlp: ``widths`` runs input through output, e.g. (784, 64, 10).
    smallconv: ``channels`` lists the conv stage widths, input is
    (C, H, W). ``batch_norm`` inserts normalization after every hidden
    linear layer (mlp) or every conv (smallconv); the normalized layer
    loses its bias since the shift parameter replaces it.
    """

    kind: str  # "mlp" | "smallconv"
    input_shape: tuple[int, ...]
    classes: int
    widths: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    batch_norm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("mlp", "smallconv"):
            raise ShapeError(f"unknown architecture kind {self.kind!r}")
        if self.activation != "relu":
            raise ShapeError(f"unsupported activation {self.activation!r}")
        if self.classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.classes}")
        if self.kind == "mlp":
            if len(self.widths) < 2:
                raise ShapeError("mlp needs at least input and output widths")
            if self.widths[0] != prod(self.input_shape):
                raise ShapeError(f"mlp input width {self.widths[0]} does not match "
                                 f"input shape {self.input_shape}")
            if self.widths[-1] != self.classes:
                raise ShapeError(f"mlp output width {self.widths[-1]} does not match "
                                 f"class count {self.classes}")
        else:
            if len(self.input_shape) != 3:
                raise ShapeError(f"smallconv input shape must be (C, H, W), got {self.input_shape}")
            if not self.channels:
                raise ShapeError("smallconv needs at least one conv stage")


def expected_entries(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) table the architecture requires, in order."""
    out = []
    if spec.kind == "mlp":
        n_layers = len(spec.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:]), start=1):
            out.append((f"fc{i}.weight", (fan_in, fan_out), "weight"))
            if spec.batch_norm and i < n_layers:
                out.append((f"bn{i}.scale", (fan_out,), "bn_scale"))
                out.append((f"bn{i}.shift", (fan_out,), "bn_shift"))
            else:
                out.append((f"fc{i}.bias", (fan_out,), "bias"))
        return out
    c_prev = spec.input_shape[0]
    for i, c in enumerate(spec.channels, start=1):
        out.append((f"conv{i}.weight", (c, c_prev, CONV_KERNEL, CONV_KERNEL), "weight"))
        if spec.batch_norm:
            out.append((f"bn{i}.scale", (c,), "bn_scale"))
            out.append((f"bn{i}.shift", (c,), "bn_shift"))
        else:
            out.append((f"conv{i}.bias", (c,), "bias"))
        c_prev = c
    out.append(("head.weight", (c_prev, spec.classes), "weight"))
    out.append(("head.bias", (spec.classes,), "bias"))
    return out


def build(spec: ModelSpec, seed: int) -> ParamSet:
    """Initialize parameters: Kaiming-uniform weights (ReLU gain), zero
    biases, unit bn scales. Byte-deterministic for a given (spec, seed)."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, kind in expected_entries(spec):
        if kind == "weight":
            fan_in = shape[0] if len(shape) == 2 else prod(shape[1:])
            bound = sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif kind == "bn_scale":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        entries.append(ParamEntry(name=name, value=value, kind=kind))
    return ParamSet(entries)


def validate_params(spec: ModelSpec, params: ParamSet):
    """Raise ShapeError naming the first entry that does not fit ``spec``."""
    expected = expected_entries(spec)
    have = {e.name: e for e in params}
    for name, shape, kind in expected:
        e = have.pop(name, None)
        if e is None:
            raise ShapeError(f"missing parameter {name}", name=name)
        if e.value.shape != shape:
            raise ShapeError(f"parameter {name} has shape {e.value.shape}, expected {shape}",
                             name=name)
        if e.kind != kind:
            raise ShapeError(f"parameter {name} has kind {e.kind}, expected {kind}", name=name)
    if have:
        stray = next(iter(have))
        raise ShapeError(f"unexpected parameter {stray}", name=stray)


def _bn_widths(spec: ModelSpec) -> tuple[int, ...]:
    if not spec.batch_norm:
        return ()
    return spec.widths[1:-1] if spec.kind == "mlp" else spec.channels


def bn_names(spec: ModelSpec) -> list[str]:
    return [f"bn{i}" for i in range(1, len(_bn_widths(spec)) + 1)]


def init_running_stats(spec: ModelSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Fresh running (mean, var) per bn layer: zeros and ones."""
    return {f"bn{i}": (np.zeros(c), np.ones(c))
            for i, c in enumerate(_bn_widths(spec), start=1)}


def update_running_stats(running, batch_stats, momentum: float = BN_MOMENTUM):
    """Blend freshly observed batch statistics into the running ones."""
    out = dict(running)
    for name, (m, v) in batch_stats.items():
        rm, rv = out.get(name, (np.zeros_like(m), np.ones_like(v)))
        out[name] = (momentum * rm + (1.0 - momentum) * m,
                     momentum * rv + (1.0 - momentum) * v)
    return out


def _check_input(spec: ModelSpec, x: np.ndarray):
    if x.ndim < 2 or x.shape[0] == 0:
        raise ShapeError(f"batch input must be (batch, ...) with at least one sample, got {x.shape}",
                         name="input")
    if tuple(x.shape[1:]) != spec.input_shape:
        # a flattened mlp batch is accepted as long as sizes agree
        if not (spec.kind == "mlp" and x.ndim == 2 and x.shape[1] == prod(spec.input_shape)):
            raise ShapeError(f"batch input shape {tuple(x.shape[1:])} does not match "
                             f"model input shape {spec.input_shape}", name="input")


def _graph(spec: ModelSpec, leaves, x: np.ndarray, mode: str,
           running, frozen_stats, stats_out: dict | None):
    """Logits for one batch; works on Nodes (traced) or arrays (plain)."""

    def normalize(h, bn):
        # train mode uses batch statistics and reports them; frozen mode
        # replays previously captured ones; eval mode uses the running pair
        if mode == "train":
            h, m, v = ad.batchnorm_train(h, leaves[f"{bn}.scale"], leaves[f"{bn}.shift"],
                                         eps=BN_EPS)
            if stats_out is not None:
                stats_out[bn] = (m, v)
            return h
        if mode == "frozen":
            if frozen_stats is None or bn not in frozen_stats:
                raise ShapeError(f"frozen forward needs captured statistics for {bn}",
                                 name=bn)
            m, v = frozen_stats[bn]
        else:
            m, v = (running or init_running_stats(spec))[bn]
        return ad.batchnorm_fixed(h, leaves[f"{bn}.scale"], leaves[f"{bn}.shift"],
                                  m, v, eps=BN_EPS)

    if spec.kind == "mlp":
        h = x.reshape(x.shape[0], -1)
        n_layers = len(spec.widths) - 1
        for i in range(1, n_layers + 1):
            h = ad.matmul(h, leaves[f"fc{i}.weight"])
            if spec.batch_norm and i < n_layers:
                h = normalize(h, f"bn{i}")
            else:
                h = ad.add(h, leaves[f"fc{i}.bias"])
            if i < n_layers:
                h = ad.relu(h)
        return h
    h = x
    for i in range(1, len(spec.channels) + 1):
        h = ad.conv2d(h, leaves[f"conv{i}.weight"], stride=CONV_STRIDE, pad=CONV_PAD)
        if spec.batch_norm:
            h = normalize(h, f"bn{i}")
        else:
            bias = leaves[f"conv{i}.bias"]
            b = bias.value if isinstance(bias, ad.Node) else bias
            h = ad.add(h, ad.reshape(bias, (1, b.shape[0], 1, 1)))
        h = ad.relu(h)
    h = ad.reduce_mean(h, axis=(2, 3))
    return ad.add(ad.matmul(h, leaves["head.weight"]), leaves["head.bias"])


def model_loss(spec: ModelSpec, params: ParamSet, batch, *, mode: str = "train",
               running=None, frozen_stats=None) -> ad.ComputationRecord:
    """Traced cross-entropy loss record for one (inputs, labels) batch.

    aux carries the logits values, the batch accuracy, and (in training
    mode with bn) the batch statistics needed for frozen re-evaluation.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x)
    validate_params(spec, params)
    stats_out: dict = {}

    def fn(leaves, _):
        logits = _graph(spec, leaves, x, mode, running, frozen_stats, stats_out)
        loss = ad.cross_entropy_with_logits(logits, y)
        lv = logits.value if isinstance(logits, ad.Node) else logits
        acc = float((lv.argmax(axis=1) == np.asarray(y)).mean())
        return loss, {"logits": lv, "accuracy": acc, "bn_stats": stats_out}

    return ad.forward(fn, params, batch)


def predict(spec: ModelSpec, params: ParamSet, x, *, running=None) -> np.ndarray:
    """Evaluation-mode logits, no trace: bn uses running statistics."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x)
    validate_params(spec, params)
    plain = {e.name: e.value for e in params}
    return _graph(spec, plain, x, "eval", running, None, None)


def evaluate(spec: ModelSpec, params: ParamSet, dataset, *, running=None,
             batch_size: int = 512) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset in evaluation mode."""
    n = len(dataset.labels)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = dataset.inputs[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits = predict(spec, params, xb, running=running)
        loss_sum += float(ad.cross_entropy_with_logits(logits, yb)) * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n
