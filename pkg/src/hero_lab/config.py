"""Experiment configuration: JSON schema, validation, orchestration.

A config is a nested JSON document with an explicit schema_version.
Validation walks the whole document and reports every problem at once,
with dotted paths, instead of stopping at the first; unknown keys are
errors so a typoed hyperparameter cannot silently fall back to a
default. Validation materializes all defaults, and the resulting
resolved document is written next to the run artifacts so feeding it
back reproduces the run exactly.

run_experiment is the single orchestration path behind the command line:
build or load data, inject label noise, train, then emit metrics,
checkpoint, optional quantization sweep and contour grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import data as data_mod
from . import models, quantize, robustness, seeding, serialization, trainers
from .errors import ConfigError

SCHEMA_VERSION = 1

_REQUIRED = object()


@dataclass(frozen=True)
class _Field:
    kind: str                     # "int" | "float" | "bool" | "str" | "int_list" | "str_or_null"
    default: object = _REQUIRED
    choices: tuple = ()


_SCHEMA = {
    "schema_version": _Field("int"),
    "seed": _Field("int", default=0),
    "output_dir": _Field("str"),
    "model": {
        "kind": _Field("str", choices=("mlp", "smallconv")),
        "input_shape": _Field("int_list"),
        "classes": _Field("int"),
        "widths": _Field("int_list", default=[]),
        "channels": _Field("int_list", default=[]),
        "batch_norm": _Field("bool", default=False),
    },
    "data": {
        "source": _Field("str", choices=("synthetic", "idx")),
        "synthetic": {
            "kind": _Field("str", default="gaussians", choices=("gaussians", "spirals")),
            "train_n": _Field("int", default=0),
            "test_n": _Field("int", default=0),
            "noise": _Field("float", default=0.25),
            "contrast": _Field("float", default=0.3),
        },
        "idx": {
            "train_images": _Field("str_or_null", default=None),
            "train_labels": _Field("str_or_null", default=None),
            "test_images": _Field("str_or_null", default=None),
            "test_labels": _Field("str_or_null", default=None),
            "mean": _Field("float", default=0.0),
            "std": _Field("float", default=1.0),
        },
        "label_noise": _Field("float", default=0.0),
    },
    "trainer": {
        "rule": _Field("str", choices=trainers.RULES),
        "epochs": _Field("int"),
        "batch_size": _Field("int", default=128),
        "lr": _Field("float"),
        "momentum": _Field("float", default=0.0),
        "weight_decay": _Field("float", default=0.0),
        "perturb_step": _Field("float", default=0.0),
        "hessian_reg": _Field("float", default=0.0),
        "grad_l1_reg": _Field("float", default=0.0),
        "perturbation_scaling": _Field("str", default="layer_norm",
                                       choices=trainers.SCALINGS),
        "augment": _Field("bool", default=False),
    },
    "quant": {
        "bits": _Field("int_list", default=[]),
        "policy": _Field("str", default="minmax_asymmetric", choices=quantize.POLICIES),
    },
    "diagnostics": {
        "hessian_interval": _Field("int", default=0),
        "hessian_batch_size": _Field("int", default=256),
        "contour": _Field("bool", default=False),
        "contour_half_width": _Field("float", default=1.0),
        "contour_steps": _Field("int", default=41),
    },
}


def _check_leaf(field: _Field, value, path: str, problems: list[str]):
    kind = field.kind
    ok_value = value
    if kind == "bool":
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
            return None
    elif kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
            return None
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return None
        ok_value = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
            return None
    elif kind == "str_or_null":
        if value is not None and not isinstance(value, str):
            problems.append(f"{path}: expected a string or null, got {value!r}")
            return None
    elif kind == "int_list":
        if (not isinstance(value, list)
                or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
            problems.append(f"{path}: expected a list of integers, got {value!r}")
            return None
        ok_value = list(value)
    if field.choices and ok_value not in field.choices:
        problems.append(f"{path}: must be one of {list(field.choices)}, got {ok_value!r}")
        return None
    return ok_value


def _walk(raw: dict, schema: dict, path: str, problems: list[str]) -> dict:
    resolved = {}
    for key in raw:
        if key not in schema:
            problems.append(f"unknown key {path + key!r}")
    for key, node in schema.items():
        here = path + key
        if isinstance(node, dict):
            sub = raw.get(key, {})
            if not isinstance(sub, dict):
                problems.append(f"{here}: expected an object, got {sub!r}")
                sub = {}
            resolved[key] = _walk(sub, node, here + ".", problems)
            continue
        if key not in raw:
            if node.default is _REQUIRED:
                problems.append(f"missing required key {here!r}")
            else:
                resolved[key] = node.default
            continue
        checked = _check_leaf(node, raw[key], here, problems)
        if checked is not None or node.kind == "str_or_null":
            resolved[key] = checked
    return resolved


def _cross_checks(r: dict, problems: list[str]):
    if r.get("schema_version") not in (None, SCHEMA_VERSION):
        problems.append(f"schema_version: this build reads version {SCHEMA_VERSION}, "
                        f"got {r['schema_version']}")
    model = r.get("model", {})
    if "kind" in model and "classes" in model and "input_shape" in model:
        try:
            models.ModelSpec(kind=model["kind"], input_shape=tuple(model["input_shape"]),
                             classes=model["classes"], widths=tuple(model.get("widths", ())),
                             channels=tuple(model.get("channels", ())),
                             batch_norm=model.get("batch_norm", False))
        except Exception as exc:
            problems.append(f"model: {exc}")
    data = r.get("data", {})
    if data.get("source") == "synthetic":
        if data["synthetic"]["train_n"] < 1:
            problems.append("data.synthetic.train_n: synthetic source needs train_n >= 1")
    elif data.get("source") == "idx":
        for key in ("train_images", "train_labels"):
            if not data["idx"].get(key):
                problems.append(f"data.idx.{key}: idx source needs a path")
        if (data["idx"].get("test_images") is None) != (data["idx"].get("test_labels") is None):
            problems.append("data.idx: test_images and test_labels must be given together")
        if data["idx"].get("std") == 0:
            problems.append("data.idx.std: must be nonzero")
    if not 0.0 <= data.get("label_noise", 0.0) <= 1.0:
        problems.append(f"data.label_noise: must lie in [0, 1], got {data['label_noise']}")
    tr = r.get("trainer", {})
    if "rule" in tr and "lr" in tr and "epochs" in tr:
        if tr["epochs"] < 1:
            problems.append(f"trainer.epochs: must be >= 1, got {tr['epochs']}")
        if tr["batch_size"] < 1:
            problems.append(f"trainer.batch_size: must be >= 1, got {tr['batch_size']}")
        try:
            trainers.TrainerConfig(
                rule=tr["rule"], lr=tr["lr"], total_steps=1, momentum=tr["momentum"],
                weight_decay=tr["weight_decay"], perturb_step=tr["perturb_step"],
                hessian_reg=tr["hessian_reg"], grad_l1_reg=tr["grad_l1_reg"],
                perturbation_scaling=tr["perturbation_scaling"])
        except Exception as exc:
            problems.append(f"trainer: {exc}")
    for b in r.get("quant", {}).get("bits", []):
        try:
            quantize.QuantSpec(bits=b, range_policy=r["quant"]["policy"])
        except Exception as exc:
            problems.append(f"quant.bits: {exc}")
            break
    diag = r.get("diagnostics", {})
    if diag.get("hessian_interval", 0) < 0:
        problems.append("diagnostics.hessian_interval: must be >= 0")
    if diag.get("hessian_batch_size", 1) < 1:
        problems.append("diagnostics.hessian_batch_size: must be >= 1")
    if diag.get("contour"):
        steps = diag.get("contour_steps", 0)
        if steps < 3 or steps % 2 == 0:
            problems.append(f"diagnostics.contour_steps: must be odd and >= 3, got {steps}")
        if not diag.get("contour_half_width", 0.0) > 0:
            problems.append("diagnostics.contour_half_width: must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated, fully defaulted experiment description."""

    resolved: dict

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(["top level: expected a JSON object"])
        problems: list[str] = []
        resolved = _walk(raw, _SCHEMA, "", problems)
        if not problems:
            _cross_checks(resolved, problems)
        if problems:
            raise ConfigError(problems)
        return ExperimentConfig(resolved=resolved)

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
        return ExperimentConfig.from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(self.resolved, indent=2, sort_keys=True) + "\n"

    # typed accessors ------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.resolved["output_dir"])

    def model_spec(self) -> models.ModelSpec:
        m = self.resolved["model"]
        return models.ModelSpec(kind=m["kind"], input_shape=tuple(m["input_shape"]),
                                classes=m["classes"], widths=tuple(m["widths"]),
                                channels=tuple(m["channels"]), batch_norm=m["batch_norm"])

    def trainer_config(self, total_steps: int) -> trainers.TrainerConfig:
        t = self.resolved["trainer"]
        return trainers.TrainerConfig(
            rule=t["rule"], lr=t["lr"], total_steps=total_steps, momentum=t["momentum"],
            weight_decay=t["weight_decay"], perturb_step=t["perturb_step"],
            hessian_reg=t["hessian_reg"], grad_l1_reg=t["grad_l1_reg"],
            perturbation_scaling=t["perturbation_scaling"])

    def diagnostics(self) -> trainers.DiagnosticsConfig:
        d = self.resolved["diagnostics"]
        return trainers.DiagnosticsConfig(hessian_interval=d["hessian_interval"],
                                          hessian_batch_size=d["hessian_batch_size"])

    def datasets(self) -> tuple[data_mod.LabeledDataset, data_mod.LabeledDataset | None]:
        """Build or load (train, test); label noise is not yet applied."""
        d = self.resolved["data"]
        classes = self.resolved["model"]["classes"]
        if d["source"] == "synthetic":
            s = d["synthetic"]
            # one pool, then split: train and test must share class prototypes
            pool = data_mod.make_synthetic(s["kind"], s["train_n"] + s["test_n"], classes,
                                           seeding.sub_seed(self.seed, seeding.DATA),
                                           noise=s["noise"], contrast=s["contrast"])
            if s["test_n"] == 0:
                return pool, None
            return data_mod.split(pool, s["train_n"])
        i = d["idx"]
        train = data_mod.load_idx(i["train_images"], i["train_labels"], mean=i["mean"],
                                  std=i["std"], classes=classes)
        test = None
        if i["test_images"]:
            test = data_mod.load_idx(i["test_images"], i["test_labels"], mean=i["mean"],
                                     std=i["std"], classes=classes)
        return train, test


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    result: trainers.TrainResult
    train_dataset: data_mod.LabeledDataset
    test_dataset: data_mod.LabeledDataset | None
    sweep_rows: list | None
    contour: tuple | None
    artifacts: dict[str, Path]


def run_experiment(cfg: ExperimentConfig, *, output_dir=None,
                   figures: bool = True) -> ExperimentResult:
    """Train per the config and write every artifact into the output dir.

    Writes metrics.csv, timing.csv, checkpoint.bin and
    config.resolved.json, plus quant_sweep.csv and contour.csv when those
    stages are enabled. Figures render alongside each CSV unless turned
    off. Identical config and seed give byte-identical CSV output; the
    timing sidecar is the one file allowed to differ between runs.
    """
    from . import reporting

    out = Path(output_dir) if output_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec()
    train_ds, test_ds = cfg.datasets()
    ratio = cfg.resolved["data"]["label_noise"]
    if ratio > 0.0:
        noise = data_mod.NoiseSpec(ratio=ratio, seed=seeding.sub_seed(cfg.seed, seeding.NOISE))
        train_ds = data_mod.inject_symmetric_noise(train_ds, noise)

    t = cfg.resolved["trainer"]
    steps_per_epoch = math.ceil(len(train_ds) / t["batch_size"])
    tr_cfg = cfg.trainer_config(total_steps=t["epochs"] * steps_per_epoch)
    result = trainers.train(spec, train_ds, tr_cfg, cfg.seed, batch_size=t["batch_size"],
                            test_dataset=test_ds, diagnostics=cfg.diagnostics(),
                            augment=t["augment"])

    artifacts: dict[str, Path] = {}
    layer_names = [e.name for e in result.params if e.perturbable]
    artifacts["config"] = out / "config.resolved.json"
    artifacts["config"].write_text(cfg.to_json())
    artifacts["metrics"] = out / "metrics.csv"
    reporting.write_metrics_csv(artifacts["metrics"], result.records, layer_names)
    artifacts["timing"] = out / "timing.csv"
    reporting.write_timing_csv(artifacts["timing"], result.records)
    artifacts["checkpoint"] = out / "checkpoint.bin"
    serialization.save_checkpoint(artifacts["checkpoint"], result.params,
                                  result.state.running_stats)
    if figures:
        artifacts["metrics_figure"] = out / "metrics.png"
        reporting.metrics_figure(artifacts["metrics_figure"], result.records)

    sweep_rows = None
    bits = cfg.resolved["quant"]["bits"]
    if bits:
        eval_ds = test_ds if test_ds is not None else train_ds
        sweep_rows = quantize.sweep(spec, result.params, eval_ds, bits,
                                    range_policy=cfg.resolved["quant"]["policy"],
                                    running=result.state.running_stats)
        artifacts["quant_sweep"] = out / "quant_sweep.csv"
        reporting.write_sweep_csv(artifacts["quant_sweep"], sweep_rows)
        if figures:
            artifacts["quant_figure"] = out / "quant_sweep.png"
            reporting.sweep_figure(artifacts["quant_figure"], sweep_rows)

    contour = None
    diag = cfg.resolved["diagnostics"]
    if diag["contour"]:
        eval_ds = test_ds if test_ds is not None else train_ds
        contour = robustness.loss_contour(spec, result.params, eval_ds,
                                          diag["contour_half_width"], diag["contour_steps"],
                                          seeding.sub_seed(cfg.seed, seeding.CONTOUR),
                                          running=result.state.running_stats)
        artifacts["contour"] = out / "contour.csv"
        reporting.write_contour_csv(artifacts["contour"], *contour)
        if figures:
            artifacts["contour_figure"] = out / "contour.png"
            reporting.contour_figure(artifacts["contour_figure"], *contour)

    return ExperimentResult(config=cfg, result=result, train_dataset=train_ds,
                            test_dataset=test_ds, sweep_rows=sweep_rows, contour=contour,
                            artifacts=artifacts)


def example_config(output_dir: str = "runs/example") -> dict:
    """A complete synthetic-data config; handy as a starting template."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "output_dir": output_dir,
        "model": {
            "kind": "mlp",
            "input_shape": [28, 28],
            "classes": 10,
            "widths": [784, 64, 10],
        },
        "data": {
            "source": "synthetic",
            "synthetic": {"kind": "gaussians", "train_n": 2000, "test_n": 1000},
        },
        "trainer": {
            "rule": "hero",
            "epochs": 10,
            "batch_size": 128,
            "lr": 0.1,
            "momentum": 0.9,
            "weight_decay": 1e-4,
            "perturb_step": 0.5,
            "hessian_reg": 0.1,
        },
        "quant": {"bits": [2, 3, 4, 6, 8]},
        "diagnostics": {"hessian_interval": 5},
    }
