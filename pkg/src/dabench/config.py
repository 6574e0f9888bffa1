"""Experiment configuration: schema, per-algorithm default recipes,
validation with field-level diagnostics, and content fingerprints.

A minimal config names only {algorithm, scenario, seed}; the optimizer
recipe (learning rate, weight decay, loss weight, batch size, iteration
count) is pre-filled per algorithm and any field can be overridden.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import OOD_KINDS, SyntheticShiftSpec
from .errors import ConfigError
from .models import BackboneSpec, BottleneckSpec
from .numerics import DEFAULT_LADDER, KernelSpec

ALGORITHMS = ("coral", "dann", "dsan", "bnm", "daln", "dcan", "euda-mmd", "none")

# Per-algorithm optimizer recipes: learning rate, weight decay and the
# adaptation-loss weight; everything trains 30 epochs of 200 iterations at
# batch size 16 with SGD momentum 0.9 unless overridden.
RECIPES = {
    "coral":    {"lr": 3e-3, "weight_decay": 5e-4, "da_weight": 10.0},
    "dann":     {"lr": 1e-2, "weight_decay": 1e-3, "da_weight": 1.0},
    "dsan":     {"lr": 1e-2, "weight_decay": 5e-4, "da_weight": 0.5},
    "bnm":      {"lr": 1e-3, "weight_decay": 5e-4, "da_weight": 1.0},
    "daln":     {"lr": 1e-2, "weight_decay": 1e-3, "da_weight": 0.1},
    "dcan":     {"lr": 1e-2, "weight_decay": 5e-4, "da_weight": 0.5},
    "euda-mmd": {"lr": 3e-2, "weight_decay": 0.0, "da_weight": 0.3},
    "none":     {"lr": 1e-2, "weight_decay": 5e-4, "da_weight": 0.0},
}

SHARED_DEFAULTS = {"epochs": 30, "batch_size": 16, "momentum": 0.9, "iters_per_epoch": 200}

SCENARIO_KINDS = ("synthetic", "image-folder")


@dataclass
class ScenarioSpec:
    kind: str = "synthetic"
    synthetic: SyntheticShiftSpec | None = None
    source_root: str | None = None
    target_root: str | None = None
    normalization: str = "dataset"      # "dataset" | "imagenet"
    # stress-scenario modifiers
    ood: str | None = None              # one of OOD_KINDS, eval-time corruption
    stream_parts: int | None = None     # dynamic stream: split source into K parts
    limit_per_class: int | None = None  # limited-samples: k source samples per class

    def describe(self) -> str:
        mods = []
        if self.ood:
            mods.append(f"ood={self.ood}")
        if self.stream_parts:
            mods.append(f"stream={self.stream_parts}")
        if self.limit_per_class:
            mods.append(f"limit={self.limit_per_class}")
        return self.kind + ("+" + "+".join(mods) if mods else "")


@dataclass
class ExperimentConfig:
    algorithm: str = "none"
    seed: int = 0
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iters_per_epoch: int = 200
    da_weight: float = 0.0
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    bottleneck: BottleneckSpec = field(default_factory=BottleneckSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    label_kernel: KernelSpec = field(default_factory=KernelSpec.linear)
    nwd_mode: str = "nuclear"           # or "per-sample"
    cmmd_reg: float = 1.0
    grl_warmup: bool = False            # optional ramp of the adversarial weight
    lr_decay: bool = False              # optional inverse-decay schedule
    new_layer_lr_scale: float = 10.0    # bottleneck/head multiplier on pretrained backbones
    stream_reset_optimizer: bool = False
    eval_balanced_metrics: bool = False
    eval_a_distance: bool = False


def _build_kernel(raw) -> KernelSpec:
    if isinstance(raw, KernelSpec):
        return raw
    raw = dict(raw or {})
    try:
        return KernelSpec(
            kind=raw.get("kind", "gaussian-multi"),
            bandwidth_base=raw.get("bandwidth_base", "median"),
            ladder=tuple(raw.get("ladder", DEFAULT_LADDER)),
        )
    except Exception as exc:
        raise ConfigError(f"kernel: {exc}") from exc


def _build_scenario(raw) -> ScenarioSpec:
    if isinstance(raw, ScenarioSpec):
        return raw
    raw = dict(raw or {})
    kind = raw.get("kind", "synthetic")
    if kind not in SCENARIO_KINDS:
        raise ConfigError(f"scenario.kind: must be one of {SCENARIO_KINDS}, got {kind!r}")
    ood = raw.get("ood")
    if ood is not None and ood not in OOD_KINDS:
        raise ConfigError(f"scenario.ood: must be one of {OOD_KINDS}, got {ood!r}")
    spec = ScenarioSpec(
        kind=kind,
        normalization=raw.get("normalization", "dataset"),
        ood=ood,
        stream_parts=raw.get("stream_parts"),
        limit_per_class=raw.get("limit_per_class"),
    )
    if kind == "synthetic":
        syn = {k: v for k, v in raw.items()
               if k in SyntheticShiftSpec.__dataclass_fields__}
        if "centers" in syn and syn["centers"] is not None:
            syn["centers"] = [list(c) for c in syn["centers"]]
        try:
            spec.synthetic = SyntheticShiftSpec(**syn)
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"scenario: {exc}") from exc
    else:
        if not raw.get("source_root") or not raw.get("target_root"):
            raise ConfigError("scenario.source_root/target_root: required for image-folder runs")
        spec.source_root = raw["source_root"]
        spec.target_root = raw["target_root"]
    return spec


_TOP_LEVEL_KEYS = {
    "algorithm", "seed", "lr", "epochs", "batch_size", "momentum", "weight_decay",
    "iters_per_epoch", "da_weight", "scenario", "backbone", "bottleneck", "kernel",
    "label_kernel", "nwd_mode", "cmmd_reg", "grl_warmup", "lr_decay",
    "new_layer_lr_scale", "stream_reset_optimizer", "eval_balanced_metrics",
    "eval_a_distance",
    # orchestration keys handled by the caller, tolerated here
    "sweep", "output_root", "name",
}


def resolve_config(raw: dict) -> ExperimentConfig:
    """Fill algorithm defaults, validate every field, and return the resolved
    config. Raises ConfigError naming the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a mapping at the top level")
    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")

    algorithm = raw.get("algorithm", "none")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm: must be one of {ALGORITHMS}, got {algorithm!r}")

    merged = dict(SHARED_DEFAULTS)
    merged.update(RECIPES[algorithm])
    for key in ("lr", "epochs", "batch_size", "momentum", "weight_decay",
                "iters_per_epoch", "da_weight"):
        if key in raw:
            merged[key] = raw[key]

    if algorithm == "none" and merged["da_weight"] != 0.0:
        raise ConfigError("da_weight: algorithm 'none' forces da_weight = 0")
    if merged["da_weight"] < 0:
        raise ConfigError("da_weight: must be >= 0")
    if merged["batch_size"] < 1:
        raise ConfigError("batch_size: must be >= 1")
    if merged["epochs"] < 1:
        raise ConfigError("epochs: must be >= 1")
    if merged["iters_per_epoch"] < 1:
        raise ConfigError("iters_per_epoch: must be >= 1")
    if merged["lr"] <= 0:
        raise ConfigError("lr: must be > 0")

    scenario = _build_scenario(raw.get("scenario"))
    seed = int(raw.get("seed", 0))
    if scenario.kind == "synthetic" and scenario.synthetic is not None:
        # one seed drives the whole run, including data generation
        scenario.synthetic.seed = seed

    try:
        backbone_raw = raw.get("backbone") or {}
        backbone = backbone_raw if isinstance(backbone_raw, BackboneSpec) \
            else BackboneSpec(**backbone_raw)
    except (TypeError, ConfigError) as exc:
        raise ConfigError(f"backbone: {exc}") from exc
    try:
        bottleneck_raw = raw.get("bottleneck") or {}
        bottleneck = bottleneck_raw if isinstance(bottleneck_raw, BottleneckSpec) \
            else BottleneckSpec(**bottleneck_raw)
    except (TypeError, ConfigError) as exc:
        raise ConfigError(f"bottleneck: {exc}") from exc

    nwd_mode = raw.get("nwd_mode", "nuclear")
    if nwd_mode not in ("nuclear", "per-sample"):
        raise ConfigError(f"nwd_mode: must be 'nuclear' or 'per-sample', got {nwd_mode!r}")

    cfg = ExperimentConfig(
        algorithm=algorithm,
        seed=seed,
        lr=float(merged["lr"]),
        epochs=int(merged["epochs"]),
        batch_size=int(merged["batch_size"]),
        momentum=float(merged["momentum"]),
        weight_decay=float(merged["weight_decay"]),
        iters_per_epoch=int(merged["iters_per_epoch"]),
        da_weight=float(merged["da_weight"]),
        scenario=scenario,
        backbone=backbone,
        bottleneck=bottleneck,
        kernel=_build_kernel(raw.get("kernel")),
        label_kernel=_build_kernel(raw.get("label_kernel")) if "label_kernel" in raw
        else KernelSpec.linear(),
        nwd_mode=nwd_mode,
        cmmd_reg=float(raw.get("cmmd_reg", 1.0)),
        grl_warmup=bool(raw.get("grl_warmup", False)),
        lr_decay=bool(raw.get("lr_decay", False)),
        new_layer_lr_scale=float(raw.get("new_layer_lr_scale", 10.0)),
        stream_reset_optimizer=bool(raw.get("stream_reset_optimizer", False)),
        eval_balanced_metrics=bool(raw.get("eval_balanced_metrics", False)),
        eval_a_distance=bool(raw.get("eval_a_distance", False)),
    )

    if cfg.scenario.stream_parts is not None:
        if cfg.scenario.stream_parts < 1:
            raise ConfigError("scenario.stream_parts: must be >= 1")
        if "epochs" not in raw:
            cfg.epochs = cfg.scenario.stream_parts  # one part per epoch
        elif cfg.epochs > cfg.scenario.stream_parts:
            raise ConfigError(
                "epochs: a dynamic-stream run needs epochs <= stream_parts "
                f"({cfg.epochs} > {cfg.scenario.stream_parts})"
            )
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["kernel"]["ladder"] = list(out["kernel"]["ladder"])
    out["label_kernel"]["ladder"] = list(out["label_kernel"]["ladder"])
    return out


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """Content hash of the resolved experiment recipe."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raise ConfigError(f"config file {path} is empty")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return raw


def save_config_snapshot(cfg: ExperimentConfig, path) -> None:
    payload = config_to_dict(cfg)
    payload["fingerprint"] = config_fingerprint(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)
