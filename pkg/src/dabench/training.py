"""Combined-objective training loop: cross-entropy on labeled source batches
plus a weighted adaptation term between source and target, stepped by SGD
with momentum under the per-algorithm recipes.

Target labels never reach any loss; they exist only for evaluation, which is
what makes the whole procedure unsupervised on the target side.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .adversarial import daln_objective, domain_adversarial_loss, grl_apply
from .config import ExperimentConfig, config_fingerprint
from .data import (
    ArrayDataset,
    BatchStream,
    ImageDataset,
    OODTransform,
    PreprocessSpec,
    compute_channel_stats,
    gen_synthetic_domains,
    load_image_folder,
    split_stream,
    subsample_array_per_class,
    subsample_per_class,
)
from .errors import ConfigError, NumericError
from .evaluation import a_distance, evaluation_record, predict_dataset
from .losses import LossValue
from .models import build_model, save_checkpoint
from .numerics import one_hot

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss_total", "train_loss_ce", "train_loss_da",
                 "target_accuracy", "wall_seconds")


@dataclass
class TrainState:
    epoch: int = 0
    best_accuracy: float = 0.0
    best_epoch: int = -1
    history: list = field(default_factory=list)

    def record(self, row: dict) -> None:
        self.history.append(row)
        if self.best_epoch < 0 or row["target_accuracy"] > self.best_accuracy:
            self.best_accuracy = row["target_accuracy"]
            self.best_epoch = row["epoch"]


def total_loss(ce: torch.Tensor, da: torch.Tensor, weight: float,
               algorithm: str = "generic") -> LossValue:
    """Combined objective ce + weight * da (daln subtracts, 'none' is ce only)."""
    if weight < 0:
        raise ConfigError("da_weight: must be >= 0")
    ce_f = float(ce.detach())
    da_f = float(da.detach()) if torch.is_tensor(da) else float(da)
    if algorithm == "none" or weight == 0.0:
        return LossValue(ce, {"ce": ce_f, "da": da_f})
    if algorithm == "daln":
        return daln_objective(ce, da, weight)
    return LossValue(ce + weight * da, {"ce": ce_f, "da": da_f})


def compute_da_loss(model, cfg: ExperimentConfig, feats_s, feats_t, logits_t, ys,
                    num_classes: int, effective_weight: float) -> LossValue:
    """Dispatch the per-algorithm adaptation term on one (source, target) draw."""
    algo = cfg.algorithm
    if algo == "coral":
        return L.coral_loss(feats_s, feats_t)
    if algo == "euda-mmd":
        return L.mmd_loss(feats_s, feats_t, cfg.kernel)
    if algo == "dsan":
        # subdomain weights come from hard labels / detached predictions
        ws = L.subdomain_weights(one_hot(ys, num_classes, dtype=feats_s.dtype))
        wt = L.subdomain_weights(torch.softmax(logits_t, dim=1).detach())
        return L.lmmd_loss(feats_s, feats_t, ws, wt, cfg.kernel, num_classes)
    if algo == "dcan":
        ys_onehot = one_hot(ys, num_classes, dtype=feats_s.dtype)
        pt = torch.softmax(logits_t, dim=1)
        cmmd = L.cmmd_loss(feats_s, feats_t, ys_onehot, pt, cfg.kernel,
                           cfg.label_kernel, reg=cfg.cmmd_reg)
        mi = L.mutual_info_loss(pt)
        return LossValue(cmmd.value + mi.value,
                         {"cmmd": float(cmmd.value.detach()),
                          "mi": float(mi.value.detach())})
    if algo == "bnm":
        return L.bnm_loss(torch.softmax(logits_t, dim=1))
    if algo == "dann":
        if model.discriminator is None:
            raise ConfigError("algorithm: dann needs a model with a domain discriminator")
        feats = torch.cat([feats_s, feats_t], dim=0)
        d_out = model.discriminator(grl_apply(feats, 1.0))
        tags = torch.cat([torch.ones(feats_s.shape[0]), torch.zeros(feats_t.shape[0])])
        return domain_adversarial_loss(d_out, tags.to(d_out.dtype))
    if algo == "daln":
        # classifier reused as discriminator on gradient-reversed features
        ps = torch.softmax(model.classifier(grl_apply(feats_s, 1.0)), dim=1)
        pt = torch.softmax(model.classifier(grl_apply(feats_t, 1.0)), dim=1)
        return L.nwd_loss(ps, pt, mode=cfg.nwd_mode)
    raise ConfigError(f"algorithm: no adaptation loss for {algo!r}")


def _batch_digest(*tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def _warmup_factor(progress: float) -> float:
    # the usual 2 / (1 + exp(-10 p)) - 1 adversarial ramp
    return 2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0


def train_epoch(model, source_stream: BatchStream, target_stream: BatchStream,
                cfg: ExperimentConfig, optimizer, num_classes: int,
                epoch: int = 0) -> dict:
    """Run cfg.iters_per_epoch optimizer steps; returns mean loss components.

    Each step draws batch_size source and batch_size target samples. The
    target labels yielded by the stream are discarded here.
    """
    model.train()
    sums = {"total": 0.0, "ce": 0.0, "da": 0.0}
    for it in range(cfg.iters_per_epoch):
        xs, ys = source_stream.next_batch()
        feats_s, logits_s = model(xs)
        ce = F.cross_entropy(logits_s, ys)

        if cfg.algorithm == "none" or cfg.da_weight == 0.0:
            da_value = 0.0
            combined = total_loss(ce, torch.zeros(()), cfg.da_weight, cfg.algorithm)
        else:
            xt, _ = target_stream.next_batch()  # labels intentionally unused
            feats_t, logits_t = model(xt)
            weight = cfg.da_weight
            if cfg.grl_warmup:
                progress = (epoch * cfg.iters_per_epoch + it) / float(
                    cfg.epochs * cfg.iters_per_epoch)
                weight = cfg.da_weight * _warmup_factor(progress)
            da = compute_da_loss(model, cfg, feats_s, feats_t, logits_t, ys,
                                 num_classes, weight)
            da_value = float(da.value.detach())
            combined = total_loss(ce, da.value, weight, cfg.algorithm)

        if not torch.isfinite(combined.value):
            skipped_target = cfg.algorithm == "none" or cfg.da_weight == 0.0
            digest = _batch_digest(xs) if skipped_target else _batch_digest(xs, xt)
            raise NumericError(
                f"non-finite loss at epoch {epoch} iter {it} (batch sha256 {digest})"
            )
        optimizer.zero_grad()
        combined.value.backward()
        optimizer.step()

        sums["total"] += float(combined.value.detach())
        sums["ce"] += float(ce.detach())
        sums["da"] += da_value
    n = cfg.iters_per_epoch
    return {"train_loss_total": sums["total"] / n, "train_loss_ce": sums["ce"] / n,
            "train_loss_da": sums["da"] / n}


def build_optimizer(model, cfg: ExperimentConfig):
    """SGD with momentum/weight decay; new layers run at a higher learning
    rate than a pretrained backbone, toy backbones train uniformly."""
    pretrained = cfg.backbone.pretrained or cfg.backbone.name == "external-feature-extractor"
    head_params = list(model.bottleneck.parameters()) + list(model.classifier.parameters())
    if model.discriminator is not None:
        head_params += list(model.discriminator.parameters())
    backbone_params = [p for p in model.backbone.parameters() if p.requires_grad]
    scale = cfg.new_layer_lr_scale if pretrained else 1.0
    groups = []
    if backbone_params:
        groups.append({"params": backbone_params, "lr": cfg.lr})
    groups.append({"params": head_params, "lr": cfg.lr * scale})
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _lr_factor(cfg: ExperimentConfig, epoch: int) -> float:
    if not cfg.lr_decay:
        return 1.0
    progress = epoch / max(cfg.epochs, 1)
    return float((1.0 + 10.0 * progress) ** -0.75)


@dataclass
class ScenarioData:
    source_train: object
    target_train: object
    target_eval: object
    source_eval: object
    num_classes: int
    stream_plan: object | None = None


def build_scenario_data(cfg: ExperimentConfig) -> ScenarioData:
    sc = cfg.scenario
    if sc.kind == "synthetic":
        syn = sc.synthetic
        if syn is None:
            raise ConfigError("scenario: synthetic run without synthetic parameters")
        source, target = gen_synthetic_domains(syn)
        if sc.limit_per_class:
            source = subsample_array_per_class(source, sc.limit_per_class, cfg.seed)
        num_classes = syn.classes
        data = ScenarioData(source_train=source, target_train=target,
                            target_eval=target, source_eval=source,
                            num_classes=num_classes)
    else:
        src_manifest = load_image_folder(sc.source_root)
        tgt_manifest = load_image_folder(sc.target_root)
        if src_manifest.class_names != tgt_manifest.class_names:
            raise ConfigError("scenario: source and target class directories differ")
        if sc.limit_per_class:
            src_manifest = subsample_per_class(src_manifest, sc.limit_per_class, cfg.seed)
        if sc.normalization == "imagenet":
            mean, std = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
        else:
            mean, std = compute_channel_stats(src_manifest)
        pspec = PreprocessSpec(mean=mean, std=std)
        ood = OODTransform(sc.ood) if sc.ood else None
        data = ScenarioData(
            source_train=ImageDataset(src_manifest, pspec, "train", cfg.seed),
            target_train=ImageDataset(tgt_manifest, pspec, "train", cfg.seed + 1),
            target_eval=ImageDataset(tgt_manifest, pspec, "eval", cfg.seed, ood=ood),
            source_eval=ImageDataset(src_manifest, pspec, "eval", cfg.seed),
            num_classes=len(src_manifest.class_names),
        )
    if sc.stream_parts:
        data.stream_plan = split_stream(len(data.source_train), sc.stream_parts, cfg.seed)
    return data


def _epoch_source(data: ScenarioData, cfg: ExperimentConfig, epoch: int):
    """Full source set, or the epoch's stream part in dynamic-stream runs."""
    if data.stream_plan is None:
        return data.source_train
    idx = data.stream_plan.part_indices(epoch)
    src = data.source_train
    if isinstance(src, ArrayDataset):
        return src.subset(idx)
    sub_manifest = type(src.manifest)(
        root=src.manifest.root,
        entries=[src.manifest.entries[i] for i in idx],
        class_names=list(src.manifest.class_names),
    )
    return ImageDataset(sub_manifest, src.spec, src.mode, src.seed)


def run_experiment(cfg: ExperimentConfig, out_dir, external_backbone=None) -> dict:
    """Execute the full pipeline: train, evaluate per epoch, log, checkpoint.

    Writes metrics.jsonl / metrics.csv (flushed per epoch so aborted runs
    keep partial logs), final.pt / best.pt and summary.json under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config_fingerprint(cfg)

    torch.manual_seed(cfg.seed)
    data = build_scenario_data(cfg)
    model = build_model(cfg.backbone, cfg.bottleneck, data.num_classes,
                        with_discriminator=cfg.algorithm == "dann",
                        external_backbone=external_backbone)
    optimizer = build_optimizer(model, cfg)
    base_lrs = [g["lr"] for g in optimizer.param_groups]

    target_stream = BatchStream(data.target_train, cfg.batch_size, seed=cfg.seed + 1)
    state = TrainState()

    metrics_jsonl = out_dir / "metrics.jsonl"
    metrics_csv = out_dir / "metrics.csv"
    extra_fields = []
    if cfg.eval_balanced_metrics:
        extra_fields += ["balanced_accuracy", "macro_f1"]
    if cfg.eval_a_distance:
        extra_fields += ["a_distance"]
    fields = list(METRIC_FIELDS) + extra_fields

    with open(metrics_jsonl, "w", encoding="utf-8") as jf, \
            open(metrics_csv, "w", encoding="utf-8") as cf:
        cf.write(",".join(fields) + "\n")
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            if data.stream_plan is not None and cfg.stream_reset_optimizer:
                optimizer = build_optimizer(model, cfg)
                base_lrs = [g["lr"] for g in optimizer.param_groups]
            factor = _lr_factor(cfg, epoch)
            for group, base in zip(optimizer.param_groups, base_lrs):
                group["lr"] = base * factor

            epoch_source = _epoch_source(data, cfg, epoch)
            source_stream = BatchStream(epoch_source, cfg.batch_size,
                                        seed=cfg.seed * 100003 + epoch)
            stats = train_epoch(model, source_stream, target_stream, cfg,
                                optimizer, data.num_classes, epoch)

            y_true, y_pred, feats_t = predict_dataset(model, data.target_eval)
            row = {"epoch": epoch, **stats,
                   "target_accuracy": float(np.mean(y_true == y_pred)),
                   "wall_seconds": time.perf_counter() - t0}
            if cfg.eval_balanced_metrics:
                rec = evaluation_record(y_true, y_pred)
                row["balanced_accuracy"] = rec.balanced_accuracy
                row["macro_f1"] = rec.macro_f1
            if cfg.eval_a_distance:
                _, _, feats_s = predict_dataset(model, data.source_eval)
                row["a_distance"] = a_distance(feats_s, feats_t, seed=cfg.seed).value

            state.epoch = epoch
            state.record(row)
            jf.write(json.dumps(row) + "\n")
            jf.flush()
            cf.write(",".join(_fmt(row[k]) for k in fields) + "\n")
            cf.flush()
            if state.best_epoch == epoch:
                save_checkpoint(model, out_dir / "best.pt", fingerprint, epoch)
            logger.info("epoch %d: acc=%.4f loss=%.4f", epoch,
                        row["target_accuracy"], row["train_loss_total"])

    save_checkpoint(model, out_dir / "final.pt", fingerprint, cfg.epochs - 1)
    summary = {
        "best_accuracy": state.best_accuracy,
        "best_epoch": state.best_epoch,
        "final_accuracy": state.history[-1]["target_accuracy"],
        "epochs": cfg.epochs,
        "algorithm": cfg.algorithm,
        "scenario": cfg.scenario.describe(),
        "backbone": cfg.backbone.name,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "config_fingerprint": fingerprint,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
