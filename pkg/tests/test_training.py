import hashlib
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dabench.config import resolve_config
from dabench.data import ArrayDataset, BatchStream
from dabench.errors import NumericError
from dabench.losses import coral_loss
from dabench.models import BackboneSpec, BottleneckSpec, build_model
from dabench.training import (
    TrainState,
    build_optimizer,
    build_scenario_data,
    run_experiment,
    total_loss,
    train_epoch,
)

TOY_BACKBONE = {"name": "toy-mlp", "input_dim": 2, "output_dim": 16, "hidden_dim": 16}
TOY_BOTTLENECK = {"width": 8}


def toy_cfg(algorithm="dsan", **overrides):
    raw = {
        "algorithm": algorithm,
        "seed": 0,
        "epochs": 2,
        "iters_per_epoch": 4,
        "batch_size": 8,
        "scenario": {"kind": "synthetic", "classes": 3, "samples_per_class": 30},
        "backbone": dict(TOY_BACKBONE),
        "bottleneck": dict(TOY_BOTTLENECK),
    }
    raw.update(overrides)
    raw = {k: v for k, v in raw.items() if v is not None}
    return resolve_config(raw)


def make_dataset(seed, n=40, c=3):
    rng = np.random.default_rng(seed)
    return ArrayDataset(rng.standard_normal((n, 2)).astype(np.float32),
                        rng.integers(0, c, n))


def param_hash(model):
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


class TestTotalLoss:
    def test_zero_weight_is_ce(self):
        ce = torch.tensor(1.2)
        lv = total_loss(ce, torch.tensor(0.4), 0.0)
        assert lv.value is ce

    def test_weighted_sum(self):
        lv = total_loss(torch.tensor(1.2), torch.tensor(0.4), 0.5)
        assert lv.item() == pytest.approx(1.4)

    def test_zero_da_term(self):
        lv = total_loss(torch.tensor(0.9), torch.tensor(0.0), 2.0)
        assert lv.item() == pytest.approx(0.9)

    def test_none_algorithm_returns_ce(self):
        ce = torch.tensor(0.3)
        assert total_loss(ce, torch.tensor(9.9), 0.0, "none").value is ce

    def test_daln_subtracts(self):
        lv = total_loss(torch.tensor(0.7), torch.tensor(0.2), 0.1, "daln")
        assert lv.item() == pytest.approx(0.68)


class TestTrainEpoch:
    def test_exact_sample_consumption(self):
        cfg = toy_cfg("dsan", iters_per_epoch=200, batch_size=16,
                      scenario={"kind": "synthetic", "classes": 3,
                                "samples_per_class": 40})
        torch.manual_seed(0)
        model = build_model(cfg.backbone, cfg.bottleneck, 3)
        src = BatchStream(make_dataset(0, 200), 16, seed=0)
        tgt = BatchStream(make_dataset(1, 200), 16, seed=1)
        opt = build_optimizer(model, cfg)
        train_epoch(model, src, tgt, cfg, opt, 3)
        assert src.samples_drawn == 3200
        assert tgt.samples_drawn == 3200

    @pytest.mark.parametrize("algorithm", ["coral", "dann", "dsan", "bnm",
                                           "daln", "dcan", "euda-mmd"])
    def test_every_algorithm_steps_and_stays_finite(self, algorithm):
        cfg = toy_cfg(algorithm)
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.backbone, cfg.bottleneck, 3,
                            with_discriminator=algorithm == "dann")
        src = BatchStream(make_dataset(2), cfg.batch_size, seed=0)
        tgt = BatchStream(make_dataset(3), cfg.batch_size, seed=1)
        opt = build_optimizer(model, cfg)
        before = param_hash(model)
        stats = train_epoch(model, src, tgt, cfg, opt, 3)
        assert param_hash(model) != before
        for v in stats.values():
            assert np.isfinite(v)

    def test_none_matches_source_only_training(self):
        cfg = toy_cfg("none")
        src_data = make_dataset(4)

        torch.manual_seed(0)
        model_a = build_model(cfg.backbone, cfg.bottleneck, 3)
        opt_a = build_optimizer(model_a, cfg)
        src = BatchStream(src_data, cfg.batch_size, seed=5)
        tgt = BatchStream(make_dataset(5), cfg.batch_size, seed=6)
        train_epoch(model_a, src, tgt, cfg, opt_a, 3)

        # plain supervised loop drawing the same source batches
        torch.manual_seed(0)
        model_b = build_model(cfg.backbone, cfg.bottleneck, 3)
        opt_b = build_optimizer(model_b, cfg)
        src_b = BatchStream(src_data, cfg.batch_size, seed=5)
        model_b.train()
        for _ in range(cfg.iters_per_epoch):
            xs, ys = src_b.next_batch()
            _, logits = model_b(xs)
            loss = F.cross_entropy(logits, ys)
            opt_b.zero_grad()
            loss.backward()
            opt_b.step()
        assert param_hash(model_a) == param_hash(model_b)

    def test_zero_da_gradient_step_equals_ce_step(self):
        # identical source/target batches make the coral term exactly zero,
        # so one combined step must match the pure cross-entropy step
        cfg = toy_cfg("coral")
        xs = torch.tensor(make_dataset(6, 16).x)
        ys = torch.tensor(make_dataset(6, 16).y)

        torch.manual_seed(1)
        model_a = build_model(cfg.backbone, cfg.bottleneck, 3)
        opt_a = build_optimizer(model_a, cfg)
        model_a.train()
        feats_s, logits_s = model_a(xs)
        feats_t, _ = model_a(xs.clone())
        loss = F.cross_entropy(logits_s, ys) + cfg.da_weight * coral_loss(feats_s, feats_t).value
        opt_a.zero_grad()
        loss.backward()
        opt_a.step()

        torch.manual_seed(1)
        model_b = build_model(cfg.backbone, cfg.bottleneck, 3)
        opt_b = build_optimizer(model_b, cfg)
        model_b.train()
        _, logits_b = model_b(xs)
        F.cross_entropy(logits_b, ys).backward()
        opt_b.step()

        with torch.no_grad():
            for pa, pb in zip(model_a.parameters(), model_b.parameters()):
                assert float((pa - pb).abs().max()) <= 1e-10

    def test_unsupervised_contract_shuffled_target_labels(self):
        cfg = toy_cfg("dsan", iters_per_epoch=10)
        tgt_data = make_dataset(8)
        shuffled = ArrayDataset(tgt_data.x.copy(),
                                np.random.default_rng(0).permutation(tgt_data.y))
        hashes = []
        for target in (tgt_data, shuffled):
            torch.manual_seed(0)
            model = build_model(cfg.backbone, cfg.bottleneck, 3)
            opt = build_optimizer(model, cfg)
            src = BatchStream(make_dataset(7), cfg.batch_size, seed=1)
            tgt = BatchStream(target, cfg.batch_size, seed=2)
            step_hashes = []
            for _ in range(10):
                one_iter = resolve_config({
                    "algorithm": "dsan", "iters_per_epoch": 1,
                    "batch_size": cfg.batch_size, "epochs": 2,
                    "scenario": {"kind": "synthetic", "classes": 3,
                                 "samples_per_class": 30},
                    "backbone": dict(TOY_BACKBONE),
                    "bottleneck": dict(TOY_BOTTLENECK)})
                train_epoch(model, src, tgt, one_iter, opt, 3)
                step_hashes.append(param_hash(model))
            hashes.append(tuple(step_hashes))
        assert hashes[0] == hashes[1]

    def test_lambda_continuity(self):
        # per-step updates shrink linearly toward the lambda=0 update
        def step_params(weight):
            cfg = toy_cfg("euda-mmd", iters_per_epoch=1)
            object.__setattr__(cfg, "da_weight", weight)
            torch.manual_seed(2)
            model = build_model(cfg.backbone, cfg.bottleneck, 3)
            opt = build_optimizer(model, cfg)
            src = BatchStream(make_dataset(9), cfg.batch_size, seed=3)
            tgt = BatchStream(make_dataset(10), cfg.batch_size, seed=4)
            train_epoch(model, src, tgt, cfg, opt, 3)
            return torch.cat([p.detach().flatten() for p in model.parameters()])

        base = step_params(0.0)
        lam_ref = 1e-2
        k = float((step_params(lam_ref) - base).norm()) / lam_ref
        for lam in (1e-3, 1e-4):
            delta = float((step_params(lam) - base).norm())
            assert delta <= 2.0 * k * lam + 1e-12

    def test_non_finite_loss_aborts_with_batch_hash(self):
        cfg = toy_cfg("none")
        torch.manual_seed(0)
        model = build_model(cfg.backbone, cfg.bottleneck, 3)
        with torch.no_grad():
            model.classifier.weight.fill_(float("inf"))
        src = BatchStream(make_dataset(11), cfg.batch_size, seed=0)
        tgt = BatchStream(make_dataset(12), cfg.batch_size, seed=1)
        opt = build_optimizer(model, cfg)
        with pytest.raises(NumericError, match="batch sha256"):
            train_epoch(model, src, tgt, cfg, opt, 3)


class TestTrainState:
    def test_best_is_running_max(self):
        state = TrainState()
        accs = [0.2, 0.5, 0.4, 0.7, 0.6]
        best_so_far = []
        for e, acc in enumerate(accs):
            state.record({"epoch": e, "target_accuracy": acc})
            best_so_far.append(state.best_accuracy)
        assert best_so_far == [0.2, 0.5, 0.5, 0.7, 0.7]
        assert state.best_epoch == 3
        assert best_so_far == sorted(best_so_far)


class TestRunExperiment:
    def test_emits_metric_log_and_checkpoints(self, tmp_path):
        cfg = toy_cfg("dsan", epochs=3, iters_per_epoch=3)
        summary = run_experiment(cfg, tmp_path / "run")
        rows = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == 3
        for row in rows:
            for key in ("epoch", "train_loss_total", "train_loss_ce",
                        "train_loss_da", "target_accuracy", "wall_seconds"):
                assert key in row
        assert (tmp_path / "run" / "final.pt").exists()
        assert (tmp_path / "run" / "best.pt").exists()
        assert summary["best_accuracy"] == max(r["target_accuracy"] for r in rows)
        assert summary["best_epoch"] in {r["epoch"] for r in rows}
        csv_lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert len(csv_lines) == 4  # header + 3 epochs

    def test_rerun_bit_identical_modulo_wall_time(self, tmp_path):
        cfg = toy_cfg("daln", epochs=2, iters_per_epoch=3)
        run_experiment(cfg, tmp_path / "a")
        cfg2 = toy_cfg("daln", epochs=2, iters_per_epoch=3)
        run_experiment(cfg2, tmp_path / "b")

        def stripped(path):
            rows = []
            for line in (path / "metrics.jsonl").read_text().splitlines():
                row = json.loads(line)
                row.pop("wall_seconds")
                rows.append(json.dumps(row, sort_keys=True))
            return rows

        assert stripped(tmp_path / "a") == stripped(tmp_path / "b")

    def test_stream_scenario_trains_per_part(self, tmp_path):
        cfg = toy_cfg("dsan", iters_per_epoch=2, epochs=None,
                      scenario={"kind": "synthetic", "classes": 3,
                                "samples_per_class": 30, "stream_parts": 5})
        assert cfg.epochs == 5
        summary = run_experiment(cfg, tmp_path / "stream")
        assert summary["epochs"] == 5
        assert summary["scenario"] == "synthetic+stream=5"

    def test_limited_scenario_subsamples_source(self):
        cfg = toy_cfg("none", scenario={"kind": "synthetic", "classes": 3,
                                        "samples_per_class": 30,
                                        "limit_per_class": 5})
        data = build_scenario_data(cfg)
        assert len(data.source_train) == 15
        assert len(data.target_train) == 90

    def test_balanced_metrics_logged_when_enabled(self, tmp_path):
        cfg = toy_cfg("none", epochs=1, iters_per_epoch=2,
                      eval_balanced_metrics=True)
        run_experiment(cfg, tmp_path / "run")
        row = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
        assert "balanced_accuracy" in row and "macro_f1" in row
