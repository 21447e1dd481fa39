import json
import math

import numpy as np
import pytest
import torch

from fei import pretrain as pt
from fei.data import make_synthetic_freq_dataset, normalize_per_sample
from fei.errors import ConfigError, NumericalError
from fei.model import EncoderConfig
from fei.pretrain import (ABLATIONS, TrainConfig, ablation_configs, branch_losses, build_model, describe_ablation,
                          fei_step, lr_at_epoch, make_optimizer, pretrain)

MLP = EncoderConfig(architecture="mlp", d=8, length=32, mlp_hidden=16)


@pytest.fixture(scope="module")
def small_values():
    ds = make_synthetic_freq_dataset(num_classes=2, per_class=24, length=32, spacing=3, seed=1)
    return normalize_per_sample(ds).values


def step_once(cfg, values, enc=MLP):
    model = build_model(enc, cfg)
    opt = make_optimizer(model, cfg)
    rec = fei_step(model, opt, values[:16], cfg, np.random.default_rng(0))
    return model, rec


class TestTrainConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert (cfg.alpha, cfg.beta1, cfg.beta2, cfg.lr) == (0.995, 0.0, 0.7, 2e-4)
        assert (cfg.batch, cfg.max_epochs, cfg.patience, cfg.lr_decay) == (512, 100, 5, 0.9)
        assert cfg.betas == (0.9, 0.999)

    @pytest.mark.parametrize("kwargs", [
        {"beta1": 0.5, "beta2": 0.5}, {"alpha": 1.0}, {"lr": 0.0}, {"batch": 0},
        {"lr_decay": 1.5}, {"masking_strategy": "xfm"}, {"ablation": ["no_everything"]},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestStep:
    def test_loss_additivity(self, small_values):
        _, rec = step_once(TrainConfig(), small_values)
        assert rec.loss_total == pytest.approx(rec.loss_target_branch + rec.loss_mask_branch, rel=1e-6)
        assert rec.loss_target_branch > 0 and rec.loss_mask_branch > 0

    def test_mask_table_gradient_only_from_mask_branch(self, small_values):
        cfg = TrainConfig(ablation=["no_mask_infer"])
        model = build_model(MLP, cfg)
        x = torch.as_tensor(small_values[:8], dtype=torch.float32)
        masks = pt.sample_masks(8, 32, cfg, np.random.default_rng(0))
        xt = torch.as_tensor(pt.make_targets(small_values[:8], masks, "dfm"), dtype=torch.float32)
        lt, lm = branch_losses(model, x, xt, torch.as_tensor(masks, dtype=torch.float32), cfg)
        assert lm.item() == 0.0
        (lt + lm).backward()
        grad = model.mask_encoder.weight.grad
        assert grad is None or torch.count_nonzero(grad) == 0

    def test_no_mask_infer_records_zero(self, small_values):
        res = pretrain(small_values, MLP, TrainConfig(max_epochs=2, batch=16, ablation=["no_mask_infer"]))
        assert all(r.loss_mask_branch == 0.0 for r in res.records)

    def test_momentum_tracks_post_step_weights(self, small_values):
        cfg = TrainConfig(alpha=0.9)
        model = build_model(MLP, cfg)
        before = model.target_encoder.net[1].weight.clone()
        opt = make_optimizer(model, cfg)
        fei_step(model, opt, small_values[:16], cfg, np.random.default_rng(0))
        online = model.encoder.net[1].weight.detach()
        expected = 0.9 * before + 0.1 * online
        assert torch.allclose(model.target_encoder.net[1].weight, expected, atol=1e-7, rtol=0)

    def test_no_momentum_leaves_copy_untouched(self, small_values):
        cfg = TrainConfig(ablation=["no_momentum"])
        model = build_model(MLP, cfg)
        before = model.target_encoder.net[1].weight.clone()
        fei_step(model, make_optimizer(model, cfg), small_values[:16], cfg, np.random.default_rng(0))
        assert torch.equal(model.target_encoder.net[1].weight, before)

    def test_optimizer_covers_online_params_only(self):
        cfg = TrainConfig()
        model = build_model(MLP, cfg)
        opt = make_optimizer(model, cfg)
        in_opt = {id(p) for g in opt.param_groups for p in g["params"]}
        momentum = {id(p) for p in (*model.target_encoder.parameters(), *model.target_projector.parameters())}
        assert not in_opt & momentum
        assert in_opt == {id(p) for p in model.parameters() if p.requires_grad}

    def test_non_finite_loss_raises(self, small_values):
        bad = small_values[:16].copy()
        cfg = TrainConfig()
        model = build_model(MLP, cfg)
        with torch.no_grad():
            model.encoder.net[1].weight.fill_(float("inf"))
        with pytest.raises(NumericalError):
            fei_step(model, make_optimizer(model, cfg), bad, cfg, np.random.default_rng(0))


class TestSchedule:
    def test_lr_decays_exactly(self, small_values):
        cfg = TrainConfig(max_epochs=4, batch=48, lr=2e-4)
        res = pretrain(small_values, MLP, cfg)
        per_epoch = {r.epoch: r.lr_current for r in res.records}
        for e in range(4):
            assert per_epoch[e] == pytest.approx(2e-4 * 0.9 ** e, rel=1e-12)
            assert lr_at_epoch(cfg, e) == 2e-4 * 0.9 ** e

    def test_patience_one_constant_validation_stops_after_two(self, small_values, monkeypatch):
        monkeypatch.setattr(pt, "validation_loss", lambda *a, **k: 1.0)
        res = pretrain(small_values, MLP, TrainConfig(max_epochs=10, batch=48, patience=1), small_values[:8])
        assert len(res.epoch_losses) == 2
        assert res.stopped_early
        assert res.best_epoch == 0

    def test_best_state_is_lowest_validation(self, small_values, monkeypatch):
        trace = iter([3.0, 1.0, 2.0, 2.5, 4.0])
        snapshots = []
        real_deepcopy = pt.copy.deepcopy

        def fake_val(model, *a, **k):
            snapshots.append(real_deepcopy(model.state_dict()))
            return next(trace)

        monkeypatch.setattr(pt, "validation_loss", fake_val)
        res = pretrain(small_values, MLP, TrainConfig(max_epochs=5, batch=48, patience=10), small_values[:8])
        assert res.best_epoch == 1
        for k, v in res.best_state.items():
            assert torch.equal(v, snapshots[1][k])
        assert not res.stopped_early

    def test_no_validation_best_is_last(self, small_values):
        res = pretrain(small_values, MLP, TrainConfig(max_epochs=2, batch=48))
        assert res.best_epoch == 1
        assert res.val_losses == []

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            pretrain(np.zeros((0, 1, 32)), MLP, TrainConfig())


class TestDeterminism:
    def test_same_seed_bitwise_logs(self, small_values, tmp_path):
        logs = []
        for i in range(2):
            res = pretrain(small_values, MLP, TrainConfig(max_epochs=3, batch=16, seed=11), small_values[:8])
            path = tmp_path / f"log{i}.jsonl"
            pt.write_records(res.records, path)
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]

    def test_different_seed_differs(self, small_values):
        a = pretrain(small_values, MLP, TrainConfig(max_epochs=1, batch=16, seed=1))
        b = pretrain(small_values, MLP, TrainConfig(max_epochs=1, batch=16, seed=2))
        assert a.epoch_losses != b.epoch_losses

    def test_record_json(self, small_values):
        _, rec = step_once(TrainConfig(), small_values)
        row = json.loads(rec.to_json())
        assert set(row) == {"epoch", "step", "loss_total", "loss_target_branch", "loss_mask_branch", "lr_current"}


class TestAblations:
    def test_configs(self):
        runs = ablation_configs(TrainConfig(ablation=["no_detach"]))
        assert [n for n, _ in runs] == ["FEI", *ABLATIONS]
        assert runs[0][1].ablation == []
        assert all(c.ablation == [n] for n, c in runs[1:])

    def test_no_subspace_dims(self):
        model = build_model(EncoderConfig(d=16, length=32), TrainConfig(ablation=["no_subspace"]))
        assert model.h == 16
        assert model.mask_encoder.weight.shape == (17, 16)

    def test_tdm_table_spans_time_steps(self):
        model = build_model(EncoderConfig(d=16, length=32), TrainConfig(masking_strategy="tdm"))
        assert model.mask_encoder.weight.shape == (32, 8)

    def test_descriptions(self):
        d = describe_ablation(TrainConfig(ablation=["no_emb_infer"]))
        assert not d["target_branch"] and d["mask_branch"]
        assert describe_ablation(TrainConfig(ablation=["no_momentum"]))["target_encoder"].startswith("online")

    @pytest.mark.parametrize("flag", ABLATIONS)
    def test_smoke_five_epochs_finite(self, flag, small_values):
        res = pretrain(small_values, EncoderConfig(d=16, length=32, widths=[8, 8]),
                       TrainConfig(max_epochs=5, batch=16, ablation=[flag]), small_values[:8])
        assert len(res.epoch_losses) >= 1
        assert all(math.isfinite(r.loss_total) for r in res.records)
        assert all(math.isfinite(v) for v in res.val_losses)
