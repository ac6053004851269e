import json
import math

import numpy as np
import pytest
import torch

from conftest import TINY
from tlsurrogate import datagen, model as M, train as T
from tlsurrogate.encoders import DTYPE
from tlsurrogate.errors import FailureEscalation


def test_cosine_lr_examples():
    cfg = T.TrainConfig(max_epochs=200)
    assert T.cosine_lr(0, cfg) == cfg.lr_max
    assert T.cosine_lr(200, cfg) == pytest.approx(cfg.lr_min, abs=1e-18)
    assert T.cosine_lr(100, cfg) == pytest.approx((cfg.lr_max + cfg.lr_min) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        T.cosine_lr(201, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(lr_min=1e-2, lr_max=1e-3)
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)


def test_clip_grad_norm_examples():
    g = [torch.tensor([0.3, 0.4], dtype=DTYPE)]
    out, norm = T.clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(0.5) and torch.equal(out[0], g[0])
    big = {"a": torch.tensor([1.2], dtype=DTYPE), "b": torch.tensor([1.6], dtype=DTYPE)}
    out, norm = T.clip_grad_norm(big, 1.0)
    assert norm == pytest.approx(2.0)
    total = math.sqrt(sum(float((v ** 2).sum()) for v in out.values()))
    assert total == pytest.approx(1.0, abs=1e-12)
    zeros = [torch.zeros(3, dtype=DTYPE)]
    out, norm = T.clip_grad_norm(zeros, 1.0)
    assert norm == 0.0 and torch.equal(out[0], zeros[0])


def test_adamw_examples():
    cfg = T.TrainConfig(weight_decay=0.0)
    p = {"encoder.w": torch.tensor([2.0], dtype=DTYPE)}
    opt = T.AdamW(cfg)
    opt.step(p, {"encoder.w": torch.zeros(1, dtype=DTYPE)}, lr=1e-3)
    assert float(p["encoder.w"]) == 2.0
    p = {"encoder.w": torch.tensor([0.0], dtype=DTYPE)}
    T.optimizer_step(p, {"encoder.w": torch.ones(1, dtype=DTYPE)}, T.AdamW(cfg), lr=1e-3)
    assert float(p["encoder.w"]) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    decay = T.TrainConfig(weight_decay=1e-2)
    p = {"encoder.w": torch.tensor([3.0], dtype=DTYPE), "A": torch.tensor([3.0], dtype=DTYPE)}
    zero = {k: torch.zeros(1, dtype=DTYPE) for k in p}
    T.AdamW(decay).step(p, zero, lr=1e-3)
    assert float(p["encoder.w"]) == pytest.approx(3.0 * (1 - 1e-3 * 1e-2), rel=1e-14)
    assert float(p["A"]) == 3.0


def test_adamw_matches_torch_reference():
    gen = torch.Generator().manual_seed(0)
    w0 = torch.randn(5, dtype=DTYPE, generator=gen)
    grads = [torch.randn(5, dtype=DTYPE, generator=gen) for _ in range(6)]
    cfg = T.TrainConfig()
    mine = {"encoder.w": w0.clone()}
    opt = T.AdamW(cfg)
    ref = torch.nn.Parameter(w0.clone())
    torch_opt = torch.optim.AdamW([ref], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2)
    for g in grads:
        opt.step(mine, {"encoder.w": g}, lr=1e-3)
        ref.grad = g.clone()
        torch_opt.step()
    assert torch.allclose(mine["encoder.w"], ref.detach(), rtol=1e-12, atol=1e-14)


def test_error_metrics_examples():
    y = np.full(10, 100.0)
    m = T.error_metrics(y, y, np.zeros(10))
    assert m.mse == 0 and m.rmspe == 0 and m.mean_signed_error == 0
    m = T.error_metrics(y + 1.0, y, np.ones(10))
    assert m.rmspe == pytest.approx(1.0, rel=1e-6) and m.mean_signed_error == pytest.approx(1.0)
    m = T.error_metrics(y + np.linspace(-50, 50, 10), y, np.full(10, 1e6))
    assert m.coverage_2sigma == 1.0


def test_validate_is_pure(small_data):
    splits = small_data[0]
    from conftest import make_tiny_model
    model = make_tiny_model(splits["train"])
    a = T.validate(model, splits["val"])
    b = T.validate(model, splits["val"])
    assert a == b
    assert a.rmspe >= 0 and 0 <= a.coverage_2sigma <= 1
    with pytest.raises(ValueError):
        T.validate(model, splits["val"].subset(np.array([], dtype=int)))


def test_validate_clamps_means(small_data):
    splits = small_data[0]
    from conftest import make_tiny_model
    model = make_tiny_model(splits["train"])
    with torch.no_grad():
        model.head.m.fill_(1e4)
        model.head.S_raw.fill_(-30.0)
    m = T.validate(model, splits["val"])
    assert m.mean_signed_error == pytest.approx(float(np.mean(200.0 - splits["val"].tl)), abs=1e-6)


def test_batches_merge_singleton():
    rng = np.random.default_rng(0)
    out = T.batches(9, 4, rng)
    assert [len(b) for b in out] == [4, 5]
    assert sorted(np.concatenate(out).tolist()) == list(range(9))


def test_training_loss_decreases(small_data):
    splits = small_data[0]
    res = T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=10, batch_size=64, seed=1), TINY)
    losses = [r["train_loss"] for r in res.log]
    assert losses[-1] < losses[0]
    assert len(res.log) == 10


def test_early_stop_restores_best(small_data, tmp_path):
    splits = small_data[0]
    res = T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=5, batch_size=64, patience=0, seed=2),
                  TINY, log_path=tmp_path / "log.jsonl")
    assert res.best_epoch == 1 and res.stopped_early and len(res.log) == 1
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert set(records[0]) == {"epoch", "lr", "train_loss", "val_neg_elbo", "val_mse", "val_rmspe", "patience"}
    assert T.validate(res.model, splits["val"]).neg_elbo == pytest.approx(res.best_val, rel=1e-12)


def test_checkpoint_is_best_epoch(small_data):
    splits = small_data[0]
    res = T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=6, batch_size=64, patience=2, seed=4), TINY)
    vals = [r["val_neg_elbo"] for r in res.log]
    assert res.best_val == min(vals)
    assert res.log[res.best_epoch - 1]["val_neg_elbo"] == res.best_val
    assert T.validate(res.model, splits["val"]).neg_elbo == pytest.approx(res.best_val, rel=1e-12)


def test_training_is_deterministic(small_data):
    splits = small_data[0]
    cfg = T.TrainConfig(max_epochs=2, batch_size=64, seed=3)
    a = T.train(splits["train"], splits["val"], cfg, TINY)
    b = T.train(splits["train"], splits["val"], cfg, TINY)
    assert M.dumps(a.model) == M.dumps(b.model)
    assert a.log == b.log


def test_zero_mean_without_penalty_is_plain_svgp(small_data):
    splits = small_data[0]
    cfg = M.ModelConfig(**{**TINY.__dict__, "ablation": "zero-mean"})
    res = T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=2, batch_size=64, lam=0.0), cfg)
    assert float(res.model.A) == 0.0 and float(res.model.B) == 0.0


def test_all_batches_failing_aborts(small_data, monkeypatch):
    splits = small_data[0]

    def broken(*args, **kwargs):
        raise FailureEscalation("forced")

    monkeypatch.setattr(T, "loss", broken)
    with pytest.raises(FailureEscalation):
        T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=1, batch_size=64), TINY)


def test_physics_self_consistency_small():
    spec = datagen.DatasetSpec(n_sources=4, receivers_per_source=10, f_lo=100, f_hi=4000, seed=21)
    oracle = datagen.OracleConfig(c_b=0.0, c_i=0.0, c_z=0.0, sigma_data=0.1, seed=21)
    splits, _ = datagen.generate_dataset(spec, oracle_cfg=oracle)
    res = T.train(splits["train"], splits["val"], T.TrainConfig(max_epochs=8, batch_size=128, seed=21), TINY)
    m = T.validate(res.model, splits["test"])
    assert m.mse < 1.0
    assert abs(res.model.A.item() - 20.0) < 0.5
