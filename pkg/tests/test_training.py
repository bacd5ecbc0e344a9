import math

import numpy as np
import pytest

import oracles
from mmsformer import tensor as T
from mmsformer.config import DecoderConfig, FusionConfig, ModelConfig, TrainConfig
from mmsformer.data import SynthSpec, generate_synthetic
from mmsformer.errors import ConfigError, DataError
from mmsformer.metrics import read_records
from mmsformer.model import build
from mmsformer.tensor import Parameter, Tensor
from mmsformer.training import OptimizerState, adamw_step, cross_entropy, lr_at, train


def test_warmup_is_constant_fraction_of_base():
    cfg = TrainConfig(base_lr=6e-5, total_epochs=200, warmup_epochs=10)
    for e in range(10):
        for f in (0.0, 0.5, 0.99):
            assert lr_at(e, f, cfg) == pytest.approx(6e-6, abs=1e-18)


def test_poly_decay_values():
    cfg = TrainConfig(base_lr=1.0, total_epochs=110, warmup_epochs=10)
    assert lr_at(10, 0.0, cfg) == 1.0
    assert abs(lr_at(60, 0.0, cfg) - 0.5 ** 0.9) <= 1e-9
    assert lr_at(110, 0.0, cfg) == 0.0
    lrs = [lr_at(e, 0.0, cfg) for e in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_uniform_logits_give_log_k(f64):
    for K in (2, 5, 19):
        loss = cross_entropy(Tensor(np.zeros((K, 4, 3))), np.zeros((4, 3), int)).item()
        assert abs(loss - math.log(K)) <= 1e-6


def test_cross_entropy_matches_reference(f64, rng):
    logits = rng.normal(size=(4, 3, 3))
    labels = rng.integers(0, 4, size=(3, 3))
    labels[1, 1] = 255
    ref, n = 0.0, 0
    for i in range(3):
        for j in range(3):
            if labels[i, j] == 255:
                continue
            z = logits[:, i, j]
            ref += -(z[labels[i, j]] - math.log(sum(math.exp(v) for v in z)))
            n += 1
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(ref / n, rel=1e-12)


def test_all_ignored_loss_is_zero_with_zero_grad(f64):
    x = Tensor(np.ones((3, 2, 2)), requires_grad=True)
    loss = cross_entropy(x, np.full((2, 2), 255))
    loss.backward()
    assert loss.item() == 0.0 and not x.grad.any()


def test_bad_label_names_pixel():
    with pytest.raises(DataError, match=r"\(0, 1\)"):
        cross_entropy(Tensor(np.zeros((2, 2, 2))), np.array([[0, 5], [1, 0]]))


@pytest.mark.parametrize("lr,steps", [(1e-2, 50), (1e-3, 200)])
def test_adamw_without_decay_equals_adam(lr, steps):
    grad = lambda x: 2 * (x - 3.0) + math.cos(x)
    p = np.array([0.5])
    state = OptimizerState.like([p])
    for _ in range(steps):
        adamw_step([p], [np.array([grad(p[0])])], state, lr, weight_decay=0.0)
    assert abs(p[0] - oracles.adam_scalar(grad, 0.5, lr, steps)) <= 1e-12


def test_decoupled_weight_decay_shrinks_before_update():
    p = np.array([2.0])
    state = OptimizerState.like([p])
    adamw_step([p], [np.array([0.0])], state, lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=300, total_epochs=200)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("d"), SynthSpec(num_classes=3, mode="per_class_modality",
                                                                      n_samples=4, n_val=2, extent=32))


def _tiny_run(ds, out=None, seed=0, epochs=3):
    model = build(ModelConfig(num_modalities=2, seed=seed, decoder=DecoderConfig(8, 3)))
    res = train(model, ds, TrainConfig(base_lr=1e-3, total_epochs=epochs, warmup_epochs=1, batch_size=2, seed=seed),
                out_dir=out)
    return model, res


def test_training_log_and_checkpoints(tiny_ds, tmp_path):
    _, res = _tiny_run(tiny_ds, tmp_path)
    recs = read_records(tmp_path / "train_log.jsonl")
    assert len(recs) == res.steps == 3 * 2
    assert set(recs[0]) == {"epoch", "iter", "lr", "loss", "val_mIoU"}
    assert recs[0]["lr"] == pytest.approx(1e-4)
    assert all(r["val_mIoU"] is not None for r in recs if r["iter"] == 1)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "final.ckpt").exists()


def test_training_is_deterministic(tiny_ds, tmp_path):
    _tiny_run(tiny_ds, tmp_path / "a", seed=1)
    _tiny_run(tiny_ds, tmp_path / "b", seed=1)
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()


def test_training_reduces_loss(tiny_ds):
    _, res = _tiny_run(tiny_ds, epochs=15)
    assert res.records[-1]["loss"] < res.records[0]["loss"]


def test_arity_mismatch_is_config_error(tiny_ds):
    with pytest.raises(ConfigError):
        train(build(ModelConfig(num_modalities=1, decoder=DecoderConfig(8, 3))), tiny_ds, TrainConfig(total_epochs=1,
              warmup_epochs=0))
    with pytest.raises(ConfigError):
        train(build(ModelConfig(num_modalities=2, decoder=DecoderConfig(8, 4))), tiny_ds, TrainConfig(total_epochs=1,
              warmup_epochs=0))
