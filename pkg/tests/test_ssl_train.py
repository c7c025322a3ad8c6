import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from bitsiam.backbone import BackboneConfig, HeadConfig, build_model
from bitsiam.data import ImageArray, LabeledDataset
from bitsiam.errors import CheckpointError, ConfigError, TrainingAborted
from bitsiam.ssl_train import (
    METRICS_HEADER,
    Monitor,
    OptimConfig,
    PairDataset,
    augment_pair,
    decay_parameters,
    lr_at,
    pretrain,
    read_metrics,
    simsiam_loss,
)

TINY = BackboneConfig(depth=14, width_mult="1/16", stem="cifar")
TINY_HEAD = HeadConfig(projector_dim=64, predictor_hidden=16)


def _images(n, size=16, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    imgs = rng.integers(0, 80, (n, size, size, 3))
    imgs[..., 0] += labels[:, None, None] * 150
    return ImageArray(imgs.astype(np.uint8), labels)


# --- loss ---------------------------------------------------------------------


def test_loss_hand_value():
    p1, z2 = torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 1.0]])
    p2, z1 = torch.tensor([[0.0, 1.0]]), torch.tensor([[1.0, 1.0]])
    assert abs(simsiam_loss(p1, p2, z1, z2).item() + 1 / math.sqrt(2)) < 1e-6
    assert round(simsiam_loss(p1, p2, z1, z2).item(), 5) == -0.70711


def test_loss_extremes():
    a = torch.randn(5, 8)
    b = torch.randn(5, 8)
    assert simsiam_loss(b, a, a, b).item() == pytest.approx(-1.0, abs=1e-6)
    e1, e2 = torch.eye(2)[:1], torch.eye(2)[1:]
    assert simsiam_loss(e1, e1, e2, e2).item() == 0.0


def test_loss_errors():
    x = torch.randn(3, 4)
    zero = x.clone()
    zero[1] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        simsiam_loss(x, x, zero, x)
    with pytest.raises(ValueError, match="shape"):
        simsiam_loss(x, x, x, torch.randn(3, 5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), batch=st.integers(1, 6), dim=st.integers(1, 9))
def test_loss_symmetry_range_scale(seed, batch, dim):
    g = torch.Generator().manual_seed(seed)
    p1, p2, z1, z2 = (torch.randn(batch, dim, generator=g, dtype=torch.float64) + 0.01 for _ in range(4))
    loss = simsiam_loss(p1, p2, z1, z2)
    assert loss.item() == simsiam_loss(p2, p1, z2, z1).item()
    assert -1 - 1e-12 <= loss.item() <= 1 + 1e-12
    scale = torch.rand(batch, 1, generator=g, dtype=torch.float64) * 100 + 1e-3
    assert abs(simsiam_loss(p1 * scale, p2, z1, z2 * scale).item() - loss.item()) < 1e-6


def test_stop_gradient_target_path_gets_nothing():
    p1, p2 = torch.randn(4, 6, requires_grad=True), torch.randn(4, 6, requires_grad=True)
    z1, z2 = torch.randn(4, 6, requires_grad=True), torch.randn(4, 6, requires_grad=True)
    simsiam_loss(p1, p2, z1, z2).backward()
    assert z1.grad is None or torch.count_nonzero(z1.grad) == 0
    assert z2.grad is None or torch.count_nonzero(z2.grad) == 0
    assert torch.count_nonzero(p1.grad) > 0


def _toy_outputs(theta, x1, x2):
    """Two-parameter siamese toy: shared shift ``b`` (encoder), rotation angle ``a`` (predictor)."""
    a, b = theta[0], theta[1]
    rot = torch.stack([torch.stack([torch.cos(a), -torch.sin(a)]), torch.stack([torch.sin(a), torch.cos(a)])])
    shift = torch.stack([b, 0.5 * b])
    z1, z2 = x1 + shift, x2 + shift
    return z1, z2, z1 @ rot.T, z2 @ rot.T


def test_stop_gradient_finite_difference():
    x1 = torch.tensor([[1.0, 0.2], [0.3, -0.8]], dtype=torch.float64)
    x2 = torch.tensor([[0.7, 0.6], [-0.4, -1.0]], dtype=torch.float64)
    theta0 = torch.tensor([0.3, 0.4], dtype=torch.float64, requires_grad=True)
    z1, z2, p1, p2 = _toy_outputs(theta0, x1, x2)
    simsiam_loss(p1, p2, z1, z2).backward()
    autograd = theta0.grad.clone()

    # oracle: targets are frozen constants at theta0, only the prediction path moves
    with torch.no_grad():
        c1, c2, _, _ = _toy_outputs(theta0, x1, x2)

    def frozen_target_loss(theta):
        _, _, q1, q2 = _toy_outputs(theta, x1, x2)
        cos = torch.nn.functional.cosine_similarity
        return (-0.5 * cos(q1, c2).mean() - 0.5 * cos(q2, c1).mean()).item()

    h = 1e-6
    fd = []
    for i in range(2):
        e = torch.zeros(2, dtype=torch.float64)
        e[i] = h
        fd.append((frozen_target_loss(theta0.detach() + e) - frozen_target_loss(theta0.detach() - e)) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    assert torch.all((autograd - fd).abs() <= 1e-6 * fd.abs().clamp_min(1e-12))

    # without the stop-gradient the shared parameter's derivative differs
    def full_loss(theta):
        z1, z2, q1, q2 = _toy_outputs(theta, x1, x2)
        cos = torch.nn.functional.cosine_similarity
        return (-0.5 * cos(q1, z2).mean() - 0.5 * cos(q2, z1).mean()).item()

    e = torch.tensor([0.0, h], dtype=torch.float64)
    full_b = (full_loss(theta0.detach() + e) - full_loss(theta0.detach() - e)) / (2 * h)
    assert abs(full_b - autograd[1].item()) > 1e-3


# --- schedule -------------------------------------------------------------------


def test_lr_schedule_points():
    cfg = OptimConfig(base_lr=0.03, batch_size=128)
    assert cfg.scaled_lr == pytest.approx(0.015, abs=1e-15)
    assert lr_at(0, cfg) == pytest.approx(0.015, abs=1e-15)
    assert lr_at(1, cfg) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(0.5, cfg) == pytest.approx(0.0075, abs=1e-15)
    with pytest.raises(ValueError):
        lr_at(1.5, cfg)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(base_lr=0).validate()
    with pytest.raises(ConfigError):
        OptimConfig(batch_size=1).validate()


def test_decay_parameter_set():
    model = build_model(TINY, TINY_HEAD)
    names = [n for n, _ in model.named_parameters()]
    decay, no_decay = decay_parameters(model, OptimConfig())
    assert decay == names and no_decay == []
    decay, no_decay = decay_parameters(model, OptimConfig(wd_exclude=("*.gamma", "*.beta", "*.bias")))
    assert no_decay and all(n.endswith((".gamma", ".beta", ".bias")) for n in no_decay)
    assert sorted(decay + no_decay) == sorted(names)


# --- augmentation ---------------------------------------------------------------


def test_augment_deterministic_and_shapes():
    img = np.random.default_rng(0).integers(0, 255, (40, 50, 3)).astype(np.uint8)
    a = augment_pair(img, "natural-224", seed=7)
    b = augment_pair(img, "natural-224", seed=7)
    assert a.view1.shape == (3, 224, 224) and a.view2.shape == (3, 224, 224)
    assert torch.equal(a.view1, b.view1) and torch.equal(a.view2, b.view2)
    assert not torch.equal(a.view1, a.view2)
    c = augment_pair(img, "cifar-32", seed=8)
    assert c.view1.shape == (3, 32, 32)


def test_identity_policy():
    img = np.random.default_rng(0).integers(0, 255, (16, 16, 3)).astype(np.uint8)
    pair = augment_pair(img, "identity", seed=3)
    src = torch.from_numpy(img).permute(2, 0, 1).float() / 255
    assert torch.equal(pair.view1, pair.view2) and torch.equal(pair.view1, src)


def test_undecodable_path(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"junk")
    with pytest.raises(OSError, match="x.png"):
        augment_pair(bad, "cifar-32", 0)
    with pytest.raises(ConfigError):
        augment_pair(np.zeros((4, 4, 3), np.uint8), "sepia", 0)


def test_pair_dataset_seeds_per_epoch():
    ds = PairDataset(_images(4), "cifar-32", seed=1, size=16)
    first = ds[2]
    assert torch.equal(first[0], ds[2][0])
    ds.set_epoch(1)
    assert not torch.equal(first[0], ds[2][0])


# --- loop -------------------------------------------------------------------------


def _monitor(n=16):
    arr = _images(n, seed=5)
    return Monitor(LabeledDataset(arr.subset(range(n // 2))), LabeledDataset(arr.subset(range(n // 2, n))), 2, k=3)


def _run(tmp_path, epochs=2, seed=0, resume=None, n=64, **kw):
    torch.manual_seed(seed)
    model = build_model(TINY, TINY_HEAD)
    cfg = OptimConfig(batch_size=16, epochs=epochs, save_every=kw.pop("save_every", 1))
    ds = PairDataset(_images(n), "cifar-32", seed=seed, size=16)
    return pretrain(model, ds, cfg, _monitor(), out_dir=tmp_path, seed=seed, resume_from=resume, **kw), cfg


def test_loop_contract(tmp_path):
    result, cfg = _run(tmp_path, epochs=2)
    assert [r.epoch for r in result.records] == [1, 2]
    for r in result.records:
        assert -1 <= r.loss <= 1
        assert r.lr == lr_at((r.epoch - 1) / cfg.epochs, cfg)
        assert 0 < r.lr <= cfg.scaled_lr
        assert 0 <= r.knn_balanced_acc <= 1 and r.collapse_std >= 0
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert read_metrics(tmp_path / "metrics.csv") == result.records
    assert [p.name for p in result.checkpoints] == ["state_0001.ckpt", "state_0002.ckpt"]


def test_resume_bit_matches(tmp_path):
    full, _ = _run(tmp_path / "full", epochs=4, save_every=2)
    resumed, _ = _run(tmp_path / "resumed", epochs=4, save_every=2,
                      resume=tmp_path / "full" / "checkpoints" / "state_0002.ckpt")
    assert resumed.records == full.records
    for (n, a), (_, b) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), n
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()


def test_resume_rejects_other_optimizer(tmp_path):
    _run(tmp_path / "a", epochs=1)
    torch.manual_seed(0)
    with pytest.raises(CheckpointError, match="optimizer"):
        pretrain(build_model(TINY, TINY_HEAD), PairDataset(_images(64), size=16), OptimConfig(batch_size=8, epochs=1),
                 resume_from=tmp_path / "a" / "checkpoints" / "state_0001.ckpt")


def test_identity_views_with_identity_predictor_start_at_minus_one(tmp_path):
    torch.manual_seed(0)
    model = build_model(TINY, TINY_HEAD)
    model.predictor = nn.Identity()
    ds = PairDataset(_images(32), "identity", seed=0)
    result = pretrain(model, ds, OptimConfig(batch_size=16, epochs=1), seed=0)
    assert result.records[0].loss == pytest.approx(-1.0, abs=1e-5)


def test_non_finite_loss_aborts_with_state(tmp_path):
    torch.manual_seed(0)
    model = build_model(TINY, TINY_HEAD)
    with torch.no_grad():
        model.backbone.stem.conv.weight.fill_(float("nan"))
    with pytest.raises(TrainingAborted) as info:
        pretrain(model, PairDataset(_images(32), size=16), OptimConfig(batch_size=16, epochs=1), out_dir=tmp_path)
    assert info.value.state_path is not None and info.value.state_path.exists()


def test_single_leftover_sample_is_skipped(tmp_path):
    # 33 images at batch 16 would leave a 1-sample batch
    result, _ = _run(tmp_path, epochs=1, n=33)
    assert len(result.records) == 1 and math.isfinite(result.records[0].loss)


def test_loss_decreases_over_twenty_epochs():
    torch.manual_seed(0)
    cfg = BackboneConfig(depth=14, width_mult="1/8", stem="cifar")
    model = build_model(cfg, HeadConfig(projector_dim=256, predictor_hidden=64))
    ds = PairDataset(_images(200, size=32, classes=4), "cifar-32", seed=0)
    result = pretrain(model, ds, OptimConfig(base_lr=0.05, batch_size=32, epochs=20), seed=0)
    losses = [r.loss for r in result.records]
    assert len(losses) == 20
    assert losses[-1] < losses[0]
