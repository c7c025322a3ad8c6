"""Small-scale smoke runs of the experiment runners behind the directional criteria."""

import math

import numpy as np

from bitsiam.backbone import BackboneConfig, HeadConfig, NormKind
from bitsiam.cli import cmd_pretrain
from bitsiam.data import CIFAR_RECORD, SplitSpec, build_splits, synth_dataset, write_manifest
from bitsiam.ssl_train import read_metrics

from acceptance_runs import CollapseOutcome, run_collapse_seed, transfer_config
from helpers import toy_gn_checkpoint, write_bit_archive


def _fake_cifar(root, n_train=60, n_test=30):
    rng = np.random.default_rng(0)
    root.mkdir()
    for name, n in (("data_batch_1.bin", n_train), ("test_batch.bin", n_test)):
        rec = rng.integers(0, 256, (n, CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = np.arange(n) % 10
        rec.tofile(root / name)
    return root


def test_collapse_runner_on_fabricated_cifar(tmp_path):
    root = _fake_cifar(tmp_path / "cifar")
    outcome = run_collapse_seed(root, tmp_path / "runs", 0, width="1/16", depth=14, images=60, epochs=2,
                                batch_size=20, eval_limit=30, groups=4, head=HeadConfig(64, 64, 16))
    assert outcome.dim == 64
    for value in (outcome.bn_collapse, outcome.gn_collapse, outcome.bn_knn, outcome.gn_knn):
        assert math.isfinite(value)
    assert (tmp_path / "runs" / "groupnorm_ws_seed0" / "metrics.csv").exists()


def test_collapse_outcome_thresholds():
    d = 2048
    healthy = 1 / math.sqrt(d)
    assert CollapseOutcome(0, d, healthy, 0.3, 0.01 / math.sqrt(d), 0.2).passed
    assert CollapseOutcome(0, d, healthy, 0.3, healthy, 0.12).passed
    assert not CollapseOutcome(0, d, healthy, 0.2, 0.0, 0.1).passed  # BN run too weak
    assert not CollapseOutcome(0, d, 2 / math.sqrt(d), 0.3, 0.0, 0.1).passed
    assert not CollapseOutcome(0, d, healthy, 0.3, healthy, 0.3).passed  # GN run did not collapse


def test_transfer_runner_surgery_and_scratch(tmp_path):
    data = synth_dataset(tmp_path / "data", 70, 7, 16, seed=0)
    manifest = write_manifest(build_splits(data, SplitSpec(seed=0)), tmp_path / "data" / "split.csv")
    archive = write_bit_archive(toy_gn_checkpoint(), tmp_path / "bit.npz")
    small = dict(epochs=1, image_size=16, batch_size=14, head=HeadConfig(64, 64, 16),
                 backbone=BackboneConfig(depth=14, width_mult="1/16", stem="standard", norm=NormKind.BATCH))
    scratch = cmd_pretrain(transfer_config(manifest, tmp_path / "scratch", 0, **small))
    surgery = cmd_pretrain(transfer_config(manifest, tmp_path / "surgery", 0, archive, **small))
    for run in (scratch, surgery):
        assert len(read_metrics(run / "metrics.csv")) == 1
    assert "verify_surgery: PASS" in (surgery / "run.log").read_text()
