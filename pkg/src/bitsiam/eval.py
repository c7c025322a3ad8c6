"""Representation quality: weighted kNN, linear probe with focal loss, balanced metrics, collapse statistic."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader

from bitsiam.backbone import param_digest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _l2_normalize(feats: np.ndarray, what: str) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        rows = np.flatnonzero(norms[:, 0] == 0)[:5].tolist()
        raise ValueError(f"{what}: zero-norm feature rows {rows}")
    return feats / norms


def knn_predict(
    train_feats,
    train_labels,
    query_feats,
    k: int = 20,
    temperature: float = 0.07,
    num_classes: Optional[int] = None,
    chunk: int = 512,
) -> np.ndarray:
    """Cosine-similarity kNN with ``exp(sim / temperature)`` vote weights.

    Neighbors with equal similarity are ordered by train index; vote ties go
    to the smallest class index.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    n = len(train_labels)
    if n < 1:
        raise ValueError("knn_predict needs at least one training feature")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available training features")
    if k < 1:
        raise ValueError("k must be >= 1")
    bank = _l2_normalize(train_feats, "train_feats")
    queries = _l2_normalize(query_feats, "query_feats")
    num_classes = int(num_classes if num_classes is not None else train_labels.max() + 1)
    preds = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        sims = queries[start: start + chunk] @ bank.T
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top_sims = np.take_along_axis(sims, top, axis=1)
        weights = np.exp(top_sims / temperature)
        votes = np.zeros((len(sims), num_classes))
        rows = np.repeat(np.arange(len(sims)), k)
        np.add.at(votes, (rows, train_labels[top].ravel()), weights.ravel())
        preds[start: start + len(sims)] = votes.argmax(axis=1)
    return preds


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 4.0) -> torch.Tensor:
    """Mean of ``-(1 - p_t)^gamma * log(p_t)`` over the batch."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}), got range [{int(labels.min())}, {int(labels.max())}]")
    log_pt = F.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    pt = log_pt.exp()
    weight = (1 - pt).clamp(min=0) ** gamma if gamma > 0 else torch.ones_like(pt)
    return -(weight * log_pt).mean()


class BalancedMetrics(NamedTuple):
    balanced_accuracy: float
    macro_f1: float
    per_class_recall: np.ndarray
    excluded_classes: List[int]
    confusion: np.ndarray


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def balanced_metrics(pred_labels, true_labels, num_classes: int) -> BalancedMetrics:
    """Balanced accuracy (mean per-class recall) and macro F1.

    Classes without any true sample are excluded from both means and listed
    in ``excluded_classes``; their recall entry is NaN.
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    cm = confusion_matrix(pred, true, num_classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    present = support > 0
    recall = np.full(num_classes, np.nan)
    recall[present] = tp[present] / support[present]
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    rec0 = np.nan_to_num(recall)
    denom = precision + rec0
    f1 = np.divide(2 * precision * rec0, denom, out=np.zeros(num_classes), where=denom > 0)
    if not present.any():
        raise ValueError("no labelled samples")
    return BalancedMetrics(
        float(recall[present].mean()),
        float(f1[present].mean()),
        recall,
        [int(c) for c in np.flatnonzero(~present)],
        cm,
    )


def collapse_std(feats) -> float:
    """Mean over dimensions of the per-dimension std of L2-normalized rows.

    Population std. About ``1/sqrt(D)`` for well-spread features, 0 under collapse.
    """
    feats = np.asarray(feats if not torch.is_tensor(feats) else feats.detach().cpu().numpy())
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"collapse_std needs [N >= 2, D] features, got shape {feats.shape}")
    z = _l2_normalize(feats, "collapse_std")
    return float(z.std(axis=0).mean())


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


@torch.no_grad()
def extract_features(model: nn.Module, dataset, batch_size: int = 256, device="cpu"):
    """Eval-mode features and labels as numpy arrays; the model's train flag is restored."""
    was_training = model.training
    model.eval()
    feats, labels = [], []
    try:
        for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            feats.append(model(x.to(device)).float().cpu())
            labels.append(torch.as_tensor(y))
    finally:
        model.train(was_training)
    if not feats:
        return np.zeros((0, 0), np.float32), np.zeros(0, np.int64)
    return torch.cat(feats).numpy(), torch.cat(labels).numpy().astype(np.int64)


def knn_evaluate(bank_feats, bank_labels, query_feats, query_labels, num_classes, k=20, temperature=0.07) -> BalancedMetrics:
    k = min(k, len(bank_labels))
    preds = knn_predict(bank_feats, bank_labels, query_feats, k, temperature, num_classes)
    return balanced_metrics(preds, query_labels, num_classes)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    gamma: float = 4.0
    trials: int = 3
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 256
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> "ProbeConfig":
        from bitsiam.errors import ConfigError

        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("probe epochs, batch_size and lr must be positive")
        return self


@dataclass
class TrialResult:
    seed: int
    best_epoch: int
    val_balanced_accuracy: float
    test_balanced_accuracy: float
    test_macro_f1: float
    test_per_class_recall: List[float]
    test_confusion: List[List[int]]
    val_history: List[float] = field(default_factory=list)


@dataclass
class EvalReport:
    balanced_accuracy: float
    macro_f1: float
    per_class_recall: List[float]
    trials: List[TrialResult]
    selected_trial_val_score: float
    excluded_classes: List[int] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)
    mode: str = "linear"

    def to_dict(self):
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2) + "\n")
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        doc["trials"] = [TrialResult(**t) for t in doc["trials"]]
        doc["per_class_recall"] = [float("nan") if v is None else v for v in doc["per_class_recall"]]
        return cls(**doc)


def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def select_best_epoch(val_scores: Sequence[float]) -> int:
    """Index of the best validation score; the earliest wins ties."""
    if not len(val_scores):
        raise ValueError("no validation scores")
    best = 0
    for i, v in enumerate(val_scores):
        if v > val_scores[best]:
            best = i
    return best


def train_probe(train, val, test, num_classes: int, cfg: ProbeConfig, seed: int) -> TrialResult:
    """One trial: fit a linear layer on fixed features, keep the best-validation weights, score on test.

    ``train``/``val``/``test`` are ``(features, labels)`` numpy pairs.
    """
    for name, (f, _) in (("finetune", train), ("val", val), ("test", test)):
        if len(f) == 0:
            raise ValueError(f"empty {name} split")
    gen = torch.Generator().manual_seed(seed)
    xtr = torch.as_tensor(train[0], dtype=torch.float32)
    ytr = torch.as_tensor(train[1], dtype=torch.long)
    xval = torch.as_tensor(val[0], dtype=torch.float32)
    xte = torch.as_tensor(test[0], dtype=torch.float32)

    probe = nn.Linear(xtr.shape[1], num_classes)
    with torch.no_grad():
        bound = 1 / math.sqrt(xtr.shape[1])
        probe.weight.copy_(torch.rand(probe.weight.shape, generator=gen) * 2 * bound - bound)
        probe.bias.zero_()
    opt = torch.optim.SGD(probe.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=0.0)
    steps_per_epoch = math.ceil(len(xtr) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)

    history, best_state, best_score = [], None, -math.inf
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(xtr), generator=gen)
        for start in range(0, len(xtr), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            loss = focal_loss(probe(xtr[idx]), ytr[idx], cfg.gamma)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite probe loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        with torch.no_grad():
            score = balanced_metrics(probe(xval).argmax(1).numpy(), val[1], num_classes).balanced_accuracy
        history.append(score)
        if score > best_score:
            best_score = score
            best_state = {k: v.clone() for k, v in probe.state_dict().items()}

    best_epoch = select_best_epoch(history)
    probe.load_state_dict(best_state)
    with torch.no_grad():
        m = balanced_metrics(probe(xte).argmax(1).numpy(), test[1], num_classes)
    return TrialResult(
        seed=seed,
        best_epoch=best_epoch,
        val_balanced_accuracy=history[best_epoch],
        test_balanced_accuracy=m.balanced_accuracy,
        test_macro_f1=m.macro_f1,
        test_per_class_recall=m.per_class_recall.tolist(),
        test_confusion=m.confusion.tolist(),
        val_history=history,
    )


def summarize_trials(trials: Sequence[TrialResult], class_names=(), mode="linear") -> EvalReport:
    """Headline numbers are plain means over trials of each trial's test metrics."""
    recalls = np.array([t.test_per_class_recall for t in trials], dtype=np.float64)
    per_class = recalls.mean(axis=0)
    excluded = [int(c) for c in np.flatnonzero(np.isnan(per_class))]
    return EvalReport(
        balanced_accuracy=float(np.mean([t.test_balanced_accuracy for t in trials])),
        macro_f1=float(np.mean([t.test_macro_f1 for t in trials])),
        per_class_recall=per_class.tolist(),
        trials=list(trials),
        selected_trial_val_score=float(np.mean([t.val_balanced_accuracy for t in trials])),
        excluded_classes=excluded,
        class_names=list(class_names),
        mode=mode,
    )


def standardize_features(train_feats, *others):
    """Scale every split with the finetune split's mean/std."""
    mean = train_feats.mean(axis=0, keepdims=True)
    std = train_feats.std(axis=0, keepdims=True)
    std[std < 1e-8] = 1.0
    return [(f - mean) / std for f in (train_feats, *others)]


def linear_evaluate_features(features: Dict[str, tuple], num_classes: int, cfg: ProbeConfig, class_names=()) -> EvalReport:
    """Linear protocol on precomputed ``{split: (features, labels)}``."""
    cfg.validate()
    for split in ("finetune", "val", "test"):
        if split not in features or len(features[split][0]) == 0:
            raise ValueError(f"empty {split} split")
    ftr, fval, fte = standardize_features(features["finetune"][0], features["val"][0], features["test"][0])
    splits = ((ftr, features["finetune"][1]), (fval, features["val"][1]), (fte, features["test"][1]))
    trials = []
    for t in range(cfg.trials):
        trial = train_probe(*splits, num_classes=num_classes, cfg=cfg, seed=cfg.seed + t)
        log.info("probe trial %d: best epoch %d, val bacc %.4f, test bacc %.4f",
                 t, trial.best_epoch, trial.val_balanced_accuracy, trial.test_balanced_accuracy)
        trials.append(trial)
    return summarize_trials(trials, class_names)


def linear_evaluate(backbone: nn.Module, datasets: Dict[str, object], cfg: ProbeConfig, num_classes: int,
                    class_names=(), device="cpu", batch_size: int = 256) -> EvalReport:
    """Frozen-backbone linear evaluation; raises if the backbone changed during evaluation."""
    before = param_digest(backbone)
    features = {}
    for split in ("finetune", "val", "test"):
        if split not in datasets or len(datasets[split]) == 0:
            raise ValueError(f"empty {split} split")
        features[split] = extract_features(backbone, datasets[split], batch_size, device)
    report = linear_evaluate_features(features, num_classes, cfg, class_names)
    if param_digest(backbone) != before:
        raise RuntimeError("backbone parameters changed during linear evaluation")
    return report


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def tsne_2d(feats: np.ndarray, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(feats)
    perplexity = min(30.0, max(1.0, (n - 1) / 3))
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(
        np.asarray(feats, dtype=np.float64)
    )


def export_embeddings(backbone: nn.Module, dataset, out_dir, class_names: Sequence[str], ids=None,
                      majority_class: Optional[str] = "nv", seed: int = 0, device="cpu", title: str = "") -> Dict[str, Path]:
    """Write features, 2-D t-SNE coordinates and the binary / sub-class scatter plots.

    ``majority_class`` names the class plotted against all others in the
    binary panel (NV vs. non-NV for HAM10000); it falls back to the most
    frequent class when absent.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats, labels = extract_features(backbone, dataset, device=device)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(labels))]

    paths = {"features": out_dir / "embeddings.csv", "coords": out_dir / "tsne_coords.csv",
             "binary_png": out_dir / "tsne_binary.png", "subclasses_png": out_dir / "tsne_subclasses.png"}
    with open(paths["features"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"feat_{d}" for d in range(feats.shape[1])])
        for i, lab, row in zip(ids, labels, feats):
            w.writerow([i, class_names[lab]] + [repr(float(v)) for v in row])

    coords = tsne_2d(feats, seed)
    with open(paths["coords"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y"])
        for i, lab, (x, y) in zip(ids, labels, coords):
            w.writerow([i, class_names[lab], repr(float(x)), repr(float(y))])

    if majority_class in class_names:
        major = list(class_names).index(majority_class)
    else:
        major = int(np.bincount(labels, minlength=len(class_names)).argmax())
    is_major = labels == major

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(*coords[is_major].T, s=6, label=class_names[major])
    ax.scatter(*coords[~is_major].T, s=6, label=f"non-{class_names[major]}")
    ax.set_title(f"{title} binary".strip())
    ax.legend(markerscale=3)
    fig.savefig(paths["binary_png"], dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 5))
    for c in range(len(class_names)):
        if c == major:
            continue
        sel = labels == c
        if sel.any():
            ax.scatter(*coords[sel].T, s=6, label=class_names[c])
    ax.set_title(f"{title} sub-classes".strip())
    ax.legend(markerscale=3, fontsize=7)
    fig.savefig(paths["subclasses_png"], dpi=120, bbox_inches="tight")
    plt.close(fig)
    return paths
