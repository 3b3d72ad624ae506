"""Fine-tuning a transferred encoder on labeled data, and AUC metrics."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from torch import nn

from . import nets
from .masking import round_half_up
from .nets import ModelConfig
from .pretrain import lr_at
from .record_io import ManifestError, downsample, patchify, read_image

log = logging.getLogger(__name__)

LR_GRID = (3e-2, 3e-3, 5e-4)
LABELING_RATIOS = (0.01, 0.10, 1.00)


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative example."""


# --------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from midranks: (R_pos - n_pos(n_pos+1)/2) / (n_pos * n_neg).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_auc(scores, labels) -> tuple[float, list[float | None], list[int]]:
    """Unweighted mean AUC over classes of (N, C) arrays.

    Returns ``(mean, per_class, skipped)``; classes lacking either label get
    ``None`` in ``per_class`` and are listed in ``skipped``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per_class: list[float | None] = []
    skipped = []
    for c in range(scores.shape[1]):
        try:
            per_class.append(auc(scores[:, c], labels[:, c]))
        except UndefinedAUCError:
            per_class.append(None)
            skipped.append(c)
    valid = [a for a in per_class if a is not None]
    if not valid:
        raise UndefinedAUCError("no class has both positive and negative labels")
    if skipped:
        log.warning("mean AUC skips classes without both labels: %s", skipped)
    return float(np.mean(valid)), per_class, skipped


# --------------------------------------------------------------------------
# data


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, H, W, C) at record (high) resolution, values in [0, 1]
    labels: np.ndarray  # (N, n_classes) in {0, 1}
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, index) -> "LabeledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSet(self.images[index], self.labels[index], [self.ids[i] for i in index])


def load_labeled_manifest(path: str | os.PathLike) -> dict[str, LabeledSet]:
    """JSON lines with "image", "labels" (0/1 list) and "split"; returns one set per split."""
    path = Path(path)
    buckets: dict[str, tuple[list, list, list]] = {}
    n_classes = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", lineno) from exc
            try:
                img_rel, labels, split = entry["image"], entry["labels"], entry["split"]
            except (KeyError, TypeError):
                raise ManifestError('entry needs "image", "labels" and "split"', lineno) from None
            if n_classes is None:
                n_classes = len(labels)
            elif len(labels) != n_classes:
                raise ManifestError(f"expected {n_classes} labels, got {len(labels)}", lineno)
            img_path = path.parent / img_rel
            if not img_path.is_file():
                raise ManifestError(f"image file not found: {img_path}", lineno)
            imgs, labs, ids = buckets.setdefault(split, ([], [], []))
            imgs.append(read_image(img_path))
            labs.append(labels)
            ids.append(str(entry.get("id", f"{path.stem}:{lineno}")))
    return {k: LabeledSet(np.stack(v[0]), np.asarray(v[1]), v[2]) for k, v in buckets.items()}


def subsample_labels(train_set: LabeledSet, ratio: float, seed: int) -> LabeledSet:
    """Keep round(ratio * N) examples drawn uniformly without replacement."""
    if not 0 < ratio <= 1:
        raise ValueError(f"labeling ratio must be in (0, 1], got {ratio}")
    n = round_half_up(round(ratio * len(train_set), 9))
    if n == 0:
        raise ValueError(f"ratio {ratio} of {len(train_set)} examples selects nothing")
    if n == len(train_set):
        return train_set
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n]))
    index = np.sort(rng.choice(len(train_set), size=n, replace=False))
    sub = train_set.subset(index)
    lost = [c for c in range(sub.num_classes)
            if train_set.labels[:, c].any() and not sub.labels[:, c].any()]
    if lost:
        log.warning("subset of %d examples has no positives for classes %s", n, lost)
    return sub


def to_patches(images: np.ndarray, cfg: ModelConfig) -> torch.Tensor:
    """Record-resolution images -> low-res patch tensor (N, num_patches, patch_dim)."""
    out = []
    for img in images:
        if img.shape[:2] != (2 * cfg.image_size, 2 * cfg.image_size):
            raise ValueError(f"image {img.shape[:2]} does not match {2 * cfg.image_size}x{2 * cfg.image_size}")
        out.append(patchify(downsample(img), cfg.patch_size))
    return torch.from_numpy(np.stack(out).astype(np.float32))


# --------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    labeling_ratio: float = 1.0
    lr_grid: tuple[float, ...] = LR_GRID
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    warmup_fraction: float = 0.1
    task: str = "multilabel"  # or "multiclass" for mutually exclusive labels
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.labeling_ratio <= 1:
            raise ValueError("labeling_ratio must be in (0, 1]")
        if self.task not in ("multilabel", "multiclass"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr_grid:
            raise ValueError("epochs, batch_size and lr_grid must be positive")


class Classifier(nn.Module):
    """Encoder + global average pooling over all patches + one linear layer."""

    def __init__(self, encoder_model: nets.MRMModel, num_classes: int):
        super().__init__()
        self.config = encoder_model.config
        self.encoder = copy.deepcopy(encoder_model.encoder)
        self.head = nn.Linear(self.config.encoder_dim, num_classes)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, patches: torch.Tensor) -> torch.Tensor:
        B, N, _ = patches.shape
        pos = torch.arange(N).expand(B, N)
        emb = nets.encode(self, patches, pos)
        return nets.global_pool(emb, "gap")

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(patches))


@torch.no_grad()
def predict(clf: Classifier, patches: torch.Tensor, task: str, batch_size: int = 256) -> np.ndarray:
    clf.eval()
    outs = []
    for s in range(0, len(patches), batch_size):
        logits = clf(patches[s:s + batch_size])
        outs.append(torch.softmax(logits, -1) if task == "multiclass" else torch.sigmoid(logits))
    return torch.cat(outs).numpy()


def _loss(logits: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    if task == "multiclass":
        return F.cross_entropy(logits, labels.argmax(-1))
    return F.binary_cross_entropy_with_logits(logits, labels.float())


def _score(clf: Classifier, patches: torch.Tensor, labels: np.ndarray, task: str) -> float:
    try:
        return mean_auc(predict(clf, patches, task), labels)[0]
    except UndefinedAUCError:
        return float("nan")


@dataclass
class FinetuneRun:
    lr: float
    val_auc_per_epoch: list[float]
    best_epoch: int
    best_val_auc: float


@dataclass
class FinetuneResult:
    classifier: Classifier
    best_lr: float
    best_val_auc: float
    runs: list[FinetuneRun]
    subset_size: int


def finetune_one(encoder_model: nets.MRMModel, train: LabeledSet, val: LabeledSet, lr: float,
                 cfg: FinetuneConfig) -> tuple[Classifier, FinetuneRun]:
    """End-to-end SGD fine-tuning at one learning rate; keeps the best-validation epoch."""
    mcfg = encoder_model.config
    torch.manual_seed(cfg.seed)
    clf = Classifier(encoder_model, train.num_classes)
    x_train, y_train = to_patches(train.images, mcfg), torch.from_numpy(train.labels)
    x_val = to_patches(val.images, mcfg)
    opt = torch.optim.SGD(clf.parameters(), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = int(cfg.warmup_fraction * total)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    best_state, best_auc, best_epoch = copy.deepcopy(clf.state_dict()), -math.inf, -1
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        clf.train()
        order = torch.from_numpy(rng.permutation(len(train)))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, warmup, lr)
            opt.zero_grad(set_to_none=True)
            loss = _loss(clf(x_train[idx]), y_train[idx], cfg.task)
            if not torch.isfinite(loss):
                break
            loss.backward()
            opt.step()
            step += 1
        score = _score(clf, x_val, val.labels, cfg.task)
        history.append(score)
        if score > best_auc:
            best_auc, best_epoch = score, epoch
            best_state = copy.deepcopy(clf.state_dict())
    clf.load_state_dict(best_state)
    log.info("lr %g: best val AUC %.4f at epoch %d", lr, best_auc, best_epoch)
    return clf, FinetuneRun(lr, history, best_epoch, best_auc)


def finetune(encoder_model: nets.MRMModel, train: LabeledSet, val: LabeledSet,
             cfg: FinetuneConfig) -> FinetuneResult:
    """Subsample labels, fine-tune once per grid learning rate, keep the best on validation."""
    if train.num_classes != val.num_classes:
        raise ValueError(f"class count mismatch: train {train.num_classes}, val {val.num_classes}")
    subset = subsample_labels(train, cfg.labeling_ratio, cfg.seed)
    best = None
    runs = []
    for lr in cfg.lr_grid:
        clf, run = finetune_one(encoder_model, subset, val, lr, cfg)
        runs.append(run)
        if best is None or run.best_val_auc > best[1].best_val_auc:
            best = (clf, run)
    return FinetuneResult(best[0], best[1].lr, best[1].best_val_auc, runs, len(subset))


def evaluate_classifier(clf: Classifier, test: LabeledSet, task: str = "multilabel") -> dict:
    mean, per_class, skipped = mean_auc(predict(clf, to_patches(test.images, clf.config), task), test.labels)
    return {"mean_auc": mean, "per_class_auc": per_class, "skipped_classes": skipped}


def metrics_report(result: FinetuneResult, test_metrics: dict, cfg: FinetuneConfig) -> dict:
    return {
        "per_class_auc": test_metrics["per_class_auc"],
        "mean_auc": test_metrics["mean_auc"],
        "skipped_classes": test_metrics["skipped_classes"],
        "chosen_lr": result.best_lr,
        "val_mean_auc": result.best_val_auc,
        "subset_size": result.subset_size,
        "labeling_ratio": cfg.labeling_ratio,
        "seed": cfg.seed,
        "runs": [{"lr": r.lr, "best_epoch": r.best_epoch, "best_val_auc": r.best_val_auc,
                  "val_auc_per_epoch": r.val_auc_per_epoch} for r in result.runs],
    }


def epochs_for_steps(n_labeled: int, batch_size: int, steps: int) -> int:
    """Epoch count giving at least ``steps`` SGD updates, so small subsets get a comparable budget."""
    return max(1, math.ceil(steps / math.ceil(n_labeled / batch_size)))


def run_protocol(encoders: dict[str, nets.MRMModel], train: LabeledSet, val: LabeledSet, test: LabeledSet,
                 ratios: Sequence[float] = LABELING_RATIOS, seeds: Sequence[int] = (0,), steps: int = 160,
                 base: FinetuneConfig | None = None, skip=None) -> list[dict]:
    """Fine-tune every encoder at every (ratio, seed) and score on ``test``.

    ``skip(name, ratio, seed)`` may return True to leave a cell out.
    """
    base = base or FinetuneConfig()
    rows = []
    for ratio in ratios:
        n = round_half_up(round(ratio * len(train), 9))
        epochs = epochs_for_steps(n, base.batch_size, steps)
        for seed in seeds:
            for name, enc in encoders.items():
                if skip is not None and skip(name, ratio, seed):
                    continue
                cfg = FinetuneConfig(**{**base.__dict__, "labeling_ratio": ratio, "epochs": epochs, "seed": seed})
                res = finetune(enc, train, val, cfg)
                test_auc = evaluate_classifier(res.classifier, test, cfg.task)["mean_auc"]
                rows.append({"encoder": name, "ratio": ratio, "seed": seed, "epochs": epochs,
                             "subset_size": res.subset_size, "chosen_lr": res.best_lr,
                             "val_auc": res.best_val_auc, "test_auc": test_auc})
                log.info("%s ratio %g seed %d: test AUC %.4f", name, ratio, seed, test_auc)
    return rows
