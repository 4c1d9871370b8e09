"""Baseline (cross-entropy) and unlearning (cross-entropy + seafloor triplet) training."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np
import torch

from .dataset import SEAFLOOR, TARGET_SIZE, Dataset, apply_augment, draw_augment
from .losses import HyperParams, cross_entropy, total_loss, triplet_loss
from .model import DEFAULT_ARCH, DEFAULT_DIM, Classifier, ModelCheckpoint
from .sampler import TripletSampler

log = logging.getLogger(__name__)

MODES = ("baseline", "unlearn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    arch: str = DEFAULT_ARCH
    dim: int = DEFAULT_DIM

    def to_dict(self) -> dict[str, Any]:
        return {"arch": self.arch, "dim": self.dim, **asdict(self.hp)}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainRun:
    mode: str
    config: TrainConfig
    history: list[dict[str, float]]
    initial: dict[str, float]
    best_epoch: int
    best_checkpoint: ModelCheckpoint
    final_checkpoint: ModelCheckpoint

    def history_json(self) -> str:
        doc = {"mode": self.mode, "config": self.config.to_dict(), "initial": self.initial,
               "best_epoch": self.best_epoch, "epochs": self.history}
        return json.dumps(doc, indent=1, sort_keys=True)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _embed_stats(model: Classifier, x: torch.Tensor, y: torch.Tensor, batch: int = 250) -> tuple[float, float]:
    """Validation accuracy and mean squared object-to-seafloor embedding distance."""
    was = model.training
    model.eval()
    zs, preds = [], []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            z = model.encode(x[i:i + batch])
            zs.append(z)
            preds.append(model.classify(z).argmax(dim=1))
    model.train(was)
    z = torch.cat(zs).double()
    acc = float((torch.cat(preds) == y).double().mean())
    sea = y == SEAFLOOR
    if sea.any() and (~sea).any():
        dist = float(torch.cdist(z[~sea], z[sea]).pow(2).mean())
    else:
        dist = float("nan")
    return acc, dist


def _augmented(x: torch.Tensor, rng: np.random.Generator, enabled: bool) -> torch.Tensor:
    if not enabled:
        return x
    return apply_augment(x, [draw_augment(rng) for _ in range(len(x))]).clamp_(0.0, 1.0)


def train(mode: str, config: TrainConfig, dataset: Dataset,
          init: Optional[ModelCheckpoint] = None) -> TrainRun:
    """Train one model; returns its history and the best-validation checkpoint.

    ``mode="baseline"`` optimizes cross-entropy only. ``mode="unlearn"`` adds,
    at every step, a triplet batch whose anchors are object-class samples and
    whose negatives are seafloor samples, and optimizes ``ce + lam * triplet``.
    Both modes consume the classification batches from the same seeded
    stream, so they see identical CE batches for a given seed.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    hp = config.hp
    hp.validate()
    set_determinism(hp.seed)

    x_np, y_np = dataset.arrays("train")
    xv_np, yv_np = dataset.arrays("val")
    x, y = torch.from_numpy(x_np), torch.from_numpy(y_np)
    xv, yv = torch.from_numpy(xv_np), torch.from_numpy(yv_np)
    train_ids = list(dataset.split.train)
    row = {sid: k for k, sid in enumerate(train_ids)}

    model = Classifier(arch=config.arch, dim=config.dim, norm=dataset.norm, in_channels=x.shape[1])
    if init is not None:
        model.load_state_dict(init.state_dict)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)

    rng_batches = np.random.default_rng([hp.seed, 0])
    rng_aug = np.random.default_rng([hp.seed, 1])
    rng_trip = np.random.default_rng([hp.seed, 2])
    rng_trip_aug = np.random.default_rng([hp.seed, 3])
    stream = None
    if mode == "unlearn":
        sampler = TripletSampler({sid: int(y_np[k]) for k, sid in enumerate(train_ids)})
        stream = sampler.stream(hp.batch_size, rng_trip)

    acc0, dist0 = _embed_stats(model, xv, yv)
    initial = {"val_accuracy": acc0, "anchor_seafloor_dist": dist0}
    history: list[dict[str, float]] = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    n = len(x)
    for epoch in range(1, hp.epochs + 1):
        model.train()
        perm = rng_batches.permutation(n)
        sums = {"ce": 0.0, "triplet": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, hp.batch_size):
            idx = torch.from_numpy(perm[start:start + hp.batch_size])
            xb = _augmented(x[idx], rng_aug, hp.augment)
            ce = cross_entropy(model(xb), y[idx])
            if stream is not None:
                tb = next(stream)
                k = len(tb)
                tidx = torch.tensor([row[s] for s in tb.anchors + tb.positives + tb.negatives])
                z = model.encode(_augmented(x[tidx], rng_trip_aug, hp.augment))
                trip = triplet_loss(z[:k], z[k:2 * k], z[2 * k:], hp.margin)
            else:
                trip = torch.zeros(())
            if not (torch.isfinite(ce) and torch.isfinite(trip)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}")
            loss = total_loss(ce, trip, hp.lam) if mode == "unlearn" else total_loss(ce, trip, 1.0)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            for key, val in loss.components().items():
                sums[key] += val
            steps += 1
        acc, dist = _embed_stats(model, xv, yv)
        rec = {k: v / steps for k, v in sums.items()}
        rec.update(epoch=epoch, steps=steps, val_accuracy=acc, anchor_seafloor_dist=dist)
        history.append(rec)
        log.info("%s epoch %d: ce=%.4f triplet=%.4f val_acc=%.4f", mode, epoch, rec["ce"], rec["triplet"], acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    meta = {"mode": mode, "best_epoch": best_epoch, "val_accuracy": best_acc}
    final = ModelCheckpoint.from_model(model, config.hash(), {**meta, "epoch": hp.epochs})
    model.load_state_dict(best_state)
    best = ModelCheckpoint.from_model(model, config.hash(), meta)
    return TrainRun(mode=mode, config=config, history=history, initial=initial,
                    best_epoch=best_epoch, best_checkpoint=best, final_checkpoint=final)


def train_baseline(config: TrainConfig, dataset: Dataset) -> TrainRun:
    return train("baseline", config, dataset)


def train_unlearn(config: TrainConfig, dataset: Dataset,
                  init: Optional[ModelCheckpoint] = None) -> TrainRun:
    return train("unlearn", config, dataset, init=init)


def sanity_checks(dataset: Dataset, model: Classifier,
                  sampler: Optional[TripletSampler] = None, batch_size: int = 16) -> dict[str, Any]:
    """Sample inspection, loader verification and one forward/backward pass."""
    checks: list[dict[str, Any]] = []

    def record(name: str, ok: bool, detail: str = "") -> None:
        checks.append({"name": name, "passed": bool(ok), "detail": detail})

    train = dataset.subset("train")
    bad = [s.sample_id for s in train if s.pixels.shape[:2] != (TARGET_SIZE, TARGET_SIZE)]
    record("image_size", not bad, f"{len(bad)} samples not {TARGET_SIZE}x{TARGET_SIZE}" if bad else "")
    rng_ok = all(0.0 <= float(s.pixels.min()) and float(s.pixels.max()) <= 1.0 for s in train)
    record("pixel_range", rng_ok)
    labels_ok = all(0 <= s.label < model.n_classes for s in train)
    record("label_range", labels_ok)

    if sampler is None:
        sampler = TripletSampler({s.sample_id: s.label for s in train})
    try:
        tb = next(sampler.triplet_epoch(batch_size, np.random.default_rng(0)))
        labels = sampler.labels
        trip_ok = (all(labels[n] == SEAFLOOR for n in tb.negatives)
                   and all(labels[p] == labels[a] for a, p in zip(tb.anchors, tb.positives))
                   and all(labels[a] != SEAFLOOR for a in tb.anchors))
        record("triplet_labels", trip_ok)
    except Exception as exc:  # surfaced as a failed check
        record("triplet_labels", False, repr(exc))

    if not bad:
        xb = torch.from_numpy(np.stack([s.pixels.transpose(2, 0, 1) for s in train[:batch_size]]))
        yb = torch.tensor([s.label for s in train[:batch_size]])
        model.zero_grad(set_to_none=True)
        loss = cross_entropy(model(xb), yb)
        loss.backward()
        grads_ok = all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in model.parameters())
        record("forward_backward", bool(torch.isfinite(loss.detach())) and grads_ok, f"loss={loss.item():.4f}")
        model.zero_grad(set_to_none=True)
    else:
        record("forward_backward", False, "skipped: bad input shapes")
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
