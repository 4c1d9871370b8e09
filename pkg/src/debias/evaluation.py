"""Classification metrics, background-swap test, embedding export and PCA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from .dataset import CLASSES, N_CLASSES, N_TEXTURES, SEAFLOOR, ImageSample, render
from .model import Classifier

PredictFn = Callable[[Sequence[ImageSample]], np.ndarray]


class EvalError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted
    classes: tuple[str, ...] = CLASSES

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


@dataclass
class ClassReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro: dict[str, float]
    flags: list[str] = field(default_factory=list)
    classes: tuple[str, ...] = CLASSES

    def to_json(self) -> dict:
        rows = [{"class": c, "precision": p, "recall": r, "f1": f, "support": s}
                for c, p, r, f, s in zip(self.classes, self.precision, self.recall, self.f1, self.support)]
        return {"classes": rows, "accuracy": self.accuracy, "macro_avg": self.macro, "flags": self.flags}


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int],
                     n_classes: int = N_CLASSES) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise EvalError(f"{len(pred)} predictions for {len(true)} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise EvalError("class id out of range")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    classes = CLASSES if n_classes == N_CLASSES else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts=counts, classes=classes)


def classification_report(cm: ConfusionMatrix) -> ClassReport:
    """Per-class precision/recall/F1; a zero denominator yields 0 and a flag."""
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise EvalError("empty confusion matrix")
    tp = np.diag(c).astype(np.float64)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    flags: list[str] = []
    prec, rec, f1 = [], [], []
    for j, name in enumerate(cm.classes):
        p = tp[j] / col[j] if col[j] else 0.0
        r = tp[j] / row[j] if row[j] else 0.0
        if not col[j]:
            flags.append(f"precision_undefined:{name}")
        if not row[j]:
            flags.append(f"recall_undefined:{name}")
        prec.append(float(p))
        rec.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r > 0 else 0.0)
    macro = {"precision": float(np.mean(prec)), "recall": float(np.mean(rec)), "f1": float(np.mean(f1))}
    return ClassReport(precision=prec, recall=rec, f1=f1, support=[int(s) for s in row],
                       accuracy=float(tp.sum() / total), macro=macro, flags=flags, classes=cm.classes)


def model_predict_fn(model: Classifier, batch_size: int = 250) -> PredictFn:
    def fn(samples: Sequence[ImageSample]) -> np.ndarray:
        x = torch.from_numpy(np.stack([s.pixels.transpose(2, 0, 1) for s in samples]))
        return model.predict_proba(x, batch_size).argmax(dim=1).numpy()
    return fn


def swap_background(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Re-render a synthetic sample over a different, uniformly drawn texture."""
    if sample.render is None or sample.texture_id is None:
        raise EvalError(f"{sample.sample_id}: background swap needs synthetic render parameters")
    others = [t for t in range(N_TEXTURES) if t != sample.texture_id]
    tid = int(others[rng.integers(len(others))])
    pixels, mask = render(sample.render, texture_id=tid)
    params = dict(sample.render, texture_id=tid)
    if pixels.shape != sample.pixels.shape:
        from .dataset import preprocess, resize_mask
        pixels = np.round(preprocess(pixels) * 255.0) / 255.0
        mask = resize_mask(mask, sample.pixels.shape[0])
    return ImageSample(pixels=pixels.astype(np.float32), label=sample.label, sample_id=sample.sample_id,
                       object_mask=mask, texture_id=tid, render=params)


@dataclass
class SwapResult:
    in_distribution: float
    swapped: float
    n: int
    per_class: dict[str, tuple[float, float]]

    @property
    def gap(self) -> float:
        return self.in_distribution - self.swapped

    def to_json(self) -> dict:
        return {"in_distribution": self.in_distribution, "swapped": self.swapped, "gap": self.gap,
                "n": self.n, "per_class": {k: list(v) for k, v in self.per_class.items()}}


def background_swap_eval(model: Classifier | PredictFn, test_set: Sequence[ImageSample],
                         seed: int = 0, swapped: Optional[Sequence[ImageSample]] = None) -> SwapResult:
    """Accuracy on the original test images and on background-swapped copies.

    Pass ``swapped`` to reuse one set of swapped images across several models.
    """
    fn = model_predict_fn(model) if isinstance(model, Classifier) else model
    if swapped is None:
        swapped = make_swapped(test_set, seed)
    y = np.array([s.label for s in test_set])
    a = fn(test_set) == y
    b = fn(swapped) == y
    per = {CLASSES[c]: (float(a[y == c].mean()), float(b[y == c].mean())) for c in np.unique(y)}
    return SwapResult(float(a.mean()), float(b.mean()), len(y), per)


def make_swapped(test_set: Sequence[ImageSample], seed: int = 0) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    return [swap_background(s, rng) for s in test_set]


# ---------------------------------------------------------------------------
# embeddings


@torch.no_grad()
def export_embeddings(model: Classifier, samples: Sequence[ImageSample],
                      batch_size: int = 250) -> tuple[list[str], np.ndarray, np.ndarray]:
    """``(sample_ids, labels, embeddings)`` with embeddings as float64 ``(N, d)``."""
    model.eval()
    x = torch.from_numpy(np.stack([s.pixels.transpose(2, 0, 1) for s in samples]))
    z = torch.cat([model.encode(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return [s.sample_id for s in samples], np.array([s.label for s in samples]), z.double().numpy()


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, d), rows sorted by descending eigenvalue
    eigenvalues: np.ndarray
    mean: np.ndarray


def pca_project(table: np.ndarray, dims: int = 2) -> PCAResult:
    """Project onto the leading covariance eigenvectors.

    Sign convention: each component's largest-magnitude coordinate is positive.
    """
    X = np.asarray(table, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < dims or X.shape[1] < dims:
        raise EvalError(f"cannot take {dims} components of a {X.shape} table")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:dims]
    comps = vecs[:, order].T
    for i, v in enumerate(comps):
        if v[np.argmax(np.abs(v))] < 0:
            comps[i] = -v
    return PCAResult(coords=Xc @ comps.T, components=comps, eigenvalues=vals[order], mean=mean)


def seafloor_silhouette(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Silhouette of the seafloor-vs-object partition in embedding space."""
    binary = (np.asarray(labels) == SEAFLOOR).astype(int)
    return float(silhouette_score(embeddings, binary, metric="euclidean"))


def embeddings_csv(ids: Sequence[str], labels: Sequence[int], z: np.ndarray) -> str:
    head = "sample_id,label," + ",".join(f"e_{i + 1}" for i in range(z.shape[1]))
    lines = [head] + [f"{sid},{CLASSES[y]}," + ",".join(repr(float(v)) for v in row)
                      for sid, y, row in zip(ids, labels, z)]
    return "\n".join(lines) + "\n"


def pca_csv(ids: Sequence[str], labels: Sequence[int], coords: np.ndarray) -> str:
    head = "sample_id,label," + ",".join(f"pc_{i + 1}" for i in range(coords.shape[1]))
    lines = [head] + [f"{sid},{CLASSES[y]}," + ",".join(repr(float(v)) for v in row)
                      for sid, y, row in zip(ids, labels, coords)]
    return "\n".join(lines) + "\n"


def report_json(cm: ConfusionMatrix, rep: ClassReport, swap: Optional[SwapResult] = None) -> str:
    doc = {"report": rep.to_json(), "confusion": cm.to_json()}
    if swap is not None:
        doc["background_swap"] = swap.to_json()
    return json.dumps(doc, indent=1, sort_keys=True)
