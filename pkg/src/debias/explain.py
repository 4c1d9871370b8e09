"""LIME for images, written out step by step.

segment -> perturb (segments on/off, off = image mean) -> query the model ->
kernel-weighted ridge surrogate -> top-k positive segments as a binary mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from scipy import ndimage


RIDGE_EPS = 1e-6


class ExplainError(ValueError):
    pass


@dataclass
class SegmentMap:
    labels: np.ndarray  # (H, W) int32 in [0, n_segments)
    n_segments: int

    def masks(self) -> np.ndarray:
        """Boolean ``(S, H, W)`` stack, one plane per segment."""
        return self.labels[None] == np.arange(self.n_segments)[:, None, None]


@dataclass
class ExplainConfig:
    n_samples: int = 1000
    kernel_width: float = 0.25
    segmentation: str = "grid"
    grid: int = 8
    n_segments: int = 64  # slic target count
    compactness: float = 10.0
    slic_iters: int = 10
    top_k: int = 8
    seed: int = 0
    batch_size: int = 250


@dataclass
class Explanation:
    segment_map: SegmentMap
    weights: np.ndarray
    intercept: float
    explained_class: int
    fidelity: float
    n_samples: int
    kernel_width: float
    seed: int
    probs: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "explained_class": self.explained_class,
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "fidelity": float(self.fidelity),
            "n_segments": self.segment_map.n_segments,
            "n_samples": self.n_samples,
            "kernel_width": self.kernel_width,
            "seed": self.seed,
        }


@dataclass
class AttributionMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    segments: list[int]
    top_k: int
    source_model: str = ""


# ---------------------------------------------------------------------------
# segmentation


def grid_segments(height: int, width: int, g: int = 8) -> SegmentMap:
    """``g x g`` tiles; when ``g`` does not divide the size the last row and
    column of tiles absorb the remainder."""
    if g < 1:
        raise ExplainError("grid size must be >= 1")
    rows = np.minimum(np.arange(height) // (height // g), g - 1)
    cols = np.minimum(np.arange(width) // (width // g), g - 1)
    labels = (rows[:, None] * g + cols[None, :]).astype(np.int32)
    return SegmentMap(labels=labels, n_segments=g * g)


def _relabel_connected(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split every label into 4-connected pieces and fold small pieces into a
    neighbouring segment, so each final segment is nonempty and connected."""
    four = ndimage.generate_binary_structure(2, 1)
    comp = np.zeros(labels.shape, dtype=np.int64)
    n = 0
    for lab in np.unique(labels):
        cc, k = ndimage.label(labels == lab, structure=four)
        comp[cc > 0] = cc[cc > 0] + n
        n += k
    comp -= 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    # absorb small pieces, smallest first, into the neighbour they touch most
    for c in np.argsort(sizes, kind="stable"):
        if sizes[c] >= min_size or sizes[c] == 0:
            continue
        region = comp == c
        ring = ndimage.binary_dilation(region, structure=four) & ~region
        neigh = comp[ring]
        if neigh.size == 0:
            continue
        target = np.bincount(neigh).argmax()
        comp[region] = target
        sizes[target] += sizes[c]
        sizes[c] = 0
    _, dense = np.unique(comp, return_inverse=True)
    return dense.reshape(labels.shape).astype(np.int32)


def slic_segments(image: np.ndarray, n_segments: int = 64, compactness: float = 10.0,
                  n_iter: int = 10, seed: int = 0) -> SegmentMap:
    """k-means superpixels in (y, x, intensity) space.

    Centres start on a jittered grid (seeded), then ``n_iter`` full k-means
    iterations run with the SLIC distance ``d_c^2 + (d_s / S)^2 * m^2``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    rng = np.random.default_rng(seed)
    step = np.sqrt(h * w / n_segments)
    rows = max(1, int(round(h / step)))
    cols = max(1, int(np.ceil(n_segments / rows)))
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    chosen = sorted(rng.choice(len(cells), size=min(n_segments, len(cells)), replace=False))
    cy = np.array([(cells[i][0] + 0.5) * h / rows for i in chosen])
    cx = np.array([(cells[i][1] + 0.5) * w / cols for i in chosen])
    cy += rng.uniform(-0.1, 0.1, len(cy)) * h / rows
    cx += rng.uniform(-0.1, 0.1, len(cx)) * w / cols
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.stack([yy.ravel() / step, xx.ravel() / step, img.ravel() / compactness * 10.0], axis=1)
    iy = np.clip(cy.astype(int), 0, h - 1)
    ix = np.clip(cx.astype(int), 0, w - 1)
    centres = np.stack([cy / step, cx / step, img[iy, ix] / compactness * 10.0], axis=1)
    assign = np.zeros(h * w, dtype=np.int64)
    for _ in range(n_iter):
        d = ((feats[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for k in range(len(centres)):
            sel = assign == k
            if sel.any():
                centres[k] = feats[sel].mean(axis=0)
    min_size = max(1, int(0.25 * h * w / len(centres)))
    labels = _relabel_connected(assign.reshape(h, w), min_size)
    return SegmentMap(labels=labels, n_segments=int(labels.max()) + 1)


def segment(pixels: np.ndarray, mode: str = "grid", cfg: Optional[ExplainConfig] = None) -> SegmentMap:
    cfg = cfg or ExplainConfig()
    h, w = pixels.shape[:2]
    if mode == "grid":
        return grid_segments(h, w, cfg.grid)
    if mode == "slic":
        return slic_segments(pixels, cfg.n_segments, cfg.compactness, cfg.slic_iters, cfg.seed)
    raise ExplainError(f"unknown segmentation mode {mode!r}")


# ---------------------------------------------------------------------------
# perturbation


def sample_rows(n_samples: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    if n_samples < n_segments + 2:
        raise ExplainError(f"n_samples={n_samples} too small for {n_segments} segments (need >= S + 2)")
    z = (rng.random((n_samples, n_segments)) < 0.5).astype(np.float64)
    z[0] = 1.0
    return z


def render_rows(pixels: np.ndarray, seg: SegmentMap, rows: np.ndarray) -> np.ndarray:
    """Images for each on/off row: switched-off segments take the image mean.

    ``pixels`` is ``(H, W, C)``; returns ``(n, C, H, W)`` float32.
    """
    img = pixels.transpose(2, 0, 1).astype(np.float32)
    fill = img.mean(axis=(1, 2), keepdims=True)
    keep = rows.astype(np.float32)[:, seg.labels][:, None]  # (n, 1, H, W)
    return keep * img[None] + (1.0 - keep) * fill[None]


def perturb(pixels: np.ndarray, seg: SegmentMap, n_samples: int,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rows = sample_rows(n_samples, seg.n_segments, rng)
    return rows, render_rows(pixels, seg, rows)


# ---------------------------------------------------------------------------
# surrogate


def kernel_weights(rows: np.ndarray, kernel_width: float) -> np.ndarray:
    """``exp(-D^2 / width^2)`` with D the cosine distance to the all-ones row."""
    norms = np.linalg.norm(rows, axis=1)
    ones = np.sqrt(rows.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = rows.sum(axis=1) / (norms * ones)
    dist = np.where(norms > 0, 1.0 - cos, 1.0)
    return np.exp(-(dist**2) / kernel_width**2)


def fit_surrogate(rows: np.ndarray, probs: np.ndarray, kernel_width: float = 0.25,
                  ridge: float = RIDGE_EPS) -> tuple[np.ndarray, float, float]:
    """Weighted ridge regression of ``probs`` on the on/off rows.

    The intercept is unpenalized (solved by weighted centering). Returns
    ``(weights, intercept, weighted R^2)``.
    """
    if kernel_width <= 0:
        raise ExplainError("kernel_width must be > 0")
    y = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ExplainError("non-finite model probabilities")
    X = np.asarray(rows, dtype=np.float64)
    sw = kernel_weights(X, kernel_width)
    wsum = sw.sum()
    xm = sw @ X / wsum
    ym = sw @ y / wsum
    Xc = X - xm
    yc = y - ym
    A = Xc.T @ (sw[:, None] * Xc) + ridge * np.eye(X.shape[1])
    b = Xc.T @ (sw * yc)
    coef = np.linalg.solve(A, b)
    intercept = float(ym - xm @ coef)
    resid = y - (X @ coef + intercept)
    ss_res = float(sw @ resid**2)
    ss_tot = float(sw @ yc**2)
    if np.ptp(y) == 0:
        fidelity = 1.0  # a constant response is fit exactly by the intercept
    else:
        fidelity = 1.0 - ss_res / ss_tot
    return coef, intercept, fidelity


# ---------------------------------------------------------------------------
# end to end

ProbaFn = Callable[[np.ndarray], np.ndarray]


def model_proba_fn(model: torch.nn.Module, batch_size: int = 250) -> ProbaFn:
    """Wrap a classifier as ``(n, C, H, W) float32 -> (n, classes)`` probabilities."""

    def fn(images: np.ndarray) -> np.ndarray:
        return model.predict_proba(torch.from_numpy(np.ascontiguousarray(images)),
                                   batch_size=batch_size).double().numpy()

    return fn


def _batched(fn: ProbaFn, images_of: Callable[[np.ndarray], np.ndarray], rows: np.ndarray,
             batch_size: int) -> np.ndarray:
    return np.concatenate([fn(images_of(rows[i:i + batch_size]))
                           for i in range(0, len(rows), batch_size)])


def explain(model: torch.nn.Module | ProbaFn, pixels: np.ndarray,
            cfg: Optional[ExplainConfig] = None, seg: Optional[SegmentMap] = None) -> Explanation:
    """Explain the model's predicted class for one ``(H, W, C)`` image."""
    return explain_many([model], pixels, cfg, seg)[0]


def explain_many(models: list, pixels: np.ndarray, cfg: Optional[ExplainConfig] = None,
                 seg: Optional[SegmentMap] = None) -> list[Explanation]:
    """Explain several models on one image with one shared segmentation and
    one shared perturbation set (the rows are drawn once from ``cfg.seed``)."""
    cfg = cfg or ExplainConfig()
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if seg is None:
        seg = segment(pixels, cfg.segmentation, cfg)
    rng = np.random.default_rng(cfg.seed)
    rows = sample_rows(cfg.n_samples, seg.n_segments, rng)
    fns = [m if not isinstance(m, torch.nn.Module) else model_proba_fn(m, cfg.batch_size) for m in models]
    probs = [_batched(fn, lambda r: render_rows(pixels, seg, r), rows, cfg.batch_size) for fn in fns]
    out = []
    for p in probs:
        cls = int(np.argmax(p[0]))
        coef, icpt, fid = fit_surrogate(rows, p[:, cls], cfg.kernel_width)
        out.append(Explanation(segment_map=seg, weights=coef, intercept=icpt, explained_class=cls,
                               fidelity=fid, n_samples=cfg.n_samples, kernel_width=cfg.kernel_width,
                               seed=cfg.seed, probs=p[:, cls]))
    return out


def top_segments(weights: np.ndarray, top_k: int) -> list[int]:
    """Ids of the ``top_k`` largest strictly positive weights; ties go to the lower id."""
    if top_k < 1:
        raise ExplainError("top_k must be >= 1")
    order = sorted(range(len(weights)), key=lambda j: (-weights[j], j))
    return [j for j in order[:top_k] if weights[j] > 0]


def to_mask(explanation: Explanation, top_k: int = 8, source_model: str = "") -> AttributionMask:
    segs = top_segments(explanation.weights, top_k)
    mask = np.isin(explanation.segment_map.labels, segs).astype(np.uint8)
    return AttributionMask(mask=mask, segments=segs, top_k=top_k, source_model=source_model)

