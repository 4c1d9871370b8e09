"""Explanation-difference maps between a baseline and an unlearned model.

For every image both models are explained on one shared segmentation and
one shared perturbation set, the explanations are binarized (top-k positive
segments), and ``E_final = clip(M_f - M_fu, 0, 1)`` marks the regions the
baseline relied on that the unlearned model dropped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image

from .dataset import CLASSES, ImageSample
from .explain import AttributionMask, ExplainConfig, explain_many, to_mask
from .model import Classifier, ModelCheckpoint


class UESFError(ValueError):
    pass


@dataclass
class DiffMap:
    values: np.ndarray  # (H, W) float32 in [0, 1]
    baseline_model: str = "f"
    unlearned_model: str = "f_u"
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def area(self) -> float:
        return float(self.values.mean())


@dataclass
class BiasReport:
    n_images: int
    n_scored: int
    mean_ratio_baseline: Optional[float]
    mean_ratio_unlearned: Optional[float]
    frac_images_lower: Optional[float]
    forgotten_area: float
    top_k: int
    explain_config: dict[str, Any]
    images: list[dict[str, Any]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def diff_map(mask_f: AttributionMask | np.ndarray, mask_fu: AttributionMask | np.ndarray,
             **meta: Any) -> DiffMap:
    a = np.asarray(getattr(mask_f, "mask", mask_f), dtype=np.float32)
    b = np.asarray(getattr(mask_fu, "mask", mask_fu), dtype=np.float32)
    if a.shape != b.shape:
        raise UESFError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return DiffMap(values=np.clip(a - b, 0.0, 1.0), meta=meta)


def background_ratio(mask: AttributionMask | np.ndarray, object_mask: np.ndarray) -> float:
    """Fraction of attributed pixels that fall outside the object.

    An empty attribution mask has no background attribution and scores 0.
    """
    m = np.asarray(getattr(mask, "mask", mask)).astype(bool)
    obj = np.asarray(object_mask).astype(bool)
    if m.shape != obj.shape:
        raise UESFError(f"mask shape {m.shape} != object mask shape {obj.shape}")
    total = int(m.sum())
    if total == 0:
        return 0.0
    return int((m & ~obj).sum()) / total


def _as_model(m: ModelCheckpoint | Classifier) -> Classifier:
    return m.build() if isinstance(m, ModelCheckpoint) else m


def uesf_report(baseline: ModelCheckpoint | Classifier, unlearned: ModelCheckpoint | Classifier,
                images: Sequence[ImageSample], cfg: Optional[ExplainConfig] = None
                ) -> tuple[BiasReport, list[DiffMap], list[tuple[AttributionMask, AttributionMask]]]:
    """Explain both models on every image and aggregate background reliance.

    Aggregate ratios cover images with a nonempty object mask; seafloor
    images are reported per image but carry no object to compare against.
    """
    cfg = cfg or ExplainConfig()
    f, fu = _as_model(baseline), _as_model(unlearned)
    if f.norm != fu.norm:
        raise UESFError("models were trained with different normalization statistics")
    rows: list[dict[str, Any]] = []
    diffs: list[DiffMap] = []
    masks: list[tuple[AttributionMask, AttributionMask]] = []
    for sample in images:
        ex_f, ex_fu = explain_many([f, fu], sample.pixels, cfg)
        assert ex_f.segment_map is ex_fu.segment_map
        m_f = to_mask(ex_f, cfg.top_k, "f")
        m_fu = to_mask(ex_fu, cfg.top_k, "f_u")
        d = diff_map(m_f, m_fu, sample_id=sample.sample_id, label=sample.label,
                     pred_f=ex_f.explained_class, pred_fu=ex_fu.explained_class)
        rec: dict[str, Any] = {
            "sample_id": sample.sample_id,
            "class": CLASSES[sample.label],
            "pred_baseline": CLASSES[ex_f.explained_class],
            "pred_unlearned": CLASSES[ex_fu.explained_class],
            "fidelity_baseline": ex_f.fidelity,
            "fidelity_unlearned": ex_fu.fidelity,
            "segments_baseline": m_f.segments,
            "segments_unlearned": m_fu.segments,
            "forgotten_area": d.area,
            "ratio_baseline": None,
            "ratio_unlearned": None,
        }
        if sample.object_mask is not None:
            rec["ratio_baseline"] = background_ratio(m_f, sample.object_mask)
            rec["ratio_unlearned"] = background_ratio(m_fu, sample.object_mask)
            rec["has_object"] = bool(sample.object_mask.any())
        rows.append(rec)
        diffs.append(d)
        masks.append((m_f, m_fu))

    scored = [r for r in rows if r.get("has_object")]
    if scored:
        rf = np.array([r["ratio_baseline"] for r in scored])
        ru = np.array([r["ratio_unlearned"] for r in scored])
        mean_f, mean_u = float(rf.mean()), float(ru.mean())
        lower = float((ru < rf).mean())
    else:
        mean_f = mean_u = lower = None
    report = BiasReport(
        n_images=len(rows),
        n_scored=len(scored),
        mean_ratio_baseline=mean_f,
        mean_ratio_unlearned=mean_u,
        frac_images_lower=lower,
        forgotten_area=float(np.mean([d.area for d in diffs])) if diffs else 0.0,
        top_k=cfg.top_k,
        explain_config=asdict(cfg),
        images=rows,
    )
    return report, diffs, masks


# ---------------------------------------------------------------------------
# artifacts


def _overlay(pixels: np.ndarray, mask: np.ndarray, color: tuple[int, int, int]) -> np.ndarray:
    gray = np.repeat(np.clip(pixels[..., :1], 0, 1), 3, axis=2) * 255.0
    tint = np.array(color, dtype=np.float64)
    m = mask.astype(bool)[..., None]
    out = np.where(m, 0.55 * gray + 0.45 * tint, gray)
    return out.astype(np.uint8)


def write_artifacts(out_dir: Path | str, images: Sequence[ImageSample], report: BiasReport,
                    diffs: Sequence[DiffMap], masks: Sequence[tuple[AttributionMask, AttributionMask]]) -> None:
    """Per image: ``E_final.png`` and a three-panel overlay (f, f_u, E_final)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sample, d, (m_f, m_fu) in zip(images, diffs, masks):
        sub = out / sample.sample_id
        sub.mkdir(exist_ok=True)
        Image.fromarray((d.values * 255).astype(np.uint8)).save(sub / "E_final.png")
        gap = np.full((sample.pixels.shape[0], 4, 3), 255, np.uint8)
        panel = np.concatenate([
            _overlay(sample.pixels, m_f.mask, (255, 60, 0)), gap,
            _overlay(sample.pixels, m_fu.mask, (0, 160, 255)), gap,
            _overlay(sample.pixels, d.values > 0, (255, 0, 200)),
        ], axis=1)
        Image.fromarray(panel).save(sub / "overlay.png")
    (out / "bias_report.json").write_text(report.to_json())
