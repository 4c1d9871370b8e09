"""Synthetic sonar-style dataset: generation, preprocessing, augmentation, splitting.

Images are side-scan-like grayscale tiles: a procedural seabed texture, an
optional object glyph (bright highlight plus an acoustic shadow trailing to
the right) and multiplicative speckle. Each object class has a preferred
background texture; ``bias_strength`` controls how often it is used, which
plants a background shortcut whose strength is known exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CLASSES = ("human", "mine", "plane", "seafloor", "ship")
SEAFLOOR = CLASSES.index("seafloor")
N_CLASSES = len(CLASSES)
N_TEXTURES = 5
TARGET_SIZE = 224
# glyph size multiplier: objects cover roughly an eighth of the image, large
# enough that a classifier can pick them up over the texture cue
GLYPH_SCALE = 1.8
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_per_class: int = 200
    image_size: int = TARGET_SIZE
    bias_strength: float = 1.0
    noise_level: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32:
            raise DatasetError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise DatasetError(f"bias_strength must lie in [0, 1], got {self.bias_strength}")
        if self.n_per_class < 1:
            raise DatasetError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.noise_level < 0:
            raise DatasetError("noise_level must be nonnegative")


@dataclass
class ImageSample:
    """One image with its label.

    ``pixels`` is an ``(H, W, C)`` float32 array in [0, 1]. ``object_mask`` is a
    boolean ``(H, W)`` array for synthetic data and ``None`` for external images.
    """

    pixels: np.ndarray
    label: int
    sample_id: str
    object_mask: Optional[np.ndarray] = None
    texture_id: Optional[int] = None
    render: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.object_mask is not None and self.object_mask.shape != self.pixels.shape[:2]:
            raise DatasetError("object_mask shape does not match pixels")

    @property
    def class_name(self) -> str:
        return CLASSES[self.label]


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def membership(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for sid in getattr(self, name):
                out[sid] = name
        return out


@dataclass
class NormStats:
    mean: list[float]
    std: list[float]

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return (pixels - np.asarray(self.mean, np.float32)) / np.asarray(self.std, np.float32)


# ---------------------------------------------------------------------------
# rendering


def _texture(tid: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if tid == 0:
        # fine sand ripples, near-vertical crests
        theta = rng.uniform(-0.15, 0.15)
        wl = rng.uniform(9.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.45 + 0.16 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wl + phase)
    elif tid == 1:
        # long diagonal swell
        theta = np.pi / 4 + rng.uniform(-0.15, 0.15)
        wl = rng.uniform(22.0, 28.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.45 + 0.14 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wl + phase)
    elif tid == 2:
        # rocky patches: band-limited noise
        coarse = rng.normal(size=(size // 16 + 2, size // 16 + 2))
        up = torch.from_numpy(coarse)[None, None]
        up = F.interpolate(up, size=(size, size), mode="bicubic", align_corners=False)[0, 0].numpy()
        t = 0.45 + 0.12 * up / max(up.std(), 1e-6)
    elif tid == 3:
        # smooth mud with a gentle range gradient
        g = rng.uniform(-0.08, 0.08)
        t = 0.42 + g * (xx / size - 0.5) + 0.02 * rng.normal(size=(size, size))
    elif tid == 4:
        # gravel: scattered bright pebbles
        t = np.full((size, size), 0.38)
        n = int(rng.integers(60, 90) * (size / TARGET_SIZE) ** 2) + 4
        cy = rng.uniform(0, size, n)
        cx = rng.uniform(0, size, n)
        r = rng.uniform(2.0, 3.5, n)
        for y0, x0, r0 in zip(cy, cx, r):
            t += 0.35 * np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2 * r0**2))
    else:
        raise DatasetError(f"unknown texture id {tid}")
    return t


def _silhouette(label: int, size: int, cy: float, cx: float, scale: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # object-frame coordinates (u along the long axis)
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    u = c * dx + s * dy
    v = -s * dx + c * dy
    name = CLASSES[label]
    if name == "human":
        body = (u / 22.0) ** 2 + (v / 7.0) ** 2 <= 1.0
        head = (u - 28.0) ** 2 + v**2 <= 6.5**2
        return body | head
    if name == "mine":
        return u**2 + v**2 <= 13.0**2
    if name == "plane":
        fuselage = (np.abs(u) <= 30.0) & (np.abs(v) <= 5.0)
        wings = (np.abs(u - 4.0) <= 6.0) & (np.abs(v) <= 26.0)
        tail = (np.abs(u + 26.0) <= 4.0) & (np.abs(v) <= 11.0)
        return fuselage | wings | tail
    if name == "ship":
        hull = (np.abs(u) <= 28.0) & (np.abs(v) <= 10.0)
        bow = (u > 28.0) & (u <= 40.0) & (np.abs(v) <= 10.0 * (40.0 - u) / 12.0)
        return hull | bow
    return np.zeros((size, size), dtype=bool)


def _shadow(sil: np.ndarray, length: int) -> np.ndarray:
    # acoustic shadow trails away from an insonifying track on the left
    sh = np.zeros_like(sil)
    for k in range(1, length + 1):
        sh[:, k:] |= sil[:, :-k]
    return sh & ~sil


def render(params: dict, texture_id: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Render one image from its stored parameters.

    Passing ``texture_id`` re-renders the same object and speckle over a
    different background, which is what the background-swap test needs.
    """
    size = params["size"]
    tid = params["texture_id"] if texture_id is None else texture_id
    bg = _texture(tid, size, np.random.default_rng(params["texture_seed"]))
    label = params["label"]
    if label == SEAFLOOR:
        mask = np.zeros((size, size), dtype=bool)
        img = bg
    else:
        sil = _silhouette(label, size, params["cy"], params["cx"], params["scale"], params["angle"])
        sh = _shadow(sil, params["shadow"])
        img = bg.copy()
        img[sh] = bg[sh] * 0.25
        img[sil] = 0.82 + 0.15 * bg[sil]
        mask = sil | sh
    var = params["noise"]
    if var > 0:
        nrng = np.random.default_rng(params["noise_seed"])
        img = img * nrng.gamma(1.0 / var, var, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize so PNG storage is lossless
    img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32)[..., None], mask


def _draw_params(label: int, spec: SynthSpec, rng: np.random.Generator) -> dict:
    size = spec.image_size
    if label == SEAFLOOR:
        tid = int(rng.integers(N_TEXTURES))
    elif rng.random() < spec.bias_strength:
        tid = label
    else:
        others = [t for t in range(N_TEXTURES) if t != label]
        tid = int(others[rng.integers(len(others))])
    k = size / TARGET_SIZE
    scale = float(rng.uniform(0.85, 1.2) * GLYPH_SCALE * k)
    shadow = int(round(rng.uniform(18, 30) * GLYPH_SCALE * k))
    margin = 36 * scale
    params = {
        "label": label,
        "size": size,
        "texture_id": tid,
        "texture_seed": int(rng.integers(2**31)),
        "noise_seed": int(rng.integers(2**31)),
        "noise": float(spec.noise_level),
        "cy": float(rng.uniform(margin, size - margin)),
        "cx": float(rng.uniform(margin, size - margin - shadow)),
        "scale": scale,
        "angle": float(rng.uniform(0, np.pi)),
        "shadow": shadow,
    }
    return params


def generate_synthetic(spec: SynthSpec) -> list[ImageSample]:
    """Generate ``5 * n_per_class`` samples, deterministic in ``spec.seed``."""
    spec.validate()
    samples = []
    for label in range(N_CLASSES):
        for i in range(spec.n_per_class):
            rng = np.random.default_rng([spec.seed, label, i])
            params = _draw_params(label, spec, rng)
            pixels, mask = render(params)
            if spec.image_size != TARGET_SIZE:
                pixels = np.round(preprocess(pixels) * 255.0) / 255.0
                mask = resize_mask(mask, TARGET_SIZE)
            samples.append(
                ImageSample(
                    pixels=pixels,
                    label=label,
                    sample_id=f"{CLASSES[label]}_{i:05d}",
                    object_mask=mask,
                    texture_id=params["texture_id"],
                    render=params,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# preprocessing


def _as_hwc(raw: np.ndarray) -> np.ndarray:
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DatasetError(f"expected an HxW or HxWxC image, got shape {arr.shape}")
    return arr


def preprocess(raw_image: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Resize to ``size x size`` (bilinear) and scale intensities to [0, 1].

    Integer images are divided by their dtype maximum; float images are taken
    to already be on a unit scale and are clipped. Standardization with the
    dataset statistics happens later (see :class:`NormStats`), so this step is
    idempotent.
    """
    arr = _as_hwc(raw_image)
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise DatasetError("zero-area image")
    if np.issubdtype(arr.dtype, np.integer):
        x = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    elif np.issubdtype(arr.dtype, np.bool_):
        x = arr.astype(np.float64)
    else:
        x = arr.astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise DatasetError("non-finite pixel values")
    if x.shape[:2] != (size, size):
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
        x = t[0].numpy().transpose(1, 2, 0)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(bool)
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="nearest")[0, 0].numpy() > 0.5


def compute_norm_stats(samples: Sequence[ImageSample]) -> NormStats:
    stack = np.stack([s.pixels for s in samples]).astype(np.float64)
    mean = stack.mean(axis=(0, 1, 2))
    std = stack.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean=[float(m) for m in mean], std=[float(s) for s in std])


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    hflip: bool
    vflip: bool
    angle_deg: float
    scale: float


def draw_augment(rng: np.random.Generator, max_angle: float = 15.0,
                 scale_range: tuple[float, float] = (0.9, 1.1)) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        scale=float(rng.uniform(*scale_range)),
    )


def _affine_theta(p: AugmentParams) -> torch.Tensor:
    # clamp degenerate draws
    scale = min(max(p.scale, 0.5), 2.0)
    a = math.radians(max(min(p.angle_deg, 180.0), -180.0))
    c, s = math.cos(a) / scale, math.sin(a) / scale
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=torch.float32)


def apply_augment(x: torch.Tensor, params: Sequence[AugmentParams],
                  mode: str = "bilinear", fill: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Apply per-image flips then rotation/scale to an ``(N, C, H, W)`` batch.

    Pixels mapped from outside the frame take the value ``fill`` (per image,
    defaults to the image mean) so no artificial dark border appears.
    """
    x = x.clone()
    for i, p in enumerate(params):
        if p.hflip:
            x[i] = torch.flip(x[i], dims=(-1,))
        if p.vflip:
            x[i] = torch.flip(x[i], dims=(-2,))
    theta = torch.stack([_affine_theta(p) for p in params])
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    if fill is None:
        fill = x.mean(dim=(1, 2, 3))
    shifted = x - fill.view(-1, 1, 1, 1)
    out = F.grid_sample(shifted, grid, mode=mode, padding_mode="zeros", align_corners=False)
    return out + fill.view(-1, 1, 1, 1)


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random flip, rotation in [-15, 15] degrees and scale in [0.9, 1.1].

    The object mask receives the identical geometric transform (nearest
    neighbour, zero fill) so it stays aligned with the image.
    """
    p = draw_augment(rng)
    x = torch.from_numpy(sample.pixels.transpose(2, 0, 1).copy())[None]
    y = apply_augment(x, [p])[0].numpy().transpose(1, 2, 0)
    mask = None
    if sample.object_mask is not None:
        m = torch.from_numpy(sample.object_mask.astype(np.float32))[None, None]
        mask = apply_augment(m, [p], mode="nearest", fill=torch.zeros(1))[0, 0].numpy() > 0.5
    return ImageSample(
        pixels=np.clip(y, 0.0, 1.0).astype(np.float32),
        label=sample.label,
        sample_id=sample.sample_id,
        object_mask=mask,
        texture_id=sample.texture_id,
        render=sample.render,
    )


# ---------------------------------------------------------------------------
# splitting


def _stratified_counts(n: int, ratios: Sequence[float], rng: np.random.Generator) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    rem = n - sum(counts)
    frac = [e - c for e, c in zip(exact, counts)]
    # largest remainder, random tie-break
    tiebreak = rng.permutation(len(ratios))
    order = sorted(range(len(ratios)), key=lambda j: (-round(frac[j], 12), tiebreak[j]))
    for j in order[:rem]:
        counts[j] += 1
    for j in range(len(counts)):
        while counts[j] == 0:
            donor = max(range(len(counts)), key=lambda k: counts[k])
            counts[donor] -= 1
            counts[j] += 1
    return counts


def split(samples: Sequence[ImageSample], ratios: Sequence[float] = (0.7, 0.15, 0.15),
          seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test split, deterministic in ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s.sample_id)
    parts: list[list[str]] = [[], [], []]
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < 3:
            raise DatasetError(
                f"class {CLASSES[label]!r} has {len(ids)} samples; need >= 3 to fill every split"
            )
        perm = [ids[k] for k in rng.permutation(len(ids))]
        counts = _stratified_counts(len(ids), ratios, rng)
        start = 0
        for j, c in enumerate(counts):
            parts[j].extend(perm[start:start + c])
            start += c
    return DatasetSplit(train=sorted(parts[0]), val=sorted(parts[1]), test=sorted(parts[2]),
                        ratios=ratios, seed=seed)


# ---------------------------------------------------------------------------
# on-disk format


@dataclass
class Dataset:
    """Samples plus split and normalization statistics, as stored on disk."""

    samples: list[ImageSample]
    split: DatasetSplit
    norm: NormStats
    spec: Optional[SynthSpec] = None
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._index = {s.sample_id: i for i, s in enumerate(self.samples)}

    def get(self, sample_id: str) -> ImageSample:
        return self.samples[self._index[sample_id]]

    def subset(self, name: str) -> list[ImageSample]:
        return [self.get(sid) for sid in getattr(self.split, name)]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(N, C, H, W)`` float32 pixels in [0, 1] and int64 labels."""
        subset = self.subset(name)
        x = np.stack([s.pixels.transpose(2, 0, 1) for s in subset])
        y = np.array([s.label for s in subset], dtype=np.int64)
        return x, y


def build_dataset(spec: SynthSpec, ratios: Sequence[float] = (0.7, 0.15, 0.15)) -> Dataset:
    samples = generate_synthetic(spec)
    sp = split(samples, ratios, seed=spec.seed)
    by_id = {s.sample_id: s for s in samples}
    norm = compute_norm_stats([by_id[sid] for sid in sp.train])
    return Dataset(samples=samples, split=sp, norm=norm, spec=spec)


def _to_png(arr: np.ndarray, path: Path) -> None:
    img = np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return preprocess(arr)


def manifest_dict(ds: Dataset) -> dict[str, Any]:
    member = ds.split.membership()
    entries = []
    for s in ds.samples:
        entries.append({
            "sample_id": s.sample_id,
            "class": s.class_name,
            "texture_id": s.texture_id,
            "path": f"{s.class_name}/{s.sample_id}.png",
            "mask_path": f"masks/{s.sample_id}.png" if s.object_mask is not None else None,
            "split": member[s.sample_id],
            "render": s.render,
        })
    return {
        "format_version": MANIFEST_VERSION,
        "classes": list(CLASSES),
        "generator": asdict(ds.spec) if ds.spec is not None else None,
        "normalization": asdict(ds.norm),
        "split": {"ratios": list(ds.split.ratios), "seed": ds.split.seed,
                  "sizes": {k: len(getattr(ds.split, k)) for k in ("train", "val", "test")}},
        "samples": entries,
    }


def save_dataset(ds: Dataset, out: Path | str) -> Path:
    out = Path(out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for name in CLASSES:
        (out / name).mkdir(exist_ok=True)
    for s in ds.samples:
        _to_png(s.pixels, out / s.class_name / f"{s.sample_id}.png")
        if s.object_mask is not None:
            _to_png(s.object_mask.astype(np.float32), out / "masks" / f"{s.sample_id}.png")
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest_dict(ds), indent=1, sort_keys=True))
    return path


def load_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    man = json.loads(mpath.read_text())
    if man.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {man.get('format_version')}")
    samples = []
    parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for e in man["samples"]:
        pixels = load_image(root / e["path"])
        mask = None
        if e.get("mask_path"):
            with Image.open(root / e["mask_path"]) as im:
                mask = resize_mask(np.asarray(im) > 127)
        samples.append(ImageSample(pixels=pixels, label=CLASSES.index(e["class"]),
                                   sample_id=e["sample_id"], object_mask=mask,
                                   texture_id=e.get("texture_id"), render=e.get("render")))
        parts[e["split"]].append(e["sample_id"])
    sp = man["split"]
    split_obj = DatasetSplit(train=sorted(parts["train"]), val=sorted(parts["val"]),
                             test=sorted(parts["test"]),
                             ratios=tuple(sp["ratios"]), seed=sp["seed"])
    spec = SynthSpec(**man["generator"]) if man.get("generator") else None
    return Dataset(samples=samples, split=split_obj, norm=NormStats(**man["normalization"]), spec=spec)
