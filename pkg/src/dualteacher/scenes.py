"""Two-domain synthetic detection scenes and the weak/strong augmentations.

A scene is a 32x32 single-channel image holding a few soft-edged
elliptical blobs on a gently textured background. Blobs come in two
classes distinguished by the orientation of their elongation: class 0 is
wider than tall, class 1 taller than wide. Most blobs are brighter than
the background, a minority darker (`bright_fraction`), which is what a
detector can partially transfer across the appearance shift below.

The source domain is the plain render. The target domain re-renders the
same distribution and then applies a configurable appearance shift:
background texture attenuation, contrast compression toward mid-gray,
polarity inversion, and pixel noise. With a neutral gap config the two
domains are identically distributed.

Rendering is a pure function of (seed, sample_id): each sample draws only
from its own substream, so generation order and parallelism cannot change
results. Pixels are stored float32 so the on-disk format round-trips
bit-exactly.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, iou
from .errors import CheckpointError, ConfigurationError
from .rng import TAG_SCENE, substream

CLASS_WIDE = 0
CLASS_TALL = 1

_SCENE_MAGIC = b"SCN1"
_SCENE_HEADER = struct.Struct("<4sHHH6x")  # magic, H, W, C, pad to 16 bytes


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    box: Box  # (cx, cy, w, h), pixels


@dataclass(frozen=True)
class SceneSample:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]; single channel
    objects: tuple[GroundTruthObject, ...]
    domain: Domain
    sample_id: int


@dataclass(frozen=True)
class DomainGapConfig:
    """Appearance shift applied to target-domain renders."""

    intensity_inversion: bool = True
    contrast_scale: float = 0.7
    noise_sigma: float = 0.05
    texture_drop: float = 0.2

    def validate(self) -> None:
        if self.contrast_scale <= 0:
            raise ConfigurationError(f"contrast_scale must be > 0, got {self.contrast_scale}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.texture_drop <= 1.0:
            raise ConfigurationError(f"texture_drop must be in [0, 1], got {self.texture_drop}")

    @classmethod
    def neutral(cls) -> "DomainGapConfig":
        return cls(intensity_inversion=False, contrast_scale=1.0, noise_sigma=0.0, texture_drop=0.0)


@dataclass(frozen=True)
class SceneGeometry:
    """Scene layout parameters; shared verbatim by both domains."""

    size: int = 32
    min_objects: int = 2
    max_objects: int = 5
    major_axis_range: tuple[float, float] = (3.2, 5.6)
    aspect_range: tuple[float, float] = (1.6, 2.4)
    contrast_range: tuple[float, float] = (0.25, 0.45)
    bright_fraction: float = 0.8
    background_level: float = 0.35
    texture_amplitude: float = 0.08
    edge_softness: float = 0.12
    max_overlap_iou: float = 0.25
    placement_tries: int = 40

    def validate(self) -> None:
        if self.size < 8 or self.size % 4 != 0:
            raise ConfigurationError(f"scene size must be a multiple of 4 and >= 8, got {self.size}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 1 <= min_objects <= max_objects")
        # Largest possible box (the major axis doubled) must fit with margin.
        largest = 2.0 * self.major_axis_range[1]
        if largest + 1.0 >= self.size:
            raise ConfigurationError(
                f"objects of extent {largest:.1f} do not fit a {self.size}px scene"
            )
        if not 0.0 <= self.bright_fraction <= 1.0:
            raise ConfigurationError("bright_fraction must be in [0, 1]")


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / 9.0


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(-z, -60.0, 60.0)))


def _render_base(
    rng: np.random.Generator, geom: SceneGeometry, texture_scale: float
) -> tuple[np.ndarray, tuple[GroundTruthObject, ...]]:
    """Render blobs + textured background in float64, pre-clamp."""
    size = geom.size
    coarse = rng.uniform(-1.0, 1.0, size=(size // 4, size // 4))
    texture = _box_blur3(_box_blur3(np.kron(coarse, np.ones((4, 4)))))
    img = geom.background_level + geom.texture_amplitude * texture_scale * texture

    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5
    py = yy + 0.5

    n_objects = int(rng.integers(geom.min_objects, geom.max_objects + 1))
    objects: list[GroundTruthObject] = []
    for _ in range(n_objects):
        for _attempt in range(geom.placement_tries):
            class_id = int(rng.integers(0, 2))
            major = rng.uniform(*geom.major_axis_range)
            aspect = rng.uniform(*geom.aspect_range)
            if class_id == CLASS_WIDE:
                half_w, half_h = major, major / aspect
            else:
                half_w, half_h = major / aspect, major
            cx = rng.uniform(half_w + 0.5, size - half_w - 0.5)
            cy = rng.uniform(half_h + 0.5, size - half_h - 0.5)
            contrast = rng.uniform(*geom.contrast_range)
            sign = 1.0 if rng.random() < geom.bright_fraction else -1.0
            box = (float(cx), float(cy), float(2 * half_w), float(2 * half_h))
            if any(iou(box, obj.box) > geom.max_overlap_iou for obj in objects):
                continue
            dist = np.sqrt(((px - cx) / half_w) ** 2 + ((py - cy) / half_h) ** 2)
            img = img + sign * contrast * _stable_sigmoid((1.0 - dist) / geom.edge_softness)
            objects.append(GroundTruthObject(class_id=class_id, box=box))
            break
    return img, tuple(objects)


def render_sample(
    seed: int,
    sample_id: int,
    domain: Domain,
    gap: DomainGapConfig,
    geometry: SceneGeometry = SceneGeometry(),
) -> SceneSample:
    """Render one sample; pure function of all arguments."""
    rng = substream(seed, TAG_SCENE, sample_id)
    is_target = domain is Domain.TARGET
    texture_scale = (1.0 - gap.texture_drop) if is_target else 1.0
    img, objects = _render_base(rng, geometry, texture_scale)
    if is_target:
        img = 0.5 + gap.contrast_scale * (img - 0.5)
        if gap.intensity_inversion:
            img = 1.0 - img
        if gap.noise_sigma > 0:
            img = img + gap.noise_sigma * rng.standard_normal(img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SceneSample(pixels=pixels, objects=objects, domain=domain, sample_id=sample_id)


def generate_dataset(
    seed: int,
    n_source: int,
    n_target: int,
    gap: DomainGapConfig = DomainGapConfig(),
    geometry: SceneGeometry = SceneGeometry(),
) -> tuple[list[SceneSample], list[SceneSample]]:
    """Generate disjoint source/target sample lists.

    Source samples get ids 0..n_source-1, target samples continue from
    n_source, so no id ever appears in both lists. Target samples keep
    their ground-truth objects for evaluation only; the trainer strips
    them on ingestion (see `strip_labels`).
    """
    if n_source < 1 or n_target < 1:
        raise ConfigurationError("n_source and n_target must both be >= 1")
    gap.validate()
    geometry.validate()
    source = [render_sample(seed, i, Domain.SOURCE, gap, geometry) for i in range(n_source)]
    target = [
        render_sample(seed, n_source + i, Domain.TARGET, gap, geometry) for i in range(n_target)
    ]
    return source, target


def strip_labels(sample: SceneSample) -> SceneSample:
    """Drop ground-truth objects; applied to target samples before training."""
    return dataclasses.replace(sample, objects=())


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.02
    strong_noise_sigma: float = 0.08
    cutout_frac_range: tuple[float, float] = (0.0, 0.25)
    cutout_aspect_range: tuple[float, float] = (0.5, 2.0)
    contrast_jitter: float = 0.2


def _flip_objects(objects: tuple[GroundTruthObject, ...], size: int) -> tuple[GroundTruthObject, ...]:
    return tuple(
        dataclasses.replace(o, box=(size - o.box[0], o.box[1], o.box[2], o.box[3])) for o in objects
    )


def weak_augment(
    sample: SceneSample,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
    *,
    flip: bool | None = None,
) -> SceneSample:
    """Horizontal flip (p=0.5) plus light Gaussian noise, clamped to [0, 1].

    `flip` overrides the coin so a caller can keep the teacher's weak view
    and the student's strong view geometrically aligned. Zero magnitudes
    skip their ops entirely, so the all-zero config is an exact identity.
    """
    size = sample.pixels.shape[1]
    if flip is None:
        flip = bool(rng.random() < 0.5)
    pixels = sample.pixels.astype(np.float64)
    objects = sample.objects
    if flip:
        pixels = pixels[:, ::-1]
        objects = _flip_objects(objects, size)
    if cfg.weak_noise_sigma > 0:
        pixels = np.clip(pixels + cfg.weak_noise_sigma * rng.standard_normal(pixels.shape), 0.0, 1.0)
    return dataclasses.replace(sample, pixels=pixels.astype(np.float32), objects=objects)


def strong_augment(
    sample: SceneSample,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
    *,
    flip: bool | None = None,
) -> SceneSample:
    """Flip + contrast jitter + heavier noise + rectangular cutout.

    Boxes follow the flip and are untouched by the photometric ops, so
    pseudo-labels produced on the matching weak view stay valid targets.
    Draw order is fixed: flip, jitter, noise, cutout.
    """
    size = sample.pixels.shape[1]
    if flip is None:
        flip = bool(rng.random() < 0.5)
    pixels = sample.pixels.astype(np.float64)
    objects = sample.objects
    if flip:
        pixels = pixels[:, ::-1]
        objects = _flip_objects(objects, size)
    if cfg.contrast_jitter > 0:
        scale = rng.uniform(1.0 - cfg.contrast_jitter, 1.0 + cfg.contrast_jitter)
        pixels = 0.5 + scale * (pixels - 0.5)
    if cfg.strong_noise_sigma > 0:
        pixels = pixels + cfg.strong_noise_sigma * rng.standard_normal(pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    if cfg.cutout_frac_range[1] > 0:
        h, w = pixels.shape
        frac = rng.uniform(*cfg.cutout_frac_range)
        aspect = rng.uniform(*cfg.cutout_aspect_range)
        ph = int(np.clip(round(np.sqrt(frac * h * w / aspect)), 0, h))
        pw = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 0, w))
        if ph > 0 and pw > 0:
            y0 = int(rng.integers(0, h - ph + 1))
            x0 = int(rng.integers(0, w - pw + 1))
            pixels = pixels.copy()
            pixels[y0 : y0 + ph, x0 : x0 + pw] = 0.0
    return dataclasses.replace(sample, pixels=pixels.astype(np.float32), objects=objects)


# ---------------------------------------------------------------------------
# Dataset directory format
# ---------------------------------------------------------------------------
# One binary file per sample: 16-byte header (magic "SCN1", then H, W, C as
# little-endian u16, zero padding) followed by the row-major float32 pixel
# grid. A JSON sidecar carries sample_id, domain, and objects. Pixels are
# float32 in memory, so save -> load -> save is byte-identical.


def _sample_stem(sample_id: int) -> str:
    return f"sample_{sample_id:06d}"


def save_dataset(directory: str | Path, samples: list[SceneSample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        h, w = s.pixels.shape
        stem = directory / _sample_stem(s.sample_id)
        with open(stem.with_suffix(".bin"), "wb") as f:
            f.write(_SCENE_HEADER.pack(_SCENE_MAGIC, h, w, 1))
            f.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
        sidecar = {
            "domain": s.domain.value,
            "objects": [{"box": list(o.box), "class_id": o.class_id} for o in s.objects],
            "sample_id": s.sample_id,
        }
        with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")


def load_dataset(directory: str | Path) -> list[SceneSample]:
    directory = Path(directory)
    samples = []
    for bin_path in sorted(directory.glob("sample_*.bin")):
        raw = bin_path.read_bytes()
        if len(raw) < _SCENE_HEADER.size:
            raise CheckpointError(f"{bin_path}: truncated header")
        magic, h, w, c = _SCENE_HEADER.unpack(raw[: _SCENE_HEADER.size])
        if magic != _SCENE_MAGIC:
            raise CheckpointError(f"{bin_path}: bad magic {magic!r}")
        if c != 1:
            raise CheckpointError(f"{bin_path}: unsupported channel count {c}")
        expected = _SCENE_HEADER.size + 4 * h * w * c
        if len(raw) != expected:
            raise CheckpointError(f"{bin_path}: expected {expected} bytes, got {len(raw)}")
        pixels = np.frombuffer(raw[_SCENE_HEADER.size :], dtype="<f4").reshape(h, w).copy()
        with open(bin_path.with_suffix(".json"), "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        objects = tuple(
            GroundTruthObject(class_id=int(o["class_id"]), box=tuple(float(v) for v in o["box"]))
            for o in sidecar["objects"]
        )
        samples.append(
            SceneSample(
                pixels=pixels,
                objects=objects,
                domain=Domain(sidecar["domain"]),
                sample_id=int(sidecar["sample_id"]),
            )
        )
    if not samples:
        raise CheckpointError(f"no samples found in {directory}")
    return samples
