"""Tiny anchor-free per-cell detector with hand-written analytic gradients.

Architecture: the 32x32 input is centered (x - 0.5), passed through one
3x3 same-padding convolution (8 channels, tanh), average-pooled 4x4 down
to an 8x8 cell grid, and per-cell linear heads emit class logits, an
objectness logit, and four box-edge distances (softplus of the raw head
output, scaled by `offset_scale` pixels). A cell is assigned to the
ground-truth box containing its center, smallest box winning ties, and
its offset targets are the distances from the cell center to the box
edges (left, top, right, bottom).

The loss is binary cross-entropy on objectness over all cells, plus
cross-entropy on the class and smooth-L1 on the offsets at positive
cells, each positive term averaged per positive count, all three weighted
equally. Gradients are exact closed forms; the test suite checks them
against central finite differences. Everything here is pure: forward,
losses, and decoding never mutate their inputs, and float64 is used
throughout so repeated calls are bit-identical.

Training-target construction accepts either ground-truth objects or a
pseudo-label detection list; both reduce to the same (class_id, box)
pairs, which is what makes the unsupervised loss with ground truth as
pseudo-labels exactly equal to the supervised loss.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box, from_corners, iou, to_corners
from .errors import CheckpointError, ConfigurationError, NonFiniteLossError
from .rng import TAG_INIT, substream
from .scenes import GroundTruthObject, SceneSample

KERNEL = 3

_CKPT_MAGIC = b"D3T1"


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    conv_channels: int = 8
    grid: int = 8
    num_classes: int = 2
    offset_scale: float = 4.0
    input_gain: float = 2.0  # centered pixels scaled to [-gain/2, gain/2]

    @property
    def pool(self) -> int:
        return self.image_size // self.grid

    def validate(self) -> None:
        if self.grid < 1 or self.image_size % self.grid != 0:
            raise ConfigurationError(
                f"grid {self.grid} must divide image_size {self.image_size}"
            )
        if self.conv_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("conv_channels and num_classes must be >= 1")
        if self.offset_scale <= 0:
            raise ConfigurationError("offset_scale must be > 0")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CheckpointError(f"unknown arch fields {sorted(unknown)}")
        arch = cls(**data)
        arch.validate()
        return arch


LayoutEntry = tuple[str, int, tuple[int, ...]]


def build_layout(arch: ArchConfig) -> tuple[tuple[LayoutEntry, ...], int]:
    """(name, offset, shape) descriptors for the flat parameter vector."""
    c = arch.conv_channels
    specs = [
        ("conv_w", (c, KERNEL, KERNEL)),
        ("conv_b", (c,)),
        ("cls_w", (arch.num_classes, c)),
        ("cls_b", (arch.num_classes,)),
        ("obj_w", (c,)),
        ("obj_b", (1,)),
        ("box_w", (4, c)),
        ("box_b", (4,)),
    ]
    layout = []
    offset = 0
    for name, shape in specs:
        layout.append((name, offset, shape))
        offset += int(np.prod(shape))
    return tuple(layout), offset


@dataclass
class ParamVector:
    """Flat float64 weight vector plus its (name, offset, shape) layout."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("ParamVector values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteLossError("ParamVector contains non-finite values")

    def view(self, name: str) -> np.ndarray:
        for entry_name, offset, shape in self.layout:
            if entry_name == name:
                return self.values[offset : offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(values=self.values.copy(), layout=self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.shape == other.values.shape


def init_params(seed: int, arch: ArchConfig) -> ParamVector:
    """Uniform [-b, b] init with b = 1/sqrt(fan_in) per layer."""
    arch.validate()
    layout, total = build_layout(arch)
    rng = substream(seed, TAG_INIT)
    fan_in = {
        "conv_w": KERNEL * KERNEL,
        "conv_b": KERNEL * KERNEL,
        "cls_w": arch.conv_channels,
        "cls_b": arch.conv_channels,
        "obj_w": arch.conv_channels,
        "obj_b": arch.conv_channels,
        "box_w": arch.conv_channels,
        "box_b": arch.conv_channels,
    }
    values = np.empty(total, dtype=np.float64)
    for name, offset, shape in layout:
        bound = 1.0 / np.sqrt(fan_in[name])
        n = int(np.prod(shape))
        values[offset : offset + n] = rng.uniform(-bound, bound, size=n)
    return ParamVector(values=values, layout=layout)


@dataclass(frozen=True)
class DetectorOutput:
    """Per-cell predictions on the G x G grid."""

    cls_logits: np.ndarray  # (G, G, num_classes)
    objectness: np.ndarray  # (G, G)
    offsets: np.ndarray  # (G, G, 4) >= 0, (l, t, r, b) pixels


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box
    source_teacher: str | None = None  # "rgb" | "thermal" | "ground_truth"
    cell: int = -1  # row-major cell index; deterministic NMS tie-break


DetectionSet = list  # list[Detection], sorted by descending score


@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5


# ---------------------------------------------------------------------------
# Forward / backward internals (batched over a sample stack)
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


@dataclass
class _Cache:
    x_cols: np.ndarray  # (N*H*W, K*K) im2col of centered input
    a1: np.ndarray  # (N*H*W, C) tanh activations
    feats: np.ndarray  # (N, G*G, C) pooled features


@dataclass
class _Heads:
    cls: np.ndarray  # (N, G*G, K)
    obj: np.ndarray  # (N, G*G)
    box_raw: np.ndarray  # (N, G*G, 4)
    offsets: np.ndarray  # (N, G*G, 4)


def _im2col(pixels: np.ndarray) -> np.ndarray:
    n, h, w = pixels.shape
    pad = KERNEL // 2
    padded = np.pad(pixels, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))
    return windows.reshape(n * h * w, KERNEL * KERNEL)


def _forward_stack(params: ParamVector, arch: ArchConfig, pixels: np.ndarray) -> tuple[_Cache, _Heads]:
    n, h, w = pixels.shape
    if h != arch.image_size or w != arch.image_size:
        raise ConfigurationError(
            f"scene shape {(h, w)} does not match arch image_size {arch.image_size}"
        )
    g, pool, c = arch.grid, arch.pool, arch.conv_channels
    x = (pixels.astype(np.float64) - 0.5) * arch.input_gain
    x_cols = _im2col(x)
    z1 = x_cols @ params.view("conv_w").reshape(c, -1).T + params.view("conv_b")
    a1 = np.tanh(z1)
    feats = a1.reshape(n, g, pool, g, pool, c).mean(axis=(2, 4)).reshape(n, g * g, c)
    cls = feats @ params.view("cls_w").T + params.view("cls_b")
    obj = feats @ params.view("obj_w") + params.view("obj_b")[0]
    box_raw = feats @ params.view("box_w").T + params.view("box_b")
    offsets = _softplus(box_raw) * arch.offset_scale
    return _Cache(x_cols=x_cols, a1=a1, feats=feats), _Heads(
        cls=cls, obj=obj, box_raw=box_raw, offsets=offsets
    )


def _backward_stack(
    params: ParamVector,
    arch: ArchConfig,
    cache: _Cache,
    d_cls: np.ndarray,
    d_obj: np.ndarray,
    d_box_raw: np.ndarray,
) -> ParamVector:
    n = cache.feats.shape[0]
    g, pool, c = arch.grid, arch.pool, arch.conv_channels
    feats = cache.feats
    grad = np.zeros_like(params.values)
    out = ParamVector(values=grad, layout=params.layout)

    out.view("cls_w")[:] = np.tensordot(d_cls, feats, axes=([0, 1], [0, 1]))
    out.view("cls_b")[:] = d_cls.sum(axis=(0, 1))
    out.view("obj_w")[:] = np.tensordot(d_obj, feats, axes=([0, 1], [0, 1]))
    out.view("obj_b")[:] = d_obj.sum()
    out.view("box_w")[:] = np.tensordot(d_box_raw, feats, axes=([0, 1], [0, 1]))
    out.view("box_b")[:] = d_box_raw.sum(axis=(0, 1))

    d_feats = (
        d_cls @ params.view("cls_w")
        + d_obj[..., None] * params.view("obj_w")
        + d_box_raw @ params.view("box_w")
    )
    d_a1 = np.broadcast_to(
        d_feats.reshape(n, g, 1, g, 1, c) / (pool * pool), (n, g, pool, g, pool, c)
    ).reshape(-1, c)
    d_z1 = d_a1 * (1.0 - cache.a1**2)
    out.view("conv_w")[:] = (cache.x_cols.T @ d_z1).T.reshape(c, KERNEL, KERNEL)
    out.view("conv_b")[:] = d_z1.sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# Targets and losses
# ---------------------------------------------------------------------------

TargetItem = tuple[int, Box]  # (class_id, box)


def targets_from_objects(objects: Sequence[GroundTruthObject]) -> list[TargetItem]:
    return [(o.class_id, o.box) for o in objects]


def targets_from_detections(detections: Sequence[Detection]) -> list[TargetItem]:
    return [(d.class_id, d.box) for d in detections]


def cell_centers(arch: ArchConfig) -> np.ndarray:
    """(G*G, 2) row-major cell centers (px, py) in pixels."""
    stride = arch.pool
    coords = (np.arange(arch.grid) + 0.5) * stride
    px, py = np.meshgrid(coords, coords)  # px varies along columns
    return np.stack([px.ravel(), py.ravel()], axis=1)


@dataclass
class TargetBundle:
    """Per-cell training targets for a stack of samples."""

    n_samples: int
    obj_target: np.ndarray  # (N, G*G) in {0, 1}
    pos_sample: np.ndarray  # (P,)
    pos_cell: np.ndarray  # (P,)
    pos_class: np.ndarray  # (P,)
    pos_offsets: np.ndarray  # (P, 4) target (l, t, r, b)
    pos_weight: np.ndarray  # (P,) 1 / positives-in-that-sample


def build_targets(arch: ArchConfig, labels_per_sample: Sequence[Sequence[TargetItem]]) -> TargetBundle:
    n = len(labels_per_sample)
    n_cells = arch.grid * arch.grid
    centers = cell_centers(arch)
    obj_target = np.zeros((n, n_cells), dtype=np.float64)
    pos_sample: list[int] = []
    pos_cell: list[int] = []
    pos_class: list[int] = []
    pos_offsets: list[np.ndarray] = []
    pos_weight: list[float] = []
    for k, labels in enumerate(labels_per_sample):
        if not labels:
            continue
        corners = np.array([to_corners(box) for _, box in labels])  # (M, 4)
        areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
        px, py = centers[:, 0:1], centers[:, 1:2]
        contains = (
            (px >= corners[:, 0])
            & (px <= corners[:, 2])
            & (py >= corners[:, 1])
            & (py <= corners[:, 3])
        )  # (n_cells, M)
        masked = np.where(contains, areas, np.inf)
        owner = np.argmin(masked, axis=1)
        is_pos = contains[np.arange(n_cells), owner]
        cells = np.nonzero(is_pos)[0]
        if cells.size == 0:
            continue
        own = owner[cells]
        obj_target[k, cells] = 1.0
        weight = 1.0 / cells.size
        for cell, m in zip(cells, own):
            cx0, cy0, cx1, cy1 = corners[m]
            px_c, py_c = centers[cell]
            pos_sample.append(k)
            pos_cell.append(int(cell))
            pos_class.append(labels[m][0])
            pos_offsets.append(np.array([px_c - cx0, py_c - cy0, cx1 - px_c, cy1 - py_c]))
            pos_weight.append(weight)
    return TargetBundle(
        n_samples=n,
        obj_target=obj_target,
        pos_sample=np.array(pos_sample, dtype=np.int64),
        pos_cell=np.array(pos_cell, dtype=np.int64),
        pos_class=np.array(pos_class, dtype=np.int64),
        pos_offsets=np.array(pos_offsets, dtype=np.float64).reshape(-1, 4),
        pos_weight=np.array(pos_weight, dtype=np.float64),
    )


def _loss_and_dheads(
    arch: ArchConfig, heads: _Heads, bundle: TargetBundle
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-mean loss for one target set plus gradients w.r.t. head outputs."""
    n, n_cells = heads.obj.shape
    if bundle.n_samples != n:
        raise ConfigurationError("target bundle does not match the sample stack")

    # Objectness BCE over every cell, averaged over cells and samples.
    z = heads.obj
    t = bundle.obj_target
    bce = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss_obj = float(bce.mean())
    d_obj = (_sigmoid(z) - t) / (n * n_cells)

    d_cls = np.zeros_like(heads.cls)
    d_box_raw = np.zeros_like(heads.box_raw)
    loss_cls = 0.0
    loss_box = 0.0
    if bundle.pos_sample.size:
        ks, cs = bundle.pos_sample, bundle.pos_cell
        w = bundle.pos_weight / n

        zp = heads.cls[ks, cs]  # (P, K)
        zmax = zp.max(axis=1, keepdims=True)
        expz = np.exp(zp - zmax)
        lse = zmax[:, 0] + np.log(expz.sum(axis=1))
        correct = zp[np.arange(zp.shape[0]), bundle.pos_class]
        loss_cls = float(np.sum((lse - correct) * w))
        softmax = expz / expz.sum(axis=1, keepdims=True)
        d_pos = softmax * w[:, None]
        d_pos[np.arange(zp.shape[0]), bundle.pos_class] -= w
        d_cls[ks, cs] = d_pos

        diff = heads.offsets[ks, cs] - bundle.pos_offsets
        absdiff = np.abs(diff)
        huber = np.where(absdiff < 1.0, 0.5 * diff**2, absdiff - 0.5)
        loss_box = float(np.sum(huber.sum(axis=1) * w))
        d_off = np.clip(diff, -1.0, 1.0) * w[:, None]
        d_box_raw[ks, cs] = d_off * _sigmoid(heads.box_raw[ks, cs]) * arch.offset_scale

    return loss_obj + loss_cls + loss_box, d_cls, d_obj, d_box_raw


@dataclass
class BatchLossResult:
    total: float  # sum of weight * per-set loss
    per_set: list  # unweighted loss per target set
    grad: ParamVector  # gradient of `total`


def batch_loss(
    params: ParamVector,
    arch: ArchConfig,
    pixels: np.ndarray,
    target_sets: Sequence[tuple[float, TargetBundle]],
) -> BatchLossResult:
    """Weighted multi-target loss over a sample stack with one shared forward.

    Each target set contributes `weight * loss(set)` to the total; sets
    with weight exactly 0 still report their loss but add nothing to the
    gradient. The gradient is for the batch-mean total, accumulated in
    the listed set order.
    """
    cache, heads = _forward_stack(params, arch, pixels)
    d_cls = np.zeros_like(heads.cls)
    d_obj = np.zeros_like(heads.obj)
    d_box_raw = np.zeros_like(heads.box_raw)
    per_set: list[float] = []
    total = 0.0
    for weight, bundle in target_sets:
        loss, g_cls, g_obj, g_box = _loss_and_dheads(arch, heads, bundle)
        per_set.append(loss)
        total += weight * loss
        if weight != 0.0:
            d_cls += weight * g_cls
            d_obj += weight * g_obj
            d_box_raw += weight * g_box
    if not np.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss {total!r}")
    grad = _backward_stack(params, arch, cache, d_cls, d_obj, d_box_raw)
    if not np.all(np.isfinite(grad.values)):
        raise NonFiniteLossError("non-finite gradient")
    return BatchLossResult(total=total, per_set=per_set, grad=grad)


def forward(params: ParamVector, sample: SceneSample, arch: ArchConfig) -> DetectorOutput:
    """Per-cell predictions for one scene; pure function."""
    _, heads = _forward_stack(params, arch, sample.pixels[None, ...])
    g, k = arch.grid, arch.num_classes
    return DetectorOutput(
        cls_logits=heads.cls[0].reshape(g, g, k),
        objectness=heads.obj[0].reshape(g, g),
        offsets=heads.offsets[0].reshape(g, g, 4),
    )


def supervised_loss(
    params: ParamVector,
    sample: SceneSample,
    labels: Sequence[GroundTruthObject],
    arch: ArchConfig,
) -> tuple[float, ParamVector]:
    """Loss and exact gradient against ground-truth objects."""
    bundle = build_targets(arch, [targets_from_objects(labels)])
    result = batch_loss(params, arch, sample.pixels[None, ...], [(1.0, bundle)])
    return result.per_set[0], result.grad


def unsupervised_loss(
    params: ParamVector,
    sample_strong: SceneSample,
    pseudo: Sequence[Detection],
    arch: ArchConfig,
) -> tuple[float, ParamVector]:
    """Same functional form as `supervised_loss` with pseudo-labels as targets."""
    bundle = build_targets(arch, [targets_from_detections(pseudo)])
    result = batch_loss(params, arch, sample_strong.pixels[None, ...], [(1.0, bundle)])
    return result.per_set[0], result.grad


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def decode(output: DetectorOutput, score_threshold: float, nms_iou: float, arch: ArchConfig) -> DetectionSet:
    """Threshold per-cell scores, build boxes, run greedy NMS.

    Score is objectness probability times the best class probability.
    Candidates are ordered by (score desc, row-major cell asc); a kept
    detection suppresses later ones overlapping it with IoU > nms_iou.
    """
    if not 0.0 <= score_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ConfigurationError("decode thresholds must lie in [0, 1]")
    g = arch.grid
    n_cells = g * g
    cls = output.cls_logits.reshape(n_cells, arch.num_classes)
    obj = output.objectness.reshape(n_cells)
    offsets = output.offsets.reshape(n_cells, 4)

    zmax = cls.max(axis=1, keepdims=True)
    expz = np.exp(cls - zmax)
    probs = expz / expz.sum(axis=1, keepdims=True)
    best_class = np.argmax(probs, axis=1)
    scores = _sigmoid(obj) * probs[np.arange(n_cells), best_class]

    cells = np.nonzero(scores >= score_threshold)[0]
    if cells.size == 0:
        return []
    # Sort by (score desc, cell asc); lexsort keys are minor-to-major.
    cells = cells[np.lexsort((cells, -scores[cells]))]

    centers = cell_centers(arch)
    size = float(arch.image_size)
    px, py = centers[cells, 0], centers[cells, 1]
    off = offsets[cells]
    x0 = np.maximum(px - off[:, 0], 0.0)
    y0 = np.maximum(py - off[:, 1], 0.0)
    x1 = np.minimum(px + off[:, 2], size)
    y1 = np.minimum(py + off[:, 3], size)
    areas = (x1 - x0) * (y1 - y0)

    alive = np.ones(cells.size, dtype=bool)
    kept_idx = []
    zero = np.float64(0.0)
    for i in range(cells.size):
        if not alive[i]:
            continue
        kept_idx.append(i)
        iw = np.maximum(np.minimum(x1[i], x1) - np.maximum(x0[i], x0), zero)
        ih = np.maximum(np.minimum(y1[i], y1) - np.maximum(y0[i], y0), zero)
        inter = iw * ih
        overlap = inter / (areas[i] + areas - inter)
        alive &= ~(overlap > nms_iou)
        alive[i] = False
    return [
        Detection(
            class_id=int(best_class[cells[i]]),
            score=float(scores[cells[i]]),
            box=from_corners(float(x0[i]), float(y0[i]), float(x1[i]), float(y1[i])),
            cell=int(cells[i]),
        )
        for i in kept_idx
    ]


def decode_stack(
    params: ParamVector, arch: ArchConfig, pixels: np.ndarray, cfg: DecodeConfig
) -> list[DetectionSet]:
    """forward + decode for a stack of scenes (one shared forward pass)."""
    _, heads = _forward_stack(params, arch, pixels)
    g, k = arch.grid, arch.num_classes
    out = []
    for i in range(pixels.shape[0]):
        output = DetectorOutput(
            cls_logits=heads.cls[i].reshape(g, g, k),
            objectness=heads.obj[i].reshape(g, g),
            offsets=heads.offsets[i].reshape(g, g, 4),
        )
        out.append(decode(output, cfg.score_threshold, cfg.nms_iou, arch))
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: magic "D3T1", u32 length of the canonical arch JSON,
# the JSON bytes, then the flat float32 little-endian value array.
# float64 weights are rounded to float32 on save; save(load(path)) is
# byte-identical.
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ParamVector, arch: ArchConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch_json = arch.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(arch_json)))
        f.write(arch_json)
        f.write(params.values.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamVector, ArchConfig]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (json_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + json_len:
        raise CheckpointError(f"{path}: truncated arch header")
    arch = ArchConfig.from_json(raw[8 : 8 + json_len].decode("utf-8"))
    layout, total = build_layout(arch)
    body = raw[8 + json_len :]
    if len(body) != 4 * total:
        raise CheckpointError(f"{path}: expected {4 * total} value bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return ParamVector(values=values, layout=layout), arch


def round_trip_f32(params: ParamVector) -> ParamVector:
    """Weights as they come back from a checkpoint (float32 rounding)."""
    return ParamVector(values=params.values.astype(np.float32).astype(np.float64), layout=params.layout)
