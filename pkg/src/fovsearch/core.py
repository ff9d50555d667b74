"""Shared domain types, action-grid geometry, dataset ingestion and binary formats.

Everything downstream (foveation, model, training, rollouts, metrics) works in a
canonical 320x512 pixel space discretized into a 20x32 action grid of 16x16 px
cells.  Scanpaths keep raw pixel coordinates; discretization only happens at the
model boundary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

IMAGE_H = 320
IMAGE_W = 512

# COCO-Search18 target categories, alphabetical.
TASKS = (
    "bottle", "bowl", "car", "chair", "clock", "cup", "fork", "keyboard",
    "knife", "laptop", "microwave", "mouse", "oven", "potted plant", "sink",
    "stop sign", "toilet", "tv",
)

# The 80 COCO "thing" categories in their conventional order; label-map pixel
# value k (1-based) refers to THING_CLASSES[k - 1].
THING_CLASSES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train",
    "truck", "boat", "traffic light", "fire hydrant", "stop sign",
    "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag",
    "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon",
    "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot",
    "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)


class SchemaError(ValueError):
    """A dataset record violates the scanpath JSON schema."""


class GridRangeError(ValueError):
    """A coordinate or action index falls outside the action grid."""


class ContainerError(IOError):
    """Base class for tensor-container format errors."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class Fixation(NamedTuple):
    x: float
    y: float


@dataclass
class Scanpath:
    """An ordered fixation sequence; the first entry is the initial fixation."""

    fixations: list[Fixation]
    terminated: bool = False

    def __len__(self):
        return len(self.fixations)

    def truncated(self, new_fixations: int) -> "Scanpath":
        """Keep the initial fixation plus at most `new_fixations` further ones."""
        return Scanpath(list(self.fixations[: new_fixations + 1]), self.terminated)


@dataclass
class SearchTrial:
    image_id: str
    task: str
    subject: int
    present: bool
    scanpath: Scanpath
    bbox: Optional[tuple[float, float, float, float]] = None  # x, y, w, h (pixels)
    split: str = "train"


@dataclass(frozen=True)
class ActionGrid:
    rows: int = 20
    cols: int = 32
    image_h: int = IMAGE_H
    image_w: int = IMAGE_W

    def __post_init__(self):
        if self.image_h % self.rows or self.image_w % self.cols:
            raise ValueError("grid must divide image dimensions exactly")

    @property
    def n_actions(self) -> int:
        return self.rows * self.cols

    @property
    def cell_h(self) -> float:
        return self.image_h / self.rows

    @property
    def cell_w(self) -> float:
        return self.image_w / self.cols


def fixation_to_action(f: Fixation, grid: ActionGrid = ActionGrid()) -> int:
    """Map a pixel fixation to its action index (half-open cells, floor rule)."""
    x, y = float(f[0]), float(f[1])
    if not (0 <= x < grid.image_w):
        raise GridRangeError(f"fixation x={x} outside [0, {grid.image_w})")
    if not (0 <= y < grid.image_h):
        raise GridRangeError(f"fixation y={y} outside [0, {grid.image_h})")
    row = int(y // grid.cell_h)
    col = int(x // grid.cell_w)
    return row * grid.cols + col


def action_to_fixation(a: int, grid: ActionGrid = ActionGrid()) -> Fixation:
    """Return the center of action cell `a`."""
    if not (0 <= a < grid.n_actions):
        raise GridRangeError(f"action index {a} outside [0, {grid.n_actions})")
    row, col = divmod(int(a), grid.cols)
    return Fixation((col + 0.5) * grid.cell_w, (row + 0.5) * grid.cell_h)


# ---------------------------------------------------------------------------
# Scanpath JSON ingestion
# ---------------------------------------------------------------------------

_VALID_SPLITS = ("train", "valid", "test")


def _require(record: dict, key: str, idx: int):
    if key not in record:
        raise SchemaError(f"record {idx}: missing field '{key}'")
    return record[key]


def load_trials(path, image_h: int = IMAGE_H, image_w: int = IMAGE_W) -> list[SearchTrial]:
    """Load search trials from a scanpath JSON file.

    Records with a ``source_size`` field have their coordinates rescaled to the
    canonical working resolution.  Unknown keys (e.g. duration "T" arrays) are
    ignored.
    """
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise SchemaError("top-level JSON value must be an array")

    trials = []
    for idx, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise SchemaError(f"record {idx}: not an object")
        image = _require(rec, "image", idx)
        task = _require(rec, "task", idx)
        subject = int(_require(rec, "subject", idx))
        present = bool(_require(rec, "present", idx))
        xs = _require(rec, "X", idx)
        ys = _require(rec, "Y", idx)
        split = _require(rec, "split", idx)
        if split not in _VALID_SPLITS:
            raise SchemaError(f"record {idx}: field 'split' must be one of {_VALID_SPLITS}")
        if len(xs) != len(ys):
            raise SchemaError(f"record {idx}: X/Y length mismatch ({len(xs)} vs {len(ys)})")
        if len(xs) < 1:
            raise SchemaError(f"record {idx}: field 'X' must hold at least one fixation")

        sx = sy = 1.0
        if rec.get("source_size") is not None:
            src_w, src_h = rec["source_size"]
            sx, sy = image_w / float(src_w), image_h / float(src_h)
        fixations = []
        for k, (x, y) in enumerate(zip(xs, ys)):
            x, y = float(x) * sx, float(y) * sy
            if not (0 <= x < image_w and 0 <= y < image_h):
                raise SchemaError(f"record {idx}: fixation {k} at ({x:.1f}, {y:.1f}) out of bounds")
            fixations.append(Fixation(x, y))

        bbox = rec.get("bbox")
        if bbox is not None:
            if not present:
                raise SchemaError(f"record {idx}: field 'bbox' set on a target-absent trial")
            if len(bbox) != 4:
                raise SchemaError(f"record {idx}: field 'bbox' must be [x, y, w, h]")
            bbox = (bbox[0] * sx, bbox[1] * sy, bbox[2] * sx, bbox[3] * sy)

        trials.append(SearchTrial(
            image_id=image,
            task=task,
            subject=subject,
            present=present,
            scanpath=Scanpath(fixations, bool(rec.get("terminated", False))),
            bbox=bbox,
            split=split,
        ))
    return trials


def save_trials(path, trials: Sequence[SearchTrial], predicted: bool = False):
    """Write trials in the canonical scanpath JSON layout."""
    records = []
    for t in trials:
        rec = {
            "image": t.image_id,
            "task": t.task,
            "subject": t.subject,
            "present": t.present,
            "X": [f.x for f in t.scanpath.fixations],
            "Y": [f.y for f in t.scanpath.fixations],
            "split": t.split,
            "terminated": t.scanpath.terminated,
        }
        if t.bbox is not None:
            rec["bbox"] = list(t.bbox)
        if predicted:
            rec["predicted"] = True
        records.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)


# ---------------------------------------------------------------------------
# FFMP / FFMW binary tensor containers
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic (4 bytes) | u32 version=1 | u32 count
#   per tensor: u16 name length | name UTF-8 | u8 ndim | u32 dims... | f32 data
# FFMW checkpoints append a trailing u64 training-step counter.

FFMP_MAGIC = b"FFMP"
FFMW_MAGIC = b"FFMW"
CONTAINER_VERSION = 1


def write_tensor_container(path, tensors: dict[str, np.ndarray], magic: bytes = FFMP_MAGIC,
                           step: Optional[int] = None):
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr).astype(np.float32, order="C", copy=False)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        if magic == FFMW_MAGIC:
            fh.write(struct.pack("<Q", 0 if step is None else int(step)))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated file while reading {what}")
    return buf


def read_tensor_container(path, magic: bytes = FFMP_MAGIC):
    """Read an FFMP container; returns a dict of float32 arrays.

    For FFMW checkpoints (magic == b"FFMW") returns ``(tensors, step)``.
    """
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4, "magic")
        if got != magic:
            raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CONTAINER_VERSION:
            raise VersionError(f"unsupported container version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            numel = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * numel, f"tensor '{name}'"),
                                 dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
        if magic == FFMW_MAGIC:
            (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step counter"))
            return tensors, step
    return tensors


# ---------------------------------------------------------------------------
# Feature pyramids
# ---------------------------------------------------------------------------

PYRAMID_STRIDES = (2, 4, 8, 16, 32)
PYRAMID_LEVEL_NAMES = ("C1", "C2", "C3", "C4", "C5")


@dataclass
class FeaturePyramid:
    """Five feature tensors at strides 2/4/8/16/32 relative to the input image."""

    levels: list[np.ndarray]
    image_h: int = IMAGE_H
    image_w: int = IMAGE_W
    strides: tuple[int, ...] = PYRAMID_STRIDES

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"expected 5 pyramid levels, got {len(self.levels)}")
        for lvl, stride in zip(self.levels, self.strides):
            want = (self.image_h // stride, self.image_w // stride)
            if lvl.shape[1:] != want:
                raise ValueError(f"level at stride {stride} has spatial dims "
                                 f"{lvl.shape[1:]}, expected {want}")

    @property
    def channel_counts(self) -> tuple[int, ...]:
        return tuple(lvl.shape[0] for lvl in self.levels)

    @property
    def base_dims(self) -> tuple[int, int]:
        return self.levels[0].shape[1:]


def load_pyramid(path, image_h: int = IMAGE_H, image_w: int = IMAGE_W) -> FeaturePyramid:
    tensors = read_tensor_container(path)
    missing = [n for n in PYRAMID_LEVEL_NAMES if n not in tensors]
    if missing:
        raise SchemaError(f"pyramid container {path} missing levels {missing}")
    return FeaturePyramid([tensors[n] for n in PYRAMID_LEVEL_NAMES],
                          image_h=image_h, image_w=image_w)


def save_pyramid(path, pyramid: FeaturePyramid):
    write_tensor_container(path, dict(zip(PYRAMID_LEVEL_NAMES, pyramid.levels)))


# ---------------------------------------------------------------------------
# Segmentation label maps
# ---------------------------------------------------------------------------

def load_label_map(path, image_h: int = IMAGE_H, image_w: int = IMAGE_W) -> np.ndarray:
    """Load an 8-bit grayscale label-map PNG (0 = background, 1..80 = category)."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.uint8)
    if arr.shape != (image_h, image_w):
        raise SchemaError(f"label map {path} has shape {arr.shape}, "
                          f"expected {(image_h, image_w)}")
    if arr.max(initial=0) > len(THING_CLASSES):
        raise SchemaError(f"label map {path} holds values above {len(THING_CLASSES)}")
    return arr


def save_category_table(path):
    """Write the JSON sidecar mapping label values to category names."""
    table = {str(i + 1): name for i, name in enumerate(THING_CLASSES)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1)
