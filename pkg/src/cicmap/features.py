"""Local descriptors and the slide patch grid.

A slide is represented by the set of its keypoint descriptors, bucketed into
a grid of square patches. Records are kept in canonical order (raster order
of patches, row-major with Y before X, input order preserved within a patch)
so that downstream stages that are order-sensitive see one well-defined
sequence.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputFormatError, ValidationError

DESCRIPTOR_DIM = 128
COMPONENT_MAX = 255.0
DEFAULT_PATCH_SIZE = 512

CSV_HEADER = ["slide_id", "x", "y"] + [f"d{i}" for i in range(DESCRIPTOR_DIM)]


def patch_index(x: int, y: int, patch_size: int) -> tuple[int, int]:
    """Grid cell (X, Y) of the patch containing pixel (x, y)."""
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if x < 0 or y < 0:
        raise ValueError(f"pixel coordinates must be non-negative, got ({x}, {y})")
    return int(x) // int(patch_size), int(y) // int(patch_size)


def grid_dims(width: int, height: int, patch_size: int) -> tuple[int, int]:
    """Number of patch columns and rows covering a width x height slide."""
    if width <= 0 or height <= 0:
        raise ValueError(f"slide dimensions must be positive, got {width}x{height}")
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    return -(-int(width) // int(patch_size)), -(-int(height) // int(patch_size))


def as_descriptor_matrix(values, *, copy: bool = False) -> np.ndarray:
    """Validate and return descriptors as an (n, 128) float array.

    Accepts a single descriptor (shape (128,)) or a batch. Checks the value
    contract: every component in [0, 255].
    """
    arr = np.array(values, copy=copy) if copy else np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != DESCRIPTOR_DIM:
        raise ValidationError(
            f"descriptors must have {DESCRIPTOR_DIM} components, got shape {arr.shape}"
        )
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > COMPONENT_MAX):
        raise ValidationError(
            f"descriptor components must be finite and in [0, {COMPONENT_MAX:g}]"
        )
    return arr


@dataclass(frozen=True)
class KeypointRecord:
    """One keypoint: pixel position plus its 128-component descriptor."""

    x: int
    y: int
    descriptor: np.ndarray


@dataclass
class SlideDescriptorSet:
    """All keypoint descriptors of one slide, bucketed into its patch grid.

    Arrays are parallel (``xs[i]``, ``ys[i]``, ``descriptors[i]`` form one
    record) and already in canonical order. Instances are treated as
    immutable after construction and are safe to share between threads.
    """

    slide_id: str
    width_px: int
    height_px: int
    patch_size_px: int
    xs: np.ndarray
    ys: np.ndarray
    descriptors: np.ndarray
    bucket_bounds: dict[tuple[int, int], tuple[int, int]] = field(repr=False)

    @classmethod
    def build(
        cls,
        slide_id: str,
        width_px: int,
        height_px: int,
        xs,
        ys,
        descriptors,
        patch_size_px: int = DEFAULT_PATCH_SIZE,
    ) -> "SlideDescriptorSet":
        """Canonicalize record order, bucket by patch, and validate invariants."""
        if width_px <= 0 or height_px <= 0:
            raise ValidationError(f"slide dimensions must be positive, got {width_px}x{height_px}")
        if patch_size_px <= 0:
            raise ValueError(f"patch_size_px must be positive, got {patch_size_px}")

        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        desc = descriptors if isinstance(descriptors, np.ndarray) else np.asarray(descriptors)
        if desc.ndim != 2 or desc.shape[1] != DESCRIPTOR_DIM:
            desc = as_descriptor_matrix(desc)
        if not (len(xs) == len(ys) == len(desc)):
            raise ValidationError("xs, ys and descriptors must have equal length")
        if len(xs):
            if xs.min() < 0 or ys.min() < 0:
                raise ValidationError("keypoint coordinates must be non-negative")
            if xs.max() >= width_px or ys.max() >= height_px:
                raise ValidationError("keypoint coordinates must lie inside the slide")

        px = xs // patch_size_px
        py = ys // patch_size_px
        # Stable sort: patch row major, then patch column, input order within a patch.
        order = np.lexsort((px, py))
        xs = xs[order]
        ys = ys[order]
        desc = desc[order]
        px = px[order]
        py = py[order]

        bounds: dict[tuple[int, int], tuple[int, int]] = {}
        if len(xs):
            key = py * (1 + px.max()) + px
            change = np.flatnonzero(np.diff(key)) + 1
            starts = np.concatenate(([0], change))
            stops = np.concatenate((change, [len(xs)]))
            for s, e in zip(starts, stops):
                bounds[(int(px[s]), int(py[s]))] = (int(s), int(e))

        return cls(
            slide_id=slide_id,
            width_px=int(width_px),
            height_px=int(height_px),
            patch_size_px=int(patch_size_px),
            xs=xs,
            ys=ys,
            descriptors=desc,
            bucket_bounds=bounds,
        )

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def grid_cols(self) -> int:
        return grid_dims(self.width_px, self.height_px, self.patch_size_px)[0]

    @property
    def grid_rows(self) -> int:
        return grid_dims(self.width_px, self.height_px, self.patch_size_px)[1]

    def patch_descriptors(self, x: int, y: int) -> np.ndarray:
        """Descriptor block of patch (X, Y); empty array if the patch has none."""
        bounds = self.bucket_bounds.get((x, y))
        if bounds is None:
            return self.descriptors[:0]
        return self.descriptors[bounds[0]:bounds[1]]

    def patch_count(self, x: int, y: int) -> int:
        bounds = self.bucket_bounds.get((x, y))
        return 0 if bounds is None else bounds[1] - bounds[0]

    def patch_count_grid(self) -> np.ndarray:
        """(rows, cols) array of descriptor counts per patch."""
        counts = np.zeros((self.grid_rows, self.grid_cols), dtype=np.int64)
        for (x, y), (s, e) in self.bucket_bounds.items():
            counts[y, x] = e - s
        return counts

    def records(self) -> list[KeypointRecord]:
        return [
            KeypointRecord(int(self.xs[i]), int(self.ys[i]), self.descriptors[i])
            for i in range(len(self.xs))
        ]


@dataclass(frozen=True)
class ExtractionConfig:
    """Dense-grid extraction parameters. Window side is 4 * cell_px."""

    stride_px: int = 8
    cell_px: int = 4
    patch_size_px: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if self.stride_px <= 0 or self.cell_px <= 0 or self.patch_size_px <= 0:
            raise ValueError("stride_px, cell_px and patch_size_px must be positive")


def extract_descriptors(
    image: np.ndarray,
    config: ExtractionConfig = ExtractionConfig(),
    slide_id: str = "slide",
) -> SlideDescriptorSet:
    """Extract dense-grid gradient-histogram descriptors from a grayscale raster.

    Keypoints lie on a regular grid with the configured stride; each keypoint
    covers a 4x4 grid of square cells and yields 8 gradient-orientation bins
    per cell (128 values), L2-normalized and scaled to [0, 255]. Keypoints
    whose window has zero gradient energy are dropped. Deterministic: the
    same image and config always produce the identical descriptor set.
    """
    if not isinstance(image, np.ndarray) or image.ndim != 2:
        raise InputFormatError("expected a 2-D grayscale raster")
    if image.dtype != np.uint8:
        raise InputFormatError(f"expected an 8-bit raster, got dtype {image.dtype}")
    if image.size == 0:
        raise InputFormatError("empty raster")

    h, w = image.shape
    win = 4 * config.cell_px
    gy, gx = np.gradient(image.astype(np.float64))
    mag = np.hypot(gx, gy)
    # 8 orientation bins over [0, 2*pi); zero-magnitude pixels contribute nothing.
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    bins = np.minimum((theta / (np.pi / 4.0)).astype(np.int64), 7)

    xs: list[int] = []
    ys: list[int] = []
    descs: list[np.ndarray] = []
    c = config.cell_px
    for top in range(0, h - win + 1, config.stride_px):
        for left in range(0, w - win + 1, config.stride_px):
            vec = np.empty(DESCRIPTOR_DIM, dtype=np.float64)
            k = 0
            for cy in range(4):
                for cx in range(4):
                    sl = (
                        slice(top + cy * c, top + (cy + 1) * c),
                        slice(left + cx * c, left + (cx + 1) * c),
                    )
                    vec[k:k + 8] = np.bincount(
                        bins[sl].ravel(), weights=mag[sl].ravel(), minlength=8
                    )
                    k += 8
            norm = math.sqrt(float(vec @ vec))
            if norm == 0.0:
                continue
            vec *= COMPONENT_MAX / norm
            xs.append(left + 2 * c)
            ys.append(top + 2 * c)
            descs.append(vec)

    desc = np.vstack(descs) if descs else np.empty((0, DESCRIPTOR_DIM), dtype=np.float64)
    return SlideDescriptorSet.build(
        slide_id, w, h, np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
        desc, patch_size_px=config.patch_size_px,
    )


def ingest_descriptors(
    source,
    patch_size_px: int = DEFAULT_PATCH_SIZE,
    slide_id: str | None = None,
    width_px: int | None = None,
    height_px: int | None = None,
) -> SlideDescriptorSet:
    """Read a descriptor CSV (header ``slide_id,x,y,d0,...,d127``) into a slide set.

    ``source`` is a path or an open text stream. Slide dimensions default to
    the smallest box containing all keypoints (one patch for an empty file).
    Raises InputFormatError for malformed rows (with the line number) and
    ValidationError for out-of-range values.
    """
    if hasattr(source, "read"):
        return _ingest_stream(source, patch_size_px, slide_id, width_px, height_px)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _ingest_stream(fh, patch_size_px, slide_id, width_px, height_px)


def _ingest_stream(stream, patch_size_px, slide_id, width_px, height_px):
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise InputFormatError("missing header", line=1) from None
    if header != CSV_HEADER:
        raise InputFormatError(
            f"bad header: expected 'slide_id,x,y,d0,...,d127', got {','.join(header[:4])}...",
            line=1,
        )

    xs: list[int] = []
    ys: list[int] = []
    rows: list[list[float]] = []
    file_slide_id = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise InputFormatError(
                f"expected {len(CSV_HEADER)} fields, got {len(row)}", line=lineno
            )
        if file_slide_id is None:
            file_slide_id = row[0]
        elif row[0] != file_slide_id:
            raise ValidationError(
                f"mixed slide ids ({file_slide_id!r} vs {row[0]!r})", line=lineno
            )
        try:
            x = int(row[1])
            y = int(row[2])
            comps = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise InputFormatError(str(exc), line=lineno) from None
        if x < 0 or y < 0:
            raise ValidationError(f"negative keypoint coordinate ({x}, {y})", line=lineno)
        bad = next(
            (v for v in comps if not math.isfinite(v) or v < 0.0 or v > COMPONENT_MAX), None
        )
        if bad is not None:
            raise ValidationError(
                f"descriptor component {bad!r} outside [0, {COMPONENT_MAX:g}]", line=lineno
            )
        xs.append(x)
        ys.append(y)
        rows.append(comps)

    if slide_id is None:
        slide_id = file_slide_id if file_slide_id is not None else "unknown"
    if width_px is None:
        width_px = (max(xs) + 1) if xs else patch_size_px
    if height_px is None:
        height_px = (max(ys) + 1) if ys else patch_size_px
    desc = (
        np.array(rows, dtype=np.float64)
        if rows
        else np.empty((0, DESCRIPTOR_DIM), dtype=np.float64)
    )
    return SlideDescriptorSet.build(
        slide_id, width_px, height_px,
        np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
        desc, patch_size_px=patch_size_px,
    )


def write_descriptors(slide: SlideDescriptorSet, target) -> None:
    """Write a slide's records to descriptor CSV in canonical order (UTF-8, LF)."""
    if hasattr(target, "write"):
        _write_stream(slide, target)
        return
    with open(target, "w", encoding="utf-8", newline="") as fh:
        _write_stream(slide, fh)


def _write_stream(slide: SlideDescriptorSet, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i in range(len(slide)):
        row = [slide.slide_id, str(int(slide.xs[i])), str(int(slide.ys[i]))]
        row.extend(repr(float(v)) for v in slide.descriptors[i])
        writer.writerow(row)


def descriptors_to_csv_text(slide: SlideDescriptorSet) -> str:
    buf = io.StringIO()
    _write_stream(slide, buf)
    return buf.getvalue()
