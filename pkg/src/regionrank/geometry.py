"""Patch-grid geometry and bounding-box arithmetic.

A vision encoder splits a square input image of side ``input_side`` into a
``grid_side`` x ``grid_side`` grid of square patches, indexed in raster-scan
order (row by row, left to right).  OCR bounding boxes live in page pixel
coordinates and are rescaled into the model's input space before any
patch-level reasoning.  Everything here is pure float arithmetic with no
dependency on the scoring layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PatchGrid:
    """Square patch grid of a fixed-resolution vision encoder.

    Attributes:
        grid_side: Number of patches per axis.
        input_side: Model input resolution in pixels.  Must be an exact
            multiple of ``grid_side`` so patches tile the input.
    """

    grid_side: int
    input_side: int

    def __post_init__(self) -> None:
        if self.grid_side < 1:
            raise ValueError(f"grid_side must be >= 1, got {self.grid_side}")
        if self.input_side < 1:
            raise ValueError(f"input_side must be >= 1, got {self.input_side}")
        if self.input_side % self.grid_side != 0:
            raise ValueError(
                f"input_side {self.input_side} is not a multiple of "
                f"grid_side {self.grid_side}"
            )

    @property
    def patch_side(self) -> int:
        """Side length of one patch in pixels."""
        return self.input_side // self.grid_side

    @property
    def patch_count(self) -> int:
        """Total number of patches in the grid."""
        return self.grid_side * self.grid_side


# Default geometry of the reference encoder: 32x32 patches over a 448px input.
DEFAULT_GRID = PatchGrid(grid_side=32, input_side=448)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``(x1, y1, x2, y2)`` with x1 <= x2 and y1 <= y2.

    Coordinates are non-negative reals.  Zero-area boxes are permitted and
    flagged via :attr:`is_degenerate`; they arise naturally when a box is
    clamped against the image border.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not all(
            math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)
        ):
            raise ValueError(f"bbox coordinates must be finite, got {self}")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"bbox coordinates must be non-negative, got {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"bbox must satisfy x1 <= x2 and y1 <= y2, got {self}")

    @classmethod
    def from_sequence(cls, values) -> "BBox":
        """Builds a box from a length-4 sequence ``[x1, y1, x2, y2]``."""
        vals = list(values)
        if len(vals) != 4:
            raise ValueError(f"bbox needs exactly 4 coordinates, got {len(vals)}")
        return cls(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class PatchCoverage:
    """Overlap of one grid patch with a region box.

    Attributes:
        patch_index: Raster-scan index of the patch.
        overlap_fraction: Fraction of the patch's area inside the region,
            in (0, 1].
        iou: Intersection over union between the patch and the region.
    """

    patch_index: int
    overlap_fraction: float
    iou: float


def patch_bbox(index: int, grid: PatchGrid) -> BBox:
    """Returns the box of patch ``index`` in model input coordinates.

    Patches are indexed in raster-scan order: ``row = index // grid_side``,
    ``col = index % grid_side``.
    """
    if not 0 <= index < grid.patch_count:
        raise ValueError(
            f"patch index {index} outside [0, {grid.patch_count})"
        )
    row, col = divmod(index, grid.grid_side)
    s = grid.patch_side
    return BBox(col * s, row * s, (col + 1) * s, (row + 1) * s)


def scale_bbox(box: BBox, page_width: float, page_height: float, grid: PatchGrid) -> BBox:
    """Rescales a page-space box into model input space.

    Each axis is scaled by ``input_side / page_extent`` and clamped to
    ``[0, input_side]``, so boxes that stick past the page border (a common
    OCR artifact) are cropped rather than rejected.

    Args:
        box: Box in page pixel coordinates.
        page_width: Page width in pixels, > 0.
        page_height: Page height in pixels, > 0.
        grid: Target grid supplying the input resolution.

    Returns:
        The scaled, clamped box.  May be degenerate if the input box lies
        entirely outside the page.
    """
    if page_width <= 0 or page_height <= 0:
        raise ValueError(
            f"page dimensions must be positive, got {page_width}x{page_height}"
        )
    side = float(grid.input_side)
    fx = side / page_width
    fy = side / page_height

    def clamp(v: float) -> float:
        return min(max(v, 0.0), side)

    return BBox(
        clamp(box.x1 * fx), clamp(box.y1 * fy), clamp(box.x2 * fx), clamp(box.y2 * fy)
    )


def intersection_area(a: BBox, b: BBox) -> float:
    """Area of the intersection of two boxes, 0.0 when disjoint."""
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Defined as 0.0 when the union has zero area (two degenerate boxes), so
    the result always lies in [0, 1].
    """
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def covered(region: BBox, grid: PatchGrid, min_overlap: float = 0.0) -> list[PatchCoverage]:
    """Finds the grid patches that a region overlaps.

    A patch is covered when its overlap fraction (intersection area divided
    by patch area) is strictly positive and at least ``min_overlap``.  Only
    the patch rows and columns spanned by the region are visited, so cost is
    proportional to the covered span rather than the full grid.

    Args:
        region: Region box in model input coordinates (already scaled).
        grid: Patch grid.
        min_overlap: Minimum overlap fraction in [0, 1] for a patch to count.

    Returns:
        Coverage entries in ascending patch-index order.  Empty for a
        degenerate region.
    """
    if not 0.0 <= min_overlap <= 1.0:
        raise ValueError(f"min_overlap must be in [0, 1], got {min_overlap}")
    if region.is_degenerate:
        return []

    s = grid.patch_side
    n = grid.grid_side
    col_lo = max(int(math.floor(region.x1 / s)), 0)
    col_hi = min(int(math.ceil(region.x2 / s)), n)
    row_lo = max(int(math.floor(region.y1 / s)), 0)
    row_hi = min(int(math.ceil(region.y2 / s)), n)

    patch_area = float(s * s)
    region_area = region.area
    out: list[PatchCoverage] = []
    for row in range(row_lo, row_hi):
        for col in range(col_lo, col_hi):
            patch = BBox(col * s, row * s, (col + 1) * s, (row + 1) * s)
            inter = intersection_area(region, patch)
            if inter <= 0.0:
                continue
            fraction = inter / patch_area
            if fraction < min_overlap:
                continue
            union = patch_area + region_area - inter
            out.append(
                PatchCoverage(
                    patch_index=row * n + col,
                    overlap_fraction=fraction,
                    iou=inter / union,
                )
            )
    return out


def area_efficiency_bound(width: float, height: float, patch_side: float) -> float:
    """Nominal area efficiency of covering a w x h region with s-sized patches.

    For a region of size w x h on a grid with patch side s, the covered patch
    set spans at most ``w + s`` by ``h + s`` when the region is favourably
    placed, giving an efficiency of ``(w * h) / ((w + s) * (h + s))``.  This
    is the standard figure of merit for how tightly region-aligned cropping
    can hug the evidence; larger regions waste proportionally less area.

    Note that an adversarially placed region can straddle one extra patch row
    and column, so the achieved efficiency of a specific placement may fall
    below this nominal value (it always stays above
    ``w * h / ((w + 2 s) * (h + 2 s))``).
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"region size must be positive, got {width}x{height}")
    if patch_side <= 0:
        raise ValueError(f"patch side must be positive, got {patch_side}")
    return (width * height) / ((width + patch_side) * (height + patch_side))
