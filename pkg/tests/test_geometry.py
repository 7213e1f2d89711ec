"""Geometry: patch indexing, bbox scaling, coverage, efficiency bound."""

import math

import numpy as np
import pytest

from regionrank.geometry import (
    BBox,
    PatchGrid,
    area_efficiency_bound,
    covered,
    intersection_area,
    iou,
    patch_bbox,
    scale_bbox,
)

GRID = PatchGrid(32, 448)


def covered_oracle(region: BBox, grid: PatchGrid, min_overlap: float):
    """Checks every patch exhaustively with inline arithmetic."""
    s = grid.patch_side
    out = []
    for k in range(grid.patch_count):
        row, col = divmod(k, grid.grid_side)
        px1, py1 = col * s, row * s
        px2, py2 = px1 + s, py1 + s
        w = min(region.x2, px2) - max(region.x1, px1)
        h = min(region.y2, py2) - max(region.y1, py1)
        inter = w * h if (w > 0 and h > 0) else 0.0
        if inter <= 0:
            continue
        fraction = inter / (s * s)
        if fraction < min_overlap:
            continue
        union = s * s + region.area - inter
        out.append((k, fraction, inter / union))
    return out


def random_region(rng: np.random.Generator, grid: PatchGrid) -> BBox:
    """Mixes free-floating, patch-aligned, tiny, and edge-hugging boxes."""
    side = grid.input_side
    s = grid.patch_side
    kind = rng.integers(0, 4)
    if kind == 0:
        xs = np.sort(rng.uniform(0, side, 2))
        ys = np.sort(rng.uniform(0, side, 2))
    elif kind == 1:
        cols = np.sort(rng.integers(0, grid.grid_side + 1, 2))
        rows = np.sort(rng.integers(0, grid.grid_side + 1, 2))
        xs = cols * float(s)
        ys = rows * float(s)
    elif kind == 2:
        x = rng.uniform(0, side - s / 4)
        y = rng.uniform(0, side - s / 4)
        xs = np.array([x, x + rng.uniform(0, s / 4)])
        ys = np.array([y, y + rng.uniform(0, s / 4)])
    else:
        xs = np.array([0.0, rng.uniform(0, side)])
        ys = np.array([rng.uniform(0, side), float(side)])
    return BBox(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]))


class TestPatchGrid:
    def test_derived_sizes(self):
        assert GRID.patch_side == 14
        assert GRID.patch_count == 1024

    def test_rejects_non_divisible_input(self):
        with pytest.raises(ValueError, match="multiple"):
            PatchGrid(3, 448)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            PatchGrid(0, 448)
        with pytest.raises(ValueError):
            PatchGrid(32, 0)


class TestPatchBbox:
    def test_first_patch(self):
        assert patch_bbox(0, GRID) == BBox(0, 0, 14, 14)

    def test_second_row(self):
        # Raster order: index 33 is row 1, col 1.
        assert patch_bbox(33, GRID) == BBox(14, 14, 28, 28)

    def test_last_patch(self):
        assert patch_bbox(1023, GRID) == BBox(434, 434, 448, 448)

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="patch index"):
            patch_bbox(-1, GRID)
        with pytest.raises(ValueError, match="patch index"):
            patch_bbox(1024, GRID)

    def test_patches_tile_the_input(self):
        grid = PatchGrid(4, 448)
        boxes = [patch_bbox(k, grid) for k in range(grid.patch_count)]
        total = sum(box.area for box in boxes)
        assert total == grid.input_side**2
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert intersection_area(boxes[i], boxes[j]) == 0.0

    def test_index_recovers_row_col(self):
        for grid in (PatchGrid(1, 448), PatchGrid(2, 448), GRID):
            for k in range(grid.patch_count):
                box = patch_bbox(k, grid)
                col = int(box.x1 // grid.patch_side)
                row = int(box.y1 // grid.patch_side)
                assert row * grid.grid_side + col == k


class TestBBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError, match="x1 <= x2"):
            BBox(5, 0, 4, 10)

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            BBox(-1, 0, 4, 10)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            BBox(0, 0, math.inf, 10)

    def test_from_sequence_checks_length(self):
        with pytest.raises(ValueError, match="4 coordinates"):
            BBox.from_sequence([1, 2, 3])

    def test_degenerate_flag(self):
        assert BBox(3, 3, 3, 9).is_degenerate
        assert not BBox(3, 3, 4, 9).is_degenerate


class TestScaleBbox:
    def test_identity_when_page_matches_input(self):
        box = BBox(10, 20, 30, 40)
        assert scale_bbox(box, 448, 448, GRID) == box

    def test_halves_double_size_page(self):
        box = BBox(100, 200, 300, 400)
        scaled = scale_bbox(box, 896, 896, GRID)
        assert scaled == BBox(50, 100, 150, 200)

    def test_anisotropic_page(self):
        scaled = scale_bbox(BBox(0, 0, 612, 792), 612, 792, GRID)
        np.testing.assert_allclose(scaled.as_tuple(), (0, 0, 448, 448))

    def test_clamps_overhanging_box(self):
        # OCR box sticking past the right page edge gets cropped to the
        # input square; the width all but collapses.
        scaled = scale_bbox(BBox(612, 0, 620, 10), 612, 792, GRID)
        np.testing.assert_allclose(scaled.x1, 448.0)
        assert scaled.x2 == 448.0
        np.testing.assert_allclose(scaled.y2, 10 * 448 / 792)
        assert scaled.width < 1e-9

    def test_fully_outside_box_collapses_to_degenerate(self):
        scaled = scale_bbox(BBox(700, 0, 750, 10), 612, 792, GRID)
        assert scaled.x1 == 448.0 and scaled.x2 == 448.0
        assert scaled.is_degenerate

    def test_rejects_bad_page_dims(self):
        with pytest.raises(ValueError, match="positive"):
            scale_bbox(BBox(0, 0, 1, 1), 0, 100, GRID)

    def test_result_stays_in_input_square(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            width = rng.uniform(10, 4000)
            height = rng.uniform(10, 4000)
            xs = np.sort(rng.uniform(0, width * 1.2, 2))
            ys = np.sort(rng.uniform(0, height * 1.2, 2))
            box = BBox(xs[0], ys[0], xs[1], ys[1])
            scaled = scale_bbox(box, width, height, GRID)
            assert 0 <= scaled.x1 <= scaled.x2 <= 448
            assert 0 <= scaled.y1 <= scaled.y2 <= 448


class TestIoU:
    def test_identical(self):
        assert iou(BBox(1, 2, 5, 6), BBox(1, 2, 5, 6)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0

    def test_known_overlap(self):
        # 4x2 boxes overlapping on a 2x2 strip: 4 / (8 + 8 - 4).
        assert iou(BBox(0, 0, 4, 2), BBox(2, 0, 6, 2)) == pytest.approx(1 / 3)

    def test_corner_overlap(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_degenerate_pairs(self):
        line = BBox(0, 0, 0, 5)
        assert iou(line, line) == 0.0
        assert iou(line, BBox(0, 0, 5, 5)) == 0.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            a = random_region(rng, GRID)
            b = random_region(rng, GRID)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0


class TestCovered:
    def test_exact_patch(self):
        region = BBox(0, 0, 14, 14)
        result = covered(region, GRID)
        assert len(result) == 1
        entry = result[0]
        assert entry.patch_index == 0
        assert entry.overlap_fraction == 1.0
        assert entry.iou == 1.0

    def test_four_way_junction(self):
        # A patch-sized box centred on the meeting point of patches
        # 0, 1, 32, 33 covers a quarter of each.
        region = BBox(7, 7, 21, 21)
        result = covered(region, GRID)
        assert [c.patch_index for c in result] == [0, 1, 32, 33]
        for entry in result:
            assert entry.overlap_fraction == pytest.approx(0.25)
            assert entry.iou == pytest.approx(1 / 7)

    def test_min_overlap_threshold_is_inclusive(self):
        region = BBox(7, 7, 21, 21)
        assert len(covered(region, GRID, min_overlap=0.25)) == 4
        assert covered(region, GRID, min_overlap=0.3) == []

    def test_degenerate_region_covers_nothing(self):
        assert covered(BBox(10, 10, 10, 200), GRID) == []

    def test_full_page(self):
        result = covered(BBox(0, 0, 448, 448), GRID)
        assert len(result) == GRID.patch_count
        assert all(c.overlap_fraction == 1.0 for c in result)

    def test_rejects_bad_min_overlap(self):
        with pytest.raises(ValueError, match="min_overlap"):
            covered(BBox(0, 0, 14, 14), GRID, min_overlap=1.5)

    def test_indices_ascend_and_iou_bounded_by_fraction(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            region = random_region(rng, GRID)
            result = covered(region, GRID)
            indices = [c.patch_index for c in result]
            assert indices == sorted(indices)
            for entry in result:
                assert 0.0 < entry.overlap_fraction <= 1.0
                assert entry.iou <= entry.overlap_fraction + 1e-12

    @pytest.mark.parametrize(
        "grid", [PatchGrid(32, 448), PatchGrid(7, 448), PatchGrid(4, 448)]
    )
    def test_matches_exhaustive_oracle(self, grid):
        rng = np.random.default_rng(grid.grid_side)
        thresholds = [0.0, 0.1, 0.25, 0.5, 1.0]
        for i in range(200):
            region = random_region(rng, grid)
            min_overlap = thresholds[i % len(thresholds)]
            got = covered(region, grid, min_overlap)
            want = covered_oracle(region, grid, min_overlap)
            assert [c.patch_index for c in got] == [k for k, _, _ in want]
            np.testing.assert_allclose(
                [c.overlap_fraction for c in got],
                [f for _, f, _ in want],
                rtol=0, atol=1e-12,
            )
            np.testing.assert_allclose(
                [c.iou for c in got], [v for _, _, v in want], rtol=0, atol=1e-12
            )


class TestAreaEfficiencyBound:
    def test_reference_region_sizes(self):
        # Table-stakes sizes at patch side 14: a wide caption block, a
        # paragraph line, and a small cell.
        assert area_efficiency_bound(200, 50, 14) * 100 == pytest.approx(73, abs=0.5)
        assert area_efficiency_bound(100, 30, 14) * 100 == pytest.approx(60, abs=0.5)
        assert area_efficiency_bound(50, 20, 14) * 100 == pytest.approx(46, abs=0.5)

    def test_grows_with_region_size(self):
        values = [area_efficiency_bound(w, 30, 14) for w in (20, 50, 100, 400)]
        assert values == sorted(values)
        assert all(0 < v < 1 for v in values)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            area_efficiency_bound(0, 10, 14)
        with pytest.raises(ValueError):
            area_efficiency_bound(10, 10, 0)

    def test_achieved_efficiency_bounds(self):
        # Achieved efficiency (region area over covered patch area) never
        # exceeds 1 and always beats w*h / ((w+2s)(h+2s)): the covered span
        # per axis is strictly less than the extent plus two patch sides.
        rng = np.random.default_rng(23)
        s = GRID.patch_side
        for _ in range(300):
            w = rng.uniform(0.2 * s, 300.0)
            h = rng.uniform(0.2 * s, 300.0)
            x = rng.uniform(0, 448 - w)
            y = rng.uniform(0, 448 - h)
            region = BBox(x, y, x + w, y + h)
            n_covered = len(covered(region, GRID))
            efficiency = region.area / (n_covered * s * s)
            assert efficiency <= 1.0 + 1e-12
            assert efficiency > (w * h) / ((w + 2 * s) * (h + 2 * s)) - 1e-12

    def test_adversarial_placement_undershoots_nominal_bound(self):
        # A region of 1.5 patches squared, offset to straddle three rows and
        # columns, covers 9 patches: efficiency 0.25, below the nominal
        # (w*h)/((w+s)(h+s)) = 0.36.  The nominal figure describes favourable
        # placement, not a per-placement guarantee.
        s = GRID.patch_side
        region = BBox(0.9 * s, 0.9 * s, 2.4 * s, 2.4 * s)
        n_covered = len(covered(region, GRID))
        assert n_covered == 9
        efficiency = region.area / (n_covered * s * s)
        assert efficiency == pytest.approx(0.25)
        assert efficiency < area_efficiency_bound(1.5 * s, 1.5 * s, s)
