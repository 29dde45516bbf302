import random

import pytest

from trapline.core import (
    BLANK,
    NO_GOOD,
    BoundingBox,
    CameraSource,
    Detection,
    QualityFlag,
    SpeciesLabel,
    box_area,
    normalize_label,
    validate_box,
)
from oracles import grid_cell_area


class TestBoxArea:
    def test_unit_square_scaling(self):
        assert box_area(BoundingBox(0, 0, 10, 10)) == 100

    def test_translation(self):
        assert box_area(BoundingBox(5, 5, 15, 15)) == 100

    def test_rectangle_matches_cell_count(self):
        # oracle: counting unit cells of the integer box gives 50
        assert grid_cell_area(0, 0, 10, 5) == 50
        assert box_area(BoundingBox(0, 0, 10, 5)) == 50

    def test_degenerate_raises(self):
        with pytest.raises(ValueError):
            box_area(BoundingBox(0, 0, 0, 10))
        with pytest.raises(ValueError):
            box_area(BoundingBox(3, 3, 10, 3))

    def test_translation_invariance_random(self, rng):
        for _ in range(200):
            x1, y1 = rng.uniform(0, 50), rng.uniform(0, 50)
            w, h = rng.uniform(0.5, 40), rng.uniform(0.5, 40)
            dx, dy = rng.uniform(-30, 30), rng.uniform(-30, 30)
            a = box_area(BoundingBox(x1, y1, x1 + w, y1 + h))
            b = box_area(BoundingBox(x1 + dx, y1 + dy, x1 + w + dx, y1 + h + dy))
            assert a == pytest.approx(b, abs=1e-9)


class TestValidateBox:
    def test_ok(self):
        assert validate_box(BoundingBox(0, 0, 10, 10), 100, 100) == []

    def test_inverted_x(self):
        violations = validate_box(BoundingBox(10, 10, 5, 20), 100, 100)
        assert any("xmax" in v for v in violations)

    def test_exceeds_width(self):
        violations = validate_box(BoundingBox(0, 0, 200, 10), 100, 100)
        assert any("width" in v for v in violations)

    def test_degenerate_and_negative(self):
        assert validate_box(BoundingBox(5, 0, 5, 10), 100, 100)
        assert validate_box(BoundingBox(-1, 0, 5, 10), 100, 100)

    def test_ok_implies_area_succeeds(self, rng):
        for _ in range(200):
            box = BoundingBox(rng.uniform(-5, 90), rng.uniform(-5, 90),
                              rng.uniform(0, 110), rng.uniform(0, 110))
            if not validate_box(box, 100, 100):
                assert box_area(box) > 0


class TestNormalizeLabel:
    def test_trims(self):
        assert normalize_label("  Pica pica ") == SpeciesLabel("Pica pica")

    def test_collapses_internal_whitespace(self):
        assert normalize_label("Pica  pica") == SpeciesLabel("Pica pica")

    def test_no_good_maps_to_quality_flag(self):
        assert normalize_label("no good") is NO_GOOD
        assert normalize_label("No  GOOD") is NO_GOOD
        assert isinstance(normalize_label("no good"), QualityFlag)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            normalize_label("   ")

    def test_idempotent(self):
        rng = random.Random(7)
        pieces = ["Pica", "pica", "Erithacus", "rubecula"]
        for _ in range(100):
            raw = ""
            for piece in rng.sample(pieces, rng.randint(1, 3)):
                raw += " " * rng.randint(0, 3) + piece
            raw += " " * rng.randint(0, 3)
            once = normalize_label(raw)
            assert normalize_label(once.canonical_name) == once


class TestDomainTypes:
    def test_detection_score_bounds(self):
        box = BoundingBox(0, 0, 1, 1)
        with pytest.raises(ValueError):
            Detection(SpeciesLabel("Pica pica"), 1.5, box)
        with pytest.raises(ValueError):
            Detection(SpeciesLabel("Pica pica"), -0.1, box)

    def test_detection_rejects_blank_label(self):
        with pytest.raises(ValueError):
            Detection(BLANK, 0.9, BoundingBox(0, 0, 1, 1))

    def test_blank_is_reserved(self):
        assert BLANK.is_blank
        assert not SpeciesLabel("Pica pica").is_blank

    def test_label_name_nonempty(self):
        with pytest.raises(ValueError):
            SpeciesLabel("")

    def test_camera_source_validation(self):
        cam = CameraSource("CAM-07", (1920, 1072), 96, "medium")
        assert cam.resolution == (1920, 1072)
        with pytest.raises(ValueError):
            CameraSource("CAM-07", (0, 1072), 96)
        with pytest.raises(ValueError):
            CameraSource("CAM-07", (1920, 1072), 96, "turbo")
