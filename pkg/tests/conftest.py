import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trapline.core import BoundingBox, Detection, SpeciesLabel
from trapline.metrics import GroundTruth, ImageSample


def make_box(x1, y1, x2, y2):
    return BoundingBox(x1, y1, x2, y2)

def make_det(name, score, box):
    return Detection(SpeciesLabel(name), score, box)

def make_truth(name, box):
    return GroundTruth(SpeciesLabel(name), box)


def random_box(rng: random.Random, lo=0.0, hi=100.0, grid=None) -> BoundingBox:
    """A valid random box; with `grid` the corners snap to multiples of it."""
    if grid:
        x1 = rng.randrange(0, int(hi) - grid, grid)
        y1 = rng.randrange(0, int(hi) - grid, grid)
        x2 = rng.randrange(x1 + grid, int(hi), grid)
        y2 = rng.randrange(y1 + grid, int(hi), grid)
        return BoundingBox(float(x1), float(y1), float(x2), float(y2))
    x1 = rng.uniform(lo, hi - 2)
    y1 = rng.uniform(lo, hi - 2)
    return BoundingBox(x1, y1, x1 + rng.uniform(1, hi - x1), y1 + rng.uniform(1, hi - y1))


def random_scene(rng: random.Random, labels=("Pica pica", "Erithacus rubecula", "Passer domesticus"),
                 max_images=5, max_boxes=4) -> list[ImageSample]:
    """A small randomized evaluation scene with overlapping boxes and score ties."""
    samples = []
    for i in range(rng.randint(1, max_images)):
        truths = [
            make_truth(rng.choice(labels), random_box(rng, grid=10))
            for _ in range(rng.randint(0, max_boxes))
        ]
        detections = []
        for _ in range(rng.randint(0, max_boxes)):
            # half the detections perturb an existing truth so matches occur
            if truths and rng.random() < 0.5:
                base = rng.choice(truths)
                shift = rng.choice([0.0, 2.0, 5.0, 12.0])
                box = BoundingBox(base.box.xmin + shift, base.box.ymin + shift,
                                  base.box.xmax + shift, base.box.ymax + shift)
                name = base.label.canonical_name if rng.random() < 0.8 else rng.choice(labels)
            else:
                box = random_box(rng, grid=10)
                name = rng.choice(labels)
            score = round(rng.random(), 2)  # coarse scores force tie-breaking
            detections.append(make_det(name, score, box))
        samples.append(ImageSample(image_id=f"img-{i}", truths=truths, detections=detections))
    return samples


@pytest.fixture
def rng():
    return random.Random(20230305)
