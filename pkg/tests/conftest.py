import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from raid import synthetic
from raid.database import build_database


@pytest.fixture
def tiny_spec():
    return synthetic.SyntheticSpec(
        num_classes=2,
        templates_per_class=4,
        grid_height=4,
        grid_width=4,
        dim=8,
        modes_per_class=2,
    )


@pytest.fixture
def tiny_db(tiny_spec):
    templates = synthetic.make_templates(tiny_spec, seed=1)
    return build_database(templates, num_classes=2, num_semantic_prototypes=3, seed=2)


@pytest.fixture
def tiny_templates(tiny_spec):
    return synthetic.make_templates(tiny_spec, seed=1)


def random_embedding(rng: np.random.Generator, h=3, w=3, d=5, image_id="img", label=None):
    from raid.types import TokenEmbeddingSet

    return TokenEmbeddingSet(
        image_id=image_id,
        cls_token=rng.normal(size=d).astype(np.float32),
        patch_tokens=rng.normal(size=(h, w, d)).astype(np.float32),
        source_height=32,
        source_width=32,
        class_label=label,
    )
