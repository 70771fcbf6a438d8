import json

import numpy as np
import pytest
from PIL import Image

CATEGORIES = [
    {"id": 1, "name": "cat"},
    {"id": 2, "name": "dog"},
    {"id": 3, "name": "car"},
    {"id": 5, "name": "truck"},
    {"id": 4, "name": "apple"},
]

# hand-made embeddings: cat~dog, car~truck, apple on its own
EMBEDDINGS = {
    "cat": [1.0, 0.9, 0.0, 0.0],
    "dog": [0.9, 1.0, 0.1, 0.0],
    "car": [0.0, 0.1, 1.0, 0.8],
    "truck": [0.0, 0.0, 0.8, 1.0],
    "apple": [0.2, 0.0, 0.1, -0.3],
}


def write_coco(root, images, annotations, categories=CATEGORIES, size=32, seed=0):
    """Write PNGs and a COCO file under ``root``; returns the annotation path."""
    rng = np.random.default_rng(seed)
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for img in images:
        pixels = rng.integers(0, 256, size=(img["height"], img["width"], 3), dtype=np.uint8)
        Image.fromarray(pixels).save(img_dir / img["file_name"])
    doc = {
        "info": {"description": "synthetic"},
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }
    path = root / "annotations.json"
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def four_image_fixture(root):
    images = [
        {"id": i, "file_name": f"im{i}.png", "width": 32, "height": 32} for i in (10, 11, 12, 13)
    ]
    annotations = [
        {"id": 1, "image_id": 10, "category_id": 1, "bbox": [4, 4, 10, 12], "area": 120.0, "iscrowd": 0,
         "segmentation": [[4, 4, 14, 4, 14, 16]]},
        {"id": 2, "image_id": 10, "category_id": 3, "bbox": [16, 8, 12, 12], "iscrowd": 0},
        {"id": 3, "image_id": 11, "category_id": 2, "bbox": [8, 8, 16, 16], "iscrowd": 0},
        {"id": 4, "image_id": 11, "category_id": 4, "bbox": [0, 0, 4, 4], "iscrowd": 1},
        {"id": 5, "image_id": 13, "category_id": 5, "bbox": [2, 10, 20, 10], "iscrowd": 0},
        {"id": 6, "image_id": 13, "category_id": 4, "bbox": [24, 24, 6, 6], "iscrowd": 0},
        {"id": 7, "image_id": 13, "category_id": 2, "bbox": [10.5, 1.5, 5, 7], "iscrowd": 0},
    ]
    return write_coco(root, images, annotations)


@pytest.fixture
def four_images(tmp_path):
    return four_image_fixture(tmp_path / "data")


@pytest.fixture
def embeddings_file(tmp_path):
    path = tmp_path / "emb.json"
    path.write_text(json.dumps(EMBEDDINGS), encoding="utf-8")
    return path


def stub_config(embeddings_path, **overrides):
    from coordaug.pipeline import PipelineConfig

    data = dict(
        steps_T=10,
        seed=7,
        theta_top_fraction=0.3,
        backends={
            "embedder": {"kind": "file", "path": str(embeddings_path)},
            "denoiser": {"kind": "stub"},
            "codec": {"kind": "stub"},
            "classifier": {"kind": "stub"},
            "image_embedder": {"kind": "stub"},
        },
    )
    data.update(overrides)
    return PipelineConfig.from_dict(data)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
