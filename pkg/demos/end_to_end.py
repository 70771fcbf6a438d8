"""
Full run on a tiny synthetic dataset
====================================

Writes four random 32x32 images with a few boxes, runs the whole pipeline
with stub backends and prints the run summary. Everything happens in a
temporary directory.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from coordaug.pipeline import PipelineConfig, run_pipeline

root = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
(root / "img").mkdir()
images, annotations = [], []
boxes = {1: [(4, 4, 10, 12, 1), (16, 8, 12, 12, 3)], 2: [(8, 8, 16, 16, 2)], 3: [], 4: [(2, 10, 20, 10, 4)]}
for image_id, objs in boxes.items():
    name = f"im{image_id}.png"
    Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(root / "img" / name)
    images.append({"id": image_id, "file_name": name, "width": 32, "height": 32})
    for x, y, w, h, c in objs:
        annotations.append({"id": len(annotations) + 1, "image_id": image_id, "category_id": c,
                            "bbox": [x, y, w, h], "iscrowd": 0})
categories = [{"id": 1, "name": "cat"}, {"id": 2, "name": "dog"}, {"id": 3, "name": "car"}, {"id": 4, "name": "truck"}]
ann = root / "annotations.json"
ann.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}))

# stub text embedder: a fixed vector per category name
emb = {"cat": [1, 0.9, 0], "dog": [0.9, 1, 0.1], "car": [0, 0.1, 1], "truck": [0.1, 0, 0.9]}
config = PipelineConfig.from_dict({
    "steps_T": 20,
    "theta_top_fraction": 0.34,
    "use_filter": False,
    "backends": {"embedder": {"kind": "stub", "table": emb}},
})
path, report = run_pipeline(config, ann, root / "img", root / "out")
print(report.summary())
print("wrote", path)
