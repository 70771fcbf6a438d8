"""
Category affinity and object selection
======================================

Builds the cosine affinity table for a handful of categories, picks the
threshold that admits the most related pairs, and shows which object of an
image is likely to be edited and into what.
"""

import numpy as np

from coordaug.affinity import EmbeddingTable, affinity_threshold, build_affinity_matrix
from coordaug.dataset_io import ObjectAnnotation
from coordaug.strategy import selection_probabilities, target_distribution

# toy text embeddings: animals cluster together, vehicles together
names = ("cat", "dog", "horse", "car", "truck", "bus")
vectors = np.array([
    [1.0, 0.8, 0.1, 0.0],
    [0.9, 1.0, 0.2, 0.0],
    [0.7, 0.6, 0.5, 0.1],
    [0.0, 0.1, 1.0, 0.7],
    [0.0, 0.0, 0.8, 1.0],
    [0.1, 0.0, 0.7, 0.9],
])
A = build_affinity_matrix(EmbeddingTable(names, vectors))
np.set_printoptions(precision=2, suppress=True)
print(A.values)

# admit the top 20% of the 15 category pairs
theta = affinity_threshold(A, 0.2)
print("threshold", round(theta, 3))

# a 64x64 image with a small cat, a mid-size dog and a large truck
objects = [
    ObjectAnnotation(1, (2, 2, 8, 8), "cat", 64.0),
    ObjectAnnotation(2, (10, 10, 24, 24), "dog", 576.0),
    ObjectAnnotation(3, (0, 30, 60, 34), "truck", 2040.0),
]
scores = selection_probabilities(objects, A, alpha=0.35, image_area=64 * 64)
for o, s in zip(objects, scores):
    print(o.category, round(s.category_norm, 2), round(s.area_norm, 2), round(s.probability, 3))

# the dog can only turn into categories above the threshold, itself at half weight
print({k: round(v, 3) for k, v in target_distribution("dog", A, theta, beta=0.5).items()})
