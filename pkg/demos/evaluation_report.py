"""
From confusion matrix to report
===============================

Sensitivity per class, the half-up rounding rule, and what happens when a
class has no test images.
"""

import json

import numpy as np

from accovidnet.evaluation import ConfusionMatrix, compute_sensitivity, emit_report, parse_report

# rows are the true class: Normal, Pneumonia, Covid19
cm = ConfusionMatrix(np.array([
    [94, 5, 1],
    [7, 90, 3],
    [1, 3, 96],
]))
report = compute_sensitivity(cm, model_id="example", dataset_version="v1", timestamp="2020-06-01T00:00:00+00:00")
print(emit_report(report, "table"))
print(emit_report(report, "structured"))

# 290 of 300 is 96.666..., reported as 96.67
thirds = compute_sensitivity(ConfusionMatrix(np.array([[1, 0, 0], [0, 1, 0], [6, 4, 290]])))
print("Covid19:", json.loads(emit_report(thirds))["sensitivity"]["Covid19"])

# no Covid images at all: the value is missing, not zero
empty = compute_sensitivity(ConfusionMatrix(np.array([[9, 1, 0], [2, 8, 0], [0, 0, 0]])))
print(emit_report(empty, "table"))
assert parse_report(emit_report(empty)).per_class_sensitivity["Covid19"] is None
