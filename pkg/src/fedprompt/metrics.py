"""Evaluation: lower-triangular accuracy matrix, averages, forgetting gap,
and deterministic artifact writers.

Evaluation always runs on the global model with gradients off, without logit
masking, and without touching prompt selection counters.
"""

import csv
import json

import numpy as np

from .errors import ContractError, ShapeError


def accuracy_of(model, features, labels):
    """Fraction of samples whose argmax logit matches the label."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != labels.shape[0]:
        raise ShapeError("feature/label count mismatch")
    if features.shape[0] == 0:
        raise ContractError("cannot score an empty test set")
    hits = 0
    for i in range(features.shape[0]):
        embedded = model.encoder.embed(features[i])
        row = model.logits_from_embedded(embedded, model.encoder.query_from_embedded(embedded))
        hits += int(np.argmax(row) == labels[i])
    return hits / features.shape[0]


def evaluate_tasks(model, tasks):
    """Accuracy on each task's test split, in task order."""
    return [accuracy_of(model, task.test_x, task.test_y) for task in tasks]


class AccuracyMatrix:
    """Row t holds per-task accuracies measured after finishing task t."""

    def __init__(self, rows=None):
        self.rows = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, row):
        row = [float(a) for a in row]
        if len(row) != len(self.rows) + 1:
            raise ShapeError(
                f"row {len(self.rows)} must score {len(self.rows) + 1} tasks, got {len(row)}"
            )
        for a in row:
            if not 0.0 <= a <= 1.0:
                raise ContractError(f"accuracy {a} outside [0, 1]")
        self.rows.append(row)

    @property
    def phases(self):
        return len(self.rows)

    def task_average(self, t):
        """Mean accuracy over tasks 0..t after finishing task t."""
        return float(np.mean(self.rows[t]))

    def overall_average(self):
        """Mean of the per-phase averages across all phases so far."""
        if not self.rows:
            raise ContractError("no phases recorded")
        return float(np.mean([self.task_average(t) for t in range(self.phases)]))

    def forgetting_gap(self):
        """Mean drop from each task's just-trained accuracy to its final one.

        Zero for a single phase (nothing has had a chance to degrade).
        """
        if not self.rows:
            raise ContractError("no phases recorded")
        last = self.rows[-1]
        drops = [self.rows[j][j] - last[j] for j in range(self.phases - 1)]
        return float(np.mean(drops)) if drops else 0.0

    def to_lists(self):
        return [list(row) for row in self.rows]

    @classmethod
    def from_lists(cls, rows):
        return cls(rows=rows)


# -- artifact writers ---------------------------------------------------------------


def write_results_csv(matrix, path):
    """One row per (phase, task) cell of the accuracy matrix."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "task", "accuracy"])
        for t, row in enumerate(matrix.rows):
            for j, acc in enumerate(row):
                writer.writerow([t, j, f"{acc:.10f}"])


def write_summary_json(payload, path):
    """Canonical JSON: sorted keys, fixed separators, trailing newline.

    The payload must already be plain JSON types; nothing time- or
    environment-dependent belongs in it.
    """
    text = json.dumps(payload, sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")
    return text
