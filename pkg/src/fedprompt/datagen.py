"""Synthetic class-incremental stream and non-iid client partitioning.

Each class is an isotropic Gaussian cluster whose mean sits uniformly at
random on a sphere of radius `class_separation` in raw feature space, so one
knob moves the problem between pure chance (radius 0) and near separability.
Classes are dealt to tasks in id order; clients own a random subset of each
task's classes and receive the owned samples round-robin.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .seeding import TAG_CLASS, TAG_OWNERSHIP, rng_for

REDRAW_LIMIT = 100


@dataclass(frozen=True)
class StreamSpec:
    tasks: int
    classes_per_task: int
    raw_dim: int
    train_per_class: int
    test_per_class: int
    class_separation: float
    seed: int

    def __post_init__(self):
        if min(self.tasks, self.classes_per_task, self.raw_dim) < 1:
            raise ConfigError("tasks, classes_per_task and raw_dim must be positive")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class sample counts must be positive")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be non-negative")

    @property
    def total_classes(self):
        return self.tasks * self.classes_per_task


@dataclass
class TaskData:
    task_id: int
    class_ids: list
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def summary(self):
        return {
            "task": self.task_id,
            "classes": list(self.class_ids),
            "train": int(self.train_y.shape[0]),
            "test": int(self.test_y.shape[0]),
        }


def _class_mean(spec, class_id):
    rng = rng_for(spec.seed, TAG_CLASS, class_id)
    direction = rng.normal(0.0, 1.0, size=spec.raw_dim)
    norm = np.linalg.norm(direction)
    while norm == 0.0:  # astronomically unlikely; redrawn for totality
        direction = rng.normal(0.0, 1.0, size=spec.raw_dim)
        norm = np.linalg.norm(direction)
    return spec.class_separation * direction / norm


def class_means(spec):
    """All class means, indexed by class id."""
    return np.stack([_class_mean(spec, c) for c in range(spec.total_classes)])


def generate_stream(spec):
    """Materialize every task's train and test splits."""
    tasks = []
    for t in range(spec.tasks):
        class_ids = list(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        train_parts, test_parts = [], []
        for cid in class_ids:
            mean = _class_mean(spec, cid)
            rng = rng_for(spec.seed, TAG_CLASS, cid, 1)
            train = rng.normal(0.0, 1.0, size=(spec.train_per_class, spec.raw_dim)) + mean
            test = rng.normal(0.0, 1.0, size=(spec.test_per_class, spec.raw_dim)) + mean
            train_parts.append((train, np.full(spec.train_per_class, cid, dtype=np.int64)))
            test_parts.append((test, np.full(spec.test_per_class, cid, dtype=np.int64)))
        tasks.append(
            TaskData(
                task_id=t,
                class_ids=class_ids,
                train_x=np.concatenate([p[0] for p in train_parts]),
                train_y=np.concatenate([p[1] for p in train_parts]),
                test_x=np.concatenate([p[0] for p in test_parts]),
                test_y=np.concatenate([p[1] for p in test_parts]),
            )
        )
    return tasks


def owned_class_count(num_classes, fraction):
    """Classes per client under fractional ownership; never rounds to zero."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"ownership fraction {fraction} outside (0, 1]")
    return min(num_classes, math.ceil(fraction * num_classes))


def draw_ownership(class_ids, client_ids, fraction, seed, task_id):
    """Assign each client an owned subset of `class_ids`.

    Redraws (bounded) until every class has at least one owner, so no task
    data silently vanishes. Returns {class_id: [owner client ids, sorted]}.
    """
    class_ids = list(class_ids)
    client_ids = sorted(client_ids)
    if not client_ids:
        raise ConfigError("need at least one client to partition a task")
    k = owned_class_count(len(class_ids), fraction)
    for attempt in range(REDRAW_LIMIT):
        rng = rng_for(seed, TAG_OWNERSHIP, task_id, attempt)
        owners = {cid: [] for cid in class_ids}
        for client in client_ids:
            chosen = rng.choice(len(class_ids), size=k, replace=False)
            for idx in chosen:
                owners[class_ids[int(idx)]].append(client)
        if all(owners[cid] for cid in class_ids):
            return {cid: sorted(v) for cid, v in owners.items()}
    raise DegenerateInputError(
        f"no full-coverage ownership draw in {REDRAW_LIMIT} attempts "
        f"({len(client_ids)} clients, {len(class_ids)} classes, fraction {fraction})"
    )


def partition_task(task, client_ids, fraction, seed):
    """Split one task's train split across clients, round-robin per class.

    Returns {client_id: (features, labels)}; clients owning no samples still
    appear with empty arrays.
    """
    owners = draw_ownership(task.class_ids, client_ids, fraction, seed, task.task_id)
    shards = {client: ([], []) for client in sorted(client_ids)}
    for cid in task.class_ids:
        rows = np.flatnonzero(task.train_y == cid)
        holders = owners[cid]
        for pos, row in enumerate(rows):
            client = holders[pos % len(holders)]
            shards[client][0].append(task.train_x[row])
            shards[client][1].append(task.train_y[row])
    out = {}
    for client, (xs, ys) in shards.items():
        if xs:
            out[client] = (np.stack(xs), np.asarray(ys, dtype=np.int64))
        else:
            out[client] = (
                np.zeros((0, task.train_x.shape[1])),
                np.zeros(0, dtype=np.int64),
            )
    return out


# -- persistence ------------------------------------------------------------------


def dump_stream(tasks, path):
    """One JSON line per task."""
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(
                json.dumps(
                    {
                        "task": task.task_id,
                        "classes": list(task.class_ids),
                        "train_x": task.train_x.tolist(),
                        "train_y": task.train_y.tolist(),
                        "test_x": task.test_x.tolist(),
                        "test_y": task.test_y.tolist(),
                    }
                )
            )
            fh.write("\n")


def load_stream(path):
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            tasks.append(
                TaskData(
                    task_id=int(rec["task"]),
                    class_ids=[int(c) for c in rec["classes"]],
                    train_x=np.asarray(rec["train_x"], dtype=np.float64),
                    train_y=np.asarray(rec["train_y"], dtype=np.int64),
                    test_x=np.asarray(rec["test_x"], dtype=np.float64),
                    test_y=np.asarray(rec["test_y"], dtype=np.int64),
                )
            )
    return sorted(tasks, key=lambda t: t.task_id)
