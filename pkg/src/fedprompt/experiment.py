"""Run orchestration: wires data, encoder, federation, and metrics together,
evaluates at every phase boundary, and emits the artifact set.

Artifacts per run: results.csv (accuracy matrix cells), summary.json
(canonical, reproducible byte-for-byte from config + seed), transcript.jsonl
(per-event protocol log), and one checkpoint JSON per finished task phase.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import federation as fed
from .config import ExperimentConfig
from .datagen import generate_stream
from .encoder import FrozenEncoder, init_head
from .errors import ContractError
from .metrics import AccuracyMatrix, evaluate_tasks, write_results_csv, write_summary_json
from .prompts import init_pool, init_prompt_block
from .seeding import TAG_COMMON, TAG_POOL, child_seed
from .training import TrainConfig, make_logit_mask

BASELINE_KINDS = ("centralized-joint", "fedavg-finetune")

ABLATION_VARIANTS = [
    ("full", {"sort": True, "task_relevant": True, "task_irrelevant": True}),
    ("no_sort", {"sort": False, "task_relevant": True, "task_irrelevant": True}),
    ("pool_sorted_only", {"sort": True, "task_relevant": True, "task_irrelevant": False}),
    ("pool_unsorted_only", {"sort": False, "task_relevant": True, "task_irrelevant": False}),
    ("shared_prompt_only", {"sort": False, "task_relevant": False, "task_irrelevant": True}),
    ("no_prompts", {"sort": False, "task_relevant": False, "task_irrelevant": False}),
]


def initial_arrays(cfg):
    """Global parameter dict at round zero, shaped by method and ablations."""
    enc_cfg = cfg.encoder_config()
    d = enc_cfg.embed_dim
    total_classes = cfg.stream_spec().total_classes
    arrays = {}
    if cfg.method == "prompt_pool":
        p = cfg.prompts
        abl = cfg.ablations
        if abl["task_relevant"]:
            pool = init_pool(
                p["pool_size"], p["top_n"], p["prompt_len"], d, child_seed(cfg.seed, TAG_POOL)
            )
            arrays[fed.POOL_KEYS] = pool.keys_array()
            arrays[fed.POOL_VALUES] = pool.values_array()
        if abl["task_irrelevant"]:
            arrays[fed.COMMON] = init_prompt_block(
                p["common_len"], d, child_seed(cfg.seed, TAG_COMMON)
            )
    head = init_head(d, total_classes, cfg.seed)
    arrays[fed.HEAD_WEIGHT] = head.weight.data.copy()
    arrays[fed.HEAD_BIAS] = head.bias.data.copy()
    return arrays


@dataclass
class RunResult:
    config: ExperimentConfig
    matrix: AccuracyMatrix
    summary: dict
    output_dir: str = None
    transcript: list = field(default_factory=list)

    @property
    def final_average(self):
        return self.matrix.task_average(self.matrix.phases - 1)


def build_summary(cfg, matrix, state, registry):
    averages = [matrix.task_average(t) for t in range(matrix.phases)]
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "accuracy_matrix": matrix.to_lists(),
        "phase_averages": averages,
        "final_average": averages[-1],
        "overall_average": matrix.overall_average(),
        "forgetting_gap": matrix.forgetting_gap(),
        "rounds_completed": state.round_index,
        "population": registry.population,
    }


def run_experiment(cfg, output_dir=None, workers=1):
    """Execute all tasks and rounds of one configuration.

    `output_dir` (or cfg.output_dir) receives the artifacts; None keeps the
    run purely in memory. `workers` sets the parallel-map width for local
    updates and must not change any result.
    """
    out = output_dir if output_dir is not None else cfg.output_dir
    if out:
        os.makedirs(out, exist_ok=True)
    spec = cfg.stream_spec()
    tasks = generate_stream(spec)
    encoder = FrozenEncoder(cfg.encoder_config())
    frozen_before = encoder.frozen_checksum()
    fed_cfg = cfg.federation_config()
    train_cfg = cfg.train_config()
    sort_flag = (
        cfg.method == "prompt_pool"
        and cfg.ablations["sort"]
        and cfg.ablations["task_relevant"]
    )

    state = fed.GlobalState(arrays=initial_arrays(cfg), top_n=cfg.prompts["top_n"])
    registry = fed.ClientRegistry()
    fed.initialize_population(registry, fed_cfg, tasks[0], cfg.seed)
    transcript = fed.Transcript(os.path.join(out, "transcript.jsonl") if out else None)
    matrix = AccuracyMatrix()
    try:
        for t in range(spec.tasks):
            seen = range((t + 1) * spec.classes_per_task)
            mask_row = make_logit_mask(spec.total_classes, seen)
            for _ in range(fed_cfg.rounds_per_task):
                fed.run_round(
                    state,
                    registry,
                    encoder,
                    train_cfg,
                    fed_cfg,
                    cfg.seed,
                    mask_row=mask_row,
                    sort=sort_flag,
                    workers=workers,
                    transcript=transcript,
                )
            model = fed.model_from_arrays(encoder, state.arrays, state.top_n)
            matrix.add_row(evaluate_tasks(model, tasks[: t + 1]))
            if out:
                fed.write_checkpoint(state, os.path.join(out, f"checkpoint_task{t}.json"))
            if t + 1 < spec.tasks:
                fed.advance_task(state, registry, fed_cfg, tasks, cfg.seed)
    finally:
        transcript.close()
    if encoder.frozen_checksum() != frozen_before:
        raise ContractError("frozen encoder weights changed during the run")
    summary = build_summary(cfg, matrix, state, registry)
    if out:
        write_results_csv(matrix, os.path.join(out, "results.csv"))
        write_summary_json(summary, os.path.join(out, "summary.json"))
    return RunResult(
        config=cfg,
        matrix=matrix,
        summary=summary,
        output_dir=out,
        transcript=transcript.records,
    )


# -- ablation suite ---------------------------------------------------------------------


def run_ablation_suite(base_cfg, seeds, output_dir=None, workers=1):
    """All toggle combinations over shared seeds; returns per-variant stats.

    Writes ablation.csv (per-variant mean phase averages) and runs.csv
    (per-run detail) when an output directory is given.
    """
    if not seeds:
        raise ContractError("need at least one seed")
    runs = []
    for name, flags in ABLATION_VARIANTS:
        for seed in seeds:
            cfg = base_cfg.with_overrides(
                {
                    "seed": int(seed),
                    "ablations.sort": flags["sort"],
                    "ablations.task_relevant": flags["task_relevant"],
                    "ablations.task_irrelevant": flags["task_irrelevant"],
                }
            )
            result = run_experiment(cfg, output_dir=None, workers=workers)
            runs.append((name, int(seed), result))
    phases = runs[0][2].matrix.phases
    stats = {}
    for name, _ in ABLATION_VARIANTS:
        rows = [r for n, _, r in runs if n == name]
        mean_phase = [
            float(np.mean([r.matrix.task_average(t) for r in rows])) for t in range(phases)
        ]
        stats[name] = {
            "mean_phase_averages": mean_phase,
            "mean_final_average": mean_phase[-1],
            "mean_overall_average": float(np.mean([r.matrix.overall_average() for r in rows])),
            "per_seed_final": {
                str(seed): r.final_average for n, seed, r in runs if n == name
            },
        }
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["variant", "seeds"]
                + [f"mean_phase_{t}" for t in range(phases)]
                + ["mean_overall", "mean_final"]
            )
            for name, _ in ABLATION_VARIANTS:
                s = stats[name]
                writer.writerow(
                    [name, len(seeds)]
                    + [f"{v:.10f}" for v in s["mean_phase_averages"]]
                    + [f"{s['mean_overall_average']:.10f}", f"{s['mean_final_average']:.10f}"]
                )
        with open(os.path.join(output_dir, "runs.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed"] + [f"phase_{t}" for t in range(phases)])
            for name, seed, r in runs:
                writer.writerow(
                    [name, seed]
                    + [f"{r.matrix.task_average(t):.10f}" for t in range(phases)]
                )
    return stats


# -- baselines --------------------------------------------------------------------------


def run_baseline(cfg, kind, output_dir=None, workers=1):
    """Reference points sharing the method's data stream and seeds.

    centralized-joint: one model trained on the union of all tasks (upper
    reference, no federation, no incremental structure). fedavg-finetune:
    the federated loop with prompts disabled and only the head trainable
    (lower reference, forgets freely).
    """
    if kind not in BASELINE_KINDS:
        raise ContractError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
    if kind == "fedavg-finetune":
        return run_experiment(
            cfg.with_overrides({"method": "head_only"}), output_dir=output_dir, workers=workers
        )
    return _run_centralized_joint(cfg, output_dir)


def _run_centralized_joint(cfg, output_dir=None):
    from .metrics import accuracy_of
    from .seeding import TAG_LOCAL, rng_for
    from .training import local_update

    out = output_dir if output_dir is not None else cfg.output_dir
    if out:
        os.makedirs(out, exist_ok=True)
    spec = cfg.stream_spec()
    tasks = generate_stream(spec)
    encoder = FrozenEncoder(cfg.encoder_config())
    model = fed.model_from_arrays(encoder, initial_arrays(cfg), cfg.prompts["top_n"])
    features = np.concatenate([t.train_x for t in tasks])
    labels = np.concatenate([t.train_y for t in tasks])
    base = cfg.train_config()
    # same per-sample step budget as one federated task: rounds x local epochs
    joint_cfg = TrainConfig(
        lr=base.lr,
        ce_weight=base.ce_weight,
        local_epochs=base.local_epochs * cfg.federation_config().rounds_per_task,
        batch_size=base.batch_size,
        optimizer=base.optimizer,
    )
    rng = rng_for(cfg.seed, TAG_LOCAL, 0, 0, 0)
    local_update(model, features, labels, joint_cfg, rng)
    accuracies = [accuracy_of(model, t.test_x, t.test_y) for t in tasks]
    summary = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method": "centralized-joint",
        "task_accuracies": accuracies,
        "final_average": float(np.mean(accuracies)),
    }
    if out:
        with open(os.path.join(out, "results.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "task", "accuracy"])
            for j, acc in enumerate(accuracies):
                writer.writerow([spec.tasks - 1, j, f"{acc:.10f}"])
        write_summary_json(summary, os.path.join(out, "summary.json"))
    return summary
