"""Server-side coordination: client population lifecycle, round loop,
frequency-sorted pool alignment, and parameter averaging.

Every round: sample clients, run local updates (parallel-map safe), sort each
returned pool by descending selection frequency, then average elementwise.
Results are aggregated in client-id order, so the outcome is independent of
the parallelism degree and of the order deltas arrive in. The sorted order is
what the server stores: it becomes the canonical slot order next round.

Client categories describe data access for the current task: "current" holds
a shard of the task, "new" just joined (and also holds a shard), "old_only"
carries only previously learned knowledge and passes global parameters
through unchanged when sampled.
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import datagen
from .encoder import ClassifierHead
from .errors import ConfigError, ProtocolError, RunComplete
from .prompts import PromptPool
from .seeding import TAG_CATEGORY, TAG_LOCAL, TAG_SAMPLE, rng_for
from .training import PromptModel, local_update

CATEGORY_CURRENT = "current"
CATEGORY_NEW = "new"
CATEGORY_OLD_ONLY = "old_only"

POOL_KEYS = "pool.keys"
POOL_VALUES = "pool.values"
BLOCK = "block"
COMMON = "common"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


@dataclass(frozen=True)
class FederationConfig:
    initial_clients: int
    sampled_per_round: int
    rounds_per_task: int
    new_clients_per_transition: int = 0
    current_data_fraction: float = 0.9
    old_only_selectable: bool = True
    ownership_fraction: float = 0.6

    def __post_init__(self):
        if self.initial_clients < 1 or self.sampled_per_round < 1:
            raise ConfigError("initial_clients and sampled_per_round must be >= 1")
        if self.rounds_per_task < 1:
            raise ConfigError("rounds_per_task must be >= 1")
        if self.new_clients_per_transition < 0:
            raise ConfigError("new_clients_per_transition must be >= 0")
        if not 0.0 <= self.current_data_fraction <= 1.0:
            raise ConfigError("current_data_fraction must be in [0, 1]")
        if not 0.0 < self.ownership_fraction <= 1.0:
            raise ConfigError("ownership_fraction must be in (0, 1]")
        if self.sampled_per_round > self.initial_clients:
            raise ConfigError("cannot sample more clients than exist initially")


# -- checksums and the transcript ----------------------------------------------------


def array_checksum(array):
    """Hex digest binding both shape and contents."""
    array = np.ascontiguousarray(array, dtype=np.float64)
    digest = hashlib.sha256()
    digest.update(str(array.shape).encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


def param_checksums(arrays):
    return {name: array_checksum(arrays[name]) for name in sorted(arrays)}


class Transcript:
    """Append-only protocol log; one JSON record per event, optionally
    mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def record(self, event, **fields):
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True))
            self._fh.write("\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_transcript(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# -- state containers -----------------------------------------------------------------


@dataclass
class GlobalState:
    """Aggregated trainable parameters plus protocol counters."""

    arrays: dict
    top_n: int = 0
    round_index: int = 0  # completed rounds, cumulative across tasks
    task_index: int = 0

    def copy_arrays(self):
        return {name: a.copy() for name, a in self.arrays.items()}

    def checksums(self):
        return param_checksums(self.arrays)

    @property
    def has_pool(self):
        return POOL_KEYS in self.arrays


@dataclass
class ClientState:
    client_id: int
    category: str
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def has_data(self):
        return self.labels.shape[0] > 0


class ClientRegistry:
    """The client population; ids are dense and never reused."""

    def __init__(self):
        self.clients = {}
        self._next_id = 0

    def add_clients(self, count, category):
        ids = []
        for _ in range(count):
            cid = self._next_id
            self._next_id += 1
            self.clients[cid] = ClientState(client_id=cid, category=category)
            ids.append(cid)
        return ids

    def ids(self):
        return sorted(self.clients)

    @property
    def population(self):
        return len(self.clients)

    def selectable_ids(self, include_old_only=True):
        return [
            cid
            for cid in self.ids()
            if include_old_only or self.clients[cid].category != CATEGORY_OLD_ONLY
        ]

    def categories(self):
        return {cid: self.clients[cid].category for cid in self.ids()}


# -- per-round primitives ---------------------------------------------------------------


def sample_clients(registry, count, rng, include_old_only=True):
    """Uniform sample without replacement; returned sorted by client id."""
    candidates = registry.selectable_ids(include_old_only)
    if count > len(candidates):
        raise ConfigError(f"cannot sample {count} of {len(candidates)} selectable clients")
    picked = rng.choice(len(candidates), size=count, replace=False)
    return sorted(candidates[int(i)] for i in picked)


@dataclass
class LocalDelta:
    """One client's returned parameters and round frequencies."""

    client_id: int
    arrays: dict
    freq: np.ndarray = None

    def checksums(self):
        return param_checksums(self.arrays)


def model_from_arrays(encoder, arrays, top_n):
    """Fresh local trainable copies of the global parameters."""
    pool = None
    if POOL_KEYS in arrays:
        pool = PromptPool(arrays[POOL_KEYS], arrays[POOL_VALUES], top_n)
    block = None
    if BLOCK in arrays:
        block = ad.Tensor(arrays[BLOCK].copy(), requires_grad=True)
    common = None
    if COMMON in arrays:
        common = ad.Tensor(arrays[COMMON].copy(), requires_grad=True)
    head = ClassifierHead(arrays[HEAD_WEIGHT].copy(), arrays[HEAD_BIAS].copy())
    return PromptModel(encoder, head, pool=pool, common=common, block=block)


def arrays_from_model(model):
    arrays = {}
    if model.pool is not None:
        arrays[POOL_KEYS] = model.pool.keys_array()
        arrays[POOL_VALUES] = model.pool.values_array()
    if model.block is not None:
        arrays[BLOCK] = model.block.data.copy()
    if model.common is not None:
        arrays[COMMON] = model.common.data.copy()
    arrays[HEAD_WEIGHT] = model.head.weight.data.copy()
    arrays[HEAD_BIAS] = model.head.bias.data.copy()
    return arrays


def client_update(state, registry, encoder, client_id, train_cfg, seed, round_index, mask_row=None):
    """One client's contribution for the round.

    Clients without current-task data (category old_only, or an empty shard)
    pass the received globals through with zero frequencies.
    """
    client = registry.clients[client_id]
    pool_size = state.arrays[POOL_KEYS].shape[0] if state.has_pool else 0
    if client.category == CATEGORY_OLD_ONLY or not client.has_data:
        freq = np.zeros(pool_size, dtype=np.int64) if state.has_pool else None
        return LocalDelta(client_id=client_id, arrays=state.copy_arrays(), freq=freq)
    model = model_from_arrays(encoder, state.arrays, state.top_n)
    rng = rng_for(seed, TAG_LOCAL, state.task_index, round_index, client_id)
    local_update(model, client.features, client.labels, train_cfg, rng, mask_row=mask_row)
    freq = model.pool.freq.copy() if model.pool is not None else None
    return LocalDelta(client_id=client_id, arrays=arrays_from_model(model), freq=freq)


def sort_permutation(freq):
    """Descending frequency; ties keep ascending original index."""
    freq = np.asarray(freq)
    return np.lexsort((np.arange(freq.shape[0]), -freq))


def sort_pool(delta):
    """Jointly permute (keys, values, freq) of a delta by its frequencies.

    Deltas without a pool are returned unchanged. The (key, value) pairing is
    preserved: rows move together.
    """
    if POOL_KEYS not in delta.arrays or delta.freq is None:
        return delta
    perm = sort_permutation(delta.freq)
    arrays = dict(delta.arrays)
    arrays[POOL_KEYS] = delta.arrays[POOL_KEYS][perm].copy()
    arrays[POOL_VALUES] = delta.arrays[POOL_VALUES][perm].copy()
    return LocalDelta(client_id=delta.client_id, arrays=arrays, freq=delta.freq[perm].copy())


def aggregate(deltas):
    """Elementwise mean of all delta arrays, summed in client-id order."""
    if not deltas:
        raise ProtocolError("nothing to aggregate")
    deltas = sorted(deltas, key=lambda d: d.client_id)
    names = set(deltas[0].arrays)
    for d in deltas[1:]:
        if set(d.arrays) != names:
            raise ProtocolError(f"delta key sets differ: {sorted(names)} vs {sorted(d.arrays)}")
    out = {}
    for name in sorted(names):
        shape = deltas[0].arrays[name].shape
        total = np.zeros(shape)
        for d in deltas:
            if d.arrays[name].shape != shape:
                raise ProtocolError(
                    f"shape mismatch for {name!r}: {shape} vs {d.arrays[name].shape}"
                )
            total += d.arrays[name]
        out[name] = total / len(deltas)
    return out


def run_round(
    state,
    registry,
    encoder,
    train_cfg,
    fed_cfg,
    seed,
    mask_row=None,
    sort=True,
    workers=1,
    transcript=None,
):
    """Advance the federation by one global round, mutating `state`."""
    round_index = state.round_index + 1
    rng = rng_for(seed, TAG_SAMPLE, round_index)
    chosen = sample_clients(
        registry, fed_cfg.sampled_per_round, rng, include_old_only=fed_cfg.old_only_selectable
    )
    if transcript is not None:
        transcript.record(
            "round_start", round=round_index, task=state.task_index, sampled=chosen
        )

    def one(cid):
        return client_update(
            state, registry, encoder, cid, train_cfg, seed, round_index, mask_row=mask_row
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            deltas = list(pool.map(one, chosen))
    else:
        deltas = [one(cid) for cid in chosen]
    deltas.sort(key=lambda d: d.client_id)
    if sort:
        deltas = [sort_pool(d) for d in deltas]
    if transcript is not None:
        for d in deltas:
            transcript.record(
                "update",
                round=round_index,
                task=state.task_index,
                client=d.client_id,
                category=registry.clients[d.client_id].category,
                checksums=d.checksums(),
                freq=None if d.freq is None else [int(f) for f in d.freq],
            )
    state.arrays = aggregate(deltas)
    state.round_index = round_index
    if transcript is not None:
        transcript.record(
            "aggregate", round=round_index, task=state.task_index, checksums=state.checksums()
        )
    return state


# -- population lifecycle ----------------------------------------------------------------


def assign_shards(registry, task, fraction, seed):
    """Partition the task's training split over clients that hold current data."""
    eligible = [
        cid for cid in registry.ids() if registry.clients[cid].category != CATEGORY_OLD_ONLY
    ]
    shards = datagen.partition_task(task, eligible, fraction, seed)
    for cid in registry.ids():
        client = registry.clients[cid]
        if cid in shards:
            client.features, client.labels = shards[cid]
        else:
            client.features = np.zeros((0, task.train_x.shape[1]))
            client.labels = np.zeros(0, dtype=np.int64)


def initialize_population(registry, fed_cfg, first_task, seed):
    registry.add_clients(fed_cfg.initial_clients, CATEGORY_NEW)
    assign_shards(registry, first_task, fed_cfg.ownership_fraction, seed)


def advance_task(state, registry, fed_cfg, tasks, seed):
    """Move to the next task: recategorize existing clients, admit new ones,
    re-partition shards. Raises RunComplete past the final task."""
    next_task = state.task_index + 1
    if next_task >= len(tasks):
        raise RunComplete(f"all {len(tasks)} tasks finished")
    state.task_index = next_task
    existing = registry.ids()
    rng = rng_for(seed, TAG_CATEGORY, next_task)
    keep_current = int(round(fed_cfg.current_data_fraction * len(existing)))
    order = rng.permutation(len(existing))
    current = {existing[int(i)] for i in order[:keep_current]}
    for cid in existing:
        registry.clients[cid].category = (
            CATEGORY_CURRENT if cid in current else CATEGORY_OLD_ONLY
        )
    registry.add_clients(fed_cfg.new_clients_per_transition, CATEGORY_NEW)
    assign_shards(registry, tasks[next_task], fed_cfg.ownership_fraction, seed)


# -- checkpoints -------------------------------------------------------------------------


def checkpoint_payload(state):
    payload = {
        "round": state.round_index,
        "task": state.task_index,
        "head": {
            "weight": state.arrays[HEAD_WEIGHT].tolist(),
            "bias": state.arrays[HEAD_BIAS].tolist(),
        },
        "checksums": state.checksums(),
    }
    if state.has_pool:
        pool = PromptPool(state.arrays[POOL_KEYS], state.arrays[POOL_VALUES], state.top_n)
        payload["pool"] = pool.to_json_dict()
    if BLOCK in state.arrays:
        payload["block"] = state.arrays[BLOCK].tolist()
    if COMMON in state.arrays:
        payload["common"] = state.arrays[COMMON].tolist()
    return payload


def write_checkpoint(state, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_payload(state), fh, sort_keys=True, indent=2)
        fh.write("\n")
