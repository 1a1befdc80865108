"""Prompt pool: keyed prompt values, instance-wise top-N querying by cosine
distance, selection-frequency accounting, and token prepending.

Slots are never assigned to tasks; which slot serves which task emerges from
querying. Selection increments per-key frequency counters that the federation
layer resets at round start and uses for sort-before-aggregate alignment.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DegenerateInputError, ShapeError

INIT_TAG_KEYS = 0
INIT_TAG_VALUES = 1


@dataclass
class Selection:
    """Result of one instance-wise query."""

    indices: list  # ascending slot indices
    match_loss: ad.Tensor  # sum of cosine distances of selected keys to the query

    def __post_init__(self):
        self.indices = sorted(int(i) for i in self.indices)


def _cosine(q, k):
    # must mirror autodiff.cosine_distance so rank order equals graph values
    nq = float(np.linalg.norm(q))
    nk = float(np.linalg.norm(k))
    if nq == 0.0 or nk == 0.0:
        raise DegenerateInputError("cosine distance of a zero vector")
    return 1.0 - float(q @ k) / (nq * nk)


class PromptPool:
    """M (key, value) slots plus per-key selection counters."""

    def __init__(self, keys, values, top_n, freq=None):
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 2 or values.ndim != 3:
            raise ShapeError("keys must be (M, D), values (M, L_p, D)")
        if keys.shape[0] != values.shape[0] or keys.shape[1] != values.shape[2]:
            raise ShapeError(f"keys {keys.shape} inconsistent with values {values.shape}")
        if not 1 <= top_n <= keys.shape[0]:
            raise ConfigError(f"top_n {top_n} must be in [1, {keys.shape[0]}]")
        self.top_n = int(top_n)
        self.keys = [ad.Tensor(k.copy(), requires_grad=True) for k in keys]
        self.values = [ad.Tensor(v.copy(), requires_grad=True) for v in values]
        if freq is None:
            freq = np.zeros(keys.shape[0], dtype=np.int64)
        self.freq = np.asarray(freq, dtype=np.int64).copy()

    @property
    def size(self):
        return len(self.keys)

    @property
    def prompt_len(self):
        return self.values[0].data.shape[0]

    @property
    def embed_dim(self):
        return self.keys[0].data.shape[0]

    # -- querying -------------------------------------------------------------

    def distances(self, query):
        """Cosine distance from `query` to every key, as plain floats."""
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        return [_cosine(query, k.data) for k in self.keys]

    def select(self, query, record_freq=True):
        """Pick the N keys nearest the query; ties break toward lower index.

        Minimizing the summed distance over size-N subsets is equivalent to
        taking the N smallest distances. `record_freq=False` leaves the
        counters untouched (evaluation-time queries must not count).
        """
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.embed_dim:
            raise ShapeError(f"query length {query.shape[0]} != key length {self.embed_dim}")
        dists = self.distances(query)
        order = np.lexsort((np.arange(self.size), np.asarray(dists)))
        chosen = sorted(int(i) for i in order[: self.top_n])
        if record_freq:
            for i in chosen:
                self.freq[i] += 1
        q_const = ad.Tensor(query)
        loss = None
        for i in chosen:
            d = ad.cosine_distance(q_const, self.keys[i])
            loss = d if loss is None else ad.add(loss, d)
        return Selection(indices=chosen, match_loss=loss)

    def reset_frequencies(self):
        self.freq[:] = 0

    # -- array/serialized views ------------------------------------------------

    def keys_array(self):
        return np.stack([k.data for k in self.keys])

    def values_array(self):
        return np.stack([v.data for v in self.values])

    def to_json_dict(self):
        return {
            "keys": self.keys_array().tolist(),
            "values": self.values_array().tolist(),
            "freq": self.freq.tolist(),
            "meta": {
                "M": self.size,
                "N": self.top_n,
                "L_p": self.prompt_len,
                "D": self.embed_dim,
            },
        }

    @classmethod
    def from_json_dict(cls, payload):
        return cls(
            keys=payload["keys"],
            values=payload["values"],
            top_n=payload["meta"]["N"],
            freq=payload.get("freq"),
        )


def init_pool(size, top_n, prompt_len, embed_dim, seed):
    """Fresh pool with keys/values uniform in (-1/sqrt(D), 1/sqrt(D))."""
    if not 1 <= top_n <= size:
        raise ConfigError(f"top_n {top_n} must be in [1, {size}]")
    bound = 1.0 / np.sqrt(embed_dim)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), INIT_TAG_KEYS]))
    keys = rng.uniform(-bound, bound, size=(size, embed_dim))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), INIT_TAG_VALUES]))
    values = rng.uniform(-bound, bound, size=(size, prompt_len, embed_dim))
    return PromptPool(keys, values, top_n)


def init_prompt_block(rows, embed_dim, seed):
    """A single always-prepended prompt block (pool-free variant and the
    shared prompt both use this initialization)."""
    bound = 1.0 / np.sqrt(embed_dim)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    return rng.uniform(-bound, bound, size=(rows, embed_dim))


def prepend(selection, pool, common, embedded):
    """Stack [selected values (ascending index); common prompt; embedded tokens].

    `common` may be None (no always-on prompt). Returns the extended token
    matrix; gradients flow into the selected values and `common` only.
    """
    parts = [pool.values[i] for i in selection.indices]
    if common is not None:
        parts.append(common)
    parts.append(embedded if isinstance(embedded, ad.Tensor) else ad.Tensor(embedded))
    width = {p.data.shape[1] for p in parts}
    if len(width) != 1:
        raise ShapeError(f"mixed embedding widths in prepend: {sorted(width)}")
    return ad.concat(parts, axis=0)
