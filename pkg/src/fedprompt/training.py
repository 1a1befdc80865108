"""Local training: model assembly, combined loss, optimizers, epoch loop.

The trainable surface is small and explicit: pool keys, pool values, the
shared always-on prompt, and the classifier head. Keys receive gradient only
from the query-matching loss; values, the shared prompt, and the head receive
gradient only from the (weighted) cross-entropy term. Slots not selected for a
sample are structurally absent from that sample's graph, so their parameters
are untouched by the step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, TrainingDivergenceError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    ce_weight: float = 1.0
    local_epochs: int = 5
    batch_size: int = 16
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.ce_weight < 0:
            raise ConfigError("ce_weight must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def make_logit_mask(num_classes, allowed):
    """Additive mask row: 0 on permitted class columns, a large negative
    constant elsewhere. Applied during training only."""
    allowed = sorted(set(int(c) for c in allowed))
    if not allowed:
        raise ConfigError("mask needs at least one permitted class")
    if allowed[0] < 0 or allowed[-1] >= num_classes:
        raise ConfigError(f"permitted classes {allowed} outside [0, {num_classes})")
    row = np.full((1, num_classes), MASK_VALUE, dtype=np.float64)
    row[0, allowed] = 0.0
    return row


class PromptModel:
    """One client's trainable state over a shared frozen encoder.

    All prompt pieces are optional: head-only training drops them all, the
    pool-free variant swaps the pool for `block`, a token matrix prepended to
    every sample unconditionally. Token order ahead of the embedded features
    is always [selected values or block; common].
    """

    def __init__(self, encoder, head, pool=None, common=None, block=None):
        self.encoder = encoder
        self.head = head
        self.pool = pool
        self.common = common
        self.block = block
        if pool is not None and block is not None:
            raise ShapeError("a pool and an always-on block are mutually exclusive")
        for name, t in (("common", common), ("block", block)):
            if t is not None and not isinstance(t, ad.Tensor):
                raise ShapeError(f"{name} prompt must be a Tensor")

    def trainable_params(self):
        params = {}
        if self.pool is not None:
            for i, k in enumerate(self.pool.keys):
                params[f"pool.key.{i}"] = k
            for i, v in enumerate(self.pool.values):
                params[f"pool.value.{i}"] = v
        if self.block is not None:
            params["block"] = self.block
        if self.common is not None:
            params["common"] = self.common
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    # -- forward paths ----------------------------------------------------------

    def _tokens(self, embedded, query, record_freq):
        """Prompt-extended token matrix plus the selection (None without a pool)."""
        from .prompts import prepend

        if self.pool is None:
            parts = [p for p in (self.block, self.common) if p is not None]
            parts.append(ad.Tensor(embedded))
            tokens = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
            return tokens, None
        selection = self.pool.select(query, record_freq=record_freq)
        tokens = prepend(selection, self.pool, self.common, embedded)
        return tokens, selection

    def loss_from_embedded(self, embedded, query, label, cfg, mask_row=None, record_freq=True):
        """Combined loss for one precomputed sample; returns (loss, selection)."""
        tokens, selection = self._tokens(embedded, query, record_freq)
        logits = self.encoder.forward_with_prompts(tokens, self.head)
        if mask_row is not None:
            logits = ad.add(logits, ad.Tensor(mask_row))
        ce = ad.cross_entropy(logits, int(label))
        weighted = ad.scale(ce, cfg.ce_weight)
        if selection is None:
            return weighted, None
        return ad.add(selection.match_loss, weighted), selection

    def loss(self, x, label, cfg, mask_row=None, record_freq=True):
        embedded = self.encoder.embed(x)
        return self.loss_from_embedded(
            embedded, self.encoder.query_from_embedded(embedded), label, cfg,
            mask_row=mask_row, record_freq=record_freq,
        )

    def logits_from_embedded(self, embedded, query):
        """Unmasked logits row for evaluation; never counts frequencies."""
        with ad.no_grad():
            tokens, _ = self._tokens(embedded, query, record_freq=False)
            out = self.encoder.forward_with_prompts(tokens, self.head)
        return out.data[0]

    def predict(self, x):
        embedded = self.encoder.embed(x)
        row = self.logits_from_embedded(embedded, self.encoder.query_from_embedded(embedded))
        return int(np.argmax(row))


# -- optimizers -----------------------------------------------------------------


def zero_grads(params):
    for p in params.values():
        p.grad = None


def _checked(name, grad):
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
    return grad


class SgdOptimizer:
    def __init__(self, lr):
        self.lr = float(lr)

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                continue
            p.data -= self.lr * _checked(name, p.grad)


class AdamOptimizer:
    """Adam with bias correction; per-parameter step counts so slots that sit
    out a batch do not advance their moment schedules."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._state = {}

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                continue
            g = _checked(name, p.grad)
            if name not in self._state:
                self._state[name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = self._state[name]
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._state[name] = [m, v, t]
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SgdOptimizer(cfg.lr)
    return AdamOptimizer(cfg.lr)


# -- local update loop ------------------------------------------------------------


@dataclass
class LocalResult:
    epoch_losses: list = field(default_factory=list)
    steps: int = 0
    samples_seen: int = 0


def local_update(model, features, labels, cfg, rng, mask_row=None):
    """Train `model` in place on one client shard for cfg.local_epochs epochs.

    Minibatch gradients are sample-averaged before each optimizer step; the
    optimizer is created fresh here, so moment state never leaks across
    rounds. Returns per-epoch mean losses.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} inconsistent with labels {labels.shape}")
    n = features.shape[0]
    if n == 0:
        raise ConfigError("local update needs at least one sample")

    embeds = [model.encoder.embed(features[i]) for i in range(n)]
    queries = [model.encoder.query_from_embedded(e) for e in embeds]

    params = model.trainable_params()
    opt = make_optimizer(cfg)
    result = LocalResult()
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            zero_grads(params)
            for i in batch:
                loss, _ = model.loss_from_embedded(
                    embeds[i], queries[i], labels[i], cfg, mask_row=mask_row
                )
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergenceError(f"non-finite loss {value}")
                total += value
                ad.backward(loss)
            if len(batch) > 1:
                inv = 1.0 / len(batch)
                for p in params.values():
                    if p.grad is not None:
                        p.grad *= inv
            opt.step(params)
            result.steps += 1
        result.samples_seen += n
        result.epoch_losses.append(total / n)
    zero_grads(params)
    return result
