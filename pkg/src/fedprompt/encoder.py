"""Deterministic frozen feature transformer with a trainable classifier head.

The encoder stands in for a pre-trained backbone: a frozen linear token
embedding with positional constants, followed by a frozen pre-norm
self-attention stack. Only prompt tokens and the classification head ever
receive gradients. Weights are drawn once from the config seed, so any two
encoders built from the same config are bit-identical.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .seeding import rng_for, TAG_ENCODER, TAG_HEAD

LN_EPS = 1e-6
# Value/output projections are drawn wider than query/key so the mixed
# context, prompt rows included, competes with the residual at the readout.
VALUE_GAIN = 4.0
# Head columns start near zero so untrained classes emit near-zero logits.
HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class EncoderConfig:
    raw_dim: int
    token_count: int
    embed_dim: int
    depth: int
    head_count: int
    seed: int

    def __post_init__(self):
        if self.raw_dim < 1 or self.token_count < 1 or self.embed_dim < 1:
            raise ConfigError("raw_dim, token_count and embed_dim must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.head_count < 1 or self.embed_dim % self.head_count != 0:
            raise ConfigError(
                f"head_count {self.head_count} must divide embed_dim {self.embed_dim}"
            )


class ClassifierHead:
    """Single expanding head over all classes of the run, trainable throughout."""

    def __init__(self, weight, bias):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64).reshape(1, -1)
        if weight.ndim != 2 or weight.shape[1] != bias.shape[1]:
            raise ShapeError(f"head weight {weight.shape} does not match bias {bias.shape}")
        self.weight = ad.Tensor(weight, requires_grad=True)
        self.bias = ad.Tensor(bias, requires_grad=True)

    @property
    def num_classes(self):
        return self.weight.data.shape[1]


def init_head(embed_dim, num_classes, seed):
    rng = rng_for(seed, TAG_HEAD)
    scale = HEAD_INIT_SCALE / np.sqrt(embed_dim)
    weight = rng.normal(0.0, scale, size=(embed_dim, num_classes))
    bias = np.zeros(num_classes)
    return ClassifierHead(weight, bias)


class FrozenEncoder:
    """Frozen tokenizer + self-attention stack; a pure function of its config."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = rng_for(config.seed, TAG_ENCODER)
        d = config.embed_dim
        self._w_embed = rng.normal(
            0.0, 1.0 / np.sqrt(config.raw_dim), size=(config.raw_dim, config.token_count * d)
        )
        self._pos = rng.normal(0.0, 1.0, size=(config.token_count, d))
        self._blocks = []
        for _ in range(config.depth):
            block = {}
            for name in ("wq", "wk", "wv", "wo"):
                scale = 1.0 / np.sqrt(d)
                if name in ("wv", "wo"):
                    scale *= VALUE_GAIN
                block[name] = ad.Tensor(rng.normal(0.0, scale, size=(d, d)))
            self._blocks.append(block)
        self._head_dim = d // config.head_count
        self._attn_scale = 1.0 / np.sqrt(self._head_dim)

    # -- frozen embedding ---------------------------------------------------

    def embed(self, x):
        """Map a raw feature vector to the (token_count, embed_dim) token matrix."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.config.raw_dim:
            raise ShapeError(
                f"input length {x.shape[0]} != configured raw_dim {self.config.raw_dim}"
            )
        tokens = (x @ self._w_embed).reshape(self.config.token_count, self.config.embed_dim)
        return tokens + self._pos

    def query_features(self, x):
        """Class-token projection of the input; used only for key matching.

        The positional constant of the class row is identical for every
        instance, so it is removed: keeping it would drag all queries toward
        one shared direction and wash out the per-instance signal the key
        match relies on.
        """
        return self.query_from_embedded(self.embed(x))

    def query_from_embedded(self, embedded):
        """Same as query_features for an already-embedded token matrix."""
        return np.ascontiguousarray(embedded[0] - self._pos[0])

    # -- prompt-extended forward ---------------------------------------------

    def forward_with_prompts(self, tokens, head):
        """Run the frozen stack over prompt-extended tokens; return (1, C) logits.

        `tokens` is [prompt rows...; embedded rows] with the embedded class
        token at row (rows - token_count). Gradients flow only into `tokens`
        leaves that require grad and into the head.
        """
        rows, cols = tokens.data.shape
        if cols != self.config.embed_dim:
            raise ShapeError(f"token width {cols} != embed_dim {self.config.embed_dim}")
        if rows < self.config.token_count:
            raise ShapeError(
                f"{rows} rows cannot contain the {self.config.token_count} embedded tokens"
            )
        x = tokens
        for block in self._blocks:
            x = ad.add(x, self._attention(x, block))
        class_row = rows - self.config.token_count
        readout = ad.slice_rows(x, class_row, class_row + 1)
        return ad.add(ad.matmul(readout, head.weight), head.bias)

    def _attention(self, x, block):
        h = ad.layer_norm(x, LN_EPS)
        q = ad.matmul(h, block["wq"])
        k = ad.matmul(h, block["wk"])
        v = ad.matmul(h, block["wv"])
        dh = self._head_dim
        outs = []
        for i in range(self.config.head_count):
            lo, hi = i * dh, (i + 1) * dh
            qi = ad.slice_cols(q, lo, hi)
            ki = ad.slice_cols(k, lo, hi)
            vi = ad.slice_cols(v, lo, hi)
            scores = ad.scale(ad.matmul(qi, ki, transpose_b=True), self._attn_scale)
            outs.append(ad.matmul(ad.softmax_rows(scores), vi))
        merged = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return ad.matmul(merged, block["wo"])

    # -- integrity -----------------------------------------------------------

    def frozen_arrays(self):
        arrays = [self._w_embed, self._pos]
        for block in self._blocks:
            arrays.extend(block[name].data for name in ("wq", "wk", "wv", "wo"))
        return arrays

    def frozen_checksum(self):
        digest = hashlib.sha256()
        for arr in self.frozen_arrays():
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()
