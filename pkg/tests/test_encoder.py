"""Frozen encoder: embedding determinism, query semantics, forward oracles,
initialization scales, and frozen-weight integrity."""

import numpy as np
import pytest

from fedprompt import autodiff as ad
from fedprompt.encoder import (
    HEAD_INIT_SCALE,
    VALUE_GAIN,
    ClassifierHead,
    EncoderConfig,
    FrozenEncoder,
    init_head,
)
from fedprompt.errors import ConfigError, ShapeError


def small_config(**kw):
    base = dict(raw_dim=6, token_count=3, embed_dim=8, depth=1, head_count=2, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


# -- config validation ---------------------------------------------------------


def test_config_rejects_bad_dimensions():
    with pytest.raises(ConfigError):
        small_config(raw_dim=0)
    with pytest.raises(ConfigError):
        small_config(depth=-1)
    with pytest.raises(ConfigError):
        small_config(embed_dim=8, head_count=3)  # must divide


# -- embedding -------------------------------------------------------------------


def test_zero_input_embeds_to_positional_constants():
    enc = FrozenEncoder(small_config())
    tokens = enc.embed(np.zeros(6))
    again = FrozenEncoder(small_config()).embed(np.zeros(6))
    assert tokens.shape == (3, 8)
    assert np.array_equal(tokens, again)  # pure constants, reproducible from the seed


def test_embed_is_deterministic():
    enc = FrozenEncoder(small_config())
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    assert np.array_equal(enc.embed(x), enc.embed(x))


def test_embed_distinguishes_inputs():
    enc = FrozenEncoder(small_config())
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=6)
        y = x.copy()
        y[int(rng.integers(0, 6))] += 0.5
        assert not np.array_equal(enc.embed(x), enc.embed(y))


def test_embed_is_affine_in_the_input():
    # tokens(x) - tokens(0) must be linear: f(ax+by) = a f(x) + b f(y)
    enc = FrozenEncoder(small_config())
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=6), rng.normal(size=6)
    base = enc.embed(np.zeros(6))
    fx = enc.embed(x) - base
    fy = enc.embed(y) - base
    combo = enc.embed(2.0 * x - 3.0 * y) - base
    assert np.allclose(combo, 2.0 * fx - 3.0 * fy, atol=1e-10)


def test_embed_rejects_wrong_length():
    enc = FrozenEncoder(small_config())
    with pytest.raises(ShapeError):
        enc.embed(np.zeros(7))


# -- query ------------------------------------------------------------------------


def test_query_is_class_row_without_positional_constant():
    # embed(0) is exactly the positional constants, so the query must equal
    # the class-token row minus that shared constant
    enc = FrozenEncoder(small_config())
    rng = np.random.default_rng(3)
    pos0 = enc.embed(np.zeros(6))[0]
    for _ in range(10):
        x = rng.normal(size=6)
        assert np.allclose(enc.query_features(x), enc.embed(x)[0] - pos0, atol=1e-15)


def test_query_from_embedded_matches_query_features():
    enc = FrozenEncoder(small_config())
    x = np.random.default_rng(4).normal(size=6)
    assert np.array_equal(enc.query_features(x), enc.query_from_embedded(enc.embed(x)))


def test_query_is_deterministic_and_discriminative():
    enc = FrozenEncoder(small_config())
    rng = np.random.default_rng(5)
    key = rng.normal(size=8)
    x, y = rng.normal(size=6), rng.normal(size=6)
    assert np.array_equal(enc.query_features(x), enc.query_features(x))
    du = 1 - enc.query_features(x) @ key / (np.linalg.norm(enc.query_features(x)) * np.linalg.norm(key))
    dv = 1 - enc.query_features(y) @ key / (np.linalg.norm(enc.query_features(y)) * np.linalg.norm(key))
    assert du != dv  # distances to a fixed key differ generically


def test_queries_are_not_coned_by_a_shared_direction():
    """Mean pairwise cosine of queries over random inputs stays near zero."""
    enc = FrozenEncoder(small_config(raw_dim=16, embed_dim=16, token_count=4))
    rng = np.random.default_rng(6)
    qs = np.stack([enc.query_features(rng.normal(size=16)) for _ in range(40)])
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    sims = qs @ qs.T
    off_diag = sims[~np.eye(40, dtype=bool)]
    assert abs(float(off_diag.mean())) < 0.2


# -- forward ------------------------------------------------------------------------


def test_depth_zero_forward_is_head_of_class_row():
    enc = FrozenEncoder(small_config(depth=0))
    head = init_head(8, 5, seed=1)
    rng = np.random.default_rng(7)
    tokens = ad.Tensor(rng.normal(size=(5, 8)))  # 2 prompt rows + 3 embedded rows
    logits = enc.forward_with_prompts(tokens, head)
    class_row = 5 - 3  # rows - token_count
    oracle = tokens.data[class_row] @ head.weight.data + head.bias.data.reshape(-1)
    assert np.allclose(logits.data.reshape(-1), oracle, atol=1e-12)


def test_forward_shape_checks():
    enc = FrozenEncoder(small_config())
    head = init_head(8, 4, seed=2)
    with pytest.raises(ShapeError):
        enc.forward_with_prompts(ad.Tensor(np.zeros((4, 7))), head)  # wrong width
    with pytest.raises(ShapeError):
        enc.forward_with_prompts(ad.Tensor(np.zeros((2, 8))), head)  # fewer rows than tokens


def test_forward_logits_cover_all_classes():
    enc = FrozenEncoder(small_config())
    head = init_head(8, 11, seed=3)
    logits = enc.forward_with_prompts(ad.Tensor(np.random.default_rng(8).normal(size=(3, 8))), head)
    assert logits.data.shape == (1, 11)


def test_prompt_rows_change_the_logits():
    # prompts must be causal: swapping the prompt rows moves the output
    enc = FrozenEncoder(small_config())
    head = init_head(8, 4, seed=4)
    rng = np.random.default_rng(9)
    embedded = enc.embed(rng.normal(size=6))
    a = np.vstack([rng.normal(size=(2, 8)), embedded])
    b = np.vstack([rng.normal(size=(2, 8)), embedded])
    la = enc.forward_with_prompts(ad.Tensor(a), head).data
    lb = enc.forward_with_prompts(ad.Tensor(b), head).data
    assert not np.allclose(la, lb, atol=1e-9)


def test_gradients_flow_to_prompts_and_head_only():
    enc = FrozenEncoder(small_config())
    head = init_head(8, 4, seed=5)
    rng = np.random.default_rng(10)
    prompts = ad.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    embedded = ad.Tensor(enc.embed(rng.normal(size=6)))
    tokens = ad.concat([prompts, embedded], axis=0)
    loss = ad.cross_entropy(enc.forward_with_prompts(tokens, head), 1)
    ad.backward(loss)
    assert prompts.grad is not None and np.any(prompts.grad != 0)
    assert head.weight.grad is not None
    assert embedded.grad is None  # frozen features carry no gradient
    for block in enc._blocks:
        for name in ("wq", "wk", "wv", "wo"):
            assert block[name].grad is None


def test_prompt_gradient_matches_finite_differences():
    enc = FrozenEncoder(small_config(depth=2))
    head = init_head(8, 4, seed=6)
    rng = np.random.default_rng(11)
    base = rng.normal(size=(2, 8))
    embedded = enc.embed(rng.normal(size=6))

    def loss_at(p):
        tokens = ad.concat([p, ad.Tensor(embedded)], axis=0)
        return ad.cross_entropy(enc.forward_with_prompts(tokens, head), 2)

    prompts = ad.Tensor(base.copy(), requires_grad=True)
    ad.backward(loss_at(prompts))
    step = 1e-6
    for i in range(2):
        for j in range(8):
            up, down = base.copy(), base.copy()
            up[i, j] += step
            down[i, j] -= step
            fd = (float(loss_at(ad.Tensor(up)).data) - float(loss_at(ad.Tensor(down)).data)) / (
                2 * step
            )
            assert abs(prompts.grad[i, j] - fd) < 1e-5


# -- initialization scales ------------------------------------------------------------


def test_value_projections_are_drawn_wider():
    enc = FrozenEncoder(EncoderConfig(raw_dim=8, token_count=2, embed_dim=64, depth=1, head_count=4, seed=9))
    block = enc._blocks[0]
    ratio_v = np.std(block["wv"].data) / np.std(block["wq"].data)
    ratio_o = np.std(block["wo"].data) / np.std(block["wk"].data)
    assert VALUE_GAIN * 0.8 < ratio_v < VALUE_GAIN * 1.2
    assert VALUE_GAIN * 0.8 < ratio_o < VALUE_GAIN * 1.2


def test_head_init_is_near_zero():
    head = init_head(64, 20, seed=0)
    assert np.array_equal(head.bias.data, np.zeros((1, 20)))
    assert 0 < np.std(head.weight.data) < HEAD_INIT_SCALE
    assert head.num_classes == 20


def test_head_shape_validation():
    with pytest.raises(ShapeError):
        ClassifierHead(np.zeros((4, 3)), np.zeros(2))


# -- frozen integrity ------------------------------------------------------------------


def test_same_seed_same_encoder():
    a = FrozenEncoder(small_config())
    b = FrozenEncoder(small_config())
    assert a.frozen_checksum() == b.frozen_checksum()
    assert FrozenEncoder(small_config(seed=1)).frozen_checksum() != a.frozen_checksum()


def test_frozen_weights_survive_training_steps():
    from fedprompt.prompts import init_pool
    from fedprompt.training import PromptModel, SgdOptimizer, TrainConfig
    from fedprompt import autodiff as adm

    enc = FrozenEncoder(small_config())
    before = enc.frozen_checksum()
    pool = init_pool(4, 2, 2, 8, seed=3)
    common = ad.Tensor(np.random.default_rng(12).normal(size=(2, 8)), requires_grad=True)
    model = PromptModel(enc, init_head(8, 4, seed=7), pool=pool, common=common)
    cfg = TrainConfig(lr=0.1, optimizer="sgd")
    rng = np.random.default_rng(13)
    for _ in range(10):
        params = model.trainable_params()
        for p in params.values():
            p.grad = None
        loss, _ = model.loss(rng.normal(size=6), int(rng.integers(0, 4)), cfg)
        adm.backward(loss)
        SgdOptimizer(cfg.lr).step(params)
    assert enc.frozen_checksum() == before
