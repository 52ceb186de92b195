"""Finite-difference verification of every differentiable op, a full
transformer block, and the whole hierarchical model, in float64."""

import numpy as np
import pytest

from picovlm import tensor as T
from picovlm.blocks import TransformerBlock, causal_mask
from picovlm.gradcheck import gradcheck
from picovlm.lm import ModeSpec, TokenSequence
from picovlm.tensor import Tensor

from conftest import micro_model

TOL = 1e-5
N_SEEDS = 20


def leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def seeds():
    return range(N_SEEDS)


# (name, builder) -> builder(rng) returns (loss_fn, wrt_tensors)
def _op_cases(rng):
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4, 2))
    ab = leaf(rng, (3, 4))
    bias = leaf(rng, (4,))
    bat_a = leaf(rng, (2, 3, 4))
    bat_b = leaf(rng, (2, 4, 3))
    gate = leaf(rng, (1,))
    gamma = leaf(rng, (4,))
    beta = leaf(rng, (4,))
    emb = leaf(rng, (5, 3))
    logits = leaf(rng, (4, 6))
    ids = rng.integers(0, 5, size=6).tolist()
    targets = [int(v) for v in rng.integers(0, 6, size=4)]
    targets[1] = -1
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    cat_a, cat_b = leaf(rng, (2, 3)), leaf(rng, (4, 3))

    return {
        "add": (lambda: T.sum_all(T.add(a, ab)), [a, ab]),
        "add_bias": (lambda: T.sum_all(T.gelu(T.add(a, bias))), [a, bias]),
        "add_scalar": (lambda: T.sum_all(T.mul(T.add(a, 1.5), T.add(a, 1.5))), [a]),
        "sub": (lambda: T.sum_all(T.mul(T.sub(a, ab), T.sub(a, ab))), [a, ab]),
        "mul": (lambda: T.sum_all(T.mul(a, ab)), [a, ab]),
        "mul_scalar": (lambda: T.sum_all(T.mul(T.mul(a, 2.5), a)), [a]),
        "scale": (lambda: T.sum_all(T.scale(a, gate)), [a, gate]),
        "matmul": (lambda: T.sum_all(T.gelu(T.matmul(a, b))), [a, b]),
        "matmul_batched": (lambda: T.sum_all(T.gelu(T.matmul(bat_a, bat_b))),
                           [bat_a, bat_b]),
        "transpose": (lambda: T.sum_all(T.mul(T.transpose(a), T.transpose(a))), [a]),
        "permute": (lambda: T.sum_all(T.gelu(T.permute(bat_a, (2, 0, 1)))), [bat_a]),
        "reshape": (lambda: T.sum_all(T.mul(T.reshape(a, (2, 6)), T.reshape(a, (2, 6)))),
                    [a]),
        "sum_all": (lambda: T.sum_all(T.mul(a, a)), [a]),
        "mean_all": (lambda: T.mean_all(T.mul(a, a)), [a]),
        "mean_rows": (lambda: T.sum_all(T.gelu(T.mean_rows(a))), [a]),
        "concat_rows": (lambda: T.sum_all(T.gelu(T.concat_rows(cat_a, cat_b))),
                        [cat_a, cat_b]),
        "slice_rows": (lambda: T.sum_all(T.mul(T.slice_rows(a, 1, 3),
                                               T.slice_rows(a, 1, 3))), [a]),
        "embedding": (lambda: T.sum_all(T.gelu(T.embedding(emb, ids))), [emb]),
        "gelu": (lambda: T.sum_all(T.gelu(a)), [a]),
        "softmax": (lambda: T.sum_all(T.mul(T.softmax_rows(a), ab)), [a]),
        "softmax_masked": (lambda: T.sum_all(T.mul(T.softmax_rows(a, mask=mask), ab)),
                           [a]),
        "layernorm": (lambda: T.sum_all(T.mul(T.layernorm(a, gamma, beta), ab)),
                      [a, gamma, beta]),
        "cross_entropy": (lambda: T.cross_entropy_next_token(logits, targets), [logits]),
    }


@pytest.mark.parametrize("op_name", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients(op_name):
    worst = 0.0
    for seed in seeds():
        rng = np.random.default_rng([seed, 100])
        build, wrt = _op_cases(rng)[op_name]
        worst = max(worst, gradcheck(build, wrt))
    assert worst < TOL, f"{op_name}: max rel err {worst:.2e}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_transformer_block_every_parameter(seed):
    rng = np.random.default_rng([seed, 200])
    blk = TransformerBlock(rng, d=6, heads=2, dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=False)
    mask = causal_mask(4)
    targets = rng.integers(0, 6, size=4).tolist()
    params = dict(blk.named_params("blk"))

    def build():
        return T.cross_entropy_next_token(blk(x, mask=mask), targets)

    err = gradcheck(build, list(params.values()))
    assert err < TOL, f"block param grad err {err:.2e}"


def test_full_hierarchical_model_every_parameter():
    model = micro_model(seed=3, dtype=T.HIGH, vocab=9, img=4, patch=2, d_v=4,
                        enc_depth=2, d_l=4, lm_depth=2, heads=2)
    rng = np.random.default_rng(42)
    image = rng.random((4, 4, 3))
    seq = TokenSequence.for_ids([1, 4, 7, 2])
    mode = ModeSpec("hierarchical", selection=model.selection)
    params = model.named_params()

    def build():
        return model.loss(seq, image, mode)

    err = gradcheck(build, list(params.values()))
    assert err < TOL, f"full model grad err {err:.2e}"


def test_projector_gradcheck():
    from picovlm.bridge import Projector

    for seed in range(3):
        rng = np.random.default_rng([seed, 300])
        proj = Projector(rng, 5, 7, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        params = [x] + [p for _, p in proj.named_params("p")]
        err = gradcheck(lambda: T.sum_all(T.gelu(proj(x))), params)
        assert err < TOL
