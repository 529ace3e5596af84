"""Autodiff engine: forward values, gradients vs finite differences, tape rules."""

from __future__ import annotations

import zlib

import numpy as np
import pytest
from scipy.special import erf

from bbcq.errors import ContractError, DimensionError, LabelIndexError
from bbcq.tensor import (LAYERNORM_EPS, Tape, Tensor, add, concat,
                         cross_entropy, gelu, layernorm, matmul, mul,
                         recording_active, reshape, softmax, tensor_mean,
                         tensor_sum, transpose)


def check_gradients(build, shapes, seed, points=10, h=1e-6):
    """Tape gradients vs central differences at random coordinates."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape) for shape in shapes]
    with Tape() as tape:
        tensors = [Tensor(a.copy()) for a in arrays]
        loss = build(*tensors)
        tape.backward(loss)
        grads = [tape.grad(t) for t in tensors]
    for which, (arr, grad) in enumerate(zip(arrays, grads)):
        assert grad is not None, f"input {which} received no gradient"
        assert grad.shape == arr.shape
        flat = rng.choice(arr.size, size=min(points, arr.size), replace=False)
        for f_idx in flat:
            idx = np.unravel_index(f_idx, arr.shape)

            def loss_at(value):
                probe = [a.copy() for a in arrays]
                probe[which][idx] = value
                return build(*[Tensor(p) for p in probe]).item()

            fd = (loss_at(arr[idx] + h) - loss_at(arr[idx] - h)) / (2.0 * h)
            assert np.isclose(grad.data[idx], fd, rtol=1e-4, atol=1e-7), (
                f"input {which} coord {idx}: analytic {grad.data[idx]} vs fd {fd}")


# ---------------------------------------------------------------------------
# forward values


def test_matmul_matches_numpy(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, a @ b)


def test_matmul_batched(rng):
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(2, 3, 5, 6))
    out = matmul(Tensor(a), Tensor(b))
    assert out.shape == (2, 3, 4, 6)
    np.testing.assert_array_equal(out.data, np.matmul(a, b))


@pytest.mark.parametrize("shapes", [((3,), (4, 5)), ((3, 4), (3,))])
def test_matmul_rejects_vectors(shapes, rng):
    a, b = (rng.normal(size=s) for s in shapes)
    with pytest.raises(DimensionError):
        matmul(Tensor(a), Tensor(b))


def test_matmul_inner_mismatch_names_shapes(rng):
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 6\)"):
        matmul(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 6))))


def test_softmax_rows_sum_to_one(rng):
    out = softmax(Tensor(rng.normal(size=(4, 7)) * 30.0), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert (out.data > 0).all()


def test_softmax_invariant_to_shift(rng):
    x = rng.normal(size=(2, 5))
    np.testing.assert_allclose(softmax(Tensor(x)).data,
                               softmax(Tensor(x + 1000.0)).data, atol=1e-15)


def test_softmax_bad_axis(rng):
    with pytest.raises(DimensionError):
        softmax(Tensor(rng.normal(size=(2, 3))), axis=2)


def test_gelu_matches_erf_form(rng):
    x = rng.normal(size=(5, 3)) * 3.0
    expected = x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, expected, atol=1e-15)


def test_layernorm_normalizes_last_axis(rng):
    x = rng.normal(size=(3, 4, 8)) * 5.0 + 2.0
    out = layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    # variance of the normalized output is var/(var+eps), slightly below 1
    assert (out.data.var(axis=-1) <= 1.0 + 1e-12).all()


def test_layernorm_eps_is_pinned():
    assert LAYERNORM_EPS == 1e-5


def test_layernorm_affine_shape_error(rng):
    x = Tensor(rng.normal(size=(2, 8)))
    with pytest.raises(DimensionError):
        layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_cross_entropy_matches_manual(rng):
    logits = rng.normal(size=(6, 5)) * 4.0
    labels = np.array([0, 1, 2, 3, 4, 0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expected = -log_probs[np.arange(6), labels].mean()
    got = cross_entropy(Tensor(logits), labels).item()
    assert np.isclose(got, expected, rtol=1e-14)


def test_cross_entropy_extreme_logits_stay_finite():
    logits = np.array([[1e4, -1e4, 0.0], [-1e4, 1e4, 0.0]])
    loss = cross_entropy(Tensor(logits), np.array([0, 1])).item()
    assert np.isfinite(loss) and loss >= 0.0


def test_cross_entropy_label_out_of_range(rng):
    logits = Tensor(rng.normal(size=(2, 3)))
    with pytest.raises(LabelIndexError):
        cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(LabelIndexError):
        cross_entropy(logits, np.array([-1, 0]))


def test_cross_entropy_rejects_float_labels(rng):
    with pytest.raises(ContractError):
        cross_entropy(Tensor(rng.normal(size=(2, 3))), np.array([0.0, 1.0]))


def test_cross_entropy_label_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        cross_entropy(Tensor(rng.normal(size=(2, 3))), np.array([0, 1, 2]))


def test_concat_and_reshape_roundtrip(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    joined = concat([Tensor(a), Tensor(b)], axis=0)
    assert joined.shape == (6, 3)
    np.testing.assert_array_equal(reshape(joined, (3, 6)).data,
                                  np.concatenate([a, b]).reshape(3, 6))


def test_concat_empty_list():
    with pytest.raises(ContractError):
        concat([])


# ---------------------------------------------------------------------------
# gradients vs finite differences (10 random coordinates per input)


GRAD_CASES = [
    ("matmul", lambda a, b: tensor_sum(mul(matmul(a, b), 0.7)),
     [(3, 4), (4, 5)]),
    ("matmul_broadcast", lambda a, b: tensor_sum(matmul(a, b)),
     [(2, 3, 4), (4, 5)]),
    ("add_broadcast", lambda a, b: tensor_sum(mul(add(a, b), add(a, b))),
     [(3, 4), (4,)]),
    ("mul_broadcast", lambda a, b: tensor_sum(mul(a, b)), [(2, 3, 4), (3, 4)]),
    ("transpose", lambda a: tensor_sum(mul(transpose(a, (1, 0, 2)), 2.0)),
     [(2, 3, 4)]),
    ("reshape", lambda a: tensor_sum(mul(reshape(a, (6, 2)),
                                         reshape(a, (6, 2)))), [(3, 4)]),
    ("sum_axis", lambda a: tensor_sum(mul(tensor_sum(a, axis=1, keepdims=True),
                                          3.0)), [(3, 4)]),
    ("mean", lambda a: tensor_sum(mul(tensor_mean(a, axis=0), a.mean())),
     [(4, 3)]),
    ("softmax", lambda a: tensor_sum(mul(softmax(a, axis=-1), a)), [(3, 5)]),
    ("gelu", lambda a: tensor_sum(mul(gelu(a), 1.3)), [(4, 4)]),
    ("concat", lambda a, b: tensor_sum(mul(concat([a, b], axis=1),
                                           concat([a, b], axis=1))),
     [(2, 3), (2, 4)]),
]


@pytest.mark.parametrize("name,build,shapes", GRAD_CASES,
                         ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_finite_differences(name, build, shapes):
    check_gradients(build, shapes, seed=zlib.crc32(name.encode()))


def test_layernorm_gradients():
    def build(x, g, b):
        return tensor_sum(mul(layernorm(x, g, b), x))

    check_gradients(build, [(3, 8), (8,), (8,)], seed=42)


def test_cross_entropy_gradients():
    labels = np.array([0, 2, 1, 2])

    def build(logits):
        return cross_entropy(logits, labels)

    check_gradients(build, [(4, 3)], seed=11)


def test_composite_chain_gradients():
    """A miniature MLP-with-attention-flavored chain, differentiated end to end."""
    labels = np.array([1, 0])

    def build(x, w1, w2, g, b):
        h = layernorm(matmul(x, w1), g, b)
        probs = softmax(h, axis=-1)
        out = matmul(gelu(probs), w2)
        return cross_entropy(tensor_mean(out, axis=1), labels)

    check_gradients(build, [(2, 3, 4), (4, 6), (6, 5), (6,), (6,)], seed=3)


# ---------------------------------------------------------------------------
# tape mechanics


def test_tape_nesting_rejected():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass
    assert not recording_active()


def test_backward_requires_scalar(rng):
    with Tape() as tape:
        out = mul(Tensor(rng.normal(size=(2, 2))), 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)


def test_backward_rejects_foreign_loss(rng):
    loss = Tensor(np.asarray(1.0))
    with Tape() as tape:
        with pytest.raises(ContractError):
            tape.backward(loss)


def test_unused_tensor_has_no_gradient(rng):
    with Tape() as tape:
        used = Tensor(rng.normal(size=(2, 2)))
        unused = Tensor(rng.normal(size=(2, 2)))
        tape.backward(tensor_sum(mul(used, used)))
        assert tape.grad(unused) is None
        assert tape.grad(used) is not None


def test_gradient_accumulates_over_reuse(rng):
    x = rng.normal(size=(3,))
    with Tape() as tape:
        t = Tensor(x.reshape(1, 3))
        y = tensor_sum(add(mul(t, 2.0), mul(t, 3.0)))
        tape.backward(y)
        np.testing.assert_allclose(tape.grad(t).data, np.full((1, 3), 5.0))


def test_ops_run_without_tape(rng):
    assert not recording_active()
    out = gelu(softmax(Tensor(rng.normal(size=(2, 4)))))
    assert out._node is None


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    labels = np.array([0, 1, 2, 0])
    grads = []
    for _ in range(2):
        with Tape() as tape:
            xt = Tensor(x.copy())
            loss = cross_entropy(matmul(gelu(xt), Tensor(w.copy())), labels)
            tape.backward(loss)
            grads.append(tape.grad(xt).data.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_tape_exits_cleanly_on_error():
    try:
        with Tape():
            raise ValueError("boom")
    except ValueError:
        pass
    assert not recording_active()
