import math

import numpy as np
import pytest

from metagec import autodiff as ad
from metagec.autodiff import AdamState, DimensionError, Tensor, adam_step

from helpers import FD_TOLERANCE, check_op

TRIALS = 20


def _rand(rng, *shape):
    return rng.normal(size=shape)


# Every differentiable op, with a generator for random inputs of random size.
OPS = {
    "add": (lambda a, b: ad.add(a, b), lambda r: [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "add_broadcast": (lambda a, b: ad.add(a, b), lambda r: [_rand(r, 2, 3, 4), _rand(r, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), lambda r: [_rand(r, 3, 5), _rand(r, 3, 5)]),
    "mul_broadcast": (lambda a, b: ad.mul(a, b), lambda r: [_rand(r, 4, 3), _rand(r, 4, 1)]),
    "sub": (lambda a, b: a - b, lambda r: [_rand(r, 2, 3), _rand(r, 2, 3)]),
    "neg": (lambda a: -a, lambda r: [_rand(r, 5)]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [_rand(r, 3, 3)]),
    "gelu": (ad.gelu, lambda r: [_rand(r, 4, 6) * 2]),
    "relu": (ad.relu, lambda r: [np.sign(_rand(r, 4, 5)) * r.uniform(0.1, 2.0, size=(4, 5))]),
    "matmul": (ad.matmul, lambda r: [_rand(r, 3, 4), _rand(r, 4, 2)]),
    "matmul_folded": (ad.matmul, lambda r: [_rand(r, 2, 3, 4), _rand(r, 4, 5)]),
    "matmul_batched": (ad.matmul, lambda r: [_rand(r, 2, 3, 4), _rand(r, 2, 4, 3)]),
    "matmul_broadcast": (ad.matmul, lambda r: [_rand(r, 2, 2, 3, 4), _rand(r, 2, 1, 4, 2)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), lambda r: [_rand(r, 3, 4)]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [_rand(r, 2, 3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [_rand(r, 2, 3), _rand(r, 2, 4)]),
    "sum_all": (ad.sum_all, lambda r: [_rand(r, 3, 4)]),
    "embedding": (lambda t: ad.embedding(t, np.array([[0, 3, 3], [1, 0, 4]])), lambda r: [_rand(r, 5, 3)]),
    "softmax_rows": (ad.softmax_rows, lambda r: [_rand(r, 3, 5) * 3]),
    "log_softmax_rows": (ad.log_softmax_rows, lambda r: [_rand(r, 3, 5) * 3]),
    "layer_norm": (ad.layer_norm, lambda r: [_rand(r, 3, 6), _rand(r, 6), _rand(r, 6)]),
    "cross_entropy": (
        lambda x: ad.cross_entropy(x, [1, 0, 4, 2], [False, False, True, False]),
        lambda r: [_rand(r, 4, 5) * 2],
    ),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_matches_central_differences(self, name):
        build, make_inputs = OPS[name]
        rng = np.random.default_rng(sum(map(ord, name)))
        worst = max(check_op(build, make_inputs(rng), rng) for _ in range(TRIALS))
        assert worst <= FD_TOLERANCE, f"{name}: relative error {worst:.2e}"

    def test_composite_graph_with_shared_nodes(self, rng):
        # x feeds two branches that later recombine
        def build(x, w):
            h = ad.gelu(ad.matmul(x, w))
            return ad.add(ad.softmax_rows(h), ad.layer_norm(h, Tensor(np.ones(3)), Tensor(np.zeros(3))))

        for _ in range(TRIALS):
            assert check_op(build, [_rand(rng, 4, 5), _rand(rng, 5, 3)], rng) <= FD_TOLERANCE


class TestMatmul:
    def test_identity(self, rng):
        a = _rand(rng, 2, 2)
        np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(np.eye(2))).data, a)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_zero(self, rng):
        out = ad.matmul(Tensor(_rand(rng, 3, 2)), Tensor(np.zeros((2, 4))))
        assert not out.data.any()

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_hand_row(self):
        out = ad.softmax_rows(Tensor([[math.log(1), math.log(3)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_rows_are_distributions(self, rng):
        out = ad.softmax_rows(Tensor(_rand(rng, 50, 17) * 20)).data
        assert np.all((out >= 0) & (out <= 1))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        loss = ad.cross_entropy(Tensor(np.zeros((3, 7))), [0, 6, 2])
        assert float(loss.data) == pytest.approx(math.log(7), abs=1e-14)

    def test_confident_logits_approach_zero(self):
        logits = np.full((2, 4), -50.0)
        logits[0, 1] = logits[1, 3] = 50.0
        loss = float(ad.cross_entropy(Tensor(logits), [1, 3]).data)
        assert 0.0 <= loss < 1e-30

    def test_hand_value(self):
        loss = ad.cross_entropy(Tensor([[math.log(3), math.log(1)]]), [0])
        assert float(loss.data) == pytest.approx(-math.log(0.75), abs=1e-15)
        assert float(loss.data) == pytest.approx(0.28768, abs=1e-5)

    def test_padding_is_ignored(self, rng):
        logits = _rand(rng, 3, 5)
        full = ad.cross_entropy(Tensor(logits[:2]), [1, 2])
        padded = ad.cross_entropy(Tensor(logits), [1, 2, 0], [False, False, True])
        assert float(full.data) == float(padded.data)

    def test_non_negative(self, rng):
        for _ in range(50):
            logits = _rand(rng, 4, 6) * 5
            assert float(ad.cross_entropy(Tensor(logits), rng.integers(6, size=4)).data) >= 0

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_padded_position_may_hold_any_id(self):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 99], [False, True])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = Tensor(_rand(rng, 3, 2))
        grads = ad.backward(ad.sum_all(w), {"w": w})
        np.testing.assert_array_equal(grads["w"], np.ones((3, 2)))

    def test_half_squared_norm(self):
        w = Tensor([3.0, -4.0])
        loss = ad.scale(ad.sum_all(ad.mul(w, w)), 0.5)
        np.testing.assert_array_equal(ad.backward(loss, {"w": w})["w"], [3.0, -4.0])

    def test_unreachable_parameter_gets_zero(self, rng):
        w, unused = Tensor(_rand(rng, 2)), Tensor(_rand(rng, 4, 4))
        grads = ad.backward(ad.sum_all(w), {"w": w, "unused": unused})
        assert grads["unused"].shape == (4, 4) and not grads["unused"].any()

    def test_non_scalar_rejected(self, rng):
        w = Tensor(_rand(rng, 3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(w, {"w": w})

    def test_repeated_runs_are_bit_identical(self, rng):
        x, w = _rand(rng, 5, 4), _rand(rng, 4, 4)

        def run():
            xt, wt = Tensor(x), Tensor(w)
            h = ad.gelu(ad.matmul(xt, wt))
            loss = ad.sum_all(ad.mul(ad.softmax_rows(h), ad.add(h, xt)))
            return ad.backward(loss, {"x": xt, "w": wt})

        a, b = run(), run()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_no_grad_records_nothing(self, rng):
        w = Tensor(_rand(rng, 3))
        with ad.no_grad():
            out = ad.mul(w, w)
        assert out.parents == () and out.backward_fn is None


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        params = {"w": _rand(rng, 3, 2)}
        state = AdamState.for_params(params)
        out = params
        for _ in range(5):
            out = adam_step(out, {"w": np.zeros((3, 2))}, state, 0.1)
        np.testing.assert_array_equal(out["w"], params["w"])
        assert state.step == 5

    def test_first_step_moves_by_lr(self):
        state = AdamState.for_params({"w": np.zeros(1)})
        out = adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, state, 0.01)
        expected = -0.01 * 1.0 / (1.0 + 1e-9)
        assert out["w"][0] == pytest.approx(expected, rel=1e-15)

    def test_defaults(self):
        state = AdamState()
        assert (state.beta1, state.beta2, state.eps, state.step) == (0.9, 0.98, 1e-9, 0)

    def test_deterministic(self, rng):
        params = {"a": _rand(rng, 4), "b": _rand(rng, 2, 2)}
        grads = [{"a": _rand(rng, 4), "b": _rand(rng, 2, 2)} for _ in range(3)]

        def run():
            state, p = AdamState.for_params(params), params
            for g in grads:
                p = adam_step(p, g, state, 1e-3)
            return p

        a, b = run(), run()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_input_params_untouched(self, rng):
        params = {"w": _rand(rng, 3)}
        before = params["w"].copy()
        adam_step(params, {"w": np.ones(3)}, AdamState.for_params(params), 0.5)
        np.testing.assert_array_equal(params["w"], before)

    def test_shape_mismatch(self):
        state = AdamState.for_params({"w": np.zeros(3)})
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, state, 0.1)

    def test_missing_gradient(self):
        with pytest.raises(KeyError):
            adam_step({"w": np.zeros(3)}, {}, AdamState(), 0.1)
