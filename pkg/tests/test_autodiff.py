import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexattn import autodiff as ad
from _util import assert_close, central_diff


def leafy(tape, *arrays):
    return [tape.tensor(a) for a in arrays]


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(np.eye(2), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_hand_product(self):
        out = ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.ShapeError) as err:
            ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_grad_of_sum_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))

        def run():
            tape = ad.Tape()
            ta, tb = leafy(tape, a, b)
            loss = ad.matmul(ta, tb).sum()
            return tape, ta, tb, loss

        tape, ta, tb, loss = run()
        grads = tape.backward(loss)
        fd_a, fd_b = central_diff(lambda: float(run()[3].data), [a, b])
        assert_close(grads[ta.node_id], fd_a, label="dA")
        assert_close(grads[tb.node_id], fd_b, label="dB")
        # closed form: d sum(AB) / dA is the matrix of row sums of B
        assert_close(grads[ta.node_id], np.tile(b.sum(axis=1), (3, 1)), label="rowsums")

    @pytest.mark.parametrize("shapes,kwargs", [
        (((3, 4), (4, 2)), {}),
        (((3, 4), (2, 4)), {"transpose_b": True}),
        (((4,), (4, 2)), {}),
        (((3, 4), (4,)), {}),
        (((4,), (4,)), {}),
    ])
    def test_grad_all_forms(self, shapes, kwargs):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, shapes[0])
        b = rng.uniform(-1, 1, shapes[1])
        w = rng.uniform(-1, 1, ad.matmul(a, b, **kwargs).shape)

        def loss_value():
            tape = ad.Tape()
            ta, tb = leafy(tape, a, b)
            return tape, ta, tb, ad.mul(ad.matmul(ta, tb, **kwargs), w).sum()

        tape, ta, tb, loss = loss_value()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(loss_value()[3].data), [a, b])
        assert_close(grads[ta.node_id], fd[0], label=f"dA {shapes}")
        assert_close(grads[tb.node_id], fd[1], label=f"dB {shapes}")


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(np.zeros(3)).data[0] == 0.5

    def test_tanh_zero(self):
        assert ad.tanh(np.zeros(2)).data[1] == 0.0

    def test_mul_hand(self):
        assert np.array_equal(ad.mul(np.array([2.0, 3.0]), np.array([4.0, 5.0])).data,
                              [8.0, 15.0])

    def test_sigmoid_extremes_do_not_overflow(self):
        out = ad.sigmoid(np.array([-1e4, 1e4])).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_add_bias_broadcast(self):
        out = ad.add(np.ones((2, 3)), np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_add_shape_mismatch(self):
        with pytest.raises(ad.ShapeError) as err:
            ad.add(np.zeros((2, 3)), np.zeros((3, 2)))
        assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)

    @pytest.mark.parametrize("op,n_in", [
        (lambda x, y: ad.add(x, y), 2),
        (lambda x, y: ad.mul(x, y), 2),
        (lambda x, y: ad.tanh(x), 1),
        (lambda x, y: ad.sigmoid(x), 1),
        (lambda x, y: ad.concat(x, y), 2),
    ])
    def test_grads_match_finite_differences(self, op, n_in):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (3, 4))
        y = rng.uniform(-1, 1, (3, 4))
        w = rng.uniform(-1, 1, np.asarray(op(x, y).data).shape)

        def make():
            tape = ad.Tape()
            tx, ty = leafy(tape, x, y)
            return tape, tx, ty, ad.mul(op(tx, ty), w).sum()

        tape, tx, ty, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[3].data), [x, y][:n_in])
        assert_close(grads[tx.node_id], fd[0], label="dx")
        if n_in == 2:
            assert_close(grads[ty.node_id], fd[1], label="dy")

    def test_bias_add_grad(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (4, 3))
        b = rng.uniform(-1, 1, 3)
        w = rng.uniform(-1, 1, (4, 3))

        def make():
            tape = ad.Tape()
            tx, tb = leafy(tape, x, b)
            return tape, tx, tb, ad.mul(ad.add(tx, tb), w).sum()

        tape, tx, tb, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[3].data), [x, b])
        assert_close(grads[tx.node_id], fd[0])
        assert_close(grads[tb.node_id], fd[1])


class TestConcat:
    def test_basic(self):
        assert np.array_equal(ad.concat(np.array([1.0, 2.0]), np.array([3.0])).data,
                              [1, 2, 3])

    def test_zero_width_left(self):
        out = ad.concat(np.zeros(0), np.array([3.0, 4.0]))
        assert np.array_equal(out.data, [3.0, 4.0])

    def test_gradient_splits(self):
        tape = ad.Tape()
        a = tape.tensor([1.0, 2.0])
        b = tape.tensor([3.0])
        g = np.array([10.0, 20.0, 30.0])
        loss = ad.mul(ad.concat(a, b), g).sum()
        grads = tape.backward(loss)
        assert np.array_equal(grads[a.node_id], [10.0, 20.0])
        assert np.array_equal(grads[b.node_id], [30.0])

    def test_leading_dim_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat(np.zeros((2, 3)), np.zeros((3, 3)))


class TestMaskedSoftmax:
    def test_uniform(self):
        out = ad.masked_softmax(np.zeros(3), 3)
        assert_close(out.data, [1 / 3] * 3, rel=0, abs_floor=1e-12)

    def test_symmetry_with_garbage_pad(self):
        # pad score is huge on purpose: masking must skip it, not offset it
        out = ad.masked_softmax(np.array([5.0, 5.0, 1e9]), 2)
        assert np.array_equal(out.data, [0.5, 0.5, 0.0])

    def test_direct_formula_oracle(self):
        s = np.array([1.0, 2.0, 3.0])
        expect = np.exp(s) / np.exp(s).sum()
        assert_close(ad.masked_softmax(s, 3).data, expect, rel=1e-12, abs_floor=1e-15)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ad.EmptySequenceError):
            ad.masked_softmax(np.zeros(3), 0)

    def test_valid_len_beyond_width_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.masked_softmax(np.zeros(3), 4)

    def test_batched_rows(self):
        s = np.array([[0.0, 0.0, 9e99], [1.0, 2.0, 3.0]])
        out = ad.masked_softmax(s, [2, 3]).data
        assert np.array_equal(out[0], [0.5, 0.5, 0.0])
        assert_close(out[1], np.exp(s[1]) / np.exp(s[1]).sum(), rel=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(-1, 1, (3, 5))
        lens = np.array([2, 5, 3])
        w = rng.uniform(-1, 1, (3, 5))

        def make():
            tape = ad.Tape()
            ts = tape.tensor(s)
            return tape, ts, ad.mul(ad.masked_softmax(ts, lens), w).sum()

        tape, ts, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[2].data), [s])
        assert_close(grads[ts.node_id], fd[0])

    @given(st.integers(1, 8), st.integers(0, 7), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_probability_vector_property(self, valid, extra, seed):
        scores = np.random.default_rng(seed).uniform(-30, 30, valid + extra)
        out = ad.masked_softmax(scores, valid).data
        assert np.all(out >= 0)
        assert abs(out[:valid].sum() - 1.0) <= 1e-9
        assert np.all(out[valid:] == 0.0)


class TestGatherStackPool:
    def test_gather_rows_scatter_adds_repeats(self):
        tape = ad.Tape()
        table = tape.tensor(np.arange(6.0).reshape(3, 2))
        out = ad.gather_rows(table, np.array([1, 1, 0]))
        grads = tape.backward(out.sum())
        assert np.array_equal(grads[table.node_id], [[1, 1], [2, 2], [0, 0]])

    def test_gather_rows_bounds(self):
        with pytest.raises(ad.ShapeError):
            ad.gather_rows(np.zeros((3, 2)), np.array([3]))

    def test_stack_columns_grad(self):
        rng = np.random.default_rng(5)
        cols = [rng.uniform(-1, 1, 4) for _ in range(3)]
        w = rng.uniform(-1, 1, (4, 3))

        def make():
            tape = ad.Tape()
            ts = leafy(tape, *cols)
            return tape, ts, ad.mul(ad.stack_columns(ts), w).sum()

        tape, ts, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[2].data), cols)
        for t, f in zip(ts, fd):
            assert_close(grads[t.node_id], f)

    def test_weighted_sum_matches_loop_and_fd(self):
        rng = np.random.default_rng(6)
        weights = rng.uniform(-1, 1, (3, 4))
        items = [rng.uniform(-1, 1, (3, 5)) for _ in range(4)]
        out = ad.weighted_sum(weights, items).data
        explicit = np.zeros((3, 5))
        for t in range(4):
            for b in range(3):
                explicit[b] += weights[b, t] * items[t][b]
        assert_close(out, explicit, rel=1e-12, abs_floor=1e-15)

        w2 = rng.uniform(-1, 1, (3, 5))

        def make():
            tape = ad.Tape()
            tw = tape.tensor(weights)
            ti = leafy(tape, *items)
            return tape, tw, ti, ad.mul(ad.weighted_sum(tw, ti), w2).sum()

        tape, tw, ti, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[3].data), [weights] + items)
        assert_close(grads[tw.node_id], fd[0])
        for t, f in zip(ti, fd[1:]):
            assert_close(grads[t.node_id], f)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
        assert_close(loss.data, np.log(4.0), rel=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.uniform(-1, 1, (3, 4))
        labels = np.array([0, 2, 3])

        def make():
            tape = ad.Tape()
            tl = tape.tensor(logits)
            return tape, tl, ad.softmax_cross_entropy(tl, labels)

        tape, tl, loss = make()
        grads = tape.backward(loss)
        fd = central_diff(lambda: float(make()[2].data), [logits])
        assert_close(grads[tl.node_id], fd[0])

    def test_label_out_of_range(self):
        with pytest.raises(ad.ShapeError):
            ad.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestBackwardContract:
    def test_identity_loss(self):
        tape = ad.Tape()
        x = tape.tensor(np.asarray(2.5))
        grads = tape.backward(x.sum())
        assert grads[x.node_id] == 1.0

    def test_square_loss(self):
        tape = ad.Tape()
        x = tape.tensor([1.0, 2.0])
        grads = tape.backward(ad.mul(x, x).sum())
        assert np.array_equal(grads[x.node_id], [2.0, 4.0])

    def test_unreachable_leaf_gets_zeros(self):
        tape = ad.Tape()
        x = tape.tensor([1.0, 2.0])
        unused = tape.tensor(np.ones((2, 2)))
        grads = tape.backward(x.sum())
        assert np.array_equal(grads[unused.node_id], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.tensor([1.0, 2.0])
        with pytest.raises(ad.TapeError):
            tape.backward(x)

    def test_foreign_loss_rejected(self):
        tape = ad.Tape()
        other = ad.Tape()
        x = other.tensor([1.0])
        with pytest.raises(ad.TapeError):
            tape.backward(x.sum())

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().tensor([1.0])
        b = ad.Tape().tensor([1.0])
        with pytest.raises(ad.TapeError):
            ad.add(a, b)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_fanout_is_sum_of_single_branch_grads(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, 3))
        w1 = rng.uniform(-1, 1, (3, 2))
        w2 = rng.uniform(-1, 1, (3, 4))

        def branch(use1, use2):
            tape = ad.Tape()
            tx = tape.tensor(x)
            loss = None
            if use1:
                loss = ad.matmul(tx, w1).sum()
            if use2:
                term = ad.tanh(ad.matmul(tx, w2)).sum()
                loss = term if loss is None else ad.add(loss, term)
            return tape.backward(loss)[tx.node_id]

        both = branch(True, True)
        assert_close(both, branch(True, False) + branch(False, True),
                     rel=1e-12, abs_floor=1e-14)

    def test_tape_free_ops_are_eager_and_unregistered(self):
        x = ad.Tensor([1.0, 2.0])
        y = x * x + x
        assert y.tape is None and y.node_id is None
        assert np.array_equal(y.data, [2.0, 6.0])


class TestRandomOpGradients:
    """Every differentiable op against central differences on [-1, 1] inputs."""

    def test_sweep(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            a = rng.uniform(-1, 1, (3, 4))
            b = rng.uniform(-1, 1, (4, 3))
            bias = rng.uniform(-1, 1, 3)
            lens = np.array([2, 3, 1])

            def make():
                tape = ad.Tape()
                ta, tb, tbias = leafy(tape, a, b, bias)
                h = ad.tanh(ad.add(ad.matmul(ta, tb), tbias))
                m = ad.sigmoid(ad.mul(h, h))
                probs = ad.masked_softmax(m, lens)
                pooled = ad.weighted_sum(probs, [h, m, h])
                return tape, (ta, tb, tbias), ad.softmax_cross_entropy(
                    ad.concat(pooled, h), np.array([1, 0, 5]))

            tape, leaves, loss = make()
            grads = tape.backward(loss)
            fd = central_diff(lambda: float(make()[2].data), [a, b, bias])
            for leaf, f in zip(leaves, fd):
                assert_close(grads[leaf.node_id], f, label=f"trial {trial}")
