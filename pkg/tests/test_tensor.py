import threading

import numpy as np
import pytest

from xmsynth import functional as F
from xmsynth.errors import DetachedTapeError, ValidationError
from xmsynth.tensor import Rng, Tape, Tensor, backward, get_dtype, no_grad, precision, record


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_switches_dtype(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
            assert get_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_size_matches_shape_product(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 == int(np.prod(t.shape))

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        with Tape():
            (x * 2.0).sum().backward()
        assert x.grad.shape == x.shape

    def test_tensor_division_by_tensor_rejected(self):
        with pytest.raises(TypeError):
            Tensor([1.0]) / Tensor([2.0])

    def test_detach_drops_history(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = (x * 3.0).detach()
            assert not y.requires_grad and y.tape_id is None


class TestBackward:
    def test_mean_of_squares(self, f64):
        # d/dx mean(x^2) = 2x/n
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            (x * x).mean().backward()
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_two_branches_sum(self, f64):
        x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
        with Tape():
            loss = (x * 3.0).sum() + (x * x).sum()
            loss.backward()
        np.testing.assert_allclose(x.grad, 3.0 + 2.0 * x.data)

    def test_repeated_backward_accumulates(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = (x * x).sum()
            loss.backward()
            loss.backward()
        np.testing.assert_allclose(x.grad, 2 * 2.0 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * 2.0
            with pytest.raises(ValidationError):
                y.backward()

    def test_closed_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = (x * 2.0).sum()
        with pytest.raises(DetachedTapeError):
            loss.backward()

    def test_loss_without_history_rejected(self):
        with pytest.raises(DetachedTapeError):
            Tensor(1.0).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = x * 2.0
            assert len(tape) == 0 and not y.requires_grad

    def test_reverse_append_order(self):
        """Backward visits nodes strictly in reverse recording order."""
        visited = []

        def op(name, t):
            return record(name, t.data.copy(), (t,), lambda g: (visited.append(name) or g,))

        x = Tensor([1.0], requires_grad=True)
        with Tape():
            a = op("a", x)
            b = op("b", a)
            c = op("c", x)
            loss = F.add(b, c).sum()
            loss.backward()
        assert visited == ["c", "b", "a"]

    def test_shared_input_gets_sum_of_contributions(self, f64):
        x = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        w = Tensor(np.array([[2.0], [3.0]]), requires_grad=True)
        with Tape():
            y = F.linear(x, w, None)
            loss = (y * y).sum() + (x * 5.0).sum()
            loss.backward()
        # y = 2 - 6 = -4; dy/dx = w^T; d(y^2)/dx = 2y w^T
        np.testing.assert_allclose(x.grad, 2 * -4.0 * np.array([[2.0, 3.0]]) + 5.0)

    def test_composite_graph_vs_finite_differences(self, f64, rng):
        """conv -> batchnorm -> leaky_relu -> loss against central differences."""
        x = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(4, 2, 3, 3)) * 0.3
        gamma = rng.normal(1.0, 0.1, size=4)
        beta = rng.normal(0.0, 0.1, size=4)
        proj = rng.normal(size=(3, 4, 6, 6))

        def loss_of(warr):
            st = F.BatchNormState.fresh(4, np.float64)
            h = F.conv2d(Tensor(x), Tensor(warr), None, 1, 1)
            h = F.leaky_relu(F.batchnorm2d(h, Tensor(gamma), Tensor(beta), st), 0.2)
            return float(np.sum(h.data * proj))

        wt = Tensor(w, requires_grad=True)
        with Tape():
            st = F.BatchNormState.fresh(4, np.float64)
            h = F.conv2d(Tensor(x), wt, None, 1, 1)
            h = F.leaky_relu(F.batchnorm2d(h, Tensor(gamma), Tensor(beta), st), 0.2)
            F.mul(h, Tensor(proj)).sum().backward()
        num = np.zeros_like(w)
        step = 1e-4
        for idx in np.ndindex(w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += step
            wm[idx] -= step
            num[idx] = (loss_of(wp) - loss_of(wm)) / (2 * step)
        rel = np.abs(wt.grad - num).max() / max(np.abs(num).max(), 1e-8)
        assert rel < 1e-4

    def test_determinism_of_forward_and_backward(self, f64):
        def run():
            r = np.random.default_rng(5)
            x = Tensor(r.normal(size=(2, 3, 8, 8)), requires_grad=True)
            w = Tensor(r.normal(size=(4, 3, 4, 4)), requires_grad=True)
            with Tape():
                y = F.conv2d(x, w, None, 2, 1)
                (y * y).mean().backward()
            return y.data, x.grad, w.grad

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)

    def test_tapes_are_thread_local(self):
        seen = {}

        def worker():
            with Tape() as t:
                x = Tensor([1.0], requires_grad=True)
                (x * 2.0).sum()
                seen["worker"] = len(t)

        with Tape() as outer:
            x = Tensor([1.0], requires_grad=True)
            y = x * 3.0
            th = threading.Thread(target=worker)
            th.start()
            th.join()
            assert len(outer) == 1
        assert seen["worker"] == 2
        del y


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(11), Rng(11)
        assert np.array_equal(a.stream("weights").normal(size=5), b.stream("weights").normal(size=5))

    def test_streams_independent(self):
        a, b = Rng(11), Rng(11)
        a.stream("noise").normal(size=1000)
        assert np.array_equal(a.stream("weights").normal(size=5), b.stream("weights").normal(size=5))

    def test_distinct_streams_differ(self):
        r = Rng(11)
        assert not np.array_equal(r.stream("weights").normal(size=5), r.stream("data").normal(size=5))

    def test_substream_depends_only_on_index(self):
        r = Rng(3)
        first = r.substream("shuffle", 4).permutation(10)
        r.stream("data").normal(size=100)
        assert np.array_equal(first, Rng(3).substream("shuffle", 4).permutation(10))
        assert not np.array_equal(first, r.substream("shuffle", 5).permutation(10))

    def test_state_reports_used_streams(self):
        r = Rng(0)
        r.stream("noise")
        assert list(r.state()) == ["noise"]
