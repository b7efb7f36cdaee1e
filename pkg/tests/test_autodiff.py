"""Reverse-mode gradients checked against central finite differences."""

import numpy as np
import pytest

from sidkit.autodiff import AdamW, Tensor, cosine_warmup_lr, logsumexp_rows


def finite_difference(f, arrays, h=1e-6):
    """Central-difference gradient of scalar f w.r.t. each array, elementwise."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            up = f(*arrays)
            a[idx] = orig - h
            down = f(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, h=1e-6, rtol=1e-5, atol=1e-7):
    """build(*tensors) -> scalar Tensor; compare backward() to the FD oracle."""
    tensors = [Tensor(a.copy()) for a in arrays]
    out = build(*tensors)
    out.backward()

    def scalar(*vals):
        return build(*[Tensor(v) for v in vals]).item()

    expected = finite_difference(scalar, [t.value for t in tensors], h=h)
    for t, e in zip(tensors, expected):
        np.testing.assert_allclose(t.grad, e, rtol=rtol, atol=atol)


class TestElementwiseOps:
    def test_add_mul_chain(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        check_grads(lambda x, y: ((x + y) * (x - y * 2.0)).sum(), [a, b])

    def test_broadcasting_bias(self):
        """(3,4) + (4,) broadcasts forward; the bias grad sums over rows."""
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
        check_grads(lambda x, y: ((x + y) ** 2.0).sum(), [a, b])

    def test_division_and_power(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.5, 2.0, (3, 3))
        b = rng.uniform(0.5, 2.0, (3, 3))
        check_grads(lambda x, y: (x / y + y**-0.5).sum(), [a, b])

    def test_relu_kink_avoided(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 5))
        a[np.abs(a) < 1e-3] = 0.5  # keep FD away from the nondifferentiable point
        check_grads(lambda x: (x.relu() * 3.0).sum(), [a])

    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0.5, 3.0, (4,))
        check_grads(lambda x: (x.exp().log() + x.sqrt()).sum(), [a])


class TestMatmulAndReductions:
    def test_matmul(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        check_grads(lambda x, y: (x @ y).sum(), [a, b])

    def test_mean_and_axis_sum(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((3, 4))
        check_grads(lambda x: (x.sum(axis=1, keepdims=True) * x).mean(), [a])

    def test_gather_rows_scatter_adds(self):
        """Repeated indices accumulate gradient onto the same source row."""
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 3))
        idx = np.array([0, 2, 2, 1, 0, 0])
        check_grads(lambda x: (x.gather_rows(idx) ** 2.0).sum(), [a])

    def test_detach_blocks_gradient(self):
        a = Tensor(np.array([1.0, 2.0]))
        out = (a * a.detach()).sum()
        out.backward()
        np.testing.assert_allclose(a.grad, a.value)  # only the live factor contributes

    def test_logsumexp_matches_direct(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 7)) * 10
        got = logsumexp_rows(Tensor(x)).value
        want = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_logsumexp_gradient(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 4))
        check_grads(lambda t: logsumexp_rows(t).sum(), [x])

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2))).backward()

    def test_diamond_graph_accumulates_once_per_path(self):
        """y = x*x reused twice: grad must be 4x, not 2x."""
        x = Tensor(np.array([3.0]))
        y = x * x
        out = (y + y).sum()
        out.backward()
        np.testing.assert_allclose(x.grad, [12.0])


class TestAdamW:
    def test_single_step_matches_hand_computation(self):
        """One step with beta=(0.9, 0.999): m_hat = g, v_hat = g^2, so the
        update is lr * g / (|g| + eps) regardless of gradient scale."""
        p = Tensor(np.array([1.0, -2.0]))
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([0.5, -4.0])
        opt.step()
        g = np.array([0.5, -4.0])
        want = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, want, rtol=1e-9)

    def test_weight_decay_is_decoupled(self):
        p = Tensor(np.array([10.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        p.grad = np.array([1.0])
        opt.step()
        # decay subtracts lr * wd * p on top of the adam update
        adam_only = 10.0 - 0.1 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.value, adam_only - 0.1 * 0.01 * 10.0, rtol=1e-9)

    def test_zero_grad_resets(self):
        p = Tensor(np.array([1.0]))
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.zero_grad()
        assert p.grad is None

    def test_step_is_deterministic(self):
        def run():
            p = Tensor(np.array([1.0, 2.0, 3.0]))
            opt = AdamW([p], lr=0.05)
            for i in range(5):
                p.grad = np.sin(np.arange(3.0) + i)
                opt.step()
            return p.value.copy()

        np.testing.assert_array_equal(run(), run())


class TestCosineWarmup:
    def test_linear_warmup_then_cosine(self):
        lrs = [cosine_warmup_lr(e, 1.0, warmup_epochs=4, total_epochs=12) for e in range(12)]
        np.testing.assert_allclose(lrs[:4], [0.25, 0.5, 0.75, 1.0])
        assert all(b <= a + 1e-12 for a, b in zip(lrs[3:], lrs[4:]))  # decays after warmup
        assert lrs[-1] > 0.0
        np.testing.assert_allclose(
            cosine_warmup_lr(12, 1.0, warmup_epochs=4, total_epochs=12), 0.0, atol=1e-12
        )

    def test_no_warmup(self):
        assert cosine_warmup_lr(0, 2.0, warmup_epochs=0, total_epochs=10) == 2.0
