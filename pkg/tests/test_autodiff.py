import numpy as np
import pytest
import torch

from hardtsp import autodiff as ad
from hardtsp.autodiff import ParameterStore, backward, forward_op
from hardtsp.errors import (
    AccountingError,
    CheckpointError,
    ContractError,
    NumericError,
    ShapeError,
)
from hardtsp.tsp import tour_cost_gradient

from oracles import central_difference
from op_cases import OP_CASES

T = torch.float64


def t(x, grad=False):
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=T, requires_grad=grad)


def check_gradient(fn, inputs, step=1e-5, tol=1e-4, seed=0):
    """Compare autodiff with central differences of ``sum(fn(*inputs) * R)``."""
    rng = np.random.default_rng(seed)
    leaves = [t(x, grad=True) for x in inputs]
    out = fn(*leaves)
    proj = torch.from_numpy(rng.standard_normal(tuple(out.shape)))
    grads = backward((out * proj).sum(), leaves)
    for k, x in enumerate(inputs):
        def scalar(v, k=k):
            args = [t(a) for a in inputs]
            args[k] = t(v)
            with torch.no_grad():
                return float((fn(*args) * proj).sum())
        fd = central_difference(scalar, x, step)
        err = np.linalg.norm(grads[k].numpy() - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < tol, f"input {k}: relative error {err:.2e}"


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(forward_op("softmax", t([0.0, 0.0, 0.0])).numpy(), [1 / 3] * 3,
                                   rtol=0, atol=1e-16)

    def test_identity_matmul(self):
        x = t(np.random.default_rng(0).random((2, 5)))
        assert torch.equal(forward_op("matmul", torch.eye(2, dtype=T), x), x)

    def test_tanh_zero(self):
        assert forward_op("tanh", t([0.0])).item() == 0.0

    def test_masked_fill_uses_large_negative(self):
        out = forward_op("masked_fill", t([1.0, 2.0]), torch.tensor([False, True]))
        assert out[1].item() == ad.MASK_VALUE
        p = forward_op("softmax", out)
        assert p[1].item() == 0.0 and torch.isfinite(p).all()

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            forward_op("add", t(np.zeros((2, 3))), t(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            forward_op("matmul", t(np.zeros((2, 3))), t(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            forward_op("masked_fill", t(np.zeros(3)), torch.zeros(2, dtype=torch.bool))
        with pytest.raises(ContractError):
            forward_op("conv2d", t([1.0]))

    def test_nan_reports_op_kind(self):
        with pytest.raises(NumericError) as info:
            forward_op("sqrt", t([-1.0]))
        assert info.value.kind == "sqrt"

    def test_suffix_broadcast_allowed(self):
        out = forward_op("add", t(np.zeros((4, 3, 2))), t([1.0, 2.0]))
        assert out.shape == (4, 3, 2)


class TestBackward:
    def test_square(self):
        x = t(3.0, grad=True)
        (g,) = backward(forward_op("mul", x, x), [x])
        assert g.item() == 6.0

    def test_softmax_sum_has_zero_gradient(self):
        x = t(np.random.default_rng(1).standard_normal(5), grad=True)
        (g,) = backward(forward_op("sum", forward_op("softmax", x)), [x])
        np.testing.assert_allclose(g.numpy(), 0.0, atol=1e-15)

    def test_non_scalar_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ContractError):
            backward(forward_op("tanh", x), [x])

    def test_unused_leaf_gets_zeros(self):
        x, y = t([1.0], grad=True), t([2.0], grad=True)
        gx, gy = backward(forward_op("sum", forward_op("mul", x, x)), [x, y])
        assert gy.item() == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = t(rng.standard_normal((3, 4)), grad=True)
        f1 = lambda: forward_op("sum", forward_op("tanh", x))
        f2 = lambda: forward_op("sum", forward_op("softmax", forward_op("scale", x, 2.0)))
        (g1,) = backward(f1(), [x])
        (g2,) = backward(f2(), [x])
        (g12,) = backward(forward_op("add", f1(), f2()), [x])
        np.testing.assert_allclose(g12.numpy(), (g1 + g2).numpy(), atol=1e-14)


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_op_matches_finite_differences(case):
    fn, inputs = OP_CASES[case]
    check_gradient(fn, inputs)


def test_every_op_kind_is_covered():
    covered = {name.split("_batched")[0].split("_suffix")[0] for name in OP_CASES}
    covered = {c.replace("batch_norm_train", "batch_norm").replace("batch_norm_eval", "batch_norm")
               for c in covered}
    assert set(ad.op_kinds()) <= covered


def test_three_layer_network_parameters():
    rng = np.random.default_rng(3)
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 1)]
    params = [rng.standard_normal(s) * 0.5 for s in shapes]
    x = t(rng.standard_normal((7, 4)))

    def net(w1, b1, w2, b2, w3):
        h = forward_op("tanh", ad.linear(x, w1, b1))
        h = forward_op("relu", ad.linear(h, w2, b2))
        return forward_op("log_softmax", forward_op("matmul", h, w3).reshape(1, 7))

    check_gradient(net, params)


def test_coordinate_leaves_match_analytic_tour_gradient():
    rng = np.random.default_rng(11)
    coords = rng.random((9, 2))
    order = rng.permutation(9)
    x = t(coords, grad=True)
    idx = torch.from_numpy(order)
    path = x[idx]
    nxt = x[torch.roll(idx, -1)]
    diff = forward_op("sub", path, nxt)
    length = forward_op("sum", forward_op("sqrt", forward_op("sum", forward_op("mul", diff, diff),
                                                             dim=1)))
    (g,) = backward(length, [x])
    expected = tour_cost_gradient(coords, order)
    assert np.max(np.abs(g.numpy() - expected)) / np.max(np.abs(expected)) < 1e-10


class TestOptimizer:
    def make_store(self, value=1.0):
        store = ParameterStore()
        store.add_param("w", torch.tensor([value], dtype=T))
        return store

    def test_zero_gradient_leaves_parameters(self):
        store = self.make_store()
        for _ in range(5):
            ad.optimizer_step(store, {"w": torch.zeros(1, dtype=T)}, lr=0.1)
        assert store["w"].item() == 1.0

    @pytest.mark.parametrize("g", [0.3, -2.0])
    def test_moves_against_gradient_sign(self, g):
        store = self.make_store(0.0)
        for _ in range(50):
            ad.optimizer_step(store, {"w": torch.tensor([g], dtype=T)}, lr=0.01)
        assert np.sign(store["w"].item()) == -np.sign(g)

    def test_first_step_size(self):
        # bias-corrected moments are exactly g and g^2, so the step is lr * g / (|g| + eps)
        store = self.make_store(1.0)
        ad.optimizer_step(store, {"w": torch.tensor([1.0], dtype=T)}, lr=0.001)
        assert store["w"].item() == pytest.approx(1.0 - 0.001 / (1 + 1e-8), abs=1e-15)

    def test_weight_decay_acts_as_l2(self):
        store = self.make_store(2.0)
        ad.optimizer_step(store, {"w": torch.zeros(1, dtype=T)}, lr=0.001, weight_decay=1.0)
        assert store["w"].item() < 2.0

    def test_accounting_errors(self):
        store = self.make_store()
        with pytest.raises(AccountingError):
            ad.optimizer_step(store, {}, lr=0.1)
        with pytest.raises(AccountingError):
            ad.optimizer_step(store, {"w": torch.zeros(2, dtype=T)}, lr=0.1)
        with pytest.raises(AccountingError):
            ad.optimizer_step(store, {"w": torch.zeros(1, dtype=T), "v": torch.zeros(1)}, lr=0.1)

    def test_duplicate_names(self):
        store = self.make_store()
        with pytest.raises(ContractError):
            store.add_param("w", torch.zeros(1))

    def test_clip(self):
        grads = {"a": torch.tensor([3.0, 4.0], dtype=T)}
        clipped = ad.clip_gradients(grads, 1.0)
        assert ad.grad_norm(clipped) == pytest.approx(1.0, abs=1e-6)
        assert ad.clip_gradients(grads, 10.0) is grads


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        store = ParameterStore()
        store.add_param("a", torch.from_numpy(rng.standard_normal((3, 2))))
        store.add_param("b", torch.from_numpy(rng.standard_normal(4)))
        store.add_buffer("mean", torch.from_numpy(rng.standard_normal(4)))
        for _ in range(3):
            ad.optimizer_step(store, {"a": torch.from_numpy(rng.standard_normal((3, 2))),
                                      "b": torch.from_numpy(rng.standard_normal(4))}, lr=0.01)
        path = tmp_path / "m.htck"
        ad.save_checkpoint(path, store, {"embed_dim": 2}, {"note": "x"})
        loaded, hp, meta = ad.load_checkpoint(path)
        assert hp == {"embed_dim": 2} and meta == {"note": "x"} and loaded.step == 3
        for (g1, n1, v1), (g2, n2, v2) in zip(store.records(), loaded.records()):
            assert (g1, n1) == (g2, n2)
            assert v1.detach().numpy().tobytes() == v2.detach().numpy().tobytes()
        assert ad.encode_checkpoint(loaded, hp, meta) == path.read_bytes()

    def test_file_layout(self, tmp_path):
        store = ParameterStore()
        store.add_param("w", torch.tensor([1.5, -2.0], dtype=T))
        data = ad.encode_checkpoint(store, {"k": 1})
        assert data.startswith(b"HTCK 1\n")
        payload = data[data.index(b"\n", 7) + 1:]
        np.testing.assert_array_equal(np.frombuffer(payload[:16], dtype="<f8"), [1.5, -2.0])

    def test_rejects_garbage_and_truncation(self):
        with pytest.raises(CheckpointError):
            ad.decode_checkpoint(b"nope")
        store = ParameterStore()
        store.add_param("w", torch.zeros(3, dtype=T))
        with pytest.raises(CheckpointError):
            ad.decode_checkpoint(ad.encode_checkpoint(store, {})[:-5])
