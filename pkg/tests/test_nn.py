import itertools
import math

import numpy as np
import pytest
import torch

from segqa import nn as tnn
from segqa.nn import functional as F
from segqa.nn.gradcheck import grad_check
from segqa.nn.layers import BatchNorm, Conv


def conv_oracle(x, w, b, stride, pad):
    """Nested-loop cross-correlation over numpy arrays (N, C, *spatial)."""
    rank = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * rank)
    k = w.shape[2:]
    out_sp = [(xp.shape[2 + a] - k[a]) // stride + 1 for a in range(rank)]
    out = np.zeros((x.shape[0], w.shape[0], *out_sp))
    for n, o in itertools.product(range(x.shape[0]), range(w.shape[0])):
        for pos in itertools.product(*(range(s) for s in out_sp)):
            acc = 0.0 if b is None else float(b[o])
            for i in range(w.shape[1]):
                for kk in itertools.product(*(range(s) for s in k)):
                    src = tuple(p * stride + q for p, q in zip(pos, kk))
                    acc += xp[(n, i) + src] * w[(o, i) + kk]
            out[(n, o) + pos] = acc
    return out


def projection(shape, dtype, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


def rand(shape, dtype=torch.float64, seed=1):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# --- forward ops --------------------------------------------------------------


def test_identity_kernel():
    x = rand((1, 2, 3, 4, 5), torch.float32)
    w = torch.zeros(2, 2, 1, 1, 1)
    w[0, 0] = w[1, 1] = 1
    assert torch.equal(F.conv(x, w, torch.zeros(2)), x)


def test_all_ones_kernel_sums_neighbourhood():
    out = F.conv(torch.ones(1, 1, 5, 5, 5), torch.ones(1, 1, 3, 3, 3))
    assert out.shape == (1, 1, 3, 3, 3)
    assert torch.all(out == 27)


@pytest.mark.parametrize("rank,stride,pad", [(3, 1, 1), (3, 2, 1), (3, 2, 0), (2, 1, 0), (2, 2, 1)])
def test_conv_matches_nested_loops(rank, stride, pad):
    rng = np.random.default_rng(rank * 10 + stride + pad)
    x = rng.normal(size=(2, 2) + (5,) * rank).astype(np.float32)
    w = rng.normal(size=(3, 2) + (3,) * rank).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    out = F.conv(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride, pad, rank)
    expected = conv_oracle(x.astype(np.float64), w, b, stride, pad)
    assert out.shape == expected.shape
    assert out.shape[2] == math.floor((5 + 2 * pad - 3) / stride) + 1
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-5)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        F.conv(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3))
    with pytest.raises(ValueError):
        F.conv(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 3, 3, 3))
    with pytest.raises(ValueError):
        F.conv(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 2, 3, 3, 3), rank=2)


def test_conv_transpose_identity():
    y = rand((1, 3, 4, 4, 4), torch.float32)
    w = torch.eye(3).reshape(3, 3, 1, 1, 1)
    assert torch.equal(F.conv_transpose(y, w), y)


def test_conv_transpose_doubles():
    y = torch.zeros(1, 2, 3, 5, 4)
    out = F.conv_transpose(y, torch.zeros(2, 1, 2, 2, 2), stride=2)
    assert out.shape == (1, 1, 6, 10, 8)
    out = F.conv_transpose(torch.zeros(1, 2, 3, 3), torch.zeros(2, 1, 3, 3), stride=2, padding=1, output_size=(6, 6))
    assert out.shape == (1, 1, 6, 6)


def adjoint_gap(rank, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 6))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    cin, cout = (int(v) for v in rng.integers(1, 4, 2))
    x = torch.from_numpy(rng.normal(size=(1, cin) + (n,) * rank).astype(np.float32))
    w = torch.from_numpy(rng.normal(size=(cout, cin) + (k,) * rank).astype(np.float32))
    y_shape = F.conv(x, w, None, stride, pad).shape
    y = torch.from_numpy(rng.normal(size=tuple(y_shape)).astype(np.float32))
    lhs = float((F.conv(x, w, None, stride, pad) * y).sum())
    back = F.conv_transpose(y, w, None, stride, pad, output_size=x.shape[2:])
    rhs = float((x * back).sum())
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def test_adjoint_identity_random_4cubed():
    x = rand((1, 2, 4, 4, 4), torch.float32, 3)
    w = rand((3, 2, 3, 3, 3), torch.float32, 4)
    y = rand((1, 3, 4, 4, 4), torch.float32, 5)
    lhs = (F.conv(x, w, padding=1) * y).sum()
    rhs = (x * F.conv_transpose(y, w, padding=1)).sum()
    assert abs(float(lhs - rhs)) < 1e-4 * max(1.0, abs(float(lhs)))


def test_batch_norm_train_normalises():
    x = rand((2, 3, 4, 4, 4), torch.float32) * 3 + 2
    rm, rv = torch.zeros(3), torch.ones(3)
    out = F.batch_norm(x, torch.ones(3), torch.zeros(3), rm, rv, training=True)
    mean = out.mean(dim=(0, 2, 3, 4))
    assert torch.all(mean.abs() < 1e-5)
    var = out.var(dim=(0, 2, 3, 4), unbiased=False)
    assert torch.allclose(var, torch.ones(3), atol=1e-3)
    batch_mean = x.mean(dim=(0, 2, 3, 4))
    assert torch.allclose(rm, 0.1 * batch_mean, atol=1e-6)


def test_batch_norm_constant_channel():
    x = torch.full((1, 2, 3, 3), 4.0)
    out = F.batch_norm(x, torch.ones(2), torch.tensor([0.5, -1.0]), training=True)
    assert torch.allclose(out[0, 0], torch.full((3, 3), 0.5))
    assert torch.allclose(out[0, 1], torch.full((3, 3), -1.0))


def test_batch_norm_eval_formula():
    x = torch.tensor([1.0, 3.0], dtype=torch.float64).reshape(1, 1, 1, 2)
    m, v, g, b = 0.5, 2.0, 1.5, -0.25
    out = F.batch_norm(x, torch.tensor([g], dtype=torch.float64), torch.tensor([b], dtype=torch.float64),
                       torch.tensor([m], dtype=torch.float64), torch.tensor([v], dtype=torch.float64),
                       training=False)
    expected = [(xi - m) / math.sqrt(v + 1e-5) * g + b for xi in (1.0, 3.0)]
    np.testing.assert_allclose(out.ravel().numpy(), expected, rtol=1e-12)


def test_batch_norm_shape_error():
    with pytest.raises(ValueError):
        F.batch_norm(torch.zeros(1, 3, 2, 2), torch.ones(2), torch.zeros(2))


def test_elementwise_ops():
    assert F.relu(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    sm = F.softmax_channels(torch.zeros(1, 4, 2, 2))
    assert torch.allclose(sm, torch.full_like(sm, 0.25))
    x = rand((1, 5, 3, 3), torch.float32) * 10
    assert torch.allclose(F.softmax_channels(x).sum(1), torch.ones(1, 3, 3), atol=1e-6)
    assert torch.equal(F.add(x, torch.zeros_like(x)), x)
    with pytest.raises(ValueError):
        F.add(x, torch.zeros(1))


# --- losses -------------------------------------------------------------------


def test_cross_entropy_examples():
    target = torch.tensor([[[0, 2], [1, 1]]])
    onehot = torch.nn.functional.one_hot(target, 3).movedim(-1, 1).double()
    assert F.cross_entropy(onehot, target).item() == 0.0
    uniform = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
    assert F.cross_entropy(uniform, target).item() == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_oracle():
    logits = rand((1, 3, 2, 2, 2), seed=9)
    probs = torch.softmax(logits, 1)
    target = torch.randint(0, 3, (1, 2, 2, 2), generator=torch.Generator().manual_seed(2))
    p, t = probs.numpy(), target.numpy()
    expected = np.mean([-math.log(p[(0, t[0, i, j, k], i, j, k)])
                        for i, j, k in itertools.product(range(2), repeat=3)])
    assert F.cross_entropy(probs, target).item() == pytest.approx(expected, abs=1e-6)
    with pytest.raises(ValueError):
        F.cross_entropy(probs, target + 3)


def test_dice_loss_examples():
    target = torch.randint(0, 3, (1, 4, 4, 4), generator=torch.Generator().manual_seed(0))
    onehot = torch.nn.functional.one_hot(target, 3).movedim(-1, 1).double()
    assert F.dice_loss(onehot, onehot).item() == pytest.approx(0.0, abs=1e-12)
    binary = torch.nn.functional.one_hot(target.clamp(max=1), 2).movedim(-1, 1).double()
    assert F.dice_loss(1 - binary, binary, "binary").item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        F.dice_loss(onehot, binary)


@pytest.mark.parametrize("mode", ["multiclass", "binary"])
def test_dice_loss_oracle(mode):
    probs = torch.softmax(rand((2, 3, 3, 3), seed=4), 1)
    target = torch.randint(0, 3, (2, 3, 3), generator=torch.Generator().manual_seed(5))
    onehot = torch.nn.functional.one_hot(target, 3).movedim(-1, 1).double()
    p, q = probs.numpy(), onehot.numpy()
    classes = [1, 2] if mode == "multiclass" else [1]
    scores = []
    for c in classes:
        inter = sum(p[n, c, i, j] * q[n, c, i, j] for n in range(2) for i in range(3) for j in range(3))
        denom = p[:, c].sum() + q[:, c].sum()
        scores.append((2 * inter + 1e-5) / (denom + 1e-5))
    assert F.dice_loss(probs, onehot, mode).item() == pytest.approx(1 - np.mean(scores), abs=1e-6)


# --- gradients ----------------------------------------------------------------


def grad_cases(dtype):
    g = dict(dtype=dtype)

    def reduce(out, seed=7):
        return (out * projection(out.shape, dtype, seed)).sum()

    away_from_zero = rand((1, 2, 4, 4), **g).sign() * (0.2 + rand((1, 2, 4, 4), seed=3, **g).abs())
    labels3 = torch.randint(0, 3, (1, 3, 3, 3), generator=torch.Generator().manual_seed(1))
    labels2 = torch.randint(0, 2, (1, 4, 4, 4), generator=torch.Generator().manual_seed(2))
    return {
        "linear": (lambda t: reduce(F.conv(t["x"], t["w"], t["b"])),
                   {"x": rand((2, 3, 2, 2, 2), **g), "w": rand((4, 3, 1, 1, 1), seed=2, **g),
                    "b": rand((4,), seed=3, **g)}),
        "conv3": (lambda t: reduce(F.conv(t["x"], t["w"], t["b"], stride=1, padding=1)),
                  {"x": rand((1, 2, 4, 4, 4), **g), "w": rand((2, 2, 3, 3, 3), seed=2, **g),
                   "b": rand((2,), seed=3, **g)}),
        "conv3_stride2": (lambda t: reduce(F.conv(t["x"], t["w"], None, stride=2, padding=1)),
                          {"x": rand((1, 2, 4, 4, 4), **g), "w": rand((3, 2, 3, 3, 3), seed=2, **g)}),
        "conv2": (lambda t: reduce(F.conv(t["x"], t["w"], t["b"], padding=1)),
                  {"x": rand((2, 2, 4, 4), **g), "w": rand((3, 2, 3, 3), seed=2, **g),
                   "b": rand((3,), seed=3, **g)}),
        "conv_transpose3": (lambda t: reduce(F.conv_transpose(t["x"], t["w"], t["b"], stride=2)),
                            {"x": rand((1, 2, 2, 2, 2), **g), "w": rand((2, 3, 2, 2, 2), seed=2, **g),
                             "b": rand((3,), seed=3, **g)}),
        "conv_transpose2": (lambda t: reduce(F.conv_transpose(t["x"], t["w"], None, stride=2, padding=1,
                                                              output_size=(4, 4))),
                            {"x": rand((1, 2, 2, 2), **g), "w": rand((2, 2, 3, 3), seed=2, **g)}),
        "batch_norm_train": (lambda t: reduce(F.batch_norm(t["x"], t["g"], t["b"], training=True)),
                             {"x": rand((2, 2, 3, 3, 3), **g), "g": rand((2,), seed=2, **g),
                              "b": rand((2,), seed=3, **g)}),
        "batch_norm_eval": (lambda t: reduce(F.batch_norm(
                                t["x"], t["g"], t["b"], torch.tensor([0.1, -0.3], **g),
                                torch.tensor([0.8, 1.7], **g), training=False)),
                            {"x": rand((2, 2, 3, 3), **g), "g": rand((2,), seed=2, **g),
                             "b": rand((2,), seed=3, **g)}),
        "relu": (lambda t: reduce(F.relu(t["x"])), {"x": away_from_zero}),
        "softmax": (lambda t: reduce(F.softmax_channels(t["x"])), {"x": rand((1, 3, 4, 4), **g)}),
        "add": (lambda t: reduce(F.add(t["x"], t["y"])),
                {"x": rand((1, 2, 3, 3), **g), "y": rand((1, 2, 3, 3), seed=5, **g)}),
        "seg_loss_multiclass": (lambda t: F.composite_loss(F.softmax_channels(t["z"]), labels3, "multiclass"),
                                {"z": rand((1, 3, 3, 3, 3), **g)}),
        "seg_loss_binary": (lambda t: F.composite_loss(F.softmax_channels(t["z"]), labels2, "binary"),
                            {"z": rand((1, 2, 4, 4, 4), **g)}),
    }


@pytest.mark.parametrize("name", list(grad_cases(torch.float64)))
def test_gradients_float64(name):
    fn, inputs = grad_cases(torch.float64)[name]
    report = grad_check(fn, inputs)
    assert report.max_rel_error < 1e-6, report.errors


@pytest.mark.parametrize("name", list(grad_cases(torch.float32)))
def test_gradients_float32(name):
    fn, inputs = grad_cases(torch.float32)[name]
    report = grad_check(fn, inputs)
    assert report.max_rel_error < 1e-3, report.errors


def test_gradient_of_sum_is_ones():
    x = torch.zeros(2, 3, requires_grad=True)
    tnn.backward(x.sum())
    assert torch.equal(x.grad, torch.ones(2, 3))


def test_backward_errors():
    x = torch.zeros(3, requires_grad=True)
    with pytest.raises(ValueError):
        tnn.backward(x * 2)
    with pytest.raises(RuntimeError):
        tnn.backward(torch.tensor(1.0))


@pytest.mark.parametrize("name", ["adam", "sgd"])
def test_step_descends(name):
    w = torch.nn.Parameter(torch.tensor([1.5]))
    opt = tnn.make_optimizer([w], name, lr=1e-2)
    before = float(w.detach() ** 2)
    tnn.backward((w**2).sum())
    tnn.step(opt)
    assert float(w.detach() ** 2) < before
    assert w.grad is None
    assert name != "adam" or len(opt.state[w]) == 3


def test_seeded_training_step_is_bitwise_reproducible():
    def run():
        gen = torch.Generator().manual_seed(3)
        conv = Conv(3, 1, 2, generator=gen)
        bn = BatchNorm(2)
        opt = tnn.make_optimizer(list(conv.parameters()) + list(bn.parameters()))
        x = torch.randn(1, 1, 4, 4, 4, generator=torch.Generator().manual_seed(4))
        labels = (x[:, 0] > 0).long()
        for _ in range(3):
            loss = F.composite_loss(F.softmax_channels(bn(conv(x))), labels, "binary")
            tnn.backward(loss)
            tnn.step(opt)
        return torch.cat([p.detach().ravel() for p in conv.parameters()]).numpy().tobytes()

    assert run() == run()


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    a = torch.nn.Sequential(Conv(3, 2, 3, generator=torch.Generator().manual_seed(1)), BatchNorm(3))
    a[1].running_mean.fill_(0.25)
    b = torch.nn.Sequential(Conv(3, 2, 3, generator=torch.Generator().manual_seed(2)), BatchNorm(3))
    tnn.save_checkpoint(a, tmp_path / "a.ckpt")
    tnn.load_checkpoint(b, tmp_path / "a.ckpt")
    for (na, ta), (nb, tb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(ta, tb)
    tnn.save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    manifest = (tmp_path / "a.ckpt").read_bytes().split(b"\n")[:2]
    assert manifest[0] == b"VCKPT1 6"
    assert manifest[1] == b"0.weight 3x2x3x3x3 0 162"


def test_checkpoint_mismatch(tmp_path):
    a = Conv(3, 2, 3)
    tnn.save_checkpoint(a, tmp_path / "a.ckpt")
    with pytest.raises(tnn.CheckpointError):
        tnn.load_checkpoint(Conv(3, 2, 4), tmp_path / "a.ckpt")
    with pytest.raises(tnn.CheckpointError):
        tnn.load_checkpoint(BatchNorm(2), tmp_path / "a.ckpt")
