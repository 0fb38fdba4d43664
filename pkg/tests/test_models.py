import pytest
import torch

from segqa.models import (
    NETWORK_HEADS,
    HeadId,
    NetConfig,
    build_predictor,
    build_segmentor,
    forward_all_heads,
    predict_soft_error,
    predictor_config,
    segmentor_config,
)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_segmentor_3d_heads():
    model = build_segmentor(segmentor_config(3, rank=3), gen())
    heads = forward_all_heads(model, torch.randn(1, 1, 16, 16, 16))
    assert [h for h, _ in heads] == list(NETWORK_HEADS)
    for _, probs in heads:
        assert probs.shape == (1, 4, 16, 16, 16)
        assert torch.allclose(probs.sum(1), torch.ones(1, 16, 16, 16), atol=1e-5)
        labels = probs.argmax(1)
        assert labels.min() >= 0 and labels.max() <= 3


def test_segmentor_2d_heads():
    model = build_segmentor(segmentor_config(3, rank=2), gen())
    heads = forward_all_heads(model, torch.randn(1, 1, 16, 16))
    assert len(heads) == 5
    assert all(p.shape == (1, 4, 16, 16) for _, p in heads)


def test_invalid_configs():
    with pytest.raises(ValueError):
        NetConfig(num_stages=3)
    with pytest.raises(ValueError):
        NetConfig(rank=1)
    with pytest.raises(ValueError):
        build_segmentor(NetConfig(in_channels=2))
    with pytest.raises(ValueError):
        build_predictor(NetConfig(in_channels=9, out_classes=3))


def test_predictor_channels_for_seven_classes():
    assert predictor_config(7).in_channels == 9
    assert predictor_config(7).out_classes == 2


def test_predictor_soft_map_range_and_odd_dims():
    model = build_predictor(predictor_config(3), gen())
    model.eval()
    x = torch.randn(1, 5, 13, 10, 17)
    soft = predict_soft_error(model, x)
    assert soft.shape == (1, 13, 10, 17)
    assert soft.min() >= 0 and soft.max() <= 1
    probs = forward_all_heads(model, x)[-1][1]
    assert torch.allclose(probs[:, 0] + soft, torch.ones_like(soft), atol=1e-6)


def test_same_topology_as_segmentor():
    seg = build_segmentor(segmentor_config(3), gen())
    pred = build_predictor(predictor_config(3), gen())
    seg_shapes = {n: p.shape for n, p in seg.named_parameters()}
    pred_shapes = {n: p.shape for n, p in pred.named_parameters()}
    assert seg_shapes.keys() == pred_shapes.keys()
    differing = {n for n in seg_shapes if seg_shapes[n] != pred_shapes[n]}
    assert differing == {"stem.weight", "fuse.weight", "fuse.bias"} | {
        f"classifiers.{i}.{p}" for i in range(4) for p in ("weight", "bias")}


def test_deterministic_builds():
    a = build_segmentor(segmentor_config(3), gen(5))
    b = build_segmentor(segmentor_config(3), gen(5))
    assert sum(p.numel() for p in a.parameters()) == sum(p.numel() for p in b.parameters())
    a.eval()
    b.eval()
    x = torch.randn(1, 1, 8, 8, 8, generator=gen(1))
    for (_, pa), (_, pb) in zip(forward_all_heads(a, x), forward_all_heads(b, x)):
        assert torch.equal(pa, pb)


def test_input_shape_checked():
    model = build_segmentor(segmentor_config(2), gen())
    with pytest.raises(ValueError):
        forward_all_heads(model, torch.randn(1, 2, 8, 8, 8))


def test_head_codes():
    assert [int(h) for h in NETWORK_HEADS] == [-2, -3, -4, -5, -1]
    assert HeadId.GTRUTH == 0 and HeadId.GTRUTH not in NETWORK_HEADS
