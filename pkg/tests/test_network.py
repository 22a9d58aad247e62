import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import fd_check
from pseudoseg.network import (
    FeaturePack,
    SegNet,
    build_value_maps,
    cam_from_gradients,
    grad_cam,
    grad_cams,
    hypercolumn,
)


@pytest.fixture
def tiny(float64):
    torch.manual_seed(0)
    model = SegNet(4, widths=(4, 6, 8, 8), decoder_width=8)
    model.eval()
    return model


def test_tiny_model_is_small(tiny):
    assert sum(p.numel() for p in tiny.parameters()) <= 5000


def test_forward_shapes(tiny):
    x = torch.rand(2, 3, 32, 40)
    fp = tiny(x)
    assert fp.decoder_logits.shape == (2, 4, 32, 40)
    assert fp.last.shape[-2:] == (8, 10)  # output stride 4
    assert tiny.classify(fp).shape == (2, 3)


def test_forward_rejects_bad_shape(tiny):
    with pytest.raises(ValueError):
        tiny(torch.rand(3, 32, 32))


def test_identical_inputs_identical_rows(tiny):
    x = torch.rand(1, 3, 32, 32).repeat(2, 1, 1, 1)
    fp = tiny(x)
    assert torch.equal(fp.decoder_logits[0], fp.decoder_logits[1])


def test_decoder_gradient_matches_finite_differences(tiny):
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    params = list(tiny.parameters())
    assert fd_check(lambda: tiny(x).decoder_logits.sum(), params, n_samples=20) < 1e-4


def test_classifier_gradient_matches_finite_differences(tiny):
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    params = list(tiny.parameters())
    w = torch.tensor([0.3, -1.2, 0.7])
    assert fd_check(lambda: (tiny.classify(tiny(x)) * w).sum(), params, n_samples=20, seed=3) < 1e-4


def test_zero_pooled_feature_gives_bias(tiny):
    with torch.no_grad():
        tiny.classifier.bias.zero_()
    fp = FeaturePack([torch.zeros(1, 8, 2, 2)] * 4, torch.zeros(1, 8), torch.zeros(1, 4, 8, 8))
    assert torch.equal(tiny.classify(fp), torch.zeros(1, 3))


def test_hypercolumn_dims(tiny):
    fp = tiny(torch.rand(1, 3, 32, 32))
    assert hypercolumn(fp).shape[1] == 16
    assert hypercolumn(fp, "last").shape[1] == 8
    s = torch.rand(1, 5, 4, 4)
    dup = FeaturePack([s, s, s, s], s.mean((2, 3)), s)
    assert torch.equal(hypercolumn(dup), torch.cat([s, s], 1))


def test_hypercolumn_resamples_previous_stage():
    a, b = torch.rand(1, 8, 8, 8), torch.rand(1, 16, 4, 4)
    fp = FeaturePack([a, a, a, b], b.mean((2, 3)), b)
    assert hypercolumn(fp).shape == (1, 24, 4, 4)


def test_cam_with_unit_gradient_is_relu():
    f = torch.randn(1, 1, 5, 5)
    assert torch.equal(cam_from_gradients(f, torch.ones_like(f)), torch.relu(f)[:, 0])


def test_cam_with_zero_gradient_is_zero():
    f = torch.randn(2, 3, 5, 5)
    assert not cam_from_gradients(f, torch.zeros_like(f)).any()


def test_grad_cam_channel_weights_match_finite_differences(tiny):
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(4))
    fp = tiny(x)
    feat = fp.last.detach().clone()
    for c in (1, 2, 3):
        cam = grad_cam(fp, tiny, c)
        # independent route: finite-difference gradient of the logit w.r.t. each
        # feature element, spatially averaged into channel weights
        h = 1e-6
        numeric = torch.zeros_like(feat)
        flat, nflat = feat.view(-1), numeric.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = tiny.classifier(feat.mean((2, 3)))[0, c - 1].item()
            flat[k] = orig - h
            down = tiny.classifier(feat.mean((2, 3)))[0, c - 1].item()
            flat[k] = orig
            nflat[k] = (up - down) / (2 * h)
        weights_fd = numeric.mean((2, 3))
        # closed form for a linear head on pooled features
        weights_exact = tiny.classifier.weight[c - 1] / feat[0, 0].numel()
        rel = ((weights_fd[0] - weights_exact).abs() / weights_exact.abs().clamp_min(1e-12)).max()
        assert rel < 1e-4
        expected = torch.relu((weights_fd[:, :, None, None] * feat).sum(1))
        assert torch.allclose(cam, expected, rtol=1e-4, atol=1e-10)


def test_grad_cam_is_nonnegative_and_detached(tiny):
    fp = tiny(torch.rand(3, 3, 32, 32))
    cams = grad_cams(fp, tiny)
    assert cams.shape == (3, 3, 8, 8)
    assert (cams >= 0).all() and not cams.requires_grad


def test_grad_cam_rejects_bad_class(tiny):
    fp = tiny(torch.rand(1, 3, 16, 16))
    for c in (0, 4):
        with pytest.raises(ValueError):
            grad_cam(fp, tiny, c)


def test_value_maps_all_zero_cams():
    v = build_value_maps(torch.zeros(2, 3, 4, 4), torch.ones(2, 3, dtype=torch.bool))
    assert torch.equal(v[:, 0], torch.ones(2, 4, 4)) and not v[:, 1:].any()


def test_value_maps_single_peak_normalises_to_one():
    cams = torch.zeros(1, 3, 4, 4)
    cams[0, 1, 2, 2] = 5.0
    v = build_value_maps(cams, torch.tensor([[False, True, False]]))
    assert v[0, 2, 2, 2] == 1.0 and v[0, 0, 2, 2] == 0.0


@given(st.integers(0, 10_000))
def test_value_maps_against_pixel_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    cams = torch.relu(torch.randn(2, 3, 5, 6, generator=g))
    present = torch.rand(2, 3, generator=g) > 0.3
    v = build_value_maps(cams, present)
    for b in range(2):
        for i in range(5):
            for j in range(6):
                fg = []
                for c in range(3):
                    peak = cams[b, c].max().item()
                    val = cams[b, c, i, j].item() / peak if peak > 1e-8 else 0.0
                    fg.append(val if present[b, c] else 0.0)
                assert abs(v[b, 0, i, j].item() - (1 - max(fg))) < 1e-6
                for c in range(3):
                    assert abs(v[b, c + 1, i, j].item() - fg[c]) < 1e-6
    assert (v >= 0).all() and (v <= 1).all()
    assert torch.allclose(v[:, 0] + v[:, 1:].amax(1), torch.ones(2, 5, 6))
    assert not v[:, 1:][~present].any()
