import numpy as np
import pytest
import torch
from torch import nn

from dabench.errors import ConfigError, ShapeError, UnsupportedLayerError
from dabench.models import (
    BackboneSpec,
    BottleneckSpec,
    ModelBundle,
    build_model,
    grad_cam,
    load_checkpoint,
    save_checkpoint,
    upsample_heatmap,
)


def toy_model(num_classes=3, width=16, with_disc=False):
    torch.manual_seed(0)
    return build_model(
        BackboneSpec(name="toy-mlp", input_dim=2, output_dim=8),
        BottleneckSpec(width=width),
        num_classes,
        with_discriminator=with_disc,
    )


class TestForwardContract:
    def test_shapes(self):
        model = toy_model()
        feats, logits = model(torch.randn(4, 2))
        assert feats.shape == (4, 16)
        assert logits.shape == (4, 3)

    def test_identical_inputs_identical_rows_in_eval(self):
        model = toy_model()
        model.eval()
        x = torch.randn(1, 2).repeat(5, 1)
        feats, logits = model(x)
        assert torch.equal(feats[0].repeat(5, 1), feats)
        assert torch.equal(logits[0].repeat(5, 1), logits)

    def test_zeroed_classifier_uniform_softmax(self):
        model = toy_model()
        nn.init.zeros_(model.classifier.weight)
        nn.init.zeros_(model.classifier.bias)
        model.eval()
        with torch.no_grad():
            _, logits = model(torch.randn(4, 2))
            probs = model.predict_proba(torch.randn(4, 2))
        assert torch.equal(logits, torch.zeros(4, 3))
        assert torch.allclose(probs, torch.full((4, 3), 1.0 / 3.0))

    def test_softmax_rows_valid(self):
        model = toy_model()
        model.eval()
        with torch.no_grad():
            probs = model.predict_proba(torch.randn(6, 2))
        assert torch.allclose(probs.sum(dim=1), torch.ones(6), atol=1e-6)

    def test_toy_cnn_forward(self):
        torch.manual_seed(1)
        model = build_model(BackboneSpec(name="toy-cnn", in_channels=3, output_dim=8),
                            BottleneckSpec(width=8), 2)
        feats, logits = model(torch.randn(2, 3, 16, 16))
        assert feats.shape == (2, 8) and logits.shape == (2, 2)

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ConfigError):
            BackboneSpec(name="resnet-9000")

    def test_discriminator_attached(self):
        model = toy_model(with_disc=True)
        assert model.discriminator is not None
        feats, _ = model(torch.randn(4, 2))
        assert model.discriminator(feats).shape == (4,)


class _CamProbe(nn.Module):
    """Identity 'body' producing spatial activations + a linear score head.

    Runs in float64 so the 1e-9 heatmap contracts test the map algebra, not
    float32 rounding.
    """

    def __init__(self, weight_rows):
        super().__init__()
        self.body = nn.Identity()
        self.head = nn.Linear(4, len(weight_rows), bias=False).double()
        with torch.no_grad():
            self.head.weight.copy_(torch.tensor(weight_rows, dtype=torch.float64))

    def forward(self, x):
        a = self.body(x)
        return self.head(a.flatten(1))


def _image2x2(values):
    return torch.tensor([[values]], dtype=torch.float64)


class TestGradCam:
    def test_hand_computed_single_channel(self):
        # A = [[1,2],[3,4]], w = 1 -> min-max normalized [[0,1/3],[2/3,1]]
        probe = _CamProbe([[1.0, 1.0, 1.0, 1.0]])
        image = _image2x2([[1.0, 2.0], [3.0, 4.0]])
        cam = grad_cam(probe, image, 0, "body")
        expected = np.array([[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]])
        assert np.abs(cam.data - expected).max() < 1e-9
        assert cam.source_layer == "body"

    def test_zero_gradient_zero_map(self):
        probe = _CamProbe([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        image = _image2x2([[1.0, 2.0], [3.0, 4.0]])
        cam = grad_cam(probe, image, 0, "body")
        assert np.all(cam.data == 0.0)

    def test_negative_weights_clip_to_zero(self):
        probe = _CamProbe([[-1.0, -1.0, -1.0, -1.0]])
        image = _image2x2([[1.0, 2.0], [3.0, 4.0]])
        cam = grad_cam(probe, image, 0, "body")
        assert np.all(cam.data == 0.0)

    def test_score_rescaling_invariance(self):
        image = _image2x2([[0.5, 2.0], [3.0, -1.0]])
        base = grad_cam(_CamProbe([[1.0, 0.2, -0.3, 0.8]]), image, 0, "body")
        scaled = grad_cam(_CamProbe([[7.0, 1.4, -2.1, 5.6]]), image, 0, "body")
        assert np.abs(base.data - scaled.data).max() < 1e-9

    def test_values_in_unit_interval_with_max_one(self):
        torch.manual_seed(3)
        model = build_model(BackboneSpec(name="toy-cnn", in_channels=3, output_dim=8),
                            BottleneckSpec(width=8, has_normalization=False), 2)
        cam = grad_cam(model, torch.randn(1, 3, 12, 12), 1, "backbone.conv2")
        assert cam.data.min() >= 0.0 and cam.data.max() <= 1.0
        if cam.data.max() > 0:
            assert cam.data.max() == pytest.approx(1.0)

    def test_non_spatial_layer_rejected(self):
        model = toy_model()
        with pytest.raises(UnsupportedLayerError):
            grad_cam(model, torch.randn(1, 2), 0, "backbone.fc1")

    def test_missing_layer_rejected(self):
        model = toy_model()
        with pytest.raises(UnsupportedLayerError):
            grad_cam(model, torch.randn(1, 2), 0, "backbone.nope")

    def test_upsample_shape(self):
        probe = _CamProbe([[1.0, 1.0, 1.0, 1.0]])
        cam = grad_cam(probe, _image2x2([[1.0, 2.0], [3.0, 4.0]]), 0, "body")
        up = upsample_heatmap(cam, 8, 8)
        assert up.shape == (8, 8)


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        model = toy_model()
        path = tmp_path / "model.pt"
        save_checkpoint(model, path, "fp123", epoch=4)
        fresh = toy_model()
        with torch.no_grad():
            fresh.classifier.weight.add_(1.0)
        payload = load_checkpoint(path, fresh)
        assert payload["config_fingerprint"] == "fp123"
        assert payload["epoch"] == 4
        for a, b in zip(model.parameters(), fresh.parameters()):
            assert torch.equal(a, b)


def test_toy_backbone_trains_on_separable_data():
    # sanity floor: >= 95% source accuracy within 30 epochs on separable blobs
    rng = np.random.default_rng(0)
    n = 120
    x0 = rng.standard_normal((n, 2)) * 0.3 + np.array([-2.0, 0.0])
    x1 = rng.standard_normal((n, 2)) * 0.3 + np.array([2.0, 0.0])
    x = torch.tensor(np.vstack([x0, x1]), dtype=torch.float32)
    y = torch.tensor([0] * n + [1] * n)
    torch.manual_seed(0)
    model = build_model(BackboneSpec(name="toy-mlp", input_dim=2, output_dim=8),
                        BottleneckSpec(width=8), 2)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    model.train()
    for _ in range(30):
        opt.zero_grad()
        _, logits = model(x)
        loss = torch.nn.functional.cross_entropy(logits, y)
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        _, logits = model(x)
    acc = float((logits.argmax(dim=1) == y).float().mean())
    assert acc >= 0.95
