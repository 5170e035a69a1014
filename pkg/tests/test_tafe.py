"""Tests for multi-scale pooling, TAFE heads and segmentation-guided gradients."""

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ConfigError, ShapeError
from models import BackboneConfig, ClassifierMode, LossWeights, StageSet, Task
from network.backbone import Backbone, prepare_target
from network.fusion import joint_loss
from network.model import MTSUNet
from network.tafe import TAFEHead, TAFEModule, fuse_stages, gap
from tests.conftest import TINY_SPEC, tiny_model_config
from training.data import batch_case
from volumes.phantom import generate_phantom


def _pyramid(channels=8):
    torch.manual_seed(0)
    backbone = Backbone(BackboneConfig(base_channels=channels, input_size=(16, 16, 16))).eval()
    with torch.no_grad():
        return backbone.encode(torch.randn(2, 4, 16, 16, 16))


class TestGap:
    """Test global average pooling."""

    def test_constant_channel(self):
        x = torch.full((1, 1, 4, 4, 4), 3.5)
        assert gap(x).item() == 3.5

    def test_half_zero_half_two(self):
        x = torch.zeros(1, 1, 4, 4, 4)
        x[..., 2:] = 2.0
        assert gap(x).item() == pytest.approx(1.0)

    def test_single_voxel_is_squeeze(self):
        x = torch.randn(2, 64, 1, 1, 1)
        assert torch.equal(gap(x), x.flatten(1))

    def test_linearity(self):
        torch.manual_seed(0)
        x, y = torch.randn(2, 3, 4, 4, 4, dtype=torch.float64), torch.randn(2, 3, 4, 4, 4, dtype=torch.float64)
        assert torch.allclose(gap(2.5 * x - 0.5 * y), 2.5 * gap(x) - 0.5 * gap(y), atol=1e-6)

    def test_rank_too_low(self):
        with pytest.raises(ShapeError):
            gap(torch.zeros(4, 4))


class TestFuseStages:
    """Test concatenation of pooled stages."""

    @pytest.mark.parametrize('preset,length', [('TAFE-1', 64), ('TAFE-2', 96), ('TAFE-4', 120)])
    def test_lengths(self, preset, length):
        z = fuse_stages(_pyramid(8), StageSet.from_preset(preset))
        assert tuple(z.shape) == (2, length)

    def test_singleton_is_gap(self):
        pyramid = _pyramid(8)
        assert torch.equal(fuse_stages(pyramid, [4]), gap(pyramid.x4))

    def test_ascending_order(self):
        pyramid = _pyramid(8)
        z = fuse_stages(pyramid, [4, 3])
        assert torch.equal(z[:, :32], gap(pyramid.x3))
        assert torch.equal(z[:, 32:], gap(pyramid.x4))

    def test_stable_layout(self):
        pyramid = _pyramid(8)
        a = fuse_stages(pyramid, StageSet(stages=(2, 3)))
        b = fuse_stages(pyramid, StageSet(stages=(2, 3)))
        assert a.numpy().tobytes() == b.numpy().tobytes()

    def test_empty_stage_set(self):
        with pytest.raises(ConfigError):
            fuse_stages(_pyramid(2), [])

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown TAFE preset"):
            StageSet.from_preset("TAFE-5")


class TestTAFEHead:
    """Test the dropout + linear classification head."""

    def test_zero_weights(self):
        head = TAFEHead(8).eval()
        torch.nn.init.zeros_(head.linear.weight)
        torch.nn.init.zeros_(head.linear.bias)
        assert torch.equal(head(torch.randn(3, 8)), torch.zeros(3, 2))

    def test_eval_determinism(self):
        head = TAFEHead(8).eval()
        z = torch.randn(2, 8)
        assert torch.equal(head(z), head(z))

    def test_dropout_active_in_training(self):
        torch.manual_seed(0)
        head = TAFEHead(256).train()
        z = torch.ones(1, 256)
        assert not torch.equal(head(z), head(z))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            TAFEHead(8)(torch.zeros(1, 9))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        head = TAFEHead(6).double().eval()
        z = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(head, (z,), eps=1e-6, atol=1e-6, rtol=1e-3)

    def test_module_has_separate_heads(self):
        config = BackboneConfig(base_channels=2, input_size=(16, 16, 16))
        module = TAFEModule(config, StageSet.from_preset("TAFE-2"), [Task.IDH, Task.CODEL])
        assert module.fused_dim == 8 + 16
        assert module.heads['idh'].linear.weight is not module.heads['codel'].linear.weight
        with pytest.raises(ConfigError):
            module.classify(torch.zeros(1, 24), Task.GRADE)


class TestSegmentationGuidance:
    """Both loss terms must reach the encoder."""

    def _encoder_grad_norm(self, model, loss):
        model.zero_grad()
        loss.backward()
        grads = [p.grad for p in model.backbone.stages.parameters() if p.grad is not None]
        return sum(float(g.norm()) for g in grads)

    def test_both_terms_reach_encoder(self):
        torch.manual_seed(0)
        model = MTSUNet(tiny_model_config(mode=ClassifierMode.TAFE)).eval()
        case = generate_phantom(TINY_SPEC, seed=0)
        image, t2, flair = batch_case(case, model.config.modalities)
        target = prepare_target(torch.as_tensor(case.mask.labels)[None], 2)
        labels = torch.tensor([case.label_for(Task.IDH)])

        output = model(image, t2, flair)
        seg_only = joint_loss(output.seg_logits, target, output.bundles[Task.IDH].c_final, labels,
                              LossWeights(alpha=1.0, beta=0.0))
        assert self._encoder_grad_norm(model, seg_only) > 0

        output = model(image, t2, flair)
        cls_only = joint_loss(output.seg_logits, target, output.bundles[Task.IDH].c_final, labels,
                              LossWeights(alpha=0.0, beta=1.0))
        assert self._encoder_grad_norm(model, cls_only) > 0
