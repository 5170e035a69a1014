"""Tests for dual-stream fusion, the joint loss and the assembled model."""

import sys
from pathlib import Path

import pytest
import torch
from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ConfigError, ShapeError
from models import ClassifierMode, LossWeights, Source, Task
from network.backbone import seg_loss
from network.fusion import (ClassificationBundle, DSFModule, MLPHead, classification_loss, combine_losses,
                            fuse_dsf, joint_loss)
from network.model import MTSUNet
from tests.conftest import finite_difference_grads, sample_biases, tiny_model_config


def _loss_inputs(seed=0):
    torch.manual_seed(seed)
    seg_logits = torch.randn(2, 2, 4, 4, 4, dtype=torch.float64)
    target = torch.randint(0, 2, (2, 4, 4, 4))
    cls_logits = torch.randn(2, 2, dtype=torch.float64)
    labels = torch.tensor([0, 1])
    return seg_logits, target, cls_logits, labels


def _inputs(batch=1):
    torch.manual_seed(1)
    return (torch.randn(batch, 4, 16, 16, 16), torch.randn(batch, 1, 16, 16, 16),
            torch.randn(batch, 1, 16, 16, 16))


class TestFuseDSF:
    """Test concatenation of the two streams."""

    def test_order(self):
        fused = fuse_dsf(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]))
        assert fused.tolist() == [[1.0, 0.0, 0.0, 1.0]]

    def test_swapped_inputs_differ(self):
        a, b = torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, 4.0]])
        assert not torch.equal(fuse_dsf(a, b), fuse_dsf(b, a))

    def test_missing_cmd(self):
        with pytest.raises(ConfigError, match="both"):
            fuse_dsf(torch.zeros(1, 2), None)


class TestMLPHead:
    """Test the lightweight fusion MLP."""

    def test_zero_weights(self):
        head = MLPHead(4)
        for param in head.parameters():
            torch.nn.init.zeros_(param)
        assert torch.equal(head(torch.randn(3, 4)), torch.zeros(3, 2))

    def test_hand_set_weights(self):
        head = MLPHead(4, hidden_width=16)
        with torch.no_grad():
            for param in head.parameters():
                param.zero_()
            for i in range(4):
                head.hidden.weight[i, i] = 1.0
            head.output.weight[0, :2] = 1.0
            head.output.weight[1, 2:4] = 1.0
        logits = head(torch.tensor([[1.0, -2.0, 3.0, 0.5]]))
        # ReLU drops the -2
        assert logits.tolist() == [[1.0, 3.5]]

    def test_determinism(self):
        head = MLPHead(4).eval()
        x = torch.randn(2, 4)
        assert torch.equal(head(x), head(x))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            MLPHead(4)(torch.zeros(1, 5))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        module = DSFModule(2, 2, hidden_width=16).double()
        c_tafe = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
        c_cmd = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(module, (c_tafe, c_cmd), eps=1e-6, atol=1e-6, rtol=1e-3)


class TestJointLoss:
    """Test the weighted segmentation + classification loss."""

    def test_classification_only(self):
        seg_logits, target, cls_logits, labels = _loss_inputs()
        loss = joint_loss(seg_logits, target, cls_logits, labels, LossWeights(alpha=0.0, beta=2.0))
        assert loss.item() == pytest.approx(2.0 * classification_loss(cls_logits, labels).item())

    def test_segmentation_only(self):
        seg_logits, target, cls_logits, labels = _loss_inputs()
        loss = joint_loss(seg_logits, target, cls_logits, labels, LossWeights(alpha=0.5, beta=0.0))
        assert loss.item() == pytest.approx(0.5 * seg_loss(seg_logits, target).item())

    def test_hand_values(self):
        total = combine_losses(torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.7, dtype=torch.float64),
                               LossWeights())
        assert total.item() == pytest.approx(1.0)

    def test_additivity(self):
        inputs = _loss_inputs()
        seg_part = joint_loss(*inputs, LossWeights(alpha=1.0, beta=0.0))
        cls_part = joint_loss(*inputs, LossWeights(alpha=0.0, beta=1.0))
        both = joint_loss(*inputs, LossWeights(alpha=0.25, beta=3.0))
        assert both.item() == pytest.approx(0.25 * seg_part.item() + 3.0 * cls_part.item(), abs=1e-12)

    def test_both_weights_zero(self):
        with pytest.raises(ConfigError):
            joint_loss(*_loss_inputs(), LossWeights(alpha=0.0, beta=0.0))

    def test_unknown_labels_ignored(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 5.0]])
        full = classification_loss(logits[:1], torch.tensor([0]))
        partial = classification_loss(logits, torch.tensor([0, -1]))
        assert partial.item() == pytest.approx(full.item())

    def test_all_unknown_is_zero(self):
        logits = torch.randn(2, 2, requires_grad=True)
        loss = classification_loss(logits, torch.tensor([-1, -1]))
        assert loss.item() == 0.0
        loss.backward()
        assert not logits.grad.any()

    def test_joint_loss_gradient_through_every_stream(self):
        torch.manual_seed(0)
        model = MTSUNet(tiny_model_config()).double().eval()
        image, t2, flair = (x.double() for x in _inputs(2))
        target = torch.zeros(2, 16, 16, 16, dtype=torch.long)
        target[:, 4:12, 4:12, 4:12] = 1
        labels = torch.tensor([0, 1])

        def loss():
            output = model(image, t2, flair)
            return joint_loss(output.seg_logits, target, output.bundles[Task.IDH].c_final, labels, LossWeights())

        params = sample_biases(model, ["backbone.stages.0", "backbone.stages.3", "backbone.seg_head", "tafe.heads",
                                       "cmd.stem_t2", "cmd.stem_flair", "cmd.attention", "cmd.classifier",
                                       "dsf.head.hidden", "dsf.head.output"])
        model.zero_grad()
        loss().backward()
        analytic = {name: p.grad.clone() for name, p in params.items()}
        numeric = finite_difference_grads(loss, list(params.values()))
        for (name, grad), estimate in zip(analytic.items(), numeric):
            assert torch.allclose(grad, estimate, rtol=1e-3, atol=1e-6), name


class TestClassificationBundle:
    def test_probabilities_normalized(self):
        bundle = ClassificationBundle.build(Task.IDH, Source.DSF, torch.randn(5, 2) * 20)
        sums = bundle.probabilities.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_argmax_scale_invariance(self):
        logits = torch.randn(6, 2)
        a = ClassificationBundle.build(Task.IDH, Source.DSF, logits)
        b = ClassificationBundle.build(Task.IDH, Source.DSF, logits * 7.5)
        assert torch.equal(a.predicted, b.predicted)


class TestMTSUNet:
    """Test stream wiring of the assembled network."""

    def test_dsf_bundle(self):
        model = MTSUNet(tiny_model_config(mode=ClassifierMode.DSF)).eval()
        with torch.no_grad():
            output = model(*_inputs(2))
        bundle = output.bundles[Task.IDH]
        assert bundle.source == Source.DSF
        assert bundle.c_tafe.shape == (2, 2) and bundle.c_cmd.shape == (2, 2)
        assert output.seg_logits.shape == (2, 2, 16, 16, 16)
        assert output.cmd.attention.shape == (2, 1, 8, 8, 8)

    def test_tafe_only_has_no_cmd(self):
        model = MTSUNet(tiny_model_config(mode=ClassifierMode.TAFE)).eval()
        with torch.no_grad():
            output = model(*_inputs())
        assert model.cmd is None and output.cmd is None
        assert output.bundles[Task.IDH].c_cmd is None
        assert model.source_for(Task.IDH) == Source.TAFE_ONLY

    def test_cmd_only(self):
        model = MTSUNet(tiny_model_config(mode=ClassifierMode.CMD)).eval()
        assert model.tafe is None
        with torch.no_grad():
            bundle = model(*_inputs()).bundles[Task.IDH]
        assert bundle.source == Source.CMD_ONLY
        assert torch.equal(bundle.c_final, bundle.c_cmd)

    def test_auto_mode_for_other_tasks(self):
        model = MTSUNet(tiny_model_config(task=Task.CODEL, mode=ClassifierMode.AUTO))
        assert model.cmd is None
        assert model.source_for(Task.CODEL) == Source.TAFE_ONLY

    def test_cmd_needs_idh(self):
        with pytest.raises(ValidationError, match="IDH"):
            tiny_model_config(task=Task.GRADE, mode=ClassifierMode.DSF)

    def test_cmd_without_t2(self):
        model = MTSUNet(tiny_model_config()).eval()
        image, _, _ = _inputs()
        with pytest.raises(ConfigError, match="T2 and FLAIR"):
            model(image)

    def test_segmentation_task_has_no_heads(self):
        model = MTSUNet(tiny_model_config(task=Task.SEGMENTATION, mode=ClassifierMode.AUTO)).eval()
        with torch.no_grad():
            output = model(_inputs()[0])
        assert output.bundles == {}

    def test_feature_level_fusion(self):
        config = tiny_model_config()
        config = config.model_copy(update={'dsf': config.dsf.model_copy(update={'fuse_level': 'features'})})
        model = MTSUNet(config).eval()
        with torch.no_grad():
            probs = model.predict_proba(*_inputs(), Task.IDH)
        assert probs.shape == (1, 2)

    def test_frozen_segmentation(self):
        model = MTSUNet(tiny_model_config(mode=ClassifierMode.TAFE, freeze_segmentation=True))
        assert model.segmentation_frozen
        assert all(not p.requires_grad for p in model.backbone.decoder_parameters())
        output = model(*_inputs())
        output.bundles[Task.IDH].c_final.sum().backward()
        assert any(p.grad is not None for p in model.backbone.stages.parameters())
