"""The assembled multi-task network: backbone, TAFE heads, CMD stream and DSF head."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn

from errors import ConfigError
from models import ClassifierMode, DSFConfig, ModelConfig, Source, Task
from network.backbone import Backbone, FeaturePyramid, tumor_probability
from network.cmd import CMDModule, CMDOutput
from network.fusion import ClassificationBundle, DSFModule
from network.tafe import TAFEModule


logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    seg_logits: torch.Tensor
    pyramid: FeaturePyramid
    bundles: Dict[Task, ClassificationBundle] = field(default_factory=dict)
    cmd: Optional[CMDOutput] = None


class MTSUNet(nn.Module):
    """Segmentation-guided multi-task classifier.

    The backbone always produces segmentation logits. Each classification task
    gets a bundle whose final logits come from TAFE, CMD or their DSF fusion,
    as resolved by :meth:`ModelConfig.mode_for`.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        self.tasks = config.classification_tasks

        tafe_tasks = [t for t in self.tasks if config.mode_for(t) != ClassifierMode.CMD]
        self.tafe = TAFEModule(config.backbone, config.tafe.stage_set, tafe_tasks) if tafe_tasks else None

        idh_mode = config.mode_for(Task.IDH) if Task.IDH in self.tasks else None
        self.cmd = (CMDModule(config.cmd, dropout=config.backbone.dropout_rate)
                    if idh_mode in (ClassifierMode.CMD, ClassifierMode.DSF) else None)
        self.dsf = None
        if idh_mode == ClassifierMode.DSF:
            tafe_dim, cmd_dim = self._dsf_dims(config.dsf)
            self.dsf = DSFModule(tafe_dim, cmd_dim, config.dsf.hidden_width)

        self.segmentation_frozen = False
        if config.backbone.freeze_segmentation:
            self.freeze_segmentation()

    def _dsf_dims(self, dsf: DSFConfig):
        if dsf.fuse_level == "features":
            return self.tafe.fused_dim, 2 * self.config.cmd.channels
        return 2, 2

    def freeze_segmentation(self) -> None:
        """Stop training the decoder and keep segmentation gradients out of the encoder."""
        self.segmentation_frozen = True
        for param in self.backbone.decoder_parameters():
            param.requires_grad_(False)

    def source_for(self, task: Task) -> Source:
        return {
            ClassifierMode.TAFE: Source.TAFE_ONLY,
            ClassifierMode.CMD: Source.CMD_ONLY,
            ClassifierMode.DSF: Source.DSF,
        }[self.config.mode_for(task)]

    @property
    def uses_cmd(self) -> bool:
        return self.cmd is not None

    def forward(self, image: torch.Tensor, t2: Optional[torch.Tensor] = None,
                flair: Optional[torch.Tensor] = None) -> ModelOutput:
        """Run the network.

        Args:
            image: (B, in_channels, D, H, W) stacked modalities.
            t2: (B, 1, D, H, W) T2 volume, required when the CMD stream is active.
            flair: (B, 1, D, H, W) FLAIR volume, required when the CMD stream is active.
        """
        pyramid = self.backbone.encode(image)
        seg_input = pyramid.detach() if self.segmentation_frozen else pyramid
        seg_logits = self.backbone.decode(seg_input)
        output = ModelOutput(seg_logits=seg_logits, pyramid=pyramid)
        if not self.tasks:
            return output

        z = self.tafe.fuse(pyramid) if self.tafe is not None else None

        if self.cmd is not None:
            if t2 is None or flair is None:
                raise ConfigError("the CMD stream needs T2 and FLAIR inputs")
            probability = tumor_probability(seg_logits)
            if self.config.cmd.detach_gate:
                probability = probability.detach()
            output.cmd = self.cmd(t2, flair, probability)

        for task in self.tasks:
            mode = self.config.mode_for(task)
            c_tafe = self.tafe.classify(z, task) if mode != ClassifierMode.CMD else None
            if mode == ClassifierMode.TAFE:
                bundle = ClassificationBundle.build(task, Source.TAFE_ONLY, c_tafe, c_tafe=c_tafe)
            elif mode == ClassifierMode.CMD:
                c_cmd = output.cmd.logits
                bundle = ClassificationBundle.build(task, Source.CMD_ONLY, c_cmd, c_cmd=c_cmd)
            else:
                c_cmd = output.cmd.logits
                if self.config.dsf.fuse_level == "features":
                    c_final = self.dsf(z, output.cmd.features)
                else:
                    c_final = self.dsf(c_tafe, c_cmd)
                bundle = ClassificationBundle.build(task, Source.DSF, c_final, c_tafe=c_tafe, c_cmd=c_cmd)
            output.bundles[task] = bundle
        return output

    def predict_proba(self, image: torch.Tensor, t2: Optional[torch.Tensor], flair: Optional[torch.Tensor],
                      task: Task) -> torch.Tensor:
        """Softmax probabilities of the final logits for ``task``, shape (B, 2)."""
        output = self.forward(image, t2, flair)
        if task not in output.bundles:
            raise ConfigError(f"model has no {task.value} head")
        return output.bundles[task].probabilities
