"""Two-stage multilingual image captioning with attention-cycle consistency.

The pipeline decodes an English pivot caption from image region features,
encodes it, and decodes the German caption with attention over both the
regions and the pivot words; training penalizes disagreement between the
German decoder's direct region attention and the composition of its pivot
attention with the pivot decoder's region attention.
"""

from .cycle import AttentionRecord, cycle_loss, indirect_attention
from .data import FeatureGrid, TripleRecord, Vocabulary
from .inference import beam_decode, caption_image
from .models import ImageCaptioner, ModelBundle, ModelDims
from .tensor import Parameter, Tape, Tensor
from .training import TrainConfig, pretrain_part1, train_part2

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord", "FeatureGrid", "ImageCaptioner", "ModelBundle",
    "ModelDims", "Parameter", "Tape", "Tensor", "TrainConfig", "TripleRecord",
    "Vocabulary", "beam_decode", "caption_image", "cycle_loss",
    "indirect_attention", "pretrain_part1", "train_part2",
]
