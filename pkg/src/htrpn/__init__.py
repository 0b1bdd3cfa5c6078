"""Hierarchical ternary RPN machinery: anchors, balanced negative sampling,
ternary objectness labels, proposal ranking and the contrastive loss stack.
"""

from htrpn.geometry import Box, BoxDelta, decode_deltas, encode_deltas, iou, smooth_l1
from htrpn.losses import (
    ContrastiveBatch,
    LossBreakdown,
    LossWeights,
    contrast_weight,
    instance_cls_loss,
    roi_contra_loss,
    sup_con_grad,
    sup_con_per_sample,
    tcon_loss,
    ternary_ce,
    total_loss,
)
from htrpn.matcher import MatchResult, Status, match_anchors
from htrpn.pyramid import AnchorSet, LevelSpec, PyramidSpec, feature_shape, generate_anchors
from htrpn.sampler import (
    SampleConfig,
    SampledBatch,
    Strategy,
    sample_batch,
    sample_hsamp,
    sample_random,
)
from htrpn.ternary import (
    CombineOp,
    Detection,
    Proposal,
    RankStage,
    TernaryLabel,
    assign_ternary,
    combined_objectness,
    rank_proposals,
)

__version__ = "0.1.0"
