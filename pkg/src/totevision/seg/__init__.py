from .boxes import BoxCoder, box_iou, nms
from .cascade import CascadeStageConfig, cascade_refine, match_boxes
from .model import InstancePrediction, SegHeadConfig, SegmentationModel, SegTarget, as_image_batch, segment
from .roi import roi_align
from .rpn import BoxProposal, select_proposals
