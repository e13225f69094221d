"""adahead: a detection-head kernel library with a dynamic attention head,
anchor-based box regression, focal losses, NMS, and mAP evaluation,
trainable end to end at desk scale on synthetic scenes."""

__version__ = "0.1.0"

from .anchors import (AnchorSet, BoxN, assign_targets, decode_box,
                      dynamic_anchors, encode_box, iou)
from .attention import (DvfParams, HeadOutput, PyramidFeatures,
                        attention_stack, head_apply, multiscale_conv,
                        scale_attention, spatial_attention, task_attention)
from .losses import (LossBreakdown, LossConfig, class_weights, cls_loss,
                     coord_loss, focal_term, noobj_loss, total_loss)
from .model import Detector, ModelConfig, load_checkpoint, save_checkpoint
from .postprocess import Detection, filter_confidence, nms
from .evaluation import (MetricsReport, ap_interpolated, ap_rank_product,
                         confusion_matrix, evaluate, match_detections,
                         precision_recall)
from .synth import LabeledImage, SceneConfig, generate_scene
from .tensor import GradTape, Tensor
from .train import TrainConfig, train
