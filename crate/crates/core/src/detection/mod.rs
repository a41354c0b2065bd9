//! Two-stage detection machinery: anchors, RPN, NMS, RoIPool, the RoI
//! classifier/regressor/mask head, and training-target assignment.

mod anchors;
mod boxes;
mod head;
mod nms;
mod rpn;
mod targets;

pub use anchors::{AnchorConfig, AnchorGrid};
pub use boxes::{AbnormalityClass, BBox, DELTA_LOG_CLAMP, Detection, GroundTruthBox, Proposal, decode, decode_boxes, encode};
pub use head::{
    DetectionOutput, HeadConfig, HeadOutput, NUM_CLASSES, head_forward, read_outputs, register_head, roi_pool, roi_rect,
};
pub use nms::{nms, nms_indices, score_order};
pub use rpn::{RpnConfig, RpnOutput, generate_proposals, register_rpn, rpn_forward, rpn_head};
pub use targets::{AnchorLabels, RoiTarget, assign_targets, label_anchors, mask_target, sample_balanced};
