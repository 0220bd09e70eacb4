//! Benchmark metrics for RGB-T trackers: PR/NPR/SR curves, the per-frame
//! maximum variants MPR/MSR, attribute breakdowns and report export.

mod annotations;
mod attributes;
mod bbox;
mod metrics;
mod report;

pub use annotations::{format_boxes, parse_boxes, read_boxes, write_boxes};
pub use attributes::{attribute_breakdown, AttributeFlags, AttributeRow, AttributeSchema};
pub use bbox::{center_error, giou, iou, norm_center_error, BoundingBox};
pub use metrics::{
    evaluate, max_fuse, norm_precision_curve, precision_curve, success_curve, Aggregation, EvalConfig, Evaluation,
    GtReference, MaxFused, MetricCurve, SequenceRecord, ThresholdGrid,
};
pub use report::{attributes_csv, curves_csv, export_report, parse_curves_csv, summary_line, summary_text};
