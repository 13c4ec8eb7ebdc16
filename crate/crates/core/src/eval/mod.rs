//! Confusion matrices, per-class and aggregate metrics, and their renderings.

mod metrics;
mod render;

pub use metrics::{
    aggregate, confusion_matrix, per_class_metrics, Aggregate, ClassMetrics, ConfusionMatrix, MetricsReport, Strategy,
};
pub use render::{heat_colour, heatmap, read_confusion_csv, render_confusion, write_confusion_csv, CELL};
