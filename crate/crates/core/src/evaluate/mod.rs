//! Classification metrics, Ward clustering, composition tables and 2-d export.

pub mod cluster;
pub mod embed;
pub mod export;
pub mod metrics;

pub use cluster::{cluster_composition, full_composition, ward_cluster, ClusterReport, CompositionRow, Merge};
pub use embed::embed_2d;
pub use metrics::{argmax, in_top_k, topk_accuracy, weighted_f1, ClassScores, MetricBlock, WeightedF1};
