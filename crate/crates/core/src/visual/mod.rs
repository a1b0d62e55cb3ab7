//! Visual features Ψ, clustering of item features, and reference selection.

pub mod cluster;
pub mod extractor;

pub use cluster::{fit_clusters, global_reference, most_popular, select_reference, ClusterModel};
pub use extractor::{pretrain_autoencoder, DifferentiableFeatures, FeatureExtractor, PretrainConfig};
