//! Generalized intent discovery over precomputed embedding vectors.
//!
//! A labeled embedding dataset is split into labeled in-domain (IND) classes
//! and unlabeled out-of-domain (OOD) classes; trainers then learn one
//! (N+M)-way classifier that recognises the IND classes and discovers the
//! OOD ones, and the evaluation maps discovered clusters onto gold classes.

pub mod assignment;
pub mod benchmark;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod neural;
pub mod rng;
pub mod trainers;
pub mod transport;

pub use assignment::{align_clusters, hungarian, CostMatrix, Mapping};
pub use benchmark::{
    apply_imbalance, apply_noise, build_split, GidSplit, ImbalanceConfig, NoiseConfig, NoiseKind,
    SplitConfig, SplitMode,
};
pub use clustering::{estimate_k, kmeans, silhouette, ClusterAssignment, KEstimateConfig, KMeansConfig};
pub use data::{
    generate_synthetic, load_dataset, save_dataset, EmbeddingDataset, Format, SampleRecord,
    SyntheticSpec,
};
pub use error::{Error, Result};
pub use evaluation::{evaluate_gid, MappingScope, MetricsReport};
pub use neural::{JointModel, ModelDims, OptimizerState, ScheduleConfig};
pub use trainers::{predict, run, Method, RunOutput, RunReport, TrainConfig};
pub use transport::{sinkhorn_pseudo_labels, PseudoLabelMatrix, SinkhornProblem};
