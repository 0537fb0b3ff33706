//! Amortized maximum inner product search.
//!
//! Given a key set `Y` and a distribution of queries, the support function
//! `σ_Y(x) = max_{y ∈ Y} ⟨x, y⟩` is convex and positively 1-homogeneous, and its
//! gradient is the maximizing key. This crate trains small networks to
//! predict either the support function ([`nets::Family::SupportNet`], keys
//! recovered as input gradients) or the optimal key directly
//! ([`nets::Family::KeyNet`]), and benchmarks them as cluster routers and as
//! query-mapping front-ends for an inverted-file index.
//!
//! Module map:
//!
//! - [`vecstore`]: embedding matrices, the AMIP binary format, normalization,
//!   dedup, Gaussian augmentation and splitting.
//! - [`oracle`]: brute-force MIPS and the precomputed target set.
//! - [`partition`]: k-means++ / Lloyd clustering with balanced restarts.
//! - [`nets`]: architectures, activation, width sizing, forward and input
//!   gradients.
//! - [`autodiff`]: a small batched reverse-mode tape used by training.
//! - [`train`]: losses, parameter gradients, Adam, schedules and EMA.
//! - [`evalkit`]: transport error, retrieval metrics and FLOP accounting.
//! - [`router`]: two-stage clustered search and accuracy-vs-FLOPs curves.
//! - [`ivf`]: inverted-file index, natural vs. mapped probing, sweeps.
//! - [`synth`]: the synthetic mixture-of-Gaussians fixture.

pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod ivf;
pub mod nets;
pub mod oracle;
pub mod partition;
pub mod router;
pub mod synth;
pub mod train;
pub mod vecstore;

mod binio;

pub use error::{Error, Result};
pub use evalkit::{CostCurve, CostPoint, MetricReport};
pub use ivf::{IvfIndex, QueryStrategy};
pub use nets::{Family, Model, NetParams, NetSpec};
pub use oracle::TargetSet;
pub use partition::Partition;
pub use router::{RoutePlan, Scorer};
pub use train::{LossWeights, TrainConfig};
pub use vecstore::{AugmentConfig, EmbeddingStore, StoreKind};
