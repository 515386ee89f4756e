//! Layer-wise structural probing of contextual embeddings.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`corpus`]: CoNLL-U ingestion, sentence filters, structure-set grouping,
//!   macro/micro subgraph extraction and gold tree distances.
//! - [`embedstore`]: the binary embedding-bundle format.
//! - [`probe`]: scalar-mixed structural probes, analytic gradients, Adam training.
//! - [`decode`]: Prim MST decoding and UUAS scoring.
//! - [`metrics`]: per-layer score series, expected layers, structure-set and
//!   agreement analyses.
//! - [`templates`]: the subject-verb agreement corpus generator.
//! - [`mdsviz`]: SMACOF MDS, derivation traces and report emission.

pub mod corpus;
pub mod decode;
pub mod embedstore;
pub mod fsutil;
pub mod mdsviz;
pub mod metrics;
pub mod probe;
pub mod templates;

pub use corpus::{Category, DepSentence, Edge, StructureSetKey, SubgraphEdges};
pub use decode::{DistanceMatrix, PredictedTree, UuasCount};
pub use embedstore::{BundleManifest, BundleReader, SentenceEmbeddings};
pub use metrics::{ExpectedLayerResult, LayerScoreSeries};
pub use probe::{ProbeParams, TrainConfig};
