//! Offline signature verification library.
//!
//! Two dissimilarity measures are computed between a questioned signature
//! image and a claimed user's reference signatures:
//!
//! * a structural measure: keypoint graphs are extracted from the image
//!   skeleton and compared with a bipartite approximation of graph edit
//!   distance ([`ged`]),
//! * a statistical measure: a small embedding network trained with the
//!   triplet loss maps images into a vector space where Euclidean distance
//!   reflects writer identity ([`embed`]).
//!
//! Both scores are normalized per user and either used individually or
//! fused by a z-score multiple classifier system ([`scoring`]). The
//! [`eval`] module reproduces the standard verification protocols
//! (R5/R10 reference sets, skilled and random forgeries, EER/DET) and
//! [`dataset`] provides directory ingestion plus a synthetic signature
//! generator for end-to-end testing without licensed corpora.

pub mod dataset;
pub mod embed;
pub mod eval;
pub mod ged;
pub mod graph;
pub mod lsap;
pub mod preprocess;
pub mod raster;
pub mod scoring;

pub use ged::{CostParams, GedResult};
pub use graph::{GraphExtractionParams, KeypointGraph};
pub use lsap::{Assignment, CostMatrix};
pub use raster::{BinaryImage, GrayImage, SkeletonImage};
