//! Cross-view embedding toolkit.
//!
//! An overhead-imagery encoder is trained to land in the embedding space of
//! a frozen ground-photo/text encoder pair, optionally offset by a small
//! network over capture time and location. Precomputed region grids of those
//! embeddings can then be queried with free text to produce heatmaps.
//!
//! Modules, bottom-up:
//! - [`geodata`]: coordinates, web-mercator tiles, dataset pairing
//! - [`encoders`]: the trainable and frozen encoders
//! - [`contrastive`]: InfoNCE with a queue of negatives
//! - [`trainer`]: the optimization loop
//! - [`eval`]: retrieval and clustering metrics
//! - [`mapstore`]: persisted region embeddings
//! - [`queryengine`]: text-to-heatmap queries and the HTTP service

pub mod checkpoint;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geodata;
pub mod mapstore;
pub mod queryengine;
pub mod trainer;

pub use contrastive::{info_nce, info_nce_with_grad, BatchLoss, EmbeddingQueue, Temperature};
pub use encoders::{CrossViewModel, Embedding, EncoderConfig, Encoders, MetadataEncoding};
pub use error::{Error, Result};
pub use geodata::{BBox, CaptureTime, GeoLocation, GeoSample, RegionSpec, TileGrid};
pub use mapstore::{Catalog, RegionStatus, RegionStore};
pub use queryengine::{Heatmap, QueryEngine, QueryRequest};
pub use trainer::{TrainConfig, Trainer};
