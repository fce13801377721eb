//! Retrieval metrics, clustering analysis and caption alignment.

mod caption;
mod clustering;
mod retrieval;

pub use caption::{caption_alignment, HashedBagOfWords, SentenceEmbedder};
pub use clustering::{curve_table, kmeans, silhouette, silhouette_curve, KMeans, SilhouettePoint, MAX_LLOYD_ITERATIONS};
pub use retrieval::{
    cross_view_report, format_table, median_rank, ranks, recall_at_k, similarity_matrix, Ablation, AblationRow, Direction,
    RetrievalReport,
};
