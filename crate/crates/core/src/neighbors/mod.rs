//! Retrieval substrates for the caches: exact brute-force k-NN and Lloyd's
//! k-means. Ties are always broken toward the lowest index.

mod kmeans;
mod knn;

pub use kmeans::{cluster_summary, kmeans_fit, ClusterSummary, Clustering, KMeansConfig};
pub use knn::{knn_query, Neighbor, NeighborSet};
