use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the corpus this neighbor came from.
    pub index: usize,
    pub label: u32,
    /// Euclidean (not squared) distance to the query.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    /// Ascending by distance, then by corpus row.
    pub entries: Vec<Neighbor>,
    pub k: usize,
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact Euclidean k-nearest neighbors of `query` among the corpus rows.
pub fn knn_query(corpus: &Matrix, labels: &[u32], query: &[f32], k: usize) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    if labels.len() != corpus.rows() {
        return Err(Error::arg(format!(
            "{} labels for {} corpus rows",
            labels.len(),
            corpus.rows()
        )));
    }
    if query.len() != corpus.cols() {
        return Err(Error::arg(format!(
            "query dim {} does not match corpus dim {}",
            query.len(),
            corpus.cols()
        )));
    }

    let mut scored: Vec<(f64, usize)> = corpus
        .iter_rows()
        .enumerate()
        .map(|(i, row)| (squared_distance(row, query), i))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);

    Ok(NeighborSet {
        entries: scored
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                label: labels[index],
                distance: d2.sqrt(),
            })
            .collect(),
        k,
    })
}
