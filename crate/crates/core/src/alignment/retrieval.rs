use super::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::exec;

/// Zero-based rank of gallery item `truth` for `query`: the number of items
/// with higher cosine similarity plus lower-indexed items with an equal one.
pub fn true_rank(query: &[f64], gallery: &EmbeddingBatch, truth: usize) -> usize {
    let sim = |j: usize| query.iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let target = sim(truth);
    (0..gallery.len())
        .filter(|&j| {
            let s = sim(j);
            s > target || (s == target && j < truth)
        })
        .count()
}

/// Fraction of queries whose match (query `i` ↔ gallery `i`) ranks within
/// the top `k`, for each `k` in `ks`.
pub fn retrieval_topk(queries: &EmbeddingBatch, gallery: &EmbeddingBatch, ks: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() || queries.len() != gallery.len() || queries.dim != gallery.dim {
        return Err(Error::dims(format!(
            "queries {}x{} and gallery {}x{} are not paired",
            queries.len(),
            queries.dim,
            gallery.len(),
            gallery.dim
        )));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("k must be at least 1"));
    }
    let ranks = exec::map_range(queries.len(), |i| true_rank(queries.row(i), gallery, i));
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Modality;

    #[test]
    fn identity_and_ties() {
        let e = EmbeddingBatch::new(Modality::S, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(retrieval_topk(&e, &e, &[1, 2]).unwrap(), vec![1.0, 1.0]);
        // every gallery row identical: rank equals the index
        let g = EmbeddingBatch::new(Modality::P, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let acc = retrieval_topk(&e, &g, &[1, 2, 3]).unwrap();
        assert_eq!(acc, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(retrieval_topk(&e, &g, &[0]).is_err());
    }
}
