//! Nearest-neighbour retrieval over per-dimension normalised embeddings.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("k = {k} exceeds gallery size {n}")]
    KExceedsGallery { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedding has {got} dimensions, gallery has {expected}")]
    DimMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// How each feature component is normalised before computing distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Min–max to [0, 1] on the gallery; queries clamped.
    #[default]
    MinMax,
    /// Zero mean, unit variance on the gallery.
    Standardize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub mode: Normalization,
    /// Min-max: (lo, hi). Standardise: (mean, std).
    pub params: Vec<(f64, f64)>,
    /// Normalised gallery rows.
    pub gallery: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl RetrievalIndex {
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        Self::fit_with(embeddings, labels, Normalization::MinMax)
    }

    pub fn fit_with(embeddings: &[Vec<f64>], labels: &[usize], mode: Normalization) -> Result<Self> {
        let first = embeddings.first().ok_or(RetrievalError::EmptyGallery)?;
        let d = first.len();
        for e in embeddings {
            if e.len() != d {
                return Err(RetrievalError::DimMismatch { expected: d, got: e.len() });
            }
        }
        assert_eq!(embeddings.len(), labels.len(), "one label per gallery item");
        let params: Vec<(f64, f64)> = (0..d)
            .map(|j| {
                let col = embeddings.iter().map(|e| e[j]);
                match mode {
                    Normalization::MinMax => col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))),
                    Normalization::Standardize => {
                        let n = embeddings.len() as f64;
                        let m = col.clone().sum::<f64>() / n;
                        let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                        (m, var.sqrt())
                    }
                }
            })
            .collect();
        let mut index = Self {
            mode,
            params,
            gallery: Vec::new(),
            labels: labels.to_vec(),
        };
        index.gallery = embeddings.iter().map(|e| index.normalize(e)).collect();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gallery.is_empty()
    }

    /// Applies the gallery normalisation; constant dimensions map to 0.5
    /// (min-max) or 0 (standardise).
    pub fn normalize(&self, e: &[f64]) -> Vec<f64> {
        e.iter()
            .zip(&self.params)
            .map(|(&v, &(a, b))| match self.mode {
                Normalization::MinMax if b > a => ((v - a) / (b - a)).clamp(0.0, 1.0),
                Normalization::MinMax => 0.5,
                Normalization::Standardize if b > 0.0 => (v - a) / b,
                Normalization::Standardize => 0.0,
            })
            .collect()
    }

    /// Gallery ids of the `k` nearest items by L2 distance, ties by id.
    pub fn query(&self, embedding: &[f64], k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if k > self.len() {
            return Err(RetrievalError::KExceedsGallery { k, n: self.len() });
        }
        if embedding.len() != self.params.len() {
            return Err(RetrievalError::DimMismatch {
                expected: self.params.len(),
                got: embedding.len(),
            });
        }
        let q = self.normalize(embedding);
        let mut d: Vec<(f64, usize)> = self
            .gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (g.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
    }

    /// Fraction of queries whose top-k contains a gallery item with the
    /// query's label.
    pub fn topk_accuracy(&self, queries: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
        Ok(self.topk_hits(queries, labels, k)?.iter().filter(|&&h| h).count() as f64 / queries.len().max(1) as f64)
    }

    /// Per-query hit flags (for bootstrapping).
    pub fn topk_hits(&self, queries: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<bool>> {
        queries
            .iter()
            .zip(labels)
            .map(|(q, &l)| Ok(self.query(q, k)?.iter().any(|&i| self.labels[i] == l)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_and_constant_dims() {
        let idx = RetrievalIndex::fit(&[vec![2.0, 5.0], vec![6.0, 5.0]], &[0, 1]).unwrap();
        assert_eq!(idx.normalize(&[4.0, 7.0]), vec![0.5, 0.5]);
        assert_eq!(idx.normalize(&[10.0, 5.0])[0], 1.0);
    }

    #[test]
    fn nearer_point_first() {
        let idx = RetrievalIndex::fit(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[0, 1]).unwrap();
        assert_eq!(idx.query(&[0.1, 0.1], 2).unwrap(), vec![0, 1]);
        assert_eq!(idx.query(&[0.1, 0.1], 3), Err(RetrievalError::KExceedsGallery { k: 3, n: 2 }));
        assert_eq!(RetrievalIndex::fit(&[], &[]), Err(RetrievalError::EmptyGallery));
    }
}
