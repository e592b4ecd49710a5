use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Where a feature matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureOrigin {
    /// Rows retrieved from an image-embedding bank.
    Retrieved,
    /// Per-chunk text-encoder embeddings, padded to a fixed row count.
    TextChunks,
}

/// External features consumed by an adapter's cross-attention: `N` rows of
/// width `d_c`, an optional sentence tag per row, and a validity mask.
/// Invalid (padding) rows are excluded from attention.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: Tensor,
    tags: Option<Vec<u8>>,
    valid: Vec<bool>,
    origin: FeatureOrigin,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor, origin: FeatureOrigin) -> Result<Self> {
        let n = rows.rows();
        Self::with_mask(rows, vec![true; n], origin)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], origin: FeatureOrigin) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("feature matrix needs at least one row"));
        }
        Self::new(Tensor::from_rows(rows)?, origin)
    }

    /// Feature rows where only the rows flagged in `valid` are attended to.
    pub fn with_mask(rows: Tensor, valid: Vec<bool>, origin: FeatureOrigin) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "feature matrix",
                left: rows.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        if valid.len() != rows.rows() {
            return Err(Error::Dimension {
                op: "feature mask",
                left: rows.shape().to_vec(),
                right: vec![valid.len()],
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::contract("feature matrix has no valid rows"));
        }
        if !rows.is_finite() {
            return Err(Error::contract("feature matrix contains non-finite values"));
        }
        Ok(FeatureMatrix {
            rows,
            tags: None,
            valid,
            origin,
        })
    }

    /// Attaches a sentence tag (0 or 1) to every row.
    pub fn with_tags(mut self, tags: Vec<u8>) -> Result<Self> {
        if tags.len() != self.rows.rows() {
            return Err(Error::Dimension {
                op: "feature tags",
                left: self.rows.shape().to_vec(),
                right: vec![tags.len()],
            });
        }
        if let Some(&bad) = tags.iter().find(|&&t| t > 1) {
            return Err(Error::Index {
                what: "feature tag",
                index: bad as usize,
                size: 2,
            });
        }
        self.tags = Some(tags);
        Ok(self)
    }

    pub fn without_tags(mut self) -> Self {
        self.tags = None;
        self
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn tags(&self) -> Option<&[u8]> {
        self.tags.as_deref()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn origin(&self) -> FeatureOrigin {
        self.origin
    }

    /// Overwrites the contents of a row, keeping its mask and tag.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<()> {
        let d = self.dim();
        if values.len() != d {
            return Err(Error::Dimension {
                op: "set_row",
                left: vec![d],
                right: vec![values.len()],
            });
        }
        self.rows.data_mut()[i * d..(i + 1) * d].copy_from_slice(values);
        Ok(())
    }

    /// Rows in a new order; `order` must be a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || seen[i] {
                return Err(Error::contract("row order is not a permutation"));
            }
            seen[i] = true;
        }
        if order.len() != self.len() {
            return Err(Error::contract("row order is not a permutation"));
        }
        let rows: Vec<&[f64]> = order.iter().map(|&i| self.rows.row(i)).collect();
        Ok(FeatureMatrix {
            rows: Tensor::from_rows(&rows)?,
            tags: self
                .tags
                .as_ref()
                .map(|t| order.iter().map(|&i| t[i]).collect()),
            valid: order.iter().map(|&i| self.valid[i]).collect(),
            origin: self.origin,
        })
    }
}

/// Stacks the features found for two sentences, a-rows first, tagging each
/// row with the sentence it belongs to.
pub fn stack_paired_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract(
            "paired stacking needs features on both sides",
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            op: "stack_paired_features",
            left: a.rows.shape().to_vec(),
            right: b.rows.shape().to_vec(),
        });
    }
    let mut data = a.rows.data().to_vec();
    data.extend_from_slice(b.rows.data());
    let rows = Tensor::matrix(a.len() + b.len(), a.dim(), data)?;
    let mut valid = a.valid.clone();
    valid.extend_from_slice(&b.valid);
    let tags = std::iter::repeat(0u8)
        .take(a.len())
        .chain(std::iter::repeat(1u8).take(b.len()))
        .collect();
    FeatureMatrix::with_mask(rows, valid, a.origin)?.with_tags(tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[[f64; 2]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, FeatureOrigin::Retrieved).unwrap()
    }

    #[test]
    fn paired_stacking_tags_a_then_b() {
        let a = fm(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let b = fm(&[[0.0, 1.0], [0.0, 2.0]]);
        let s = stack_paired_features(&a, &b).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.tags().unwrap(), &[0, 0, 0, 1, 1]);

        let swapped = stack_paired_features(&b, &a).unwrap();
        assert_eq!(swapped.tags().unwrap(), &[0, 0, 1, 1, 1]);
        let mut left: Vec<Vec<u64>> = (0..5)
            .map(|i| s.rows().row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut right: Vec<Vec<u64>> = (0..5)
            .map(|i| swapped.rows().row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        left.sort();
        right.sort();
        assert_eq!(left, right);
    }

    #[test]
    fn empty_side_rejected() {
        let a = fm(&[[1.0, 0.0]]);
        assert!(FeatureMatrix::from_rows::<[f64; 2]>(&[], FeatureOrigin::Retrieved).is_err());
        let b = FeatureMatrix::with_mask(
            Tensor::zeros(&[1, 2]),
            vec![false],
            FeatureOrigin::Retrieved,
        );
        assert!(b.is_err());
        assert!(stack_paired_features(&a, &a).is_ok());
    }

    #[test]
    fn non_finite_rows_rejected() {
        assert!(FeatureMatrix::from_rows(&[[f64::NAN, 0.0]], FeatureOrigin::Retrieved).is_err());
    }
}
