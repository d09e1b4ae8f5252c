use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Named concepts plus a frozen embedding table.
///
/// Row 0 is the empty concept `c_0`; concept `k` (1-based) lives in row `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    embed_dim: usize,
    /// Row-major `(K + 1) x embed_dim`.
    table: Vec<f64>,
}

impl ConceptVocabulary {
    /// Builds a vocabulary with unit-norm embeddings drawn from `seed`.
    ///
    /// When `K + 1 <= embed_dim` the rows are orthonormalized so that no two
    /// concepts share an embedding direction.
    pub fn new(names: Vec<String>, embed_dim: usize, seed: u64) -> Result<Self> {
        validate_names(&names)?;
        if embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let rows = names.len() + 1;
        let mut rng = RngStream::new(seed, 0x0076_6f63_6162);
        let mut table: Vec<Vec<f64>> = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut v = rng.normal_vec(embed_dim);
            if rows <= embed_dim {
                for prev in &table {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            // stored at f32 precision so checkpoints reproduce the table exactly
            v.iter_mut().for_each(|a| *a = (*a / norm) as f32 as f64);
            table.push(v);
        }
        Ok(Self {
            names,
            embed_dim,
            table: table.concat(),
        })
    }

    /// Reassembles a vocabulary from stored parts.
    pub fn from_parts(names: Vec<String>, embed_dim: usize, table: Vec<f64>) -> Result<Self> {
        validate_names(&names)?;
        if table.len() != (names.len() + 1) * embed_dim {
            return Err(Error::Dimension {
                expected: (names.len() + 1) * embed_dim,
                got: table.len(),
            });
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "embedding table has non-finite entries".into(),
            ));
        }
        Ok(Self {
            names,
            embed_dim,
            table,
        })
    }

    /// Number of real concepts `K` (excluding the empty concept).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// 1-based id of `name`.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        let d = self.embed_dim;
        ArrayView1::from(&self.table[id * d..(id + 1) * d])
    }

    /// Embedding rows for `ids` in order; an empty list is the unconditional `[c_0]`.
    pub fn embed(&self, ids: &[usize]) -> Result<TokenSequence> {
        let k = self.len();
        if ids.is_empty() || ids == [0] {
            return Ok(TokenSequence {
                ids: vec![0],
                tokens: self.row(0).to_owned().insert_axis(ndarray::Axis(0)),
            });
        }
        let mut tokens = Array2::zeros((ids.len(), self.embed_dim));
        for (r, &id) in ids.iter().enumerate() {
            if id == 0 || id > k {
                return Err(Error::UnknownConcept { id, k });
            }
            tokens.row_mut(r).assign(&self.row(id));
        }
        Ok(TokenSequence {
            ids: ids.to_vec(),
            tokens,
        })
    }

    pub fn unconditional(&self) -> TokenSequence {
        self.embed(&[]).expect("empty id list always embeds")
    }
}

fn validate_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Config(
            "vocabulary needs at least one concept".into(),
        ));
    }
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(Error::Config("concept names must be nonempty".into()));
        }
        if names[..i].contains(n) {
            return Err(Error::Config(format!("duplicate concept name {n:?}")));
        }
    }
    Ok(())
}

/// Non-pooled conditioning: one embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn is_unconditional(&self) -> bool {
        self.ids == [0]
    }

    /// Builds a sequence from raw embedding rows (tests and probes).
    pub fn from_rows(ids: Vec<usize>, tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || ids.len() != tokens.nrows() {
            return Err(Error::Config(
                "token sequence must be nonempty with one id per row".into(),
            ));
        }
        Ok(Self { ids, tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ConceptVocabulary {
        let names = (1..=4).map(|i| format!("c{i}")).collect();
        ConceptVocabulary::new(names, 16, 3).unwrap()
    }

    #[test]
    fn empty_ids_map_to_c0() {
        let v = vocab();
        let s = v.embed(&[]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.tokens().row(0), v.row(0));
        assert!(s.is_unconditional());
    }

    #[test]
    fn single_id_is_its_row() {
        let v = vocab();
        let s = v.embed(&[3]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.tokens().row(0), v.row(3));
    }

    #[test]
    fn order_is_preserved() {
        let v = vocab();
        let a = v.embed(&[1, 2]).unwrap();
        let b = v.embed(&[2, 1]).unwrap();
        assert_eq!(a.tokens().row(0), b.tokens().row(1));
        assert_eq!(a.tokens().row(1), b.tokens().row(0));
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_range_ids_fail() {
        let v = vocab();
        assert!(matches!(
            v.embed(&[5]),
            Err(Error::UnknownConcept { id: 5, k: 4 })
        ));
        assert!(v.embed(&[1, 0]).is_err());
    }

    #[test]
    fn rows_are_orthonormal() {
        let v = vocab();
        for i in 0..=4 {
            for j in 0..=4 {
                let d = v.row(i).dot(&v.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn names_validated() {
        assert!(ConceptVocabulary::new(vec![], 4, 0).is_err());
        assert!(ConceptVocabulary::new(vec!["a".into(), "a".into()], 4, 0).is_err());
        assert!(ConceptVocabulary::new(vec!["".into()], 4, 0).is_err());
    }
}
