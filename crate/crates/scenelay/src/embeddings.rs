//! Word-embedding table: loading, normalization, lookup, cosine similarity.
//!
//! The on-disk format is the plain-text GloVe layout: one entry per line,
//! `token v1 v2 ... v_dim`, space separated, no header. Every vector is
//! L2-normalized at load time so cosine similarity is a plain dot product.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// Vocabulary of unit-normalized `dim`-dimensional word vectors.
///
/// Immutable after load; safe to share read-only across worker threads.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

/// Bookkeeping from [`EmbeddingTable::load`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub loaded: usize,
    /// Lines whose field count is not `1 + dim`.
    pub skipped_arity: usize,
    /// Lines whose vector has zero norm.
    pub skipped_zero_norm: usize,
    /// Lines whose token was already present (first occurrence wins).
    pub duplicates: usize,
    /// Lines with an unparseable float.
    pub skipped_parse: usize,
}

impl EmbeddingTable {
    /// Build a table from already-normalized or raw vectors. Tokens are
    /// lowercased; vectors are L2-normalized; zero-norm vectors are rejected.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut map = HashMap::new();
        for (token, mut v) in entries {
            if v.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "vector for {token:?} has length {}, expected {dim}",
                    v.len()
                )));
            }
            let n = l2_norm(&v);
            if n == 0.0 {
                return Err(Error::InvalidConfig(format!("zero-norm vector for {token:?}")));
            }
            for x in &mut v {
                *x /= n;
            }
            map.entry(token.to_lowercase()).or_insert(v);
        }
        Ok(EmbeddingTable { dim, entries: map })
    }

    /// Load a GloVe-format file. Tokens are lowercased, vectors L2-normalized,
    /// the first occurrence of a duplicate token wins, and lines with the
    /// wrong arity, unparseable floats, or zero norm are skipped and counted.
    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);

        let mut stats = LoadStats::default();
        let mut entries: HashMap<String, Vec<f64>> = HashMap::new();

        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            stats.lines += 1;
            let mut fields = line.split_whitespace();
            let token = match fields.next() {
                Some(t) => t,
                None => {
                    stats.skipped_arity += 1;
                    continue;
                }
            };
            let mut v = Vec::with_capacity(dim);
            let mut parse_failed = false;
            for f in fields.by_ref() {
                match f.parse::<f64>() {
                    Ok(x) => v.push(x),
                    Err(_) => {
                        parse_failed = true;
                        break;
                    }
                }
            }
            if parse_failed {
                stats.skipped_parse += 1;
                continue;
            }
            if v.len() != dim {
                stats.skipped_arity += 1;
                continue;
            }
            let n = l2_norm(&v);
            if n == 0.0 {
                stats.skipped_zero_norm += 1;
                continue;
            }
            for x in &mut v {
                *x /= n;
            }
            let key = token.to_lowercase();
            if entries.contains_key(&key) {
                stats.duplicates += 1;
                continue;
            }
            entries.insert(key, v);
            stats.loaded += 1;
        }

        if entries.is_empty() {
            return Err(Error::EmptyEmbeddingFile { path: path.into() });
        }
        Ok((EmbeddingTable { dim, entries }, stats))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unit vector for `token` (case-insensitive), or `None` when
    /// out-of-vocabulary. Absence is a normal outcome, never a zero vector.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        if let Some(v) = self.entries.get(token) {
            return Some(v.as_slice());
        }
        self.entries.get(&token.to_lowercase()).map(|v| v.as_slice())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit vectors: their dot product, clamped to
/// `[-1, 1]` against round-off. Panics on length mismatch.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine: length mismatch {} vs {}", a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_normalizes_3_4_5() {
        let f = write_temp("cat 3.0 4.0\n");
        let (table, stats) = EmbeddingTable::load(f.path(), 2).unwrap();
        let v = table.lookup("cat").unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-12);
        assert_eq!(stats.loaded, 1);
    }

    #[test]
    fn duplicate_token_first_wins() {
        let f = write_temp("a 1 0\na 0 1\n");
        let (table, stats) = EmbeddingTable::load(f.path(), 2).unwrap();
        assert_eq!(table.lookup("a").unwrap(), &[1.0, 0.0]);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(stats.loaded, 1);
    }

    #[test]
    fn wrong_arity_and_zero_norm_skipped() {
        let f = write_temp("ok 1 0\nshort 1\nlong 1 2 3\nzero 0 0\n");
        let (table, stats) = EmbeddingTable::load(f.path(), 2).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(stats.skipped_arity, 2);
        assert_eq!(stats.skipped_zero_norm, 1);
    }

    #[test]
    fn tokens_lowercased_on_load_and_lookup() {
        let f = write_temp("Cat 3 4\n");
        let (table, _) = EmbeddingTable::load(f.path(), 2).unwrap();
        let v = table.lookup("Cat").unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-12);
        assert!(table.lookup("cat").is_some());
        assert!(table.lookup("zxqv").is_none());
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(matches!(
            EmbeddingTable::load("/nonexistent/vectors.txt", 2),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_file_is_fatal() {
        let f = write_temp("");
        assert!(matches!(
            EmbeddingTable::load(f.path(), 2),
            Err(Error::EmptyEmbeddingFile { .. })
        ));
    }

    #[test]
    fn bulk_load_all_norms_unit() {
        // Stand-in for the full GloVe file: many random raw vectors, then
        // assert the norm invariant over everything stored.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut text = String::new();
        for i in 0..1000 {
            text.push_str(&format!("tok{i}"));
            for _ in 0..25 {
                text.push_str(&format!(" {:.6}", rng.gen_range(-2.0..2.0)));
            }
            text.push('\n');
        }
        let f = write_temp(&text);
        let (table, stats) = EmbeddingTable::load(f.path(), 25).unwrap();
        assert_eq!(stats.loaded, 1000);
        for t in table.tokens() {
            let v = table.lookup(t).unwrap();
            assert!((l2_norm(v) - 1.0).abs() < 1e-6, "norm drift for {t}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[0.6, 0.8], &[0.6, 0.8]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine(&[0.6, 0.8], &[0.8, 0.6]), 0.96, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "length mismatch")]
    fn cosine_length_mismatch_panics() {
        cosine(&[1.0], &[1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_clamped(
            a in proptest::collection::vec(-1.0f64..1.0, 8),
            b in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let na = l2_norm(&a);
            let nb = l2_norm(&b);
            prop_assume!(na > 1e-9 && nb > 1e-9);
            let a: Vec<f64> = a.iter().map(|x| x / na).collect();
            let b: Vec<f64> = b.iter().map(|x| x / nb).collect();
            // Same floating-point expression order in both directions would not
            // be guaranteed in general; equality holds because both sides sum
            // products of the same pairs in the same index order.
            prop_assert_eq!(cosine(&a, &b), cosine(&b, &a));
            let c = cosine(&a, &b);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
