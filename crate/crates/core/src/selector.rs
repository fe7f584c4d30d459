//! Contrast-image selection: least-similar retrieval over precomputed
//! embeddings, or a uniform draw from the other images.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::logits::{cosine_similarity, LogitsError};

pub const EMB_MAGIC: &str = "CICD-EMB";
pub const EMB_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("embedding store is empty")]
    Empty,
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("vector for {id:?} has dimension {found}, expected {expected}")]
    DimensionError { id: String, expected: usize, found: usize },
    #[error("zero-norm vector for {0:?}")]
    ZeroNormError(String),
    #[error("selection needs at least 2 images, store has {0}")]
    InsufficientPool(usize),
    #[error("unknown image id {0:?}")]
    NotFound(String),
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Retrieved,
    Random,
    /// Named by the caller.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    pub mode: SelectionMode,
}

/// Immutable id to vector table, iterated in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
    index: HashMap<String, usize>,
}

pub fn build_store<I>(records: I) -> Result<EmbeddingStore, SelectorError>
where
    I: IntoIterator<Item = (String, Vec<f64>)>,
{
    let mut ids = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut index = HashMap::new();
    for (id, v) in records {
        if let Some(first) = vectors.first() {
            if v.len() != first.len() {
                return Err(SelectorError::DimensionError { id, expected: first.len(), found: v.len() });
            }
        } else if v.is_empty() {
            return Err(SelectorError::DimensionError { id, expected: 1, found: 0 });
        }
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(SelectorError::DuplicateId(id));
        }
        ids.push(id);
        vectors.push(v);
    }
    let dim = vectors.first().map(Vec::len).ok_or(SelectorError::Empty)?;
    Ok(EmbeddingStore { ids, vectors, dim, index })
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, SelectorError> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(SelectorError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let header = header?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || SelectorError::Format {
            line: 1,
            message: format!("expected `{EMB_MAGIC} {EMB_VERSION} <dim> <count>`, got {header:?}"),
        };
        if fields.len() != 4 || fields[0] != EMB_MAGIC || fields[1] != EMB_VERSION {
            return Err(bad_header());
        }
        let dim: usize = fields[2].parse().map_err(|_| bad_header())?;
        let count: usize = fields[3].parse().map_err(|_| bad_header())?;

        let mut records = Vec::with_capacity(count);
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 1;
            let mut parts = line.split_whitespace();
            let id = parts.next().expect("non-empty line").to_owned();
            let v = parts
                .map(|t| match t.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(SelectorError::Format { line: lineno, message: format!("bad value {t:?}") }),
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if v.len() != dim {
                return Err(SelectorError::Format {
                    line: lineno,
                    message: format!("{} values for dimension {dim}", v.len()),
                });
            }
            records.push((id, v));
        }
        if records.len() != count {
            return Err(SelectorError::Format {
                line: 1,
                message: format!("header declares {count} records, found {}", records.len()),
            });
        }
        build_store(records)
    }

    pub fn load(path: &Path) -> Result<Self, SelectorError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), SelectorError> {
        writeln!(w, "{EMB_MAGIC} {EMB_VERSION} {} {}", self.dim, self.len())?;
        let mut line = String::new();
        for (id, v) in self.iter() {
            line.clear();
            line.push_str(id);
            for x in v {
                // Debug formatting is the shortest exact representation.
                let _ = write!(line, " {x:?}");
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SelectorError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// The stored image least similar to the query, excluding the query itself.
/// Ties go to the lexicographically smallest id.
pub fn select_retrieved(
    store: &EmbeddingStore,
    query_id: &str,
    query_vec: &[f64],
    execution: Execution,
) -> Result<SelectionResult, SelectorError> {
    if store.len() < 2 {
        return Err(SelectorError::InsufficientPool(store.len()));
    }
    if query_vec.len() != store.dim {
        return Err(SelectorError::DimensionError {
            id: query_id.to_owned(),
            expected: store.dim,
            found: query_vec.len(),
        });
    }
    if query_vec.iter().all(|&x| x == 0.0) {
        return Err(SelectorError::ZeroNormError(query_id.to_owned()));
    }
    let candidates: Vec<usize> = (0..store.len()).filter(|&i| store.ids[i] != query_id).collect();
    let scored = exec::try_map(execution, &candidates, |&i| {
        cosine_similarity(query_vec, &store.vectors[i])
            .map(|s| (i, s))
            .map_err(|e| match e {
                LogitsError::ZeroNormError => SelectorError::ZeroNormError(store.ids[i].clone()),
                other => SelectorError::Format { line: 0, message: other.to_string() },
            })
    })?;
    let (best, similarity) = *exec::min_by(execution, &scored, |&(_, s)| s, |a, b| {
        store.ids[a.0].cmp(&store.ids[b.0])
    })
    .expect("at least one candidate");
    Ok(SelectionResult {
        chosen_id: store.ids[best].clone(),
        similarity: Some(similarity),
        mode: SelectionMode::Retrieved,
    })
}

/// Uniform over the store's ids other than `query_id`.
pub fn select_random<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    query_id: &str,
    rng: &mut R,
) -> Result<SelectionResult, SelectorError> {
    select_random_id(&store.ids, query_id, rng)
}

/// Uniform over `ids` other than `query_id`. Consumes one draw.
pub fn select_random_id<R: Rng + ?Sized>(
    ids: &[String],
    query_id: &str,
    rng: &mut R,
) -> Result<SelectionResult, SelectorError> {
    let others: Vec<&String> = ids.iter().filter(|id| *id != query_id).collect();
    if ids.len() < 2 || others.is_empty() {
        return Err(SelectorError::InsufficientPool(ids.len()));
    }
    let chosen = others[rng.random_range(0..others.len())].clone();
    Ok(SelectionResult { chosen_id: chosen, similarity: None, mode: SelectionMode::Random })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(items: &[(&str, &[f64])]) -> EmbeddingStore {
        build_store(items.iter().map(|(id, v)| (id.to_string(), v.to_vec()))).unwrap()
    }

    #[test]
    fn build_cases() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 1.0])]);
        assert_eq!(s.len(), 3);
        assert!(matches!(
            build_store(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]),
            Err(SelectorError::DuplicateId(_))
        ));
        assert!(matches!(build_store(Vec::new()), Err(SelectorError::Empty)));
        assert!(matches!(
            build_store(vec![("a".into(), vec![1.0]), ("b".into(), vec![2.0, 1.0])]),
            Err(SelectorError::DimensionError { .. })
        ));
    }

    #[test]
    fn antipodal_is_chosen() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[-1.0, 0.0])]);
        let r = select_retrieved(&s, "a", &[1.0, 0.0], Execution::Sequential).unwrap();
        assert_eq!(r.chosen_id, "c");
        assert_eq!(r.similarity, Some(-1.0));
    }

    #[test]
    fn forced_choice() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[1.0, 0.0])]);
        assert_eq!(select_retrieved(&s, "a", &[1.0, 0.0], Execution::Parallel).unwrap().chosen_id, "b");
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let s = store(&[("q", &[1.0, 0.0]), ("z", &[0.0, 1.0]), ("m", &[0.0, -1.0])]);
        for ex in [Execution::Sequential, Execution::Parallel] {
            assert_eq!(select_retrieved(&s, "q", &[1.0, 0.0], ex).unwrap().chosen_id, "m");
        }
    }

    #[test]
    fn zero_norms() {
        let s = store(&[("a", &[1.0, 0.0]), ("b", &[0.0, 0.0])]);
        assert!(matches!(
            select_retrieved(&s, "x", &[0.0, 0.0], Execution::Sequential),
            Err(SelectorError::ZeroNormError(_))
        ));
        assert!(matches!(
            select_retrieved(&s, "a", &[1.0, 0.0], Execution::Sequential),
            Err(SelectorError::ZeroNormError(id)) if id == "b"
        ));
    }

    #[test]
    fn random_forced_and_deterministic() {
        let s = store(&[("a", &[1.0]), ("b", &[2.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(select_random(&s, "a", &mut rng).unwrap().chosen_id, "b");
        }
        let ids: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_random_id(&ids, "i0", &mut rng).unwrap().chosen_id
        };
        assert_eq!(draw(5), draw(5));
        let single = store(&[("a", &[1.0])]);
        assert!(matches!(select_random(&single, "a", &mut rng), Err(SelectorError::InsufficientPool(1))));
    }

    #[test]
    fn file_round_trip() {
        let s = store(&[("a", &[0.1, -2.5e-7]), ("b", &[1.0 / 3.0, 4.0])]);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"CICD-EMB v1 2 2\n"));
        assert_eq!(EmbeddingStore::read(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn file_validation() {
        let bad_count = "CICD-EMB v1 2 3\na 1 2\nb 3 4\n";
        assert!(matches!(EmbeddingStore::read(bad_count.as_bytes()), Err(SelectorError::Format { .. })));
        let bad_dim = "CICD-EMB v1 2 2\na 1 2\nb 3\n";
        assert!(matches!(
            EmbeddingStore::read(bad_dim.as_bytes()),
            Err(SelectorError::Format { line: 3, .. })
        ));
        let bad_header = "CICD-EMB v2 2 1\na 1 2\n";
        assert!(EmbeddingStore::read(bad_header.as_bytes()).is_err());
    }
}
