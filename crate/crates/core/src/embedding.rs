//! Embeddings, pairwise similarity and boundary-pair detection.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Execution;
use crate::exemplar::{DemonstrationSet, Exemplar, ExemplarPool, Label};

/// Default similarity threshold for boundary pairs.
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("provider returned a zero vector")]
    ZeroVector,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("exemplar {0} has no embedding")]
    Missing(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Source of text embeddings. Implementations need not normalize; callers go
/// through [`embed_text`], which does.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        (**self).embed(text)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        (**self).embed(text)
    }
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>, EmbedError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn embed_text<P: EmbeddingProvider + ?Sized>(provider: &P, text: &str) -> Result<Vec<f64>, EmbedError> {
    l2_normalize(provider.embed(text)?)
}

/// Text an exemplar is embedded from: response, newline, rationale.
pub fn exemplar_text(ex: &Exemplar) -> String {
    format!("{}\n{}", ex.response, ex.rationale)
}

/// Embeds `ex` unless it already carries an embedding.
pub fn embed_exemplar<'e, P: EmbeddingProvider + ?Sized>(
    ex: &'e mut Exemplar,
    provider: &P,
) -> Result<&'e [f64], EmbedError> {
    if ex.embedding.is_none() {
        ex.embedding = Some(embed_text(provider, &exemplar_text(ex))?);
    }
    Ok(ex.embedding.as_deref().expect("just set"))
}

/// Fills missing embeddings across the pool and checks that all of them share
/// one dimensionality.
pub fn embed_pool<P: EmbeddingProvider + ?Sized>(
    pool: &mut ExemplarPool,
    provider: &P,
    exec: Execution,
) -> Result<(), EmbedError> {
    let todo: Vec<(usize, String)> = pool
        .members()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.embedding.is_none())
        .map(|(i, e)| (i, exemplar_text(e)))
        .collect();
    let vectors = exec.map(&todo, |(_, text)| embed_text(provider, text));
    for ((i, _), v) in todo.into_iter().zip(vectors) {
        pool.members_mut()[i].embedding = Some(v?);
    }
    let mut dim = None;
    for e in pool.members() {
        let d = e.embedding.as_ref().map(Vec::len).unwrap_or(0);
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => return Err(EmbedError::DimensionMismatch(prev, d)),
            _ => {}
        }
    }
    Ok(())
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise cosine similarities over one pool snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pool_round: u32,
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    /// Computes the upper triangle and mirrors it, so `get(i, j) == get(j, i)`
    /// holds exactly. The diagonal is exactly 1.
    pub fn from_embeddings(vectors: &[&[f64]], pool_round: u32, exec: Execution) -> Result<Self, EmbedError> {
        let n = vectors.len();
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
                return Err(EmbedError::DimensionMismatch(first.len(), bad.len()));
            }
        }
        let rows: Vec<Vec<f64>> = exec.map_range(n, |i| {
            (i + 1..n)
                .map(|j| cosine(vectors[i], vectors[j]).expect("dimensions checked"))
                .collect()
        });
        let mut entries = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            entries[i * n + i] = 1.0;
            for (off, s) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                entries[i * n + j] = s;
                entries[j * n + i] = s;
            }
        }
        Ok(Self { pool_round, n, entries })
    }

    pub fn from_pool(pool: &ExemplarPool, exec: Execution) -> Result<Self, EmbedError> {
        let vectors = pool
            .members()
            .iter()
            .map(|e| e.embedding.as_deref().ok_or_else(|| EmbedError::Missing(e.id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_embeddings(&vectors, pool.round(), exec)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn pool_round(&self) -> u32 {
        self.pool_round
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Little-endian: round (u32), n (u64), then n*n f64 entries.
    pub fn write_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.entries.len());
        buf.extend_from_slice(&self.pool_round.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        for x in &self.entries {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)
    }

    pub fn read_binary(path: &Path) -> std::io::Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated similarity matrix");
        if buf.len() < 12 {
            return Err(bad());
        }
        let pool_round = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        let n = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        if buf.len() != 12 + 8 * n * n {
            return Err(bad());
        }
        let entries = buf[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { pool_round, n, entries })
    }
}

/// Similar enough (`sim >= tau`) and differently labeled.
pub fn is_boundary_pair(i: usize, j: usize, sims: &SimilarityMatrix, labels: &[Label], tau: f64) -> bool {
    sims.get(i, j) >= tau && labels[i] != labels[j]
}

/// Fraction of unordered member pairs that are boundary pairs; 0 below two
/// members.
pub fn contrastive_score(members: &[usize], sims: &SimilarityMatrix, labels: &[Label], tau: f64) -> f64 {
    let k = members.len();
    if k < 2 {
        return 0.0;
    }
    let mut hits = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            if is_boundary_pair(i, j, sims, labels, tau) {
                hits += 1;
            }
        }
    }
    hits as f64 / (k * (k - 1) / 2) as f64
}

/// Pool members outside `best` that are at least `tau`-similar to member `i`
/// and exactly one score level away. Ordered by similarity descending, then
/// index ascending.
pub fn boundary_candidates(
    i: usize,
    best: &DemonstrationSet,
    labels: &[Label],
    sims: &SimilarityMatrix,
    tau: f64,
) -> Vec<usize> {
    let mut out: Vec<usize> = (0..labels.len())
        .filter(|&j| j != i && !best.contains(j))
        .filter(|&j| sims.get(i, j) >= tau && labels[i].distance(labels[j]) == 1)
        .collect();
    out.sort_by(|&a, &b| sims.get(i, b).total_cmp(&sims.get(i, a)).then(a.cmp(&b)));
    out
}

#[derive(Serialize, Deserialize)]
struct CachedVector {
    provider: String,
    vector: Vec<f64>,
}

/// Content-addressed embedding cache in front of another provider, keyed by
/// `(provider id, sha256(text))`.
pub struct CachedEmbedder<P> {
    inner: P,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Vec<f64>>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P, dir: Option<PathBuf>) -> Result<Self, EmbedError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self { inner, dir, memory: Mutex::new(HashMap::new()) })
    }

    fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.inner.id().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let key = self.key(text);
        if let Some(v) = self.memory.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(p) = &path {
            if let Ok(bytes) = fs::read(p) {
                if let Ok(rec) = serde_json::from_slice::<CachedVector>(&bytes) {
                    self.memory.lock().unwrap().insert(key, rec.vector.clone());
                    return Ok(rec.vector);
                }
            }
        }
        let v = self.inner.embed(text)?;
        if let Some(p) = &path {
            let rec = CachedVector { provider: self.inner.id().to_owned(), vector: v.clone() };
            fs::write(p, serde_json::to_vec(&rec).expect("vector serializes"))?;
        }
        self.memory.lock().unwrap().insert(key, v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::HashEmbedder;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn matrix(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::from_embeddings(rows, 0, Execution::Sequential).unwrap()
    }

    /// Similarity matrix with every off-diagonal entry set to `s`.
    fn constant(n: usize, s: f64) -> SimilarityMatrix {
        let mut entries = vec![s; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        SimilarityMatrix { pool_round: 0, n, entries }
    }

    #[test]
    fn cosine_examples() {
        let v = l2_normalize(vec![1.0, 2.0, 3.0]).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.6, 0.8], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(EmbedError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn exemplar_embedding_is_unit_and_cached() {
        let p = HashEmbedder::new(32);
        let mut e = Exemplar::generated("a", "the cat sat", Label(1), "it sat", 0);
        let v1 = embed_exemplar(&mut e, &p).unwrap().to_vec();
        let norm: f64 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let mut e2 = e.clone();
        e2.embedding = None;
        assert_eq!(embed_exemplar(&mut e2, &p).unwrap(), &v1[..]);
    }

    #[test]
    fn similar_strings_are_not_identical() {
        let p = HashEmbedder::new(32);
        let a = embed_text(&p, "abc").unwrap();
        let b = embed_text(&p, "abd").unwrap();
        assert!(cosine(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn similarity_matrix_is_exactly_symmetric() {
        let p = HashEmbedder::new(16);
        let vs: Vec<Vec<f64>> =
            ["a b", "b c", "c d e", "a"].iter().map(|t| embed_text(&p, t).unwrap()).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let m = SimilarityMatrix::from_embeddings(&refs, 3, Execution::Parallel).unwrap();
        for i in 0..4 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert_eq!(m, SimilarityMatrix::from_embeddings(&refs, 3, Execution::Sequential).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        m.write_binary(&path).unwrap();
        assert_eq!(SimilarityMatrix::read_binary(&path).unwrap(), m);
    }

    #[test]
    fn boundary_pair_examples() {
        let labels = [Label(1), Label(2)];
        assert!(is_boundary_pair(0, 1, &constant(2, 0.71), &labels, 0.7));
        assert!(!is_boundary_pair(0, 1, &constant(2, 0.99), &[Label(1), Label(1)], 0.7));
        assert!(!is_boundary_pair(0, 1, &constant(2, 0.69), &[Label(0), Label(2)], 0.7));
    }

    #[test]
    fn contrastive_score_examples() {
        let sims = constant(4, 0.9);
        let labels = [Label(0), Label(1), Label(0), Label(1)];
        // pairs: (0,1) (0,2) (0,3) (1,2) (1,3) (2,3); cross-label: 01 03 12 23
        assert!((contrastive_score(&[0, 1, 2, 3], &sims, &labels, 0.7) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(contrastive_score(&[0, 2], &sims, &labels, 0.7), 0.0);
        assert_eq!(contrastive_score(&[1], &sims, &labels, 0.7), 0.0);
        assert_eq!(contrastive_score(&[0, 1], &sims, &labels, 0.7), 1.0);
    }

    #[test]
    fn boundary_candidates_require_adjacent_labels() {
        // 0: label 0, 1: label 2 (sim .95), 2: label 1 (sim .8), 3: label 1 (sim .9), 4: label 1 (sim .6)
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0],
            vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()],
            vec![0.8, 0.6],
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.6, 0.8],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let sims = matrix(&refs);
        let labels = [Label(0), Label(2), Label(1), Label(1), Label(1)];
        let best = DemonstrationSet::new(vec![0], 0);
        assert_eq!(boundary_candidates(0, &best, &labels, &sims, 0.7), vec![3, 2]);
        let best = DemonstrationSet::new(vec![0, 3], 0);
        assert_eq!(boundary_candidates(0, &best, &labels, &sims, 0.7), vec![2]);
        assert!(boundary_candidates(0, &best, &labels, &sims, 0.99).is_empty());
    }

    #[test]
    fn binary_labels_make_every_cross_pair_adjacent() {
        let sims = constant(4, 0.8);
        let labels = [Label(0), Label(1), Label(1), Label(0)];
        let best = DemonstrationSet::new(vec![0], 0);
        assert_eq!(boundary_candidates(0, &best, &labels, &sims, 0.7), vec![1, 2]);
    }

    struct Counting(AtomicUsize);
    impl EmbeddingProvider for Counting {
        fn id(&self) -> &str {
            "counting"
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(vec![text.len() as f64 + 0.1, 1.0 / 3.0])
        }
    }

    #[test]
    fn cache_serves_repeat_requests_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = CachedEmbedder::new(Counting(AtomicUsize::new(0)), Some(dir.path().into())).unwrap();
        let a = c.embed("hello").unwrap();
        assert_eq!(c.embed("hello").unwrap(), a);
        assert_eq!(c.inner.0.load(Ordering::SeqCst), 1);
        let fresh = CachedEmbedder::new(Counting(AtomicUsize::new(0)), Some(dir.path().into())).unwrap();
        assert_eq!(fresh.embed("hello").unwrap(), a);
        assert_eq!(fresh.inner.0.load(Ordering::SeqCst), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn contrastive_score_is_a_fraction(
                labels in prop::collection::vec(0u32..3, 2..10),
                s in 0.0f64..1.0,
            ) {
                let n = labels.len();
                let labels: Vec<Label> = labels.into_iter().map(Label).collect();
                let sims = constant(n, s);
                let members: Vec<usize> = (0..n).collect();
                let c = contrastive_score(&members, &sims, &labels, 0.7);
                prop_assert!((0.0..=1.0).contains(&c));
                let all_boundary = s >= 0.7 && (0..n).all(|i| (i + 1..n).all(|j| labels[i] != labels[j]));
                prop_assert_eq!(c == 1.0, all_boundary);
            }

            #[test]
            fn positive_scaling_leaves_similarity_unchanged(
                raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3),
                scale in 0.01f64..100.0,
            ) {
                prop_assume!(raw.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3));
                let a: Vec<Vec<f64>> = raw.iter().map(|v| l2_normalize(v.clone()).unwrap()).collect();
                let b: Vec<Vec<f64>> = raw
                    .iter()
                    .map(|v| l2_normalize(v.iter().map(|x| x * scale).collect()).unwrap())
                    .collect();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((cosine(&a[i], &a[j]).unwrap() - cosine(&b[i], &b[j]).unwrap()).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
