//! Passage vectors encoded offline and searched exactly by dot product.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TGDX" | version u32 | d_model u32 | count u32 | model sha-256 (32 bytes)
//!        | (id_len u32 | id)* | count × d_model f32, row-major
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{put_str, put_u32, ByteReader};
use crate::data::compare_ids;
use crate::encoder::{fingerprint, EncoderModel, Role};

pub const MAGIC: &[u8; 4] = b"TGDX";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("dimension mismatch: index has {index}, query has {query}")]
    DimensionMismatch { index: usize, query: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("bad index file: {0}")]
    BadIndex(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    d_model: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    model_fingerprint: [u8; 32],
}

/// Run `f` on a pool of `workers` threads (1 means the calling thread).
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, DenseError> {
    if workers <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DenseError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Encode `texts` with the tower for `role`. Texts that fail to encode are
/// returned as `None` and logged.
pub fn encode_texts(
    model: &EncoderModel<f32>,
    texts: &[(String, String)],
    role: Role,
    workers: usize,
) -> Result<Vec<Option<Vec<f32>>>, DenseError> {
    let one = |(id, text): &(String, String)| match model.encode(text, role) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("skipping {id}: {e}");
            None
        }
    };
    if workers <= 1 {
        Ok(texts.iter().map(one).collect())
    } else {
        with_workers(workers, || texts.par_iter().map(one).collect())
    }
}

/// Order used for ranked results: higher score first, then smaller id.
fn rank_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| compare_ids(a.1, b.1))
}

struct HeapEntry<'a> {
    score: f32,
    id: &'a str,
    row: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry<'_> {}

impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry<'_> {
    // the max-heap top is the worst-ranked entry kept so far
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.score, self.id), (other.score, other.id))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DenseIndex {
    pub fn from_parts(
        d_model: usize,
        ids: Vec<String>,
        matrix: Vec<f32>,
        model_fingerprint: [u8; 32],
    ) -> Result<Self, DenseError> {
        if matrix.len() != ids.len() * d_model {
            return Err(DenseError::BadIndex(format!(
                "{} values for {} rows of width {d_model}",
                matrix.len(),
                ids.len()
            )));
        }
        Ok(Self {
            d_model,
            ids,
            matrix,
            model_fingerprint,
        })
    }

    /// Encode every passage in order; passages that fail are skipped.
    pub fn encode_collection(
        model: &EncoderModel<f32>,
        collection: &[(String, String)],
        workers: usize,
    ) -> Result<Self, DenseError> {
        let d = model.config().d_model;
        let vectors = encode_texts(model, collection, Role::Passage, workers)?;
        let mut ids = Vec::with_capacity(collection.len());
        let mut matrix = Vec::with_capacity(collection.len() * d);
        for ((id, _), v) in collection.iter().zip(vectors) {
            if let Some(v) = v {
                ids.push(id.clone());
                matrix.extend_from_slice(&v);
            }
        }
        Self::from_parts(d, ids, matrix, fingerprint(model))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn model_fingerprint(&self) -> &[u8; 32] {
        &self.model_fingerprint
    }

    /// Warn when `model` is not the model the index was built with.
    pub fn check_model(&self, model: &EncoderModel<f32>) -> bool {
        let ok = fingerprint(model) == self.model_fingerprint;
        if !ok {
            log::warn!("dense index was built with a different model");
        }
        ok
    }

    /// Exact top `k` by dot product, ties by ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(String, f32)>, DenseError> {
        if query.len() != self.d_model {
            return Err(DenseError::DimensionMismatch {
                index: self.d_model,
                query: query.len(),
            });
        }
        if k == 0 {
            return Err(DenseError::ZeroK);
        }
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        for (row, id) in self.ids.iter().enumerate() {
            let e = HeapEntry {
                score: dot(query, self.row(row)),
                id,
                row,
            };
            if heap.len() < k {
                heap.push(e);
            } else if let Some(worst) = heap.peek() {
                if e < *worst {
                    heap.pop();
                    heap.push(e);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|e| (self.ids[e.row].clone(), e.score))
            .collect())
    }

    /// Search several query vectors in parallel, preserving input order.
    pub fn search_many(&self, queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<(String, f32)>>, DenseError> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DenseError> {
        let mut buf = Vec::with_capacity(48 + self.matrix.len() * 4);
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.d_model as u32, self.ids.len() as u32] {
            put_u32(&mut buf, v);
        }
        buf.extend_from_slice(&self.model_fingerprint);
        for id in &self.ids {
            put_str(&mut buf, id);
        }
        for x in &self.matrix {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, DenseError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteReader::new(&bytes);
        Self::parse(&mut cur).map_err(DenseError::BadIndex)?
    }

    fn parse(cur: &mut ByteReader) -> Result<Result<Self, DenseError>, String> {
        if cur.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let d_model = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        let mut fp = [0u8; 32];
        fp.copy_from_slice(cur.take(32)?);
        let ids = (0..count).map(|_| cur.string()).collect::<Result<Vec<_>, _>>()?;
        let matrix = cur.f32s(count.checked_mul(d_model).ok_or("size overflow")?)?;
        cur.finish()?;
        Ok(Self::from_parts(d_model, ids, matrix, fp))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DenseError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DenseError> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Cosine similarity of two vectors, computed in `f64`.
pub fn encoding_similarity(a: &[f32], b: &[f32]) -> Result<f64, DenseError> {
    if a.len() != b.len() {
        return Err(DenseError::DimensionMismatch {
            index: a.len(),
            query: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(DenseError::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, FrontEnd};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::RngExt;

    fn basis_index() -> DenseIndex {
        let ids = (1..=4).map(|i| i.to_string()).collect();
        let mut m = vec![0.0f32; 16];
        for i in 0..4 {
            m[i * 4 + i] = 1.0;
        }
        DenseIndex::from_parts(4, ids, m, [0; 32]).unwrap()
    }

    #[test]
    fn basis_search() {
        let idx = basis_index();
        assert_eq!(idx.search(&[0.0, 1.0, 0.0, 0.0], 1).unwrap(), vec![("2".to_string(), 1.0)]);
        let all = idx.search(&[0.0, 1.0, 0.0, 0.0], 4).unwrap();
        let ids: Vec<&str> = all.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(ids, ["2", "1", "3", "4"]);
        assert!(matches!(idx.search(&[1.0], 1), Err(DenseError::DimensionMismatch { .. })));
        assert!(matches!(idx.search(&[0.0; 4], 0), Err(DenseError::ZeroK)));
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(encoding_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(encoding_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            encoding_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(matches!(encoding_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(DenseError::ZeroVector)));
    }

    fn random_index(n: usize, d: usize, seed: u64) -> DenseIndex {
        let mut rng = crate::rng::rng_from_seed(seed);
        let m: Vec<f32> = (0..n * d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        // a few exact duplicates to exercise the tie-break
        let mut m2 = m.clone();
        m2[d..2 * d].copy_from_slice(&m[..d]);
        DenseIndex::from_parts(d, (0..n).map(|i| format!("{}", n - i)).collect(), m2, [1; 32]).unwrap()
    }

    #[test]
    fn heap_search_matches_naive_sort() {
        let idx = random_index(1000, 16, 3);
        let mut rng = crate::rng::rng_from_seed(4);
        for _ in 0..20 {
            let q: Vec<f32> = (0..16).map(|_| rng.random::<f32>() - 0.5).collect();
            let mut naive: Vec<(String, f32)> = (0..idx.len())
                .map(|i| {
                    let mut s = 0.0f32;
                    for j in 0..16 {
                        s += q[j] * idx.row(i)[j];
                    }
                    (idx.ids()[i].clone(), s)
                })
                .collect();
            naive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.parse::<u64>().unwrap().cmp(&b.0.parse().unwrap())));
            naive.truncate(50);
            assert_eq!(idx.search(&q, 50).unwrap(), naive);
        }
        let batch = idx.search_many(&[vec![0.1; 16], vec![-0.2; 16]], 5).unwrap();
        assert_eq!(batch[1], idx.search(&[-0.2; 16], 5).unwrap());
    }

    proptest! {
        #[test]
        fn prefix_and_scale_invariance(seed in 0u64..1000, k in 1usize..40, c in 0.01f32..100.0) {
            let idx = random_index(60, 8, seed);
            let q: Vec<f32> = idx.row(5).iter().map(|x| x * 0.7 + 0.1).collect();
            let a = idx.search(&q, k).unwrap();
            let b = idx.search(&q, k + 1).unwrap();
            prop_assert_eq!(&a[..], &b[..k]);
            // scaling by a power of two is exact in floating point
            let scale = 2f32.powi(c.log2().round() as i32);
            let qs: Vec<f32> = q.iter().map(|x| x * scale).collect();
            let ids = |r: &[(String, f32)]| r.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&idx.search(&qs, k).unwrap()), ids(&a));
        }
    }

    #[test]
    fn encode_collection_is_pure() {
        let cfg = EncoderConfig {
            front_end: FrontEnd::CharCnn,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::<f32>::init(cfg, None, 1).unwrap();
        let coll: Vec<(String, String)> = ["the cat sat", "dense retrieval", "typos everywhere"]
            .iter()
            .enumerate()
            .map(|(i, t)| (i.to_string(), t.to_string()))
            .collect();
        let a = DenseIndex::encode_collection(&model, &coll, 1).unwrap();
        let b = DenseIndex::encode_collection(&model, &coll, 4).unwrap();
        assert_eq!((a.len(), a.d_model()), (3, 8));
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write(&mut x).unwrap();
        b.write(&mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(&x[..4], MAGIC);
        let back = DenseIndex::read(&x[..]).unwrap();
        let mut z = Vec::new();
        back.write(&mut z).unwrap();
        assert_eq!(x, z);
        assert!(back.check_model(&model));
        assert!(DenseIndex::read(&x[..x.len() - 1]).is_err());
    }
}
