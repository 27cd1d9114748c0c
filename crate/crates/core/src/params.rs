//! Flat parameter vectors and the algebra used for model exchange.
//!
//! A [`ParameterSet`] is a list of `f64` values together with the tensor
//! shapes they were flattened from. Aggregation, proximal penalties and SGD
//! updates all operate on this flat view.
//!
//! # Checkpoint format
//!
//! Binary, little-endian:
//!
//! ```text
//! magic      4 bytes   b"FSPS"
//! version    u32       1
//! n_tensors  u32
//! repeat n_tensors:
//!   rank     u32
//!   dims     u64 * rank
//! n_values   u64       must equal sum of dim products
//! values     f64 * n_values
//! ```
//!
//! Each checkpoint has a sidecar `<file>.meta.toml` holding a
//! [`CheckpointMeta`] record (`round`, `rule`, `seed`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSPS";
const CHECKPOINT_VERSION: u32 = 1;

/// Tolerance on the sum of convex-combination weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    values: Vec<f64>,
    layout: Vec<Vec<usize>>,
}

fn layout_len(layout: &[Vec<usize>]) -> usize {
    layout
        .iter()
        .map(|shape| shape.iter().product::<usize>())
        .sum()
}

impl ParameterSet {
    pub fn new(layout: Vec<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        for shape in &layout {
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::InvalidParams(format!(
                    "shape {shape:?} must have positive dimensions"
                )));
            }
        }
        let expected = layout_len(&layout);
        if expected != values.len() {
            return Err(Error::InvalidParams(format!(
                "layout describes {expected} values but {} were given",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "value at index {i} is not finite"
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<Vec<usize>>) -> Result<Self> {
        let n = layout_len(&layout);
        Self::new(layout, vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Vec<usize>] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_compatible(&self, other: &ParameterSet) -> bool {
        self.layout == other.layout
    }

    /// Replaces the values while keeping the layout; rejects non-finite input.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout, other.layout
            )))
        }
    }

    /// SHA-256 over the layout and the little-endian value bytes.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.layout.len() as u64).to_le_bytes());
        for shape in &self.layout {
            hasher.update((shape.len() as u64).to_le_bytes());
            for &d in shape {
                hasher.update((d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Convex combination `sum_i weights[i] * sets[i]`.
///
/// Weights must each lie in `[0, 1]` and sum to one within
/// [`WEIGHT_SUM_TOLERANCE`]. A weight of exactly `1.0` returns that set
/// unchanged.
pub fn weighted_sum(sets: &[ParameterSet], weights: &[f64]) -> Result<ParameterSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidWeights("no parameter sets given".into()))?;
    if sets.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} sets but {} weights",
            sets.len(),
            weights.len()
        )));
    }
    for set in &sets[1..] {
        first.check_compatible(set)?;
    }
    if let Some(w) = weights
        .iter()
        .find(|w| !w.is_finite() || **w < 0.0 || **w > 1.0)
    {
        return Err(Error::InvalidWeights(format!("weight {w} outside [0, 1]")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {total}, expected 1"
        )));
    }

    if let Some(i) = weights.iter().position(|&w| w == 1.0) {
        return Ok(sets[i].clone());
    }

    let mut out = vec![0.0; first.len()];
    for (set, &w) in sets.iter().zip(weights) {
        for (acc, &v) in out.iter_mut().zip(&set.values) {
            *acc += w * v;
        }
    }
    first.with_values(out)
}

/// Squared Euclidean distance between two compatible sets.
pub fn l2_sq_distance(a: &ParameterSet, b: &ParameterSet) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// `a + alpha * b`, element-wise.
pub fn scale_add(a: &ParameterSet, alpha: f64, b: &ParameterSet) -> Result<ParameterSet> {
    a.check_compatible(b)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x + alpha * y)
        .collect();
    a.with_values(values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub round: u32,
    pub rule: String,
    pub seed: u64,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".meta.toml");
    PathBuf::from(name)
}

pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for shape in &params.layout {
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParameterSet> {
    let truncated = || Error::format(path, "truncated checkpoint");
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok_or_else(truncated)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let n_tensors = cur.u32().ok_or_else(truncated)? as usize;
    let mut layout = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let rank = cur.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(truncated)? as usize);
        }
        layout.push(shape);
    }
    let n_values = cur.u64().ok_or_else(truncated)? as usize;
    let raw = cur
        .take(n_values.checked_mul(8).ok_or_else(truncated)?)
        .ok_or_else(truncated)?;
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after values"));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParameterSet::new(layout, values).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes the binary checkpoint and its `.meta.toml` sidecar.
pub fn write_checkpoint(path: &Path, params: &ParameterSet, meta: &CheckpointMeta) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_checkpoint(params))
        .map_err(|e| Error::io(path, e))?;
    let meta_file = meta_path(path);
    fs::write(&meta_file, toml::to_string(meta)?).map_err(|e| Error::io(&meta_file, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParameterSet, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let params = decode_checkpoint(&bytes, path)?;
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    Ok((params, toml::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![vec![values.len()]], values.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_bad_layout() {
        assert!(ParameterSet::new(vec![vec![2]], vec![1.0, f64::NAN]).is_err());
        assert!(ParameterSet::new(vec![vec![2]], vec![1.0, f64::INFINITY]).is_err());
        assert!(ParameterSet::new(vec![vec![3]], vec![1.0, 2.0]).is_err());
        assert!(ParameterSet::new(vec![vec![0]], vec![]).is_err());
        let p = ParameterSet::new(vec![vec![2, 3], vec![3]], vec![0.0; 9]).unwrap();
        assert_eq!(p.len(), 9);
    }

    #[test]
    fn weighted_sum_examples() {
        let a = set(&[1.5, -2.0, 3.25]);
        assert_eq!(
            weighted_sum(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap(),
            a
        );

        let z = set(&[0.0, 0.0]);
        assert_eq!(weighted_sum(&[z.clone()], &[1.0]).unwrap(), z);

        let r = weighted_sum(&[set(&[1.0, 3.0]), set(&[5.0, 7.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(r.values(), &[4.0, 6.0]);
    }

    #[test]
    fn weighted_sum_errors() {
        let a = set(&[1.0, 2.0]);
        let b = ParameterSet::new(vec![vec![1, 2]], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            weighted_sum(&[a.clone(), b], &[0.5, 0.5]),
            Err(Error::LayoutMismatch(_))
        ));
        assert!(matches!(
            weighted_sum(&[a.clone(), a.clone()], &[0.5, 0.6]),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            weighted_sum(&[a.clone(), a.clone()], &[1.5, -0.5]),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            weighted_sum(&[a.clone()], &[0.5, 0.5]),
            Err(Error::InvalidWeights(_))
        ));
        assert!(weighted_sum(&[], &[]).is_err());
    }

    #[test]
    fn l2_and_scale_add_examples() {
        let a = set(&[0.3, -1.0]);
        assert_eq!(l2_sq_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            l2_sq_distance(&set(&[0.0, 0.0]), &set(&[3.0, 4.0])).unwrap(),
            25.0
        );
        assert!(l2_sq_distance(&set(&[1.0]), &set(&[1.0, 2.0])).is_err());

        assert_eq!(scale_add(&a, 0.0, &set(&[9.0, 9.0])).unwrap(), a);
        assert_eq!(
            scale_add(&set(&[1.0]), -1.0, &set(&[1.0]))
                .unwrap()
                .values(),
            &[0.0]
        );
        assert_eq!(
            scale_add(&set(&[2.0, 4.0]), 0.5, &set(&[2.0, 2.0]))
                .unwrap()
                .values(),
            &[3.0, 5.0]
        );
    }

    #[test]
    fn l2_matches_independent_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..200);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut oracle = 0.0;
            for k in 0..n {
                let d = a[k] - b[k];
                oracle += d * d;
            }
            let got = l2_sq_distance(&set(&a), &set(&b)).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_0003.ckpt");
        let p = ParameterSet::new(
            vec![vec![2, 1, 1, 1], vec![2]],
            vec![0.5, -0.25, 1e-300, -0.0],
        )
        .unwrap();
        let meta = CheckpointMeta {
            round: 3,
            rule: "fedavg".into(),
            seed: 42,
        };
        write_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = read_checkpoint(&path).unwrap();
        assert_eq!(q.digest(), p.digest());
        assert_eq!(m, meta);

        let bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], &path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, &path).is_err());
    }

    fn sets_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..6, 1usize..12).prop_flat_map(|(n_sets, len)| {
            (
                prop::collection::vec(prop::collection::vec(-100.0f64..100.0, len), n_sets),
                prop::collection::vec(0.0f64..1.0, n_sets),
            )
        })
    }

    proptest! {
        #[test]
        fn convex_combination_stays_in_hull((raw, w) in sets_strategy()) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 1e-3);
            let mut weights: Vec<f64> = w.iter().map(|x| x / total).collect();
            // absorb rounding into the last weight
            let head: f64 = weights[..weights.len() - 1].iter().sum();
            let last = weights.len() - 1;
            weights[last] = (1.0 - head).clamp(0.0, 1.0);
            let sets: Vec<ParameterSet> = raw.iter().map(|v| set(v)).collect();
            let out = weighted_sum(&sets, &weights).unwrap();
            for k in 0..out.len() {
                let lo = raw.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                let hi = raw.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-9 * (lo.abs().max(hi.abs()) + 1.0);
                prop_assert!(out.values()[k] >= lo - slack && out.values()[k] <= hi + slack);
            }
        }

        #[test]
        fn one_hot_is_bit_exact((raw, _w) in sets_strategy(), pick in 0usize..6) {
            let pick = pick % raw.len();
            let sets: Vec<ParameterSet> = raw.iter().map(|v| set(v)).collect();
            let mut weights = vec![0.0; sets.len()];
            weights[pick] = 1.0;
            let out = weighted_sum(&sets, &weights).unwrap();
            prop_assert_eq!(out.digest(), sets[pick].digest());
        }

        #[test]
        fn l2_symmetric_non_negative(
            a in prop::collection::vec(-1e3f64..1e3, 1..32),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
            let (sa, sb) = (set(&a), set(&b));
            let d1 = l2_sq_distance(&sa, &sb).unwrap();
            let d2 = l2_sq_distance(&sb, &sa).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, d2);
        }
    }
}
