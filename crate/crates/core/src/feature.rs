//! Feature fields, hashed per-field embedding tables, and the input layer
//! that turns one example's raw IDs into the matrix used as Q, K and V.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeattError, Result};
use crate::matrix::Matrix;

/// 64-bit FNV-1a over the seed bytes followed by the payload, passed through
/// an avalanche finalizer, reduced mod `buckets`. Bit-exact across platforms.
///
/// The seed is mixed through the hash state and the finalizer spreads every
/// state bit into the low bits. Both are needed for the p^k joint-collision
/// law: XORing the seed into the result (or skipping the finalizer) leaves
/// the low-bit lane of FNV shared across seeds, so with power-of-two bucket
/// counts "independent" tables would collide in lockstep.
pub fn hash_to_bucket(seed: u64, payload: &[u8], buckets: u64) -> Result<u64> {
    if buckets == 0 {
        return Err(DeattError::InvalidArgument(
            "hash_to_bucket: buckets must be >= 1".into(),
        ));
    }
    const PRIME: u64 = 0x100000001b3;
    let mut h = fnv1a64(&seed.to_le_bytes());
    for &b in payload {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    // 64-bit finalizer (Murmur3 fmix64 constants)
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^= h >> 33;
    Ok(h % buckets)
}

pub fn fnv1a64(payload: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &b in payload {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Byte encoding of a raw feature ID: 2-byte little-endian field index
/// followed by the 8-byte little-endian ID, so identical raw IDs in different
/// fields hash independently.
pub fn encode_field_id(field_index: u16, raw_id: u64) -> [u8; 10] {
    let mut out = [0u8; 10];
    out[..2].copy_from_slice(&field_index.to_le_bytes());
    out[2..].copy_from_slice(&raw_id.to_le_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub field_index: u16,
    pub name: String,
    pub bucket_count: u64,
    #[serde(default)]
    pub vocab_hint: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// One raw 64-bit ID per field, in field order.
    pub feature_ids: Vec<u64>,
    pub label: u8,
    pub session_id: u64,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub field: FieldSchema,
    pub weights: Matrix,
    pub hash_seed: u64,
}

impl EmbeddingTable {
    /// Fresh table with normal(0, 0.01) rows.
    pub fn init(field: FieldSchema, dim: usize, hash_seed: u64, rng: &mut impl Rng) -> Self {
        let weights = random_normal(field.bucket_count as usize, dim, 0.01, rng);
        EmbeddingTable {
            field,
            weights,
            hash_seed,
        }
    }

    pub fn bucket_for(&self, raw_id: u64) -> u64 {
        let payload = encode_field_id(self.field.field_index, raw_id);
        // buckets >= 1 is a schema invariant
        hash_to_bucket(self.hash_seed, &payload, self.field.bucket_count).unwrap()
    }
}

pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        // Box-Muller keeps us off distribution-crate version churn and is
        // reproducible from the raw RNG stream
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    m
}

/// Eq-1 input layer: row i is the hashed embedding of field i's raw ID.
/// The returned matrix serves as Q, K and V simultaneously.
pub fn build_input(ex: &Example, tables: &[EmbeddingTable]) -> Result<Matrix> {
    if ex.feature_ids.len() != tables.len() {
        return Err(DeattError::Shape(format!(
            "example has {} ids for {} tables",
            ex.feature_ids.len(),
            tables.len()
        )));
    }
    let d = tables.first().map(|t| t.weights.cols()).unwrap_or(0);
    let mut rows = Vec::with_capacity(tables.len());
    for (table, &id) in tables.iter().zip(&ex.feature_ids) {
        let bucket = table.bucket_for(id) as usize;
        rows.push(table.weights.row(bucket).to_vec());
    }
    let _ = d;
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_is_deterministic() {
        let a = hash_to_bucket(7, b"payload", 100).unwrap();
        let b = hash_to_bucket(7, b"payload", 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_bucket_always_zero() {
        for i in 0..50u64 {
            assert_eq!(hash_to_bucket(i, &i.to_le_bytes(), 1).unwrap(), 0);
        }
    }

    #[test]
    fn zero_buckets_rejected() {
        assert!(hash_to_bucket(0, b"x", 0).is_err());
    }

    #[test]
    fn hash_uniformity_chi_square() {
        // 1e5 random payloads into 64 buckets; chi-square must stay below the
        // 99.9% critical value for 63 degrees of freedom (~103.4)
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let buckets = 64u64;
        let trials = 100_000;
        let mut counts = vec![0u64; buckets as usize];
        for _ in 0..trials {
            let payload: [u8; 12] = rng.gen();
            counts[hash_to_bucket(0x9e3779b97f4a7c15, &payload, buckets).unwrap() as usize] += 1;
        }
        let expected = trials as f64 / buckets as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 104.0, "chi-square {chi2} too large");
    }

    fn toy_tables(n: usize, d: usize, buckets: u64) -> Vec<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                EmbeddingTable::init(
                    FieldSchema {
                        field_index: i as u16,
                        name: format!("f{i}"),
                        bucket_count: buckets,
                        vocab_hint: None,
                    },
                    d,
                    1000 + i as u64,
                    &mut rng,
                )
            })
            .collect()
    }

    #[test]
    fn single_lookup_matches_table_row() {
        let mut tables = toy_tables(1, 2, 8);
        let bucket = tables[0].bucket_for(42) as usize;
        tables[0].weights.set(bucket, 0, 0.5);
        tables[0].weights.set(bucket, 1, -0.5);
        let ex = Example {
            feature_ids: vec![42],
            label: 1,
            session_id: 0,
        };
        let input = build_input(&ex, &tables).unwrap();
        assert_eq!(input.data(), &[0.5, -0.5]);
    }

    #[test]
    fn identical_ids_identical_matrices() {
        let tables = toy_tables(3, 4, 16);
        let ex = Example {
            feature_ids: vec![5, 7, 9],
            label: 0,
            session_id: 1,
        };
        let a = build_input(&ex, &tables).unwrap();
        let b = build_input(&ex, &tables).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_touches_only_looked_up_rows() {
        let tables = toy_tables(1, 3, 16);
        let bucket = tables[0].bucket_for(7) as usize;
        let mut tape = Tape::new();
        let w = tape.param(tables[0].weights.clone());
        let looked = tape.gather_rows(w, vec![bucket as u32]).unwrap();
        let sq = tape.hadamard(looked, looked).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(w).unwrap();
        for r in 0..16 {
            let nonzero = g.row(r).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, r == bucket, "row {r}");
        }
    }

    #[test]
    fn same_raw_id_different_fields_hash_independently() {
        let tables = toy_tables(2, 2, 1 << 20);
        assert_ne!(
            encode_field_id(0, 5),
            encode_field_id(1, 5),
        );
        // with a large bucket space the buckets should differ for most IDs
        let differing = (0..100u64)
            .filter(|&id| tables[0].bucket_for(id) != tables[1].bucket_for(id))
            .count();
        assert!(differing > 90);
    }
}
