//! Combo-ID construction, codebook addressing, and the gated siamese codebook
//! that turns a feature-interaction pair into one embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DeattError, Result};
use crate::feature::{hash_to_bucket, random_normal};
use crate::matrix::{sigmoid, Matrix};

/// Ordered pair of (field, raw ID); (i,j) and (j,i) are distinct combo IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComboId {
    pub field_i: u16,
    pub raw_id_i: u64,
    pub field_j: u16,
    pub raw_id_j: u64,
}

pub fn combo_id(field_i: u16, id_i: u64, field_j: u16, id_j: u64) -> ComboId {
    ComboId {
        field_i,
        raw_id_i: id_i,
        field_j,
        raw_id_j: id_j,
    }
}

impl ComboId {
    /// Byte encoding [field_i | id_i | field_j | id_j]; order-sensitive.
    pub fn encode(&self) -> [u8; 20] {
        let mut out = [0u8; 20];
        out[..2].copy_from_slice(&self.field_i.to_le_bytes());
        out[2..10].copy_from_slice(&self.raw_id_i.to_le_bytes());
        out[10..12].copy_from_slice(&self.field_j.to_le_bytes());
        out[12..].copy_from_slice(&self.raw_id_j.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub weights: Matrix,
    pub hash_seed: u64,
}

impl Codebook {
    pub fn init(size: usize, dim: usize, hash_seed: u64, rng: &mut impl Rng) -> Self {
        Codebook {
            weights: random_normal(size, dim, 0.01, rng),
            hash_seed,
        }
    }

    pub fn size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Address of a combo ID in a codebook.
pub fn address(cb: &Codebook, cid: &ComboId) -> usize {
    hash_to_bucket(cb.hash_seed, &cid.encode(), cb.size() as u64).unwrap() as usize
}

/// Main codebook plus k siamese codebooks whose concatenated lookups vote a
/// scalar gate for the main codeword.
#[derive(Debug, Clone)]
pub struct GatedSiameseCodebook {
    pub main: Codebook,
    pub siamese: Vec<Codebook>,
    /// (k*d) x 1 gate weights.
    pub gate_weights: Matrix,
    /// 1x1; zero at init so the gate reduces to the bias-free form.
    pub gate_bias: Matrix,
}

impl GatedSiameseCodebook {
    pub fn init(size: usize, dim: usize, k: usize, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 {
            return Err(DeattError::InvalidArgument("codebook size must be >= 1".into()));
        }
        let main = Codebook::init(size, dim, seed, rng);
        let siamese = (1..=k)
            .map(|i| Codebook::init(size, dim, seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64)), rng))
            .collect();
        Ok(GatedSiameseCodebook {
            main,
            siamese,
            gate_weights: random_normal(k * dim, 1, 0.01, rng),
            gate_bias: Matrix::zeros(1, 1),
        })
    }

    pub fn k(&self) -> usize {
        self.siamese.len()
    }

    pub fn dim(&self) -> usize {
        self.main.dim()
    }

    pub fn size(&self) -> usize {
        self.main.size()
    }

    /// Scalar gate in (0,1) for a combo ID; 1.0 exactly when k = 0 (no
    /// siamese codebooks, gating disabled).
    pub fn gate(&self, cid: &ComboId) -> f64 {
        if self.siamese.is_empty() {
            return 1.0;
        }
        let mut pre = self.gate_bias.get(0, 0);
        let mut w = 0;
        for cb in &self.siamese {
            let row = cb.weights.row(address(cb, cid));
            for &v in row {
                pre += self.gate_weights.get(w, 0) * v;
                w += 1;
            }
        }
        sigmoid(pre)
    }
}

/// The embedding of one interaction pair: gate times the main codeword.
pub fn interaction_embedding(gsc: &GatedSiameseCodebook, cid: &ComboId) -> Vec<f64> {
    let gate = gsc.gate(cid);
    let main_row = gsc.main.weights.row(address(&gsc.main, cid));
    main_row.iter().map(|&v| gate * v).collect()
}

/// Monte Carlo estimate of the probability that two distinct random combo IDs
/// collide simultaneously in all k codebooks (distinct hash seeds).
pub fn estimate_joint_collision_rate(
    k: usize,
    s: usize,
    trials: usize,
    rng_seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(DeattError::InvalidArgument("trials must be >= 1".into()));
    }
    if s == 0 || k == 0 {
        return Err(DeattError::InvalidArgument("k and s must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seeds: Vec<u64> = (0..k as u64)
        .map(|i| 0x1234_5678_9abc_def0u64.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i)))
        .collect();
    let mut collisions = 0usize;
    let mut done = 0usize;
    while done < trials {
        let a = ComboId {
            field_i: rng.gen(),
            raw_id_i: rng.gen(),
            field_j: rng.gen(),
            raw_id_j: rng.gen(),
        };
        let b = ComboId {
            field_i: rng.gen(),
            raw_id_i: rng.gen(),
            field_j: rng.gen(),
            raw_id_j: rng.gen(),
        };
        if a == b {
            continue;
        }
        done += 1;
        let ea = a.encode();
        let eb = b.encode();
        let all_collide = seeds.iter().all(|&seed| {
            hash_to_bucket(seed, &ea, s as u64).unwrap() == hash_to_bucket(seed, &eb, s as u64).unwrap()
        });
        if all_collide {
            collisions += 1;
        }
    }
    Ok(collisions as f64 / trials as f64)
}
