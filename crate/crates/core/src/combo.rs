//! Combo-ID attention: the interaction tensor E, the shared re-weighting
//! subnetwork projecting each pair embedding to a score, and diagonal removal.

use rand::Rng;

use crate::codebook::{combo_id, interaction_embedding, ComboId, GatedSiameseCodebook};
use crate::error::{DeattError, Result};
use crate::feature::Example;
use crate::matrix::{Activation, Matrix, SENTINEL};

/// Two-layer scorer shared across all n^2 interaction pairs.
#[derive(Debug, Clone)]
pub struct ReweightSubnet {
    pub w1: Matrix, // d x h
    pub b1: Matrix, // 1 x h
    pub w2: Matrix, // h x 1
    pub b2: Matrix, // 1 x 1
    pub activation: Activation,
}

impl ReweightSubnet {
    pub fn init(d: usize, h: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        ReweightSubnet {
            w1: xavier_uniform(d, h, rng),
            b1: Matrix::zeros(1, h),
            w2: xavier_uniform(h, 1, rng),
            b2: Matrix::zeros(1, 1),
            activation,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Score of a single pair embedding: W2^T f1(W1^T e + b1) + b2.
    pub fn score(&self, e: &[f64]) -> f64 {
        let h = self.hidden();
        let mut out = self.b2.get(0, 0);
        for j in 0..h {
            let mut pre = self.b1.get(0, j);
            for (t, &v) in e.iter().enumerate() {
                pre += self.w1.get(t, j) * v;
            }
            out += self.w2.get(j, 0) * self.activation.apply(pre);
        }
        out
    }
}

pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut m = Matrix::zeros(fan_in, fan_out);
    for v in m.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    m
}

/// All n^2 ordered pair embeddings of one example, diagonal included.
#[derive(Debug, Clone)]
pub struct InteractionTensor {
    pub n: usize,
    pub d: usize,
    /// Cell (i,j) is row i*n+j.
    pub embeddings: Matrix, // n^2 x d
    pub provenance: Vec<ComboId>,
}

impl InteractionTensor {
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        self.embeddings.row(i * self.n + j)
    }
}

pub fn build_interaction_tensor(
    ex: &Example,
    gsc: &GatedSiameseCodebook,
) -> Result<InteractionTensor> {
    let n = ex.feature_ids.len();
    let d = gsc.dim();
    let mut rows = Vec::with_capacity(n * n);
    let mut provenance = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let cid = combo_id(i as u16, ex.feature_ids[i], j as u16, ex.feature_ids[j]);
            rows.push(interaction_embedding(gsc, &cid));
            provenance.push(cid);
        }
    }
    Ok(InteractionTensor {
        n,
        d,
        embeddings: Matrix::from_rows(&rows)?,
        provenance,
    })
}

/// Project every pair embedding through the shared subnet into an n x n score
/// matrix A (diagonal still present; mask it afterwards).
pub fn reweight_scores(e: &InteractionTensor, net: &ReweightSubnet) -> Result<Matrix> {
    if e.d != net.w1.rows() {
        return Err(DeattError::Shape(format!(
            "pair embedding dim {} vs subnet input dim {}",
            e.d,
            net.w1.rows()
        )));
    }
    let n = e.n;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, net.score(e.cell(i, j)));
        }
    }
    Ok(a)
}

/// Replace the diagonal with the mask sentinel so self-crossing receives
/// (essentially) zero softmax weight. Off-diagonal entries are untouched.
pub fn mask_diagonal(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(DeattError::Shape(format!(
            "mask_diagonal on {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        out.set(i, i, SENTINEL);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::address;
    use crate::matrix::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_gsc(seed: u64) -> GatedSiameseCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GatedSiameseCodebook::init(64, 4, 2, 31, &mut rng).unwrap()
    }

    fn toy_example(n: usize) -> Example {
        Example {
            feature_ids: (0..n as u64).map(|i| i * 13 + 5).collect(),
            label: 1,
            session_id: 0,
        }
    }

    #[test]
    fn tensor_has_ordered_cells() {
        // large codebook so distinct combo IDs land in distinct codewords
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gsc = GatedSiameseCodebook::init(1 << 16, 4, 2, 31, &mut rng).unwrap();
        let e = build_interaction_tensor(&toy_example(2), &gsc).unwrap();
        assert_eq!(e.embeddings.rows(), 4);
        assert_ne!(
            address(&gsc.main, &e.provenance[1]),
            address(&gsc.main, &e.provenance[2])
        );
        assert_ne!(e.cell(0, 1), e.cell(1, 0));
    }

    #[test]
    fn zero_codebooks_give_zero_tensor() {
        let mut gsc = toy_gsc(2);
        gsc.main.weights = Matrix::zeros(64, 4);
        let e = build_interaction_tensor(&toy_example(3), &gsc).unwrap();
        assert!(e.embeddings.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_cells_match_standalone_lookup() {
        let gsc = toy_gsc(3);
        let ex = toy_example(4);
        let e = build_interaction_tensor(&ex, &gsc).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let cid = combo_id(i as u16, ex.feature_ids[i], j as u16, ex.feature_ids[j]);
                assert_eq!(e.cell(i, j), interaction_embedding(&gsc, &cid).as_slice());
            }
        }
    }

    #[test]
    fn zero_tensor_zero_biases_give_zero_scores() {
        let gsc = toy_gsc(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ReweightSubnet::init(4, 8, Activation::Relu, &mut rng);
        let mut e = build_interaction_tensor(&toy_example(3), &gsc).unwrap();
        e.embeddings = Matrix::zeros(9, 4);
        let a = reweight_scores(&e, &net).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_passes_through_when_w2_zero() {
        let gsc = toy_gsc(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = ReweightSubnet::init(4, 8, Activation::Relu, &mut rng);
        net.w2 = Matrix::zeros(8, 1);
        net.b2 = Matrix::scalar(2.5);
        let e = build_interaction_tensor(&toy_example(3), &gsc).unwrap();
        let a = reweight_scores(&e, &net).unwrap();
        assert!(a.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn mask_diagonal_definition() {
        let a = Matrix::from_vec(2, 2, vec![5.0, 1.0, 2.0, 7.0]).unwrap();
        let m = mask_diagonal(&a).unwrap();
        assert_eq!(m.get(0, 0), SENTINEL);
        assert_eq!(m.get(1, 1), SENTINEL);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 2.0);
    }

    #[test]
    fn mask_diagonal_one_by_one_degenerates_at_softmax() {
        let a = Matrix::scalar(3.0);
        let m = mask_diagonal(&a).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn mask_diagonal_non_square_rejected() {
        assert!(mask_diagonal(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn post_softmax_diagonal_weight_negligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut a = Matrix::zeros(8, 8);
            for v in a.data_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let soft = softmax_rows(&mask_diagonal(&a).unwrap()).unwrap();
            for i in 0..8 {
                assert!(soft.get(i, i) < 1e-6);
                let sum: f64 = soft.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
