//! Fusion of combo-ID scores A_m and collapse-avoiding scores A_c into final
//! attention weights, plus the attention output itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combo::xavier_uniform;
use crate::error::{DeattError, Result};
use crate::matrix::{sigmoid, softmax_rows, Matrix, MASK_THRESHOLD, SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    WeightedSum,
    GatedBalance,
    Multiply,
}

impl FusionMode {
    /// Row label used in ablation tables.
    pub fn table_name(self) -> &'static str {
        match self {
            FusionMode::WeightedSum => "Weighted Sum",
            FusionMode::GatedBalance => "Gated Balance",
            FusionMode::Multiply => "Multiply",
        }
    }
}

/// Entrywise gate for the gated-balance mode: scalar in, scalar out, one
/// hidden layer of width 8 with tanh, sigmoid output so the convex
/// combination is well-formed.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub w1: Matrix, // 1 x 8
    pub b1: Matrix, // 1 x 8
    pub w2: Matrix, // 8 x 1
    pub b2: Matrix, // 1 x 1
}

pub const GATE_HIDDEN: usize = 8;

impl GateNet {
    pub fn init(rng: &mut impl Rng) -> Self {
        GateNet {
            w1: xavier_uniform(1, GATE_HIDDEN, rng),
            b1: Matrix::zeros(1, GATE_HIDDEN),
            w2: xavier_uniform(GATE_HIDDEN, 1, rng),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut out = self.b2.get(0, 0);
        for j in 0..GATE_HIDDEN {
            let pre = self.w1.get(0, j) * x + self.b1.get(0, j);
            out += self.w2.get(j, 0) * pre.tanh();
        }
        sigmoid(out)
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub mode: FusionMode,
    /// Learnable weighted-sum coefficients, both 1x1, initialized to 1.
    pub alpha: Matrix,
    pub beta: Matrix,
    pub gate_net: GateNet,
    /// The multiply-mode scalar, initialized to 0 so the gate is identity.
    pub mult_weight: Matrix,
}

impl FusionParams {
    pub fn init(mode: FusionMode, rng: &mut impl Rng) -> Self {
        FusionParams {
            mode,
            alpha: Matrix::scalar(1.0),
            beta: Matrix::scalar(1.0),
            gate_net: GateNet::init(rng),
            mult_weight: Matrix::zeros(1, 1),
        }
    }
}

/// Combine A_m and A_c into the pre-softmax attention matrix. Cells where
/// either input carries the mask sentinel stay sentinel.
pub fn fuse(a_m: &Matrix, a_c: &Matrix, p: &FusionParams) -> Result<Matrix> {
    if !a_m.same_shape(a_c) {
        return Err(DeattError::Shape(format!(
            "fuse: {}x{} vs {}x{}",
            a_m.rows(),
            a_m.cols(),
            a_c.rows(),
            a_c.cols()
        )));
    }
    let mut out = Matrix::zeros(a_m.rows(), a_m.cols());
    for idx in 0..a_m.len() {
        let m = a_m.data()[idx];
        let c = a_c.data()[idx];
        out.data_mut()[idx] = if m <= MASK_THRESHOLD || c <= MASK_THRESHOLD {
            SENTINEL
        } else {
            match p.mode {
                FusionMode::WeightedSum => p.alpha.get(0, 0) * m + p.beta.get(0, 0) * c,
                FusionMode::GatedBalance => {
                    let g = p.gate_net.eval(c);
                    (1.0 - g) * m + g * c
                }
                FusionMode::Multiply => 2.0 * sigmoid(p.mult_weight.get(0, 0) * c) * m,
            }
        };
    }
    Ok(out)
}

/// softmax(pre) * V.
pub fn attention_output(pre: &Matrix, v: &Matrix) -> Result<Matrix> {
    if pre.cols() != v.rows() {
        return Err(DeattError::Shape(format!(
            "attention_output: {}x{} with {}x{}",
            pre.rows(),
            pre.cols(),
            v.rows(),
            v.cols()
        )));
    }
    softmax_rows(pre)?.matmul(v)
}
