//! Finite-difference verification of reverse-mode gradients.

use crate::error::{DeattError, Result};
use crate::matrix::Matrix;

/// Named, ordered collection of trainable tensors. Order is insertion order
/// and is the contract for gradient vectors and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(DeattError::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn at(&self, i: usize) -> (&str, &Matrix) {
        let (n, m) = &self.entries[i];
        (n.as_str(), m)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.entries[i].1
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }
}

/// Compare analytic gradients against central differences for every entry of
/// every parameter block.
///
/// `eval(params, want_grads)` returns the scalar loss and, when asked, the
/// analytic gradients aligned with the block order of `params`. The closure
/// must be a pure function of the parameter values (fixed batch, frozen
/// threshold masks) for the comparison to be meaningful.
pub fn grad_check<F>(params: &ParamSet, mut eval: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, bool) -> Result<(f64, Option<Vec<Matrix>>)>,
{
    let (base_loss, grads) = eval(params, true)?;
    if !base_loss.is_finite() {
        return Err(DeattError::NonFinite("loss at base point".into()));
    }
    let grads = grads.ok_or_else(|| {
        DeattError::InvalidArgument("eval did not return analytic gradients".into())
    })?;
    if grads.len() != params.len() {
        return Err(DeattError::Shape(format!(
            "{} gradient blocks for {} parameter blocks",
            grads.len(),
            params.len()
        )));
    }

    let mut work = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    for (bi, analytic) in grads.iter().enumerate() {
        let (name, base) = params.at(bi);
        let name = name.to_string();
        if !analytic.same_shape(base) {
            return Err(DeattError::Shape(format!(
                "gradient shape {}x{} != parameter `{name}` shape {}x{}",
                analytic.rows(),
                analytic.cols(),
                base.rows(),
                base.cols()
            )));
        }
        let mut max_rel_err = 0.0f64;
        let mut worst_entry = 0;
        for ei in 0..base.len() {
            let orig = work.at(bi).1.data()[ei];
            work.at_mut(bi).data_mut()[ei] = orig + h;
            let (lp, _) = eval(&work, false)?;
            work.at_mut(bi).data_mut()[ei] = orig - h;
            let (lm, _) = eval(&work, false)?;
            work.at_mut(bi).data_mut()[ei] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(DeattError::NonFinite(format!(
                    "loss at perturbed point `{name}`[{ei}]"
                )));
            }
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic.data()[ei] - fd).abs() / f64::max(1.0, fd.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_entry = ei;
            }
        }
        blocks.push(BlockReport {
            name,
            entries: base.len(),
            max_rel_err,
            worst_entry,
            pass: max_rel_err <= tol,
        });
    }
    Ok(GradCheckReport { blocks, h, tol })
}
