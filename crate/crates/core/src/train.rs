//! Training loop: Adam over the flat parameter set, seeded shuffling,
//! per-epoch evaluation, and a versioned binary checkpoint format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{DeattError, Result};
use crate::feature::Example;
use crate::gradcheck::ParamSet;
use crate::matrix::{sigmoid, Matrix};
use crate::metrics::{self, PredictionSet};
use crate::model::{build_forward, build_variant, Model, ThresholdPlan};
use crate::report::{EpochMetrics, RunReport};
use crate::tape::Tape;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DEATTCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Per-tensor Adam state keyed by parameter name.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Adam::new(
            cfg.train.learning_rate,
            cfg.train.adam_beta1,
            cfg.train.adam_beta2,
            cfg.train.adam_eps,
        )
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &[(String, Matrix)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| DeattError::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if p.rows() != grad.rows() || p.cols() != grad.cols() {
                return Err(DeattError::Shape(format!(
                    "gradient for `{name}` is {}x{}, parameter is {}x{}",
                    grad.rows(),
                    grad.cols(),
                    p.rows(),
                    p.cols()
                )));
            }
            let len = p.data().len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            let pd = p.data_mut();
            let gd = grad.data();
            for i in 0..len {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Score a full dataset in fixed-size batches with frozen thresholds.
pub fn evaluate(model: &Model, data: &[Example], batch_size: usize) -> Result<PredictionSet> {
    let mut pred = PredictionSet::default();
    let mut thresholds = model.thresholds.clone();
    for chunk in data.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let result = build_forward(
            &mut tape,
            &model.spec,
            &model.params,
            &mut thresholds,
            chunk,
            None,
            ThresholdPlan::Eval,
        )?;
        let logits = tape.value(result.logits);
        for (i, ex) in chunk.iter().enumerate() {
            pred.push(sigmoid(logits.data()[i]), ex.label, ex.session_id);
        }
    }
    Ok(pred)
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

/// Train one model from scratch and evaluate it on `test` after every epoch.
///
/// `record_wall_clock = false` zeroes the timing field so repeated runs
/// produce byte-identical reports.
pub fn train(
    cfg: &ExperimentConfig,
    train_data: &[Example],
    test: &[Example],
    record_wall_clock: bool,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut model = build_variant(cfg)?;
    let mut adam = Adam::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5351_4a46_3d8e_11b7);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let batch_size = cfg.train.batch_size;

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut step: usize = 0;
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_data[i].clone()).collect();
            let labels: Vec<f64> = batch.iter().map(|ex| ex.label as f64).collect();
            let mut tape = Tape::new();
            let result = build_forward(
                &mut tape,
                &model.spec,
                &model.params,
                &mut model.thresholds,
                &batch,
                Some(&labels),
                ThresholdPlan::Train,
            )?;
            let loss_var = result.loss.expect("labels were supplied");
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(DeattError::NumericAbort {
                    step,
                    reason: format!("loss = {loss}"),
                });
            }
            loss_sum += loss;
            loss_batches += 1;
            let grads = tape.backward(loss_var)?;
            let updates: Vec<(String, Matrix)> = result
                .param_vars
                .iter()
                .enumerate()
                .filter_map(|(i, &var)| {
                    grads
                        .wrt(var)
                        .map(|g| (model.params.at(i).0.to_string(), g.clone()))
                })
                .collect();
            adam.apply(&mut model.params, &updates)?;
            step += 1;
        }

        let train_logloss = loss_sum / loss_batches.max(1) as f64;
        let pred = evaluate(&model, test, batch_size)?;
        epochs.push(EpochMetrics {
            epoch,
            train_logloss,
            test_logloss: metrics::logloss(&pred.scores, &pred.labels)?,
            test_auc: metrics::auc(&pred.scores, &pred.labels)?,
            test_gauc: metrics::gauc(&pred)?,
        });
    }

    let last = epochs.last().expect("at least one epoch");
    let report = RunReport {
        config_hash: cfg.hash(),
        variant: cfg.model.variant,
        seed: cfg.seed,
        final_test_auc: last.test_auc,
        final_test_gauc: last.test_gauc,
        final_test_logloss: last.test_logloss,
        epochs,
        wall_clock_secs: if record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok(TrainOutcome { model, report })
}

/// Save parameters and threshold states to a versioned binary file.
pub fn save_checkpoint(model: &Model, config_hash: &str, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let hash = config_hash.as_bytes();
    w.write_all(&(hash.len() as u32).to_le_bytes())?;
    w.write_all(hash)?;
    w.write_all(&(model.thresholds.len() as u32).to_le_bytes())?;
    for t in &model.thresholds {
        w.write_all(&t.ema_thresh.to_le_bytes())?;
        w.write_all(&t.ema_decay.to_le_bytes())?;
        w.write_all(&t.observation_count.to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for i in 0..model.params.len() {
        let (name, m) = model.params.at(i);
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into a freshly built model for `cfg`. The stored config
/// hash must match, and every stored tensor must exist with the same shape.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DeattError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DeattError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hash_len = read_u32(&mut r)? as usize;
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let stored_hash = String::from_utf8(hash)
        .map_err(|_| DeattError::Checkpoint("config hash is not utf-8".into()))?;
    if stored_hash != cfg.hash() {
        return Err(DeattError::Checkpoint(
            "checkpoint was written for a different config".into(),
        ));
    }

    let mut model = build_variant(cfg)?;
    let n_thresh = read_u32(&mut r)? as usize;
    if n_thresh != model.thresholds.len() {
        return Err(DeattError::Checkpoint(format!(
            "{n_thresh} threshold states stored, model has {}",
            model.thresholds.len()
        )));
    }
    for t in &mut model.thresholds {
        t.ema_thresh = read_f64(&mut r)?;
        t.ema_decay = read_f64(&mut r)?;
        t.observation_count = read_u64(&mut r)?;
    }
    let n_params = read_u32(&mut r)? as usize;
    if n_params != model.params.len() {
        return Err(DeattError::Checkpoint(format!(
            "{n_params} tensors stored, model has {}",
            model.params.len()
        )));
    }
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| DeattError::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in &mut data {
            *v = read_f64(&mut r)?;
        }
        let target = model
            .params
            .get_mut(&name)
            .ok_or_else(|| DeattError::Checkpoint(format!("unknown tensor `{name}`")))?;
        if target.rows() != rows || target.cols() != cols {
            return Err(DeattError::Checkpoint(format!(
                "tensor `{name}` is {rows}x{cols}, model expects {}x{}",
                target.rows(),
                target.cols()
            )));
        }
        *target = Matrix::from_vec(rows, cols, data)?;
    }
    Ok(model)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
