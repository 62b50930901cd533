//! The end-to-end CTR model: embeddings, L dual-attention layers, DNN head,
//! and the ablation-variant builder.
//!
//! All trainable tensors live in one flat [`ParamSet`] under stable names;
//! the forward pass is recorded on a [`Tape`] over the whole batch at once
//! (per-example matrices are stacked into block matrices).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{combo_id, Codebook, GatedSiameseCodebook};
use crate::collapse::{retention_mask, ThresholdMode, ThresholdState};
use crate::combo::{xavier_uniform, ReweightSubnet};
use crate::config::{ExperimentConfig, VariantKind};
use crate::error::{DeattError, Result};
use crate::feature::{encode_field_id, fnv1a64, hash_to_bucket, random_normal, Example, FieldSchema, EmbeddingTable};
use crate::fusion::{FusionMode, FusionParams, GateNet, GATE_HIDDEN};
use crate::gradcheck::ParamSet;
use crate::matrix::{Activation, Matrix, SENTINEL};
use crate::tape::{Tape, Var};

/// Everything needed to rebuild the computation besides the tensors
/// themselves: dimensions, switches, and the hashing seeds.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n_fields: usize,
    pub d: usize,
    pub layers: usize,
    pub variant: VariantKind,
    pub gsc_enabled: bool,
    pub codebook_size: usize,
    pub k_siamese: usize,
    pub shared_codebook: bool,
    pub combo_hidden: usize,
    pub combo_activation: Activation,
    pub collapse_mode: ThresholdMode,
    pub collapse_scale: bool,
    pub include_diag_in_mean: bool,
    pub ema_decay: f64,
    pub fusion_mode: FusionMode,
    pub dnn_widths: Vec<usize>,
    pub diag_literal_zero: bool,
    pub qkv_projection: bool,
    pub residual: bool,
    pub layer_norm: bool,
    pub embedding_buckets: Vec<u64>,
    pub embed_seeds: Vec<u64>,
    /// Per codebook slot: main seed followed by k siamese seeds.
    pub codebook_seeds: Vec<Vec<u64>>,
}

impl ModelSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let n = cfg.data.n_fields;
        let k = if cfg.model.gsc_enabled {
            cfg.codebook.k_siamese
        } else {
            0
        };
        let cb_slots = if cfg.codebook.shared_across_layers {
            1
        } else {
            cfg.model.layers
        };
        let embed_seeds = (0..n)
            .map(|f| cfg.seed ^ fnv1a64(format!("embed-hash-{f}").as_bytes()))
            .collect();
        let codebook_seeds = (0..cb_slots)
            .map(|l| {
                let mut seeds =
                    vec![cfg.seed ^ fnv1a64(format!("cb-hash-{l}-main").as_bytes())];
                for i in 0..k {
                    seeds.push(cfg.seed ^ fnv1a64(format!("cb-hash-{l}-siam-{i}").as_bytes()));
                }
                seeds
            })
            .collect();
        ModelSpec {
            n_fields: n,
            d: cfg.model.d,
            layers: cfg.model.layers,
            variant: cfg.model.variant,
            gsc_enabled: cfg.model.gsc_enabled,
            codebook_size: cfg.codebook.size,
            k_siamese: k,
            shared_codebook: cfg.codebook.shared_across_layers,
            combo_hidden: cfg.combo_hidden(),
            combo_activation: cfg.combo.activation,
            collapse_mode: cfg.collapse.mode,
            collapse_scale: cfg.collapse.scale,
            include_diag_in_mean: cfg.collapse.include_diag_in_mean,
            ema_decay: cfg.collapse.ema_decay,
            fusion_mode: cfg.fusion.mode,
            dnn_widths: cfg.model.dnn_widths.clone(),
            diag_literal_zero: cfg.model.diag_literal_zero,
            qkv_projection: cfg.model.qkv_projection,
            residual: cfg.model.residual,
            layer_norm: cfg.model.layer_norm,
            embedding_buckets: (0..n).map(|f| cfg.buckets_for_field(f)).collect(),
            embed_seeds,
            codebook_seeds,
        }
    }

    pub fn codebook_slots(&self) -> usize {
        if self.shared_codebook {
            1
        } else {
            self.layers
        }
    }

    fn codebook_slot_for_layer(&self, layer: usize) -> usize {
        if self.shared_codebook {
            0
        } else {
            layer
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    /// One threshold state per attention layer.
    pub thresholds: Vec<ThresholdState>,
}

/// Build a model for one ablation variant. Components shared between two
/// variants are initialized from per-component RNG streams keyed only by the
/// seed, so their tensors are identical across variants.
pub fn build_variant(cfg: &ExperimentConfig) -> Result<Model> {
    let spec = ModelSpec::from_config(cfg);
    let mut params = ParamSet::new();
    let seed = cfg.seed;
    let comp_rng =
        |tag: &str| ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(tag.as_bytes()));

    for f in 0..spec.n_fields {
        let mut rng = comp_rng(&format!("embed-{f}"));
        params.insert(
            format!("embed.{f}"),
            random_normal(spec.embedding_buckets[f] as usize, spec.d, 0.01, &mut rng),
        )?;
    }

    if spec.qkv_projection {
        let mut rng = comp_rng("qkv");
        for name in ["qkv.q", "qkv.k", "qkv.v"] {
            params.insert(name, xavier_uniform(spec.d, spec.d, &mut rng))?;
        }
    }

    if spec.variant.uses_codebook() {
        for slot in 0..spec.codebook_slots() {
            let mut rng = comp_rng(&format!("codebook-{slot}"));
            params.insert(
                format!("cb{slot}.main"),
                random_normal(spec.codebook_size, spec.d, 0.01, &mut rng),
            )?;
            for i in 0..spec.k_siamese {
                params.insert(
                    format!("cb{slot}.siam{i}"),
                    random_normal(spec.codebook_size, spec.d, 0.01, &mut rng),
                )?;
            }
            if spec.k_siamese > 0 {
                params.insert(
                    format!("cb{slot}.gate_w"),
                    random_normal(spec.k_siamese * spec.d, 1, 0.01, &mut rng),
                )?;
                params.insert(format!("cb{slot}.gate_b"), Matrix::zeros(1, 1))?;
            }
        }
        let mut rng = comp_rng("subnet");
        params.insert("subnet.w1", xavier_uniform(spec.d, spec.combo_hidden, &mut rng))?;
        params.insert("subnet.b1", Matrix::zeros(1, spec.combo_hidden))?;
        params.insert("subnet.w2", xavier_uniform(spec.combo_hidden, 1, &mut rng))?;
        params.insert("subnet.b2", Matrix::zeros(1, 1))?;
    }

    if spec.variant == VariantKind::Dual {
        let mut rng = comp_rng("fusion");
        match spec.fusion_mode {
            FusionMode::WeightedSum => {
                params.insert("fusion.alpha", Matrix::scalar(1.0))?;
                params.insert("fusion.beta", Matrix::scalar(1.0))?;
            }
            FusionMode::GatedBalance => {
                params.insert("fusion.gate_w1", xavier_uniform(1, GATE_HIDDEN, &mut rng))?;
                params.insert("fusion.gate_b1", Matrix::zeros(1, GATE_HIDDEN))?;
                params.insert("fusion.gate_w2", xavier_uniform(GATE_HIDDEN, 1, &mut rng))?;
                params.insert("fusion.gate_b2", Matrix::zeros(1, 1))?;
            }
            FusionMode::Multiply => {
                params.insert("fusion.mult_w", Matrix::zeros(1, 1))?;
            }
        }
    }

    {
        let mut rng = comp_rng("dnn");
        let mut prev = spec.n_fields * spec.d;
        for (i, &w) in spec.dnn_widths.iter().enumerate() {
            params.insert(format!("dnn{i}.w"), xavier_uniform(prev, w, &mut rng))?;
            params.insert(format!("dnn{i}.b"), Matrix::zeros(1, w))?;
            prev = w;
        }
        let last = spec.dnn_widths.len();
        params.insert(format!("dnn{last}.w"), xavier_uniform(prev, 1, &mut rng))?;
        params.insert(format!("dnn{last}.b"), Matrix::zeros(1, 1))?;
    }

    let thresholds = (0..spec.layers)
        .map(|_| ThresholdState::new(spec.ema_decay))
        .collect::<Result<_>>()?;

    Ok(Model {
        spec,
        params,
        thresholds,
    })
}

impl Model {
    /// Structured view of one embedding table (for cross-checks against the
    /// matrix-level reference path).
    pub fn embedding_table(&self, field: usize) -> EmbeddingTable {
        EmbeddingTable {
            field: FieldSchema {
                field_index: field as u16,
                name: format!("f{field}"),
                bucket_count: self.spec.embedding_buckets[field],
                vocab_hint: None,
            },
            weights: self.params.get(&format!("embed.{field}")).unwrap().clone(),
            hash_seed: self.spec.embed_seeds[field],
        }
    }

    pub fn gsc(&self, layer: usize) -> Option<GatedSiameseCodebook> {
        if !self.spec.variant.uses_codebook() {
            return None;
        }
        let slot = self.spec.codebook_slot_for_layer(layer);
        let seeds = &self.spec.codebook_seeds[slot];
        let main = Codebook {
            weights: self.params.get(&format!("cb{slot}.main"))?.clone(),
            hash_seed: seeds[0],
        };
        let siamese = (0..self.spec.k_siamese)
            .map(|i| Codebook {
                weights: self.params.get(&format!("cb{slot}.siam{i}")).unwrap().clone(),
                hash_seed: seeds[1 + i],
            })
            .collect();
        let (gate_weights, gate_bias) = if self.spec.k_siamese > 0 {
            (
                self.params.get(&format!("cb{slot}.gate_w"))?.clone(),
                self.params.get(&format!("cb{slot}.gate_b"))?.clone(),
            )
        } else {
            (Matrix::zeros(0, 1), Matrix::zeros(1, 1))
        };
        Some(GatedSiameseCodebook {
            main,
            siamese,
            gate_weights,
            gate_bias,
        })
    }

    pub fn subnet(&self) -> Option<ReweightSubnet> {
        Some(ReweightSubnet {
            w1: self.params.get("subnet.w1")?.clone(),
            b1: self.params.get("subnet.b1")?.clone(),
            w2: self.params.get("subnet.w2")?.clone(),
            b2: self.params.get("subnet.b2")?.clone(),
            activation: self.spec.combo_activation,
        })
    }

    pub fn fusion_params(&self) -> Option<FusionParams> {
        if self.spec.variant != VariantKind::Dual {
            return None;
        }
        let mut p = FusionParams {
            mode: self.spec.fusion_mode,
            alpha: Matrix::scalar(1.0),
            beta: Matrix::scalar(1.0),
            gate_net: GateNet {
                w1: Matrix::zeros(1, GATE_HIDDEN),
                b1: Matrix::zeros(1, GATE_HIDDEN),
                w2: Matrix::zeros(GATE_HIDDEN, 1),
                b2: Matrix::zeros(1, 1),
            },
            mult_weight: Matrix::zeros(1, 1),
        };
        match self.spec.fusion_mode {
            FusionMode::WeightedSum => {
                p.alpha = self.params.get("fusion.alpha")?.clone();
                p.beta = self.params.get("fusion.beta")?.clone();
            }
            FusionMode::GatedBalance => {
                p.gate_net.w1 = self.params.get("fusion.gate_w1")?.clone();
                p.gate_net.b1 = self.params.get("fusion.gate_b1")?.clone();
                p.gate_net.w2 = self.params.get("fusion.gate_w2")?.clone();
                p.gate_net.b2 = self.params.get("fusion.gate_b2")?.clone();
            }
            FusionMode::Multiply => {
                p.mult_weight = self.params.get("fusion.mult_w")?.clone();
            }
        }
        Some(p)
    }
}

/// How thresholds behave during a forward pass.
pub enum ThresholdPlan<'a> {
    /// Use the batch mean and fold it into the EMA.
    Train,
    /// Use the frozen EMA; no state mutation.
    Eval,
    /// Replay fixed per-layer retention masks (finite-difference checks).
    Fixed(&'a [Vec<f64>]),
}

pub struct ForwardResult {
    pub logits: Var,
    pub loss: Option<Var>,
    /// Per-layer pre-softmax attention matrices (stacked per example).
    pub pre_softmax: Vec<Var>,
    /// Per-layer post-softmax attention matrices.
    pub attention: Vec<Var>,
    /// Retention masks actually used by threshold layers (empty when the
    /// variant has no threshold path).
    pub used_masks: Vec<Vec<f64>>,
    /// Tape vars of every parameter block, aligned with the ParamSet order.
    pub param_vars: Vec<Var>,
}

/// Record the forward pass of a whole batch onto `tape`.
pub fn build_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ParamSet,
    thresholds: &mut [ThresholdState],
    batch: &[Example],
    labels: Option<&[f64]>,
    plan: ThresholdPlan<'_>,
) -> Result<ForwardResult> {
    if batch.is_empty() {
        return Err(DeattError::InvalidArgument("empty batch".into()));
    }
    let n = spec.n_fields;
    let d = spec.d;
    let b = batch.len();
    for ex in batch {
        if ex.feature_ids.len() != n {
            return Err(DeattError::Shape(format!(
                "example has {} ids, schema has {n}",
                ex.feature_ids.len()
            )));
        }
    }

    // register every parameter block exactly once, in ParamSet order
    let param_vars: Vec<Var> = (0..params.len())
        .map(|i| tape.param(params.at(i).1.clone()))
        .collect();
    let lookup = |name: &str| -> Result<Var> {
        params
            .names()
            .position(|n2| n2 == name)
            .map(|i| param_vars[i])
            .ok_or_else(|| DeattError::InvalidArgument(format!("missing parameter `{name}`")))
    };

    // input layer: gather each field's bucket rows, interleave example-major
    let mut field_vars = Vec::with_capacity(n);
    for f in 0..n {
        let table = lookup(&format!("embed.{f}"))?;
        let indices: Vec<u32> = batch
            .iter()
            .map(|ex| {
                hash_to_bucket(
                    spec.embed_seeds[f],
                    &encode_field_id(f as u16, ex.feature_ids[f]),
                    spec.embedding_buckets[f],
                )
                .map(|v| v as u32)
            })
            .collect::<Result<_>>()?;
        field_vars.push(tape.gather_rows(table, indices)?);
    }
    let mut x = tape.interleave_rows(&field_vars)?; // (B*n) x d

    // structural index sets for the stacked (B*n) x n score matrices
    let diag_positions: Vec<u32> = (0..b)
        .flat_map(|bi| (0..n).map(move |i| ((bi * n + i) * n + i) as u32))
        .collect();
    let offdiag_mask: Vec<f64> = (0..b * n * n)
        .map(|idx| {
            let col = idx % n;
            let row_in_block = (idx / n) % n;
            if col == row_in_block {
                0.0
            } else {
                1.0
            }
        })
        .collect();

    let mut pre_softmax = Vec::with_capacity(spec.layers);
    let mut attention = Vec::with_capacity(spec.layers);
    let mut used_masks = Vec::new();

    for layer in 0..spec.layers {
        let (q, k, v) = if spec.qkv_projection {
            (
                tape.matmul(x, lookup("qkv.q")?)?,
                tape.matmul(x, lookup("qkv.k")?)?,
                tape.matmul(x, lookup("qkv.v")?)?,
            )
        } else {
            (x, x, x)
        };

        // combo-ID score path
        let combo_scores = if spec.variant.uses_codebook() {
            let slot = spec.codebook_slot_for_layer(layer);
            let seeds = &spec.codebook_seeds[slot];
            let cb_size = spec.codebook_size as u64;
            let mut main_idx = Vec::with_capacity(b * n * n);
            let mut siam_idx: Vec<Vec<u32>> =
                (0..spec.k_siamese).map(|_| Vec::with_capacity(b * n * n)).collect();
            for ex in batch {
                for i in 0..n {
                    for j in 0..n {
                        let cid = combo_id(
                            i as u16,
                            ex.feature_ids[i],
                            j as u16,
                            ex.feature_ids[j],
                        );
                        let enc = cid.encode();
                        main_idx.push(hash_to_bucket(seeds[0], &enc, cb_size)? as u32);
                        for (s, si) in siam_idx.iter_mut().enumerate() {
                            si.push(hash_to_bucket(seeds[1 + s], &enc, cb_size)? as u32);
                        }
                    }
                }
            }
            let main = lookup(&format!("cb{slot}.main"))?;
            let mut gathered = tape.gather_rows(main, main_idx)?; // (B*n^2) x d
            if spec.k_siamese > 0 {
                let mut siam_vars = Vec::with_capacity(spec.k_siamese);
                for (s, idx) in siam_idx.into_iter().enumerate() {
                    let cb = lookup(&format!("cb{slot}.siam{s}"))?;
                    siam_vars.push(tape.gather_rows(cb, idx)?);
                }
                let concat = tape.concat_cols(&siam_vars)?; // (B*n^2) x (k*d)
                let pre_gate = tape.matmul(concat, lookup(&format!("cb{slot}.gate_w"))?)?;
                let biased = tape.add_row_vec(pre_gate, lookup(&format!("cb{slot}.gate_b"))?)?;
                let gate = tape.activation(Activation::Sigmoid, biased); // (B*n^2) x 1
                gathered = tape.mul_col_vec(gathered, gate)?;
            }
            // shared re-weight subnet over all pair embeddings
            let h1 = tape.matmul(gathered, lookup("subnet.w1")?)?;
            let h1b = tape.add_row_vec(h1, lookup("subnet.b1")?)?;
            let h1a = tape.activation(spec.combo_activation, h1b);
            let s1 = tape.matmul(h1a, lookup("subnet.w2")?)?;
            let s1b = tape.add_row_vec(s1, lookup("subnet.b2")?)?;
            let a = tape.reshape(s1b, b * n, n)?;
            // diagonal zeroed here; sentinel applied just before softmax
            Some(tape.mask_const(a, offdiag_mask.clone())?)
        } else {
            None
        };

        // inner-product score path
        let needs_inner = !matches!(spec.variant, VariantKind::ComboOnly);
        let inner_scores = if needs_inner {
            let s = tape.bmm(q, k, b, true)?; // (B*n) x n
            Some(if spec.collapse_scale || !spec.variant.uses_threshold() {
                // transformer variants always use the 1/sqrt(d) convention
                tape.affine_const(s, 1.0 / (d as f64).sqrt(), 0.0)
            } else {
                s
            })
        } else {
            None
        };

        // thresholded collapse-avoiding scores
        let collapse_scores = if spec.variant.uses_threshold() {
            let s = inner_scores.unwrap();
            let mask: Vec<f64> = match &plan {
                ThresholdPlan::Fixed(masks) => masks[layer].clone(),
                _ => {
                    // reconstruct per-example sentinel-diagonal matrices so the
                    // threshold update expects per-example n x n matrices
                    let sv = tape.value(s);
                    let mut per_example = Vec::with_capacity(b);
                    for bi in 0..b {
                        let mut m = Matrix::from_vec_unchecked(
                            n,
                            n,
                            sv.data()[bi * n * n..(bi + 1) * n * n].to_vec(),
                        );
                        for i in 0..n {
                            m.set(i, i, SENTINEL);
                        }
                        per_example.push(m);
                    }
                    let thresh = match plan {
                        ThresholdPlan::Train => crate::collapse::update_threshold(
                            &per_example,
                            &mut thresholds[layer],
                            spec.include_diag_in_mean,
                        )?,
                        _ => thresholds[layer].ema_thresh,
                    };
                    let mut mask = Vec::with_capacity(b * n * n);
                    for m in &per_example {
                        mask.extend(retention_mask(m, thresh, spec.collapse_mode));
                    }
                    mask
                }
            };
            used_masks.push(mask.clone());
            let a_c = match spec.collapse_mode {
                ThresholdMode::Scores => tape.mask_const(s, mask)?,
                ThresholdMode::Binary => {
                    // literal 0/1 scores, detached from the inner products
                    tape.constant(Matrix::from_vec_unchecked(b * n, n, mask))
                }
            };
            Some(a_c)
        } else {
            inner_scores
        };

        // variant-specific pre-softmax matrix (diagonal still zero/raw)
        let fused = match spec.variant {
            VariantKind::Transformer => collapse_scores.unwrap(),
            VariantKind::TransformerNoDiag => {
                let s = collapse_scores.unwrap();
                tape.mask_const(s, offdiag_mask.clone())?
            }
            VariantKind::ComboOnly => combo_scores.unwrap(),
            VariantKind::CollapseOnly => collapse_scores.unwrap(),
            VariantKind::Dual => {
                let a_m = combo_scores.unwrap();
                let a_c = collapse_scores.unwrap();
                match spec.fusion_mode {
                    FusionMode::WeightedSum => {
                        let am = tape.scale_var(a_m, lookup("fusion.alpha")?)?;
                        let ac = tape.scale_var(a_c, lookup("fusion.beta")?)?;
                        tape.add(am, ac)?
                    }
                    FusionMode::GatedBalance => {
                        let flat = tape.reshape(a_c, b * n * n, 1)?;
                        let h1 = tape.matmul(flat, lookup("fusion.gate_w1")?)?;
                        let h1b = tape.add_row_vec(h1, lookup("fusion.gate_b1")?)?;
                        let h1a = tape.activation(Activation::Tanh, h1b);
                        let o1 = tape.matmul(h1a, lookup("fusion.gate_w2")?)?;
                        let o1b = tape.add_row_vec(o1, lookup("fusion.gate_b2")?)?;
                        let g_flat = tape.activation(Activation::Sigmoid, o1b);
                        let g = tape.reshape(g_flat, b * n, n)?;
                        // (1-g)*A_m + g*A_c = A_m + g*(A_c - A_m)
                        let diff = tape.sub(a_c, a_m)?;
                        let weighted = tape.hadamard(g, diff)?;
                        tape.add(a_m, weighted)?
                    }
                    FusionMode::Multiply => {
                        let scaled = tape.scale_var(a_c, lookup("fusion.mult_w")?)?;
                        let sig = tape.activation(Activation::Sigmoid, scaled);
                        let doubled = tape.affine_const(sig, 2.0, 0.0);
                        tape.hadamard(doubled, a_m)?
                    }
                }
            }
        };

        let pre = if spec.variant.masks_diagonal() && !spec.diag_literal_zero {
            tape.set_const(fused, diag_positions.clone(), SENTINEL)?
        } else {
            fused
        };
        pre_softmax.push(pre);

        let soft = tape.softmax_rows(pre)?;
        attention.push(soft);
        let mut out = tape.bmm(soft, v, b, false)?; // (B*n) x d
        if spec.residual {
            out = tape.add(out, x)?;
        }
        if spec.layer_norm {
            out = tape.layer_norm_rows(out, 1e-6);
        }
        x = out;
    }

    // flatten tokens and run the DNN head
    let mut h = tape.reshape(x, b, n * d)?;
    for i in 0..spec.dnn_widths.len() {
        let lin = tape.matmul(h, lookup(&format!("dnn{i}.w"))?)?;
        let biased = tape.add_row_vec(lin, lookup(&format!("dnn{i}.b"))?)?;
        h = tape.activation(Activation::Relu, biased);
    }
    let last = spec.dnn_widths.len();
    let lin = tape.matmul(h, lookup(&format!("dnn{last}.w"))?)?;
    let logits = tape.add_row_vec(lin, lookup(&format!("dnn{last}.b"))?)?;

    let loss = match labels {
        Some(y) => Some(tape.bce_with_logits(logits, y.to_vec())?),
        None => None,
    };

    Ok(ForwardResult {
        logits,
        loss,
        pre_softmax,
        attention,
        used_masks,
        param_vars,
    })
}

/// Finite-difference check of the full model loss gradient on one batch.
///
/// Retention masks are captured once at the base point and replayed for every
/// perturbed evaluation, so the thresholding step does not inject spurious
/// discontinuities into the comparison.
pub fn model_grad_check(
    cfg: &ExperimentConfig,
    batch: &[Example],
    h: f64,
    tol: f64,
) -> Result<crate::gradcheck::GradCheckReport> {
    let model = build_variant(cfg)?;
    let labels: Vec<f64> = batch.iter().map(|ex| ex.label as f64).collect();

    let masks = {
        let mut tape = Tape::new();
        let mut thresholds = model.thresholds.clone();
        let base = build_forward(
            &mut tape,
            &model.spec,
            &model.params,
            &mut thresholds,
            batch,
            Some(&labels),
            ThresholdPlan::Train,
        )?;
        base.used_masks
    };

    let spec = model.spec.clone();
    let base_thresholds = model.thresholds.clone();
    crate::gradcheck::grad_check(
        &model.params,
        |params, want_grads| {
            let mut tape = Tape::new();
            let mut thresholds = base_thresholds.clone();
            let result = build_forward(
                &mut tape,
                &spec,
                params,
                &mut thresholds,
                batch,
                Some(&labels),
                ThresholdPlan::Fixed(&masks),
            )?;
            let loss_var = result.loss.expect("labels were supplied");
            let loss = tape.value(loss_var).data()[0];
            let grads = if want_grads {
                let g = tape.backward(loss_var)?;
                Some(
                    result
                        .param_vars
                        .iter()
                        .map(|&v| {
                            g.wrt(v).cloned().unwrap_or_else(|| {
                                let m = tape.value(v);
                                Matrix::zeros(m.rows(), m.cols())
                            })
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok((loss, grads))
        },
        h,
        tol,
    )
}

/// Forward-only helper: per-example click probabilities.
pub fn forward_probabilities(model: &Model, batch: &[Example]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut thresholds = model.thresholds.clone();
    let result = build_forward(
        &mut tape,
        &model.spec,
        &model.params,
        &mut thresholds,
        batch,
        None,
        ThresholdPlan::Eval,
    )?;
    Ok(tape
        .value(result.logits)
        .data()
        .iter()
        .map(|&z| crate::matrix::sigmoid(z))
        .collect())
}
