//! Synthetic long-tail CTR data with planted, non-factorizable pairwise
//! interactions. Pair effects are XOR-like sign tables over hashed ID
//! buckets, which low-dimensional inner products approximate poorly, and one
//! field can be given a heavy Zipf tail so most of its IDs stay under-trained.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeattError, Result};
use crate::feature::{encode_field_id, fnv1a64, Example};
use crate::matrix::sigmoid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_fields: usize,
    /// Per-field vocabulary sizes; a single entry broadcasts to every field.
    pub vocab: Vec<u64>,
    /// Per-field Zipf exponents (0 = uniform); single entry broadcasts.
    pub zipf_exponent: Vec<f64>,
    /// Field pairs carrying a planted interaction effect.
    pub planted_pairs: Vec<(usize, usize)>,
    /// Bucket count of each planted interaction table.
    pub interaction_table_buckets: u64,
    /// Interaction magnitude c; table entries are drawn from {-c, +c}.
    pub interaction_strength: f64,
    pub unary_strength: f64,
    pub base_logit: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Field whose ID determines the session grouping key.
    #[serde(default)]
    pub session_field: usize,
    pub seed: u64,
}

impl GenConfig {
    fn per_field<T: Copy>(&self, values: &[T], what: &str) -> Result<Vec<T>> {
        match values.len() {
            1 => Ok(vec![values[0]; self.n_fields]),
            n if n == self.n_fields => Ok(values.to_vec()),
            n => Err(DeattError::InvalidArgument(format!(
                "{what}: {n} entries for {} fields",
                self.n_fields
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fields == 0 {
            return Err(DeattError::InvalidArgument("n_fields must be >= 1".into()));
        }
        if self.interaction_table_buckets == 0 {
            return Err(DeattError::InvalidArgument(
                "interaction_table_buckets must be >= 1".into(),
            ));
        }
        if self.session_field >= self.n_fields {
            return Err(DeattError::InvalidArgument(format!(
                "session_field {} out of range",
                self.session_field
            )));
        }
        for &(i, j) in &self.planted_pairs {
            if i == j || i >= self.n_fields || j >= self.n_fields {
                return Err(DeattError::InvalidArgument(format!(
                    "planted pair ({i},{j}) invalid for {} fields",
                    self.n_fields
                )));
            }
        }
        self.per_field(&self.vocab, "vocab")?;
        self.per_field(&self.zipf_exponent, "zipf_exponent")?;
        Ok(())
    }
}

/// Ground-truth record written next to the CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: GenConfig,
    /// Per planted pair, the B x B sign table in row-major order.
    pub pair_tables: Vec<Vec<f64>>,
    /// Per field, the per-ID unary logit contribution (empty when
    /// unary_strength is 0).
    pub unary_tables: Vec<Vec<f64>>,
    pub train_probs_file: String,
    pub test_probs_file: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub train_probs: Vec<f64>,
    pub test_probs: Vec<f64>,
    pub sidecar: Sidecar,
}

/// Inverse-CDF sampler over ranks 0..vocab with weight (r+1)^-exponent.
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(vocab: u64, exponent: f64) -> Result<Self> {
        if vocab == 0 {
            return Err(DeattError::InvalidArgument("vocab must be >= 1".into()));
        }
        if exponent < 0.0 {
            return Err(DeattError::InvalidArgument(
                "zipf exponent must be >= 0".into(),
            ));
        }
        let mut cdf = Vec::with_capacity(vocab as usize);
        let mut total = 0.0;
        for r in 0..vocab {
            total += ((r + 1) as f64).powf(-exponent);
            cdf.push(total);
        }
        for v in &mut cdf {
            *v /= total;
        }
        Ok(ZipfSampler { cdf })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u) as u64
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }
}

pub fn generate_in_memory(cfg: &GenConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let vocab = cfg.per_field(&cfg.vocab, "vocab")?;
    let zipf = cfg.per_field(&cfg.zipf_exponent, "zipf_exponent")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let b = cfg.interaction_table_buckets as usize;
    let pair_tables: Vec<Vec<f64>> = cfg
        .planted_pairs
        .iter()
        .map(|_| {
            (0..b * b)
                .map(|_| {
                    if rng.gen::<bool>() {
                        cfg.interaction_strength
                    } else {
                        -cfg.interaction_strength
                    }
                })
                .collect()
        })
        .collect();

    let unary_tables: Vec<Vec<f64>> = if cfg.unary_strength == 0.0 {
        vec![Vec::new(); cfg.n_fields]
    } else {
        vocab
            .iter()
            .map(|&v| {
                (0..v)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        cfg.unary_strength
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            })
            .collect()
    };

    let samplers: Vec<ZipfSampler> = vocab
        .iter()
        .zip(&zipf)
        .map(|(&v, &z)| ZipfSampler::new(v, z))
        .collect::<Result<_>>()?;

    let draw_split = |count: usize, rng: &mut ChaCha8Rng| -> (Vec<Example>, Vec<f64>) {
        let mut examples = Vec::with_capacity(count);
        let mut probs = Vec::with_capacity(count);
        for _ in 0..count {
            let ids: Vec<u64> = samplers.iter().map(|s| s.sample(rng)).collect();
            let mut logit = cfg.base_logit;
            for (f, &id) in ids.iter().enumerate() {
                if !unary_tables[f].is_empty() {
                    logit += unary_tables[f][id as usize];
                }
            }
            for (p, &(fi, fj)) in cfg.planted_pairs.iter().enumerate() {
                let bi = (ids[fi] % cfg.interaction_table_buckets) as usize;
                let bj = (ids[fj] % cfg.interaction_table_buckets) as usize;
                logit += pair_tables[p][bi * b + bj];
            }
            let p = sigmoid(logit);
            let label = u8::from(rng.gen::<f64>() < p);
            let session_id = fnv1a64(&encode_field_id(
                cfg.session_field as u16,
                ids[cfg.session_field],
            ));
            examples.push(Example {
                feature_ids: ids,
                label,
                session_id,
            });
            probs.push(p);
        }
        (examples, probs)
    };

    let (train, train_probs) = draw_split(cfg.n_train, &mut rng);
    let (test, test_probs) = draw_split(cfg.n_test, &mut rng);

    Ok(GeneratedData {
        train,
        test,
        train_probs,
        test_probs,
        sidecar: Sidecar {
            config: cfg.clone(),
            pair_tables,
            unary_tables,
            train_probs_file: "train_probs.csv".into(),
            test_probs_file: "test_probs.csv".into(),
        },
    })
}

pub fn csv_header(n_fields: usize) -> String {
    let mut cols: Vec<String> = (0..n_fields).map(|i| format!("f{i}")).collect();
    cols.push("label".into());
    cols.push("session_id".into());
    cols.join(",")
}

pub fn write_csv(path: &Path, examples: &[Example], n_fields: usize) -> Result<()> {
    let mut out = String::new();
    out.push_str(&csv_header(n_fields));
    out.push('\n');
    for ex in examples {
        for id in &ex.feature_ids {
            out.push_str(&id.to_string());
            out.push(',');
        }
        out.push_str(&ex.label.to_string());
        out.push(',');
        out.push_str(&ex.session_id.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_probs(path: &Path, probs: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for p in probs {
        writeln!(f, "{p}")?;
    }
    Ok(())
}

/// Paths produced by [`generate`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub sidecar_json: PathBuf,
}

/// Generate the dataset under `dir`: train.csv, test.csv, sidecar.json plus
/// the per-example true-probability files referenced by the sidecar.
pub fn generate(cfg: &GenConfig, dir: &Path) -> Result<GeneratedFiles> {
    let data = generate_in_memory(cfg)?;
    fs::create_dir_all(dir)?;
    let train_csv = dir.join("train.csv");
    let test_csv = dir.join("test.csv");
    let sidecar_json = dir.join("sidecar.json");
    write_csv(&train_csv, &data.train, cfg.n_fields)?;
    write_csv(&test_csv, &data.test, cfg.n_fields)?;
    write_probs(&dir.join(&data.sidecar.train_probs_file), &data.train_probs)?;
    write_probs(&dir.join(&data.sidecar.test_probs_file), &data.test_probs)?;
    let json = serde_json::to_string_pretty(&data.sidecar)?;
    fs::write(&sidecar_json, json)?;
    Ok(GeneratedFiles {
        train_csv,
        test_csv,
        sidecar_json,
    })
}

/// Parse a CSV produced by [`generate`]. Malformed rows are rejected with
/// their line number.
pub fn load_csv(path: &Path) -> Result<Vec<Example>> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DeattError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "session_id" {
        return Err(DeattError::Parse {
            line: 1,
            message: "header must be f0,..,f{n-1},label,session_id".into(),
        });
    }
    let n_fields = cols.len() - 2;
    for (i, col) in cols[..n_fields].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(DeattError::Parse {
                line: 1,
                message: format!("expected column f{i}, found {col}"),
            });
        }
    }
    let mut examples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != n_fields + 2 {
            return Err(DeattError::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", n_fields + 2, parts.len()),
            });
        }
        let mut feature_ids = Vec::with_capacity(n_fields);
        for (f, part) in parts[..n_fields].iter().enumerate() {
            feature_ids.push(part.parse::<u64>().map_err(|_| DeattError::Parse {
                line: line_no,
                message: format!("field f{f}: `{part}` is not an unsigned integer"),
            })?);
        }
        let label: u8 = parts[n_fields].parse().map_err(|_| DeattError::Parse {
            line: line_no,
            message: format!("label `{}` is not an integer", parts[n_fields]),
        })?;
        if label > 1 {
            return Err(DeattError::Parse {
                line: line_no,
                message: format!("label {label} not in {{0,1}}"),
            });
        }
        let session_id: u64 = parts[n_fields + 1].parse().map_err(|_| DeattError::Parse {
            line: line_no,
            message: format!("session_id `{}` is not an unsigned integer", parts[n_fields + 1]),
        })?;
        examples.push(Example {
            feature_ids,
            label,
            session_id,
        });
    }
    Ok(examples)
}
