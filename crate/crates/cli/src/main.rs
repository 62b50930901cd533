//! `deatt`: batch experiment driver. Trains and ablates CTR models from a
//! JSON config, generates synthetic datasets, probes codebook collision
//! rates, and runs finite-difference gradient checks.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deatt_core::codebook::estimate_joint_collision_rate;
use deatt_core::config::{ExperimentConfig, VariantKind};
use deatt_core::datagen;
use deatt_core::error::DeattError;
use deatt_core::feature::Example;
use deatt_core::fusion::FusionMode;
use deatt_core::model::model_grad_check;
use deatt_core::train::{save_checkpoint, train};
use deatt_core::{set_threads, Result};

#[derive(Parser)]
#[command(name = "deatt", about = "dual enhanced attention CTR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a report and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Reproducibility mode: single-threaded, wall-clock zeroed so
        /// repeated runs emit byte-identical reports.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
    },
    /// Run the variant, codebook-gating, and fusion sweeps; write CSV tables.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Generate a synthetic dataset from the `gen` section of the config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Monte-Carlo estimate of the joint codeword collision rate.
    CollisionProbe {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        s: usize,
        #[arg(long)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check model gradients against central differences, block by block.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("DEATT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => set_threads(n),
            _ => {
                eprintln!("error: DEATT_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &DeattError) -> u8 {
    match e {
        DeattError::NonFinite(_)
        | DeattError::DegenerateRow { .. }
        | DeattError::UndefinedMetric(_)
        | DeattError::NumericAbort { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            verify,
            report,
            checkpoint,
        } => cmd_train(&config, verify, &report, &checkpoint),
        Command::Ablate { config, out_dir } => cmd_ablate(&config, &out_dir),
        Command::Gen { config, out_dir } => cmd_gen(&config, &out_dir),
        Command::CollisionProbe { k, s, trials, seed } => {
            cmd_collision_probe(k, s, trials, seed)
        }
        Command::Gradcheck { config } => cmd_gradcheck(&config),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = datagen::load_csv(Path::new(&cfg.data.train_path))?;
    let test = datagen::load_csv(Path::new(&cfg.data.test_path))?;
    Ok((train, test))
}

fn cmd_train(
    config: &Path,
    verify: bool,
    report_path: &Path,
    checkpoint_path: &Path,
) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    if verify {
        set_threads(1);
    }
    let (train_data, test_data) = load_dataset(&cfg)?;
    let outcome = train(&cfg, &train_data, &test_data, !verify)?;
    outcome.report.save(report_path)?;
    save_checkpoint(&outcome.model, &cfg.hash(), checkpoint_path)?;
    println!(
        "{} seed={} auc={:.6} gauc={:.6} logloss={:.6}",
        cfg.model.variant.table_name(),
        cfg.seed,
        outcome.report.final_test_auc,
        outcome.report.final_test_gauc,
        outcome.report.final_test_logloss,
    );
    Ok(ExitCode::SUCCESS)
}

fn run_variant(
    base: &ExperimentConfig,
    train_data: &[Example],
    test_data: &[Example],
    mutate: impl FnOnce(&mut ExperimentConfig),
) -> Result<(f64, f64, f64)> {
    let mut cfg = base.clone();
    mutate(&mut cfg);
    cfg.validate()?;
    let outcome = train(&cfg, train_data, test_data, false)?;
    Ok((
        outcome.report.final_test_auc,
        outcome.report.final_test_gauc,
        outcome.report.final_test_logloss,
    ))
}

fn write_table(path: &Path, rows: &[(String, (f64, f64, f64))]) -> Result<()> {
    let mut out = String::from("model,auc,gauc,logloss\n");
    for (name, (auc, gauc, logloss)) in rows {
        out.push_str(&format!("{name},{auc:.6},{gauc:.6},{logloss:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_ablate(config: &Path, out_dir: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    let (train_data, test_data) = load_dataset(&cfg)?;
    std::fs::create_dir_all(out_dir)?;

    // variant sweep
    let mut variant_rows = Vec::new();
    for kind in [
        VariantKind::Transformer,
        VariantKind::TransformerNoDiag,
        VariantKind::ComboOnly,
        VariantKind::CollapseOnly,
        VariantKind::Dual,
    ] {
        let m = run_variant(&cfg, &train_data, &test_data, |c| c.model.variant = kind)?;
        println!("{} auc={:.6} gauc={:.6}", kind.table_name(), m.0, m.1);
        variant_rows.push((kind.table_name().to_string(), m));
    }
    write_table(&out_dir.join("ablation_variants.csv"), &variant_rows)?;

    // codebook gating sweep
    let mut gsc_rows = Vec::new();
    for gsc in [true, false] {
        let m = run_variant(&cfg, &train_data, &test_data, |c| {
            c.model.variant = VariantKind::ComboOnly;
            c.model.gsc_enabled = gsc;
        })?;
        let name = if gsc {
            "Combo-ID Attention".to_string()
        } else {
            "Combo-ID Attention(w/o gsc)".to_string()
        };
        println!("{name} auc={:.6} gauc={:.6}", m.0, m.1);
        gsc_rows.push((name, m));
    }
    write_table(&out_dir.join("ablation_gsc.csv"), &gsc_rows)?;

    // fusion sweep
    let mut fusion_rows = Vec::new();
    for mode in [
        FusionMode::WeightedSum,
        FusionMode::GatedBalance,
        FusionMode::Multiply,
    ] {
        let m = run_variant(&cfg, &train_data, &test_data, |c| {
            c.model.variant = VariantKind::Dual;
            c.fusion.mode = mode;
        })?;
        println!("{} auc={:.6} gauc={:.6}", mode.table_name(), m.0, m.1);
        fusion_rows.push((mode.table_name().to_string(), m));
    }
    write_table(&out_dir.join("ablation_fusion.csv"), &fusion_rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(config: &Path, out_dir: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    let gen = cfg.gen.as_ref().ok_or_else(|| DeattError::Config {
        key: "gen".into(),
        message: "config has no `gen` section".into(),
    })?;
    std::fs::create_dir_all(out_dir)?;
    let files = datagen::generate(gen, out_dir)?;
    println!("wrote {}", files.train_csv.display());
    println!("wrote {}", files.test_csv.display());
    println!("wrote {}", files.sidecar_json.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_collision_probe(k: usize, s: usize, trials: u64, seed: u64) -> Result<ExitCode> {
    let rate = estimate_joint_collision_rate(k, s, trials as usize, seed)?;
    let expected = (1.0 / s as f64).powi(k as i32);
    println!(
        "{}",
        serde_json::json!({
            "k": k,
            "s": s,
            "trials": trials,
            "seed": seed,
            "measured_rate": rate,
            "theoretical_rate": expected,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(config: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::from_file(config)?;
    // synthetic batch: gradient correctness does not depend on real data
    let batch: Vec<Example> = (0..4)
        .map(|i| Example {
            feature_ids: (0..cfg.data.n_fields as u64)
                .map(|f| (cfg.seed ^ (i * 131 + f * 17 + 3)) % 1000)
                .collect(),
            label: (i % 2) as u8,
            session_id: i / 2,
        })
        .collect();
    let report = model_grad_check(&cfg, &batch, 1e-5, 1e-3)?;
    for block in &report.blocks {
        println!(
            "{} {} max_rel_err={:.3e}",
            if block.pass { "PASS" } else { "FAIL" },
            block.name,
            block.max_rel_err,
        );
    }
    if report.pass() {
        println!("gradcheck passed ({} blocks)", report.blocks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(DeattError::NumericAbort {
            step: 0,
            reason: "gradient check failed".into(),
        })
    }
}
