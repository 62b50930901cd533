//! End-to-end tests of the `deatt` binary: exit codes, report files, and
//! ablation table shape.

use std::path::Path;
use std::process::{Command, Output};

fn deatt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deatt"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn toy_config_json(dir: &Path) -> String {
    format!(
        r#"{{
            "seed": 11,
            "data": {{
                "train_path": "{dir}/train.csv",
                "test_path": "{dir}/test.csv",
                "n_fields": 4,
                "embedding_buckets": [64]
            }},
            "model": {{ "variant": "dual", "d": 8, "dnn_widths": [16] }},
            "codebook": {{ "size": 256, "k_siamese": 2 }},
            "train": {{ "epochs": 1, "batch_size": 64 }},
            "gen": {{
                "n_fields": 4,
                "vocab": [50],
                "zipf_exponent": [0.0],
                "planted_pairs": [[0, 1]],
                "interaction_table_buckets": 8,
                "interaction_strength": 1.5,
                "unary_strength": 0.5,
                "base_logit": 0.0,
                "n_train": 600,
                "n_test": 300,
                "session_field": 3,
                "seed": 5
            }}
        }}"#,
        dir = dir.display()
    )
}

fn setup_workspace() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, toy_config_json(dir.path())).unwrap();
    let out = run(deatt()
        .arg("gen")
        .arg("--config")
        .arg(&config_path)
        .arg("--out-dir")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, config_path)
}

#[test]
fn nonexistent_config_exits_2_and_names_path() {
    let out = run(deatt()
        .arg("train")
        .arg("--config")
        .arg("/no/such/config.json"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/no/such/config.json"), "{stderr}");
}

#[test]
fn invalid_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let json = toy_config_json(dir.path()).replace("\"size\": 256", "\"size\": 0");
    std::fs::write(&config_path, json).unwrap();
    let out = run(deatt().arg("train").arg("--config").arg(&config_path));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("codebook.size"), "{stderr}");
}

#[test]
fn train_writes_report_and_checkpoint() {
    let (dir, config_path) = setup_workspace();
    let report = dir.path().join("report.json");
    let ckpt = dir.path().join("model.ckpt");
    let out = run(deatt()
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .arg("--report")
        .arg(&report)
        .arg("--checkpoint")
        .arg(&ckpt));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["final_test_auc"].is_f64());
    assert!(json["final_test_gauc"].is_f64());
    assert!(json["final_test_logloss"].is_f64());
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(&ckpt_bytes[..8], b"DEATTCKP");
}

#[test]
fn verify_mode_reruns_are_byte_identical() {
    let (dir, config_path) = setup_workspace();
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let report = dir.path().join(name);
        let out = run(deatt()
            .arg("train")
            .arg("--config")
            .arg(&config_path)
            .arg("--verify")
            .arg("--report")
            .arg(&report)
            .arg("--checkpoint")
            .arg(dir.path().join("ckpt")));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn ablate_writes_tables_with_expected_rows() {
    let (dir, config_path) = setup_workspace();
    let out = run(deatt()
        .arg("ablate")
        .arg("--config")
        .arg(&config_path)
        .arg("--out-dir")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let variants = std::fs::read_to_string(dir.path().join("ablation_variants.csv")).unwrap();
    let rows: Vec<&str> = variants
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        rows,
        vec![
            "Transformer",
            "Transformer w/o diag",
            "Combo-ID Attention",
            "Collapse-Avoiding Attention",
            "Dual Enhanced Attention",
        ]
    );

    let gsc = std::fs::read_to_string(dir.path().join("ablation_gsc.csv")).unwrap();
    let rows: Vec<&str> = gsc
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, vec!["Combo-ID Attention", "Combo-ID Attention(w/o gsc)"]);

    let fusion = std::fs::read_to_string(dir.path().join("ablation_fusion.csv")).unwrap();
    let rows: Vec<&str> = fusion
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, vec!["Weighted Sum", "Gated Balance", "Multiply"]);
}

#[test]
fn collision_probe_s1_is_certain_collision() {
    let out = run(deatt()
        .arg("collision-probe")
        .arg("--k")
        .arg("2")
        .arg("--s")
        .arg("1")
        .arg("--trials")
        .arg("1000")
        .arg("--seed")
        .arg("3"));
    assert!(out.status.success());
    let json: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(json["measured_rate"].as_f64().unwrap(), 1.0);
}

#[test]
fn collision_probe_k1_s16_near_one_sixteenth() {
    let out = run(deatt()
        .arg("collision-probe")
        .arg("--k")
        .arg("1")
        .arg("--s")
        .arg("16")
        .arg("--trials")
        .arg("200000")
        .arg("--seed")
        .arg("3"));
    assert!(out.status.success());
    let json: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    let rate = json["measured_rate"].as_f64().unwrap();
    assert!((rate - 0.0625).abs() / 0.0625 < 0.1, "{rate}");
}

#[test]
fn gradcheck_passes_on_toy_dual_config() {
    let (_dir, config_path) = setup_workspace();
    let out = run(deatt().arg("gradcheck").arg("--config").arg(&config_path));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn gradcheck_transformer_omits_codebook_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let json = toy_config_json(dir.path()).replace("\"variant\": \"dual\"", "\"variant\": \"transformer\"");
    std::fs::write(&config_path, json).unwrap();
    let out = run(deatt().arg("gradcheck").arg("--config").arg(&config_path));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!stdout.contains("cb0"), "{stdout}");
    assert!(!stdout.contains("subnet"), "{stdout}");
    assert!(stdout.contains("embed.0"), "{stdout}");
}

#[test]
fn bad_thread_env_exits_2() {
    let out = run(deatt()
        .env("DEATT_THREADS", "zero")
        .arg("collision-probe")
        .arg("--k")
        .arg("1")
        .arg("--s")
        .arg("4")
        .arg("--trials")
        .arg("10"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_is_deterministic_across_runs() {
    let (dir_a, _) = setup_workspace();
    let (dir_b, _) = setup_workspace();
    let a = std::fs::read(dir_a.path().join("train.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("train.csv")).unwrap();
    assert_eq!(a, b);
}
