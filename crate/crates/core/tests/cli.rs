use std::fs;
use std::path::Path;
use std::process::Command;

use mvocab_core::cli::run;
use mvocab_core::PipelineConfig;

fn mvocab(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["mvocab"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

const SMALL_SPEC: &str = "
seed = 5
n_images = 40
n_queries = 3
positives_per_query = 2
n_train_images = 30
descriptors_per_image = 30
dim = 8
n_patterns = 6
";

/// Writes a small benchmark and shrinks the generated config to fit it.
fn small_benchmark(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let (code, _) = mvocab(&["synth", "--spec", spec.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code, 0);
    let cfg_path = dir.join("pipeline.toml");
    let mut cfg = PipelineConfig::load(&cfg_path).unwrap();
    for v in &mut cfg.vocab {
        v.k = 8;
    }
    cfg.d_out = 12;
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    cfg_path.to_str().unwrap().to_string()
}

#[test]
fn staged_run_matches_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_benchmark(tmp.path());
    let staged = tmp.path().join("staged");
    let staged = staged.to_str().unwrap();
    for stage in ["train-desc-pca", "train-vocab", "encode", "train-reduction", "reduce", "index", "search"] {
        let (code, _) = mvocab(&[stage, "--config", &cfg, "--out", staged]);
        assert_eq!(code, 0, "stage {stage}");
    }
    let (code, staged_eval) = mvocab(&["eval", "--config", &cfg, "--out", staged]);
    assert_eq!(code, 0);

    let (code, piped) = mvocab(&["pipeline", "--config", &cfg, "--threads", "2"]);
    assert_eq!(code, 0);
    assert_eq!(staged_eval, piped);
    assert!(piped.lines().last().unwrap().starts_with("mAP\t"));
    assert_eq!(piped.lines().count(), 4);
    assert_eq!(fs::read_to_string(tmp.path().join("out/eval.tsv")).unwrap(), piped);

    let (code, stats) = mvocab(&["stats", "--config", &cfg]);
    assert_eq!(code, 0);
    assert!(stats.starts_with("complexity\t32\n"));
    assert_eq!(stats.lines().filter(|l| l.starts_with("unique_assignments\t")).count(), 4);
}

#[test]
fn stats_prints_complexity_for_sizes() {
    let (code, out) = mvocab(&["stats", "--ks", "4096,2048,1024,512,256,128"]);
    assert_eq!(code, 0);
    assert_eq!(out, "complexity\t8064\n");
}

#[test]
fn transform_applies_power_law() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.mvsd");
    let output = tmp.path().join("out.mvsd");
    let x = mvocab_core::DescriptorMatrix::new(2, vec![9.0, 16.0]).unwrap();
    mvocab_core::descriptors::save_descriptors(&input, &x).unwrap();
    let (code, _) = mvocab(&[
        "transform",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--power",
        "0.5",
    ]);
    assert_eq!(code, 0);
    let y = mvocab_core::descriptors::load_descriptors(&output).unwrap();
    assert!((y.row(0)[0] - 0.6).abs() < 1e-6 && (y.row(0)[1] - 0.8).abs() < 1e-6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mvocab(&["no-such-command"]).0, 1);
    assert_eq!(mvocab(&["--help"]).0, 0);
    // Missing or invalid config.
    assert_eq!(mvocab(&["encode"]).0, 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "d_out = \"many\"").unwrap();
    assert_eq!(mvocab(&["encode", "--config", bad.to_str().unwrap()]).0, 2);
    // Corrupt input data.
    let input = tmp.path().join("junk.mvsd");
    fs::write(&input, b"MVSDxxxx").unwrap();
    let output = tmp.path().join("o.mvsd");
    let code = mvocab(&["transform", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]).0;
    assert_eq!(code, 3);
}

#[test]
fn binary_reports_exit_status() {
    let status = Command::new(env!("CARGO_BIN_EXE_mvocab"))
        .args(["stats", "--ks", "512,256,128"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(String::from_utf8_lossy(&status.stdout), "complexity\t896\n");
    let status = Command::new(env!("CARGO_BIN_EXE_mvocab")).arg("train-vocab").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}
