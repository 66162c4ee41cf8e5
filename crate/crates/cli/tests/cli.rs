//! CLI behavior: subcommand examples, byte determinism, pad round-trips,
//! grid layout, and the binary's exit-code/error-line contract.

mod common;

use std::path::Path;
use std::process::Command;
use uwnr_core::checkpoint::{Dtype, ModelCheckpoint};
use uwnr_core::data::{load_image, load_lf_sidecar, save_image};
use uwnr_core::network::{init_params, NetworkConfig};
use uwnr_core::types::DepthMap;

fn tiny_checkpoint(dir: &Path, base: usize, levels: usize) -> std::path::PathBuf {
    let cfg = NetworkConfig {
        base_channels: base,
        depth_levels: levels,
        seed: 5,
        ..NetworkConfig::default()
    };
    let ckpt = init_params(&cfg).unwrap();
    let path = dir.join(format!("model_b{base}_l{levels}.uwnr"));
    ckpt.save(&path, Dtype::F32).unwrap();
    path
}

#[test]
fn render_is_byte_deterministic_and_exemplar_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    use rand::SeedableRng;

    let clean = common::smooth_random_image(&mut rng, 32, 32);
    let clean_path = dir.path().join("clean.png");
    save_image(&clean, &clean_path).unwrap();

    let ex_a = common::tinted_exemplar(1, 32, [0.1, 0.6, 0.3]);
    let ex_b = common::tinted_exemplar(2, 32, [0.05, 0.2, 0.8]);
    let ex_a_path = dir.path().join("ex_a.png");
    let ex_b_path = dir.path().join("ex_b.png");
    save_image(&ex_a, &ex_a_path).unwrap();
    save_image(&ex_b, &ex_b_path).unwrap();

    let ckpt = tiny_checkpoint(dir.path(), 8, 2);

    let render = |exemplar: &Path, out: &Path| {
        uwnr_cli::rendercmd::render_cmd(
            &clean_path,
            None,
            exemplar,
            &ckpt,
            out,
            &[15.0, 60.0, 90.0],
            false,
        )
        .unwrap();
    };

    let out1 = dir.path().join("out1.png");
    let out2 = dir.path().join("out2.png");
    let out_b = dir.path().join("out_b.png");
    render(&ex_a_path, &out1);
    render(&ex_a_path, &out2);
    render(&ex_b_path, &out_b);

    // same inputs twice -> byte-identical
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());

    // two exemplars -> distinct outputs
    let a = load_image(&out1).unwrap();
    let b = load_image(&out_b).unwrap();
    assert!(a.l1_distance(&b).unwrap() > 0.0);
}

#[test]
fn pad_round_trips_250_to_256_and_back() {
    let dir = tempfile::tempdir().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);

    let clean = common::smooth_random_image(&mut rng, 250, 250);
    let exemplar = common::tinted_exemplar(3, 64, [0.1, 0.5, 0.4]);
    let ckpt_path = tiny_checkpoint(dir.path(), 8, 3);
    let ckpt = ModelCheckpoint::load(&ckpt_path).unwrap();

    // without --pad: a shape error mentioning the required padded size
    let depth = DepthMap::vertical_gradient(250, 250);
    let err = uwnr_cli::render_with_exemplar(
        &ckpt,
        &clean,
        &depth,
        &exemplar,
        "e",
        &[5.0],
        false,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("256"), "padding hint missing: {msg}");

    // with --pad: internally 256, output cropped back to 250x250
    assert_eq!(ckpt.config().padded_side(250), 256);
    let out =
        uwnr_cli::render_with_exemplar(&ckpt, &clean, &depth, &exemplar, "e", &[5.0], true)
            .unwrap();
    assert_eq!(out.height(), 250);
    assert_eq!(out.width(), 250);
}

#[test]
fn extract_lf_writes_image_and_lossless_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let exemplar = common::tinted_exemplar(4, 24, [0.2, 0.5, 0.6]);
    let in_path = dir.path().join("exemplar.png");
    save_image(&exemplar, &in_path).unwrap();

    let out_path = dir.path().join("lf.png");
    let sidecar = dir.path().join("lf.uwlf");
    uwnr_cli::rendercmd::extract_lf_cmd(&in_path, &out_path, &[2.0, 4.0], Some(&sidecar))
        .unwrap();

    let quantized = load_image(&out_path).unwrap();
    let lossless = load_lf_sidecar(&sidecar).unwrap();
    assert_eq!(lossless.source_id(), "exemplar");
    assert_eq!(lossless.sigmas(), &[2.0, 4.0]);
    // the sidecar carries the same map at float precision
    let max_diff = quantized
        .tensor()
        .data()
        .iter()
        .zip(lossless.planes().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff <= 1.0 / (2.0 * 255.0) + 1e-7);
}

#[test]
fn synth_dataset_policies_and_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(35);

    // clean images + manifest
    let mut lines = String::new();
    for i in 0..4 {
        let img = common::smooth_random_image(&mut rng, 16, 16);
        let p = dir.path().join(format!("clean{i}.png"));
        save_image(&img, &p).unwrap();
        lines.push_str(&format!(
            "{}\n",
            serde_json::json!({"id": format!("c{i}"), "clean": format!("clean{i}.png")})
        ));
    }
    let clean_manifest = dir.path().join("clean.jsonl");
    std::fs::write(&clean_manifest, lines).unwrap();

    // exemplar pool of two
    let pool = dir.path().join("pool");
    std::fs::create_dir_all(&pool).unwrap();
    save_image(
        &common::tinted_exemplar(6, 16, [0.1, 0.6, 0.3]),
        &pool.join("green.png"),
    )
    .unwrap();
    save_image(
        &common::tinted_exemplar(7, 16, [0.1, 0.2, 0.8]),
        &pool.join("blue.png"),
    )
    .unwrap();

    let ckpt = tiny_checkpoint(dir.path(), 4, 1);
    let job = |policy, fixed: Option<String>, out: &str| uwnr_cli::synthcmd::SynthJob {
        clean_manifest: clean_manifest.clone(),
        exemplar_dir: pool.clone(),
        checkpoint: ckpt.clone(),
        out_dir: dir.path().join(out),
        policy,
        fixed_exemplar: fixed,
        sigmas: vec![2.0, 4.0],
        seed: 9,
        pad: false,
    };

    // fixed policy: every provenance record uses that exemplar
    let fixed = job(
        uwnr_cli::synthcmd::PairingPolicy::Fixed,
        Some("blue.png".into()),
        "fixed",
    );
    let n = uwnr_cli::synthcmd::synth_dataset_cmd(&fixed).unwrap();
    assert_eq!(n, 4);
    let prov = std::fs::read_to_string(dir.path().join("fixed/provenance.jsonl")).unwrap();
    let ids: Vec<serde_json::Value> = prov
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(ids.len(), 4);
    assert!(ids.iter().all(|r| r["exemplar"] == "blue"));
    let unique: std::collections::HashSet<&str> =
        ids.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(unique.len(), 4, "ids unique");

    // round-robin alternates over the sorted pool
    let rr = job(uwnr_cli::synthcmd::PairingPolicy::RoundRobin, None, "rr");
    uwnr_cli::synthcmd::synth_dataset_cmd(&rr).unwrap();
    let prov = std::fs::read_to_string(dir.path().join("rr/provenance.jsonl")).unwrap();
    let ex: Vec<String> = prov
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["exemplar"]
            .as_str()
            .unwrap()
            .to_string())
        .collect();
    assert_eq!(ex, vec!["blue", "green", "blue", "green"]);

    // the synthesized tree carries a loadable manifest
    let manifest =
        uwnr_core::data::Manifest::load(&dir.path().join("fixed/manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 4);
}

#[test]
fn grid_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);

    let mut inputs = Vec::new();
    for i in 0..4 {
        let img = common::smooth_random_image(&mut rng, 20, 20);
        let p = dir.path().join(format!("in{i}.png"));
        save_image(&img, &p).unwrap();
        inputs.push(p);
    }

    // 4 inputs -> 2x2 grid
    let out = dir.path().join("grid4.png");
    let resized = uwnr_cli::gridcmd::grid_cmd(&inputs, &out).unwrap();
    assert!(resized.is_empty());
    let g = load_image(&out).unwrap();
    // 2 columns x (20 + label 11) tiles + 3 margins of 2
    assert_eq!(g.width(), 2 * 20 + 3 * 2);
    assert_eq!(g.height(), 2 * (20 + 11) + 3 * 2);

    // single input -> the image plus its label strip
    let out1 = dir.path().join("grid1.png");
    uwnr_cli::gridcmd::grid_cmd(&inputs[..1], &out1).unwrap();
    let g1 = load_image(&out1).unwrap();
    assert_eq!(g1.width(), 20 + 2 * 2);
    assert_eq!(g1.height(), 20 + 11 + 2 * 2);

    // deterministic bytes
    let out_again = dir.path().join("grid4_again.png");
    uwnr_cli::gridcmd::grid_cmd(&inputs, &out_again).unwrap();
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(&out_again).unwrap()
    );

    // mixed sizes are resized with a report
    let small = dir.path().join("small.png");
    save_image(&common::smooth_random_image(&mut rng, 10, 10), &small).unwrap();
    let mut mixed = inputs.clone();
    mixed.push(small);
    let resized = uwnr_cli::gridcmd::grid_cmd(&mixed, &dir.path().join("mixed.png")).unwrap();
    assert_eq!(resized, vec!["small".to_string()]);
}

#[test]
fn binary_exit_codes_and_error_line() {
    let exe = env!("CARGO_BIN_EXE_uwnr");
    let dir = tempfile::tempdir().unwrap();

    // failure: missing file -> nonzero exit + single "error:" line
    let out = Command::new(exe)
        .args([
            "render-physical",
            "--clean",
            "/nonexistent.png",
            "--beta",
            "0.1,0.2,0.3",
            "--background",
            "0.2,0.2,0.2",
            "--output",
        ])
        .arg(dir.path().join("x.png"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let error_lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(error_lines.len(), 1, "stderr: {stderr}");
    assert!(error_lines[0].contains("nonexistent.png"));

    // success: exit 0
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(39);
    let clean = common::smooth_random_image(&mut rng, 12, 12);
    let clean_path = dir.path().join("clean.png");
    save_image(&clean, &clean_path).unwrap();
    let out = Command::new(exe)
        .args(["render-physical", "--clean"])
        .arg(&clean_path)
        .args(["--beta", "0.4,0.2,0.1", "--background", "0.1,0.5,0.6", "--output"])
        .arg(dir.path().join("rendered.png"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("rendered.png").exists());

    // make-manifest over a tiny conventional tree
    let root = dir.path().join("tree");
    std::fs::create_dir_all(root.join("uw")).unwrap();
    std::fs::create_dir_all(root.join("ref")).unwrap();
    save_image(&clean, &root.join("uw/a.png")).unwrap();
    save_image(&clean, &root.join("ref/a.png")).unwrap();
    let out = Command::new(exe)
        .args(["make-manifest", "--root"])
        .arg(&root)
        .arg("--out")
        .arg(dir.path().join("m.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 1 records"));
}

#[test]
fn eval_metrics_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);

    let pred_dir = dir.path().join("pred");
    let ref_dir = dir.path().join("ref");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&ref_dir).unwrap();
    for i in 0..3 {
        let img = common::smooth_random_image(&mut rng, 16, 16);
        let noisy = common::smooth_random_image(&mut rng, 16, 16);
        save_image(&img, &ref_dir.join(format!("i{i}.png"))).unwrap();
        save_image(&noisy, &pred_dir.join(format!("i{i}.png"))).unwrap();
    }

    let report_path = dir.path().join("report.json");
    let (report, table) =
        uwnr_cli::evalcmd::eval_metrics_cmd(&pred_dir, &ref_dir, true, &report_path).unwrap();
    assert_eq!(report.per_image.len(), 3);
    assert!(report.fid.is_some());
    assert!(report.embedding_fingerprint.is_some());
    assert!(table.contains("PSNR"));
    assert!(table.contains("FID"));
    assert!(table.contains("UIConM"));

    // the written report parses back into the same shape
    let parsed: uwnr_core::metrics::MetricReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(parsed.per_image.len(), 3);
    parsed.validate().unwrap();
}
