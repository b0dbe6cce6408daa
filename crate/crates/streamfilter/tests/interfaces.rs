//! Serialization, config, and command-line interface checks.

mod common;

use std::io::Cursor;
use std::process::Command;

use proptest::prelude::*;

use streamfilter::diagnostics::DiagnosticsReport;
use streamfilter::ensemble::{read_ensemble, write_ensemble, Ensemble};
use streamfilter::rng::SeedTree;
use streamfilter::ssm::{generate_data, read_dataset, write_dataset, SsmHyperParams};

#[test]
fn dataset_file_round_trip() {
    let hyper = SsmHyperParams::new(0.5, 2.0).unwrap();
    let dataset = generate_data(12, 3, hyper, 77).unwrap();
    let mut buf = Vec::new();
    write_dataset(&dataset, &mut buf).unwrap();
    let back = read_dataset(&mut Cursor::new(&buf)).unwrap();
    let mut buf2 = Vec::new();
    write_dataset(&back, &mut buf2).unwrap();
    assert_eq!(buf, buf2, "round trip must be byte-exact");
}

#[test]
fn ensemble_file_round_trip() {
    let mut rng = SeedTree::new(3).rng();
    let samples: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..4).map(|_| rand::Rng::gen::<f64>(&mut rng) * 10.0 - 5.0).collect())
        .collect();
    let ens = Ensemble::new(7, samples).unwrap();
    let mut buf = Vec::new();
    write_ensemble(&ens, "gf", 123, &mut buf).unwrap();
    let (back, model, seed) = read_ensemble(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(model, "gf");
    assert_eq!(seed, 123);
    assert_eq!(back.t(), 7);
    assert_eq!(back.samples(), ens.samples());
}

proptest! {
    #[test]
    fn dataset_round_trip_preserves_arbitrary_observations(
        values in proptest::collection::vec(-1e12f64..1e12, 1..40),
        n in 1usize..4,
    ) {
        // values are re-shaped into batches; serialization must preserve
        // every bit of every observation
        let hyper = SsmHyperParams::new(1.0, 1.0).unwrap();
        let horizon = (values.len() + n - 1) / n;
        let mut dataset = generate_data(horizon, n, hyper, 1).unwrap();
        let mut it = values.iter();
        for batch in dataset.batches.iter_mut() {
            for v in batch.values.iter_mut() {
                if let Some(&x) = it.next() {
                    *v = x;
                }
            }
        }
        let mut buf = Vec::new();
        write_dataset(&dataset, &mut buf).unwrap();
        let back = read_dataset(&mut Cursor::new(&buf)).unwrap();
        for (a, b) in dataset.batches.iter().zip(back.batches.iter()) {
            prop_assert_eq!(a.t, b.t);
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn diagnostics_report_layout() {
    let mut report = DiagnosticsReport::default();
    report.push(3, 0, "gamma_f", 0.25);
    let mut buf = Vec::new();
    report.write(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,coordinate,metric,value");
    let row = lines.next().unwrap();
    assert!(row.starts_with("3,0,gamma_f,"));
    assert!(row.contains("2.5"));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamfilter"))
}

#[test]
fn cli_smoke_degradation_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(
        &config,
        "grid_n = 2\n\
         grid_sigma2 = 1.0\n\
         ensemble_size = 60\n\
         burn_in = 30\n\
         iters = 90\n\
         gf_steps = 2\n\
         stopping_m = 2\n\
         seed = 4\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["degradation", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--smoke")
        .status()
        .unwrap();
    assert!(status.success());
    let metrics = out.join("degradation_metrics.csv");
    let first = std::fs::read(&metrics).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("sampler,n,sigma2,"));

    // identical re-run must be byte-identical
    let status = bin()
        .args(["degradation", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--smoke")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(first, std::fs::read(&metrics).unwrap());

    let status = bin()
        .args(["timing", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--smoke")
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["timing_steps.csv", "timing_times.csv", "timing_breakeven.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn cli_seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(
        &config,
        "grid_n = 2\n\
         grid_sigma2 = 1.0\n\
         ensemble_size = 60\n\
         burn_in = 30\n\
         iters = 90\n\
         gf_steps = 2\n\
         seed = 4\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "4"), (&out_b, "5")] {
        let status = bin()
            .args(["degradation", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--seed", seed, "--smoke"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out_a.join("degradation_metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("degradation_metrics.csv")).unwrap();
    assert_ne!(a, b, "different seeds must produce different draws");
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "not_a_key = 1\n").unwrap();
    let status = bin()
        .args(["degradation", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(!status.success());

    let good = dir.path().join("good.conf");
    std::fs::write(&good, "seed = 1\n").unwrap();
    let status = bin()
        .args(["frobnicate", "--config"])
        .arg(&good)
        .status()
        .unwrap();
    assert!(!status.success());

    let status = bin()
        .args(["degradation", "--config"])
        .arg(dir.path().join("missing.conf"))
        .status()
        .unwrap();
    assert!(!status.success());
}

#[test]
fn quadrature_helper_matches_gaussian_moments() {
    // sanity for the shared oracle used by the acceptance suite
    let (mass, mean, var) = common::quad_moments(
        |x: f64| -0.5 * (x - 1.5_f64).powi(2) / 0.49,
        1.5 - 10.0 * 0.7,
        1.5 + 10.0 * 0.7,
        4000,
    );
    let expected_mass = (2.0 * std::f64::consts::PI * 0.49).sqrt();
    assert!((mass - expected_mass).abs() / expected_mass < 1e-10);
    assert!((mean - 1.5).abs() < 1e-10);
    assert!((var - 0.49).abs() < 1e-10);
}

#[test]
fn mann_kendall_detects_trends() {
    let down: Vec<f64> = (0..20).map(|i| 10.0 - 0.5 * i as f64).collect();
    assert!(common::mann_kendall_z(&down) < -1.645);
    let up: Vec<f64> = (0..20).map(|i| i as f64).collect();
    assert!(common::mann_kendall_z(&up) > 1.645);
    let flat = vec![1.0; 20];
    assert_eq!(common::mann_kendall_z(&flat), 0.0);
}
