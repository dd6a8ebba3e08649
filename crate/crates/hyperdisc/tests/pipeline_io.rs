//! Dataset files, presets, run directories and the CLI surface.

use std::path::Path;
use std::process::Command;

use hyperdisc::config::{preset, DataSource, RunConfig, Stage};
use hyperdisc::dataset_io::{read_dataset, write_dataset};
use hyperdisc::pipeline::{export_plots, recompute_metrics, run_calibration, run_discovery, RunMetrics, RunOptions};
use hyperdisc::PipelineError;
use hyperdisc_core::dataset::MechanicalTest;
use hyperdisc_core::mechanics::Protocol;

fn sample_tests() -> Vec<MechanicalTest> {
    let ut = MechanicalTest::new(
        "UT",
        Protocol::Uniaxial,
        vec!["P11".parse().unwrap()],
        vec![1.0, 1.25, 1.5],
        vec![vec![0.0, 0.1234567890123, 0.3]],
    )
    .unwrap();
    let bt = MechanicalTest::new(
        "BT 1:0.75",
        Protocol::parse("BT", Some((1.0, 0.75))).unwrap(),
        vec!["sigma_ff".parse().unwrap(), "sigma_nn".parse().unwrap()],
        vec![1.0, 1.05],
        vec![vec![0.0, 0.5], vec![0.0, 1e-17]],
    )
    .unwrap();
    vec![ut, bt]
}

#[test]
fn dataset_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, sidecar) = (dir.path().join("d.csv"), dir.path().join("d.json"));
    let tests = sample_tests();
    write_dataset(&tests, &csv, &sidecar).unwrap();
    assert_eq!(read_dataset(&csv, &sidecar).unwrap(), tests);
    let header = std::fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("test_id,control,stress_P11,stress_sigma_ff,stress_sigma_nn\n"));
}

#[test]
fn malformed_datasets_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, sidecar) = (dir.path().join("d.csv"), dir.path().join("d.json"));
    write_dataset(&sample_tests(), &csv, &sidecar).unwrap();

    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("ghost,1.0,0.0,,\n");
    std::fs::write(&csv, &text).unwrap();
    let e = read_dataset(&csv, &sidecar).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");

    std::fs::write(&csv, "test_id,control,stress_P11\nUT,1.0,abc\n").unwrap();
    assert_eq!(read_dataset(&csv, &sidecar).unwrap_err().exit_code(), 2);
    assert_eq!(read_dataset(&dir.path().join("none.csv"), &sidecar).unwrap_err().exit_code(), 2);
}

#[test]
fn preset_values_are_pinned() {
    let desk = preset("desk-isotropic").unwrap();
    let DataSource::Synthetic { kappa, noise, designs, .. } = &desk.data else {
        panic!("desk preset should be synthetic");
    };
    assert_eq!(kappa.get("c(1,0)"), Some(&0.3));
    assert_eq!(kappa.get("c(0,1)"), Some(&0.1));
    assert_eq!((noise.sigma_min, noise.sigma_r), (0.01, 0.05));
    assert_eq!(designs.len(), 3);
    assert_eq!(desk.grid.points_per_test, 16);
    assert_eq!(desk.schedule.iterations, 2000);
    assert_eq!(desk.refinement.iterations, 1000);
    assert_eq!(desk.library.build().unwrap().n_kappa(), 17);

    let cardiac = preset("cardiac-synthetic").unwrap();
    let DataSource::Synthetic { kappa, .. } = &cardiac.data else {
        panic!("cardiac-synthetic should be synthetic");
    };
    let expected = [
        ("c(2,7)", 5.162),
        ("c(2,12)", 0.081),
        ("w(1,12)", 21.151),
        ("c(2,20)", 0.315),
        ("w(1,20)", 4.371),
        ("c(2,24)", 0.486),
        ("w(1,24)", 0.508),
    ];
    assert_eq!(kappa.len(), expected.len());
    for (k, v) in expected {
        assert_eq!(kappa.get(k), Some(&v), "{k}");
    }
    assert_eq!((cardiac.gp.length_factor, cardiac.critic.lambda, cardiac.sobol.threshold), (0.6, 100.0, 0.01));
    assert_eq!(cardiac.library.build().unwrap().n_kappa(), 30);

    let treloar = preset("treloar").unwrap();
    assert_eq!((treloar.gp.length_factor, treloar.critic.lambda, treloar.sobol.threshold), (0.8, 10.0, 1e-4));
    assert!(matches!(treloar.data, DataSource::Files { .. }));
}

/// A desk preset shrunk to seconds.
fn tiny(name: &str, out: &Path) -> RunConfig {
    let mut c = preset(name).unwrap();
    c.grid.points_per_test = 6;
    c.gp.fit.iterations = 20;
    c.schedule.iterations = 4;
    c.schedule.batch_size = 4;
    c.schedule.history_every = 2;
    c.schedule.checkpoint_every = 2;
    c.critic.n_critic = 2;
    c.flow.n_layers = 2;
    c.refinement.iterations = 3;
    c.sobol.n_base = 64;
    c.sobol.bound_samples = 256;
    c.interval_samples = 1000;
    c.plot_samples = 3;
    c.parameter_samples = 50;
    c.output_dir = out.to_path_buf();
    c
}

fn single_thread() -> RunOptions {
    RunOptions {
        threads: Some(1),
        ..RunOptions::default()
    }
}

#[test]
fn calibration_run_writes_a_reopenable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let run = run_calibration(tiny("desk-calibration", &out), &single_thread()).unwrap();
    assert_eq!(run.models.len(), 1);
    assert!(run.sobol.is_empty());
    for f in ["config.json", "manifest.json", "metrics.json", "gp/posterior.json", "distill/flow_final.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(out.join("distill/history.csv")).unwrap();
    assert!(history.starts_with("iteration,wasserstein,"));
    assert!(out.join("distill/checkpoints/flow_000002.json").is_file());

    let saved = std::fs::read(out.join("metrics.json")).unwrap();
    let recomputed = recompute_metrics(&out, Some(1)).unwrap();
    assert_eq!(recomputed, run.metrics);
    assert_eq!(std::fs::read(out.join("metrics.json")).unwrap(), saved);

    let export = export_plots(&out, Some(2)).unwrap();
    assert_eq!(export.gp_functions.len(), 3);
    assert_eq!(export.model_functions.len(), 3);
    let params = std::fs::read_to_string(export.parameter_samples.unwrap()).unwrap();
    assert_eq!(params.lines().count(), 51);
}

#[test]
fn discovery_is_repeatable_and_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, threads| {
        let out = dir.path().join(sub);
        let opts = RunOptions {
            threads: Some(threads),
            ..RunOptions::default()
        };
        let r = run_discovery(tiny("desk-isotropic", &out), &opts).unwrap();
        (r, std::fs::read(out.join("metrics.json")).unwrap())
    };
    let (a, bytes_a) = run("a", 1);
    let (_, bytes_b) = run("b", 1);
    let (_, bytes_c) = run("c", 3);
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(bytes_a, bytes_c);
    assert_eq!(a.sobol.len(), 1);
    assert!(a.models.len() >= 2, "distill plus at least one refinement");
    let m: RunMetrics = serde_json::from_slice(&bytes_a).unwrap();
    assert_eq!(m.models[0].stage, "distill");
    assert!(m.models[1].stage.starts_with("refine-"));
}

#[test]
fn stage_limit_stops_after_the_gp() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gp-only");
    let opts = RunOptions {
        stage: Stage::Gp,
        ..single_thread()
    };
    let run = run_discovery(tiny("desk-isotropic", &out), &opts).unwrap();
    assert!(run.models.is_empty());
    assert!(out.join("gp/posterior.json").is_file());
    assert!(!out.join("distill").exists());
    // Plot export still works with the GP alone.
    let export = export_plots(&out, None).unwrap();
    assert!(export.model_functions.is_empty());
    assert_eq!(export.gp_functions.len(), 3);
}

#[test]
fn reopening_an_empty_directory_reports_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let e = export_plots(dir.path(), None).unwrap_err();
    assert!(matches!(e, PipelineError::MissingStage { stage: Stage::Gp, .. }), "{e}");
    assert!(recompute_metrics(dir.path(), None).is_err());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hyperdisc")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // The Treloar preset expects data/treloar.csv relative to the working directory.
    let out = Command::new(env!("CARGO_BIN_EXE_hyperdisc"))
        .current_dir(dir.path())
        .args(["discover", "--preset", "treloar", "-q"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    assert_eq!(cli(&["discover", "--preset", "no-such-preset"]).status.code(), Some(2));
    assert_eq!(cli(&["calibrate"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"gp": {"length_factor": 1.5}}"#).unwrap();
    let out = cli(&["discover", "--preset", "desk-isotropic", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(cli(&["export-plots", "--run", empty.to_str().unwrap()]).status.code(), Some(4));
    assert!(cli(&["--help"]).status.success());
}

#[test]
fn config_file_overrides_merge_over_presets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 9, "data": {"csv": "m.csv", "sidecar": "m.json"}}"#).unwrap();
    let c = hyperdisc::config::load(Some(&path), Some("treloar")).unwrap();
    assert_eq!(c.seed, 9);
    let DataSource::Files { csv, sidecar } = &c.data else {
        panic!("treloar reads files");
    };
    assert_eq!(csv, &dir.path().join("m.csv"));
    assert_eq!(sidecar, &dir.path().join("m.json"));
    assert_eq!(c.gp.length_factor, 0.8);
}
