use equirl::agents::ReplayBuffer;
use equirl::sim::{Sim, Task};
use equirl_cli::config::{Algorithm, RunConfig};
use equirl_cli::plot::{aggregate, load_curves, render_svg};
use equirl_cli::train::{load_demonstrations, load_run, read_log, train, EvalRow, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, LOG_HEADER};
use equirl_cli::verify::{run_suite, Suite, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;

fn tiny(algorithm: Algorithm) -> RunConfig {
    let mut c = RunConfig::for_algorithm(Task::Pull, algorithm);
    c.total_steps = 1000;
    c.eval_episodes = 2;
    c.demo_episodes = 2;
    c.dqn.widths = vec![1, 2, 2, 2, 2, 2];
    c.dqn.batch = 8;
    c.sac.widths = vec![1, 2, 2, 2, 2, 2, 2];
    c.sac.batch = 8;
    c.replay.capacity = 5000;
    if !algorithm.is_dqn() {
        c.resolution = 16;
        c.task = Task::Pick;
    }
    c
}

fn log_text(dir: &Path) -> String {
    std::fs::read_to_string(dir.join(LOG_FILE)).unwrap()
}

#[test]
fn runs_are_deterministic_and_reproducible_from_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Algorithm::EquiDqn);
    let a = train(&cfg, &tmp.path().join("a"), &mut |_| {}).unwrap();
    train(&cfg, &tmp.path().join("b"), &mut |_| {}).unwrap();
    let first = log_text(&tmp.path().join("a"));
    assert_eq!(first, log_text(&tmp.path().join("b")));

    let snapshot = RunConfig::load(tmp.path().join("a").join(CONFIG_FILE)).unwrap();
    assert_eq!(snapshot, cfg);
    train(&snapshot, &tmp.path().join("c"), &mut |_| {}).unwrap();
    assert_eq!(first, log_text(&tmp.path().join("c")));

    // Rows sit exactly on the evaluation grid and parse back.
    let steps: Vec<u64> = a.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![500, 1000]);
    assert_eq!(read_log(tmp.path().join("a").join(LOG_FILE)).unwrap(), a.rows);
    assert!(first.starts_with(LOG_HEADER));
}

#[test]
fn sac_runs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Algorithm::EquiSacfd);
    cfg.total_steps = 500;
    train(&cfg, &tmp.path().join("a"), &mut |_| {}).unwrap();
    train(&cfg, &tmp.path().join("b"), &mut |_| {}).unwrap();
    assert_eq!(log_text(&tmp.path().join("a")), log_text(&tmp.path().join("b")));
}

#[test]
fn demonstrations_fill_the_buffer() {
    for (algorithm, aug) in [(Algorithm::EquiDqn, 4), (Algorithm::EquiSacfd, 4), (Algorithm::AugDqn, 2), (Algorithm::PlainDqn, 4)] {
        let mut cfg = tiny(algorithm);
        cfg.demo_episodes = 5;
        cfg.replay.aug_factor = aug;
        let sim = Sim::new(cfg.sim_config()).unwrap();
        let mut buffer = ReplayBuffer::new(cfg.replay_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let steps = load_demonstrations(&cfg, &sim, &mut buffer, &mut rng).unwrap();
        let factor = if algorithm == Algorithm::PlainDqn { 0 } else { aug };
        assert_eq!(buffer.len(), steps * (1 + factor), "{algorithm}");
        assert!(steps >= cfg.demo_episodes && steps <= cfg.demo_episodes * cfg.sim.max_steps);
        // Every demonstration ends in success, so exactly one terminal
        // transition per episode among the unaugmented entries.
        let terminal = (0..buffer.len()).filter(|&i| buffer.get(i).unwrap().done).count();
        assert_eq!(terminal, cfg.demo_episodes * (1 + factor), "{algorithm}");
        assert!((0..buffer.len()).all(|i| buffer.get(i).unwrap().is_expert));
    }
}

#[test]
fn run_directory_holds_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Algorithm::PlainDqn);
    cfg.total_steps = 500;
    let dir = tmp.path().join("run");
    let out = train(&cfg, &dir, &mut |_| {}).unwrap();
    assert!(dir.join(CHECKPOINT_FILE).exists());
    assert!(!dir.join("checkpoint.tmp").exists());
    let (loaded, agent) = load_run(&dir).unwrap();
    assert_eq!(loaded, cfg);
    let sim = Sim::new(cfg.sim_config()).unwrap();
    let e = equirl_cli::train::evaluate(&agent, &sim, cfg.task, 4, cfg.eval_episodes, cfg.gamma()).unwrap();
    assert_eq!(e.row(500), out.rows[0]);
}

#[test]
fn stop_at_success_ends_early() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Algorithm::EquiDqn);
    cfg.stop_at_success = Some(0.0);
    let out = train(&cfg, &tmp.path().join("run"), &mut |_| {}).unwrap();
    assert_eq!(out.rows.len(), 1);
}

#[test]
fn invalid_config_fields_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Algorithm::EquiDqn);
    cfg.eval_period = 7;
    let err = train(&cfg, tmp.path(), &mut |_| {}).unwrap_err();
    assert!(format!("{err:#}").contains("eval_period"));
    let err = RunConfig::from_toml("[sim]\nworkspace = 0.1").unwrap_err();
    assert!(format!("{err:#}").contains("sim"), "{err:#}");
    let err = RunConfig::from_toml("[sim]\nradius = 0.1").unwrap_err();
    assert!(format!("{err:#}").contains("radius"), "{err:#}");
    let c = RunConfig::from_toml("[sim]\nworkspace = 0.3").unwrap();
    assert_eq!(c.sim_config().workspace, 0.3);
}

#[test]
fn dqn_defaults_to_uniform_replay_and_sacfd_to_prioritized() {
    assert!(!RunConfig::for_algorithm(Task::Pull, Algorithm::EquiDqn).replay_config().prioritized);
    assert!(RunConfig::for_algorithm(Task::Pick, Algorithm::EquiSacfd).replay_config().prioritized);
    assert_eq!(RunConfig::for_algorithm(Task::Pull, Algorithm::EquiDqn).demo_episodes, 100);
    assert_eq!(RunConfig::for_algorithm(Task::Pick, Algorithm::EquiSacfd).demo_episodes, 20);
}

fn row(step: u64, r: f64) -> EvalRow {
    EvalRow {
        step,
        return_mean: r,
        return_stderr: 0.0,
        success_rate: 0.0,
    }
}

#[test]
fn band_is_mean_plus_minus_standard_error() {
    let seeds = [[0.0, 0.2, 0.4], [0.2, 0.2, 0.8], [0.1, 0.5, 0.6], [0.1, 0.3, 0.2]];
    let runs: Vec<Vec<EvalRow>> = seeds
        .iter()
        .map(|s| s.iter().enumerate().map(|(j, &r)| row(500 * (j as u64 + 1), r)).collect())
        .collect();
    let c = aggregate("equi", &runs).unwrap();
    // By hand: step 500 has values 0, .2, .1, .1 -> mean .1, sample
    // variance .02/3, stderr sqrt(.02/12).
    assert!((c.mean[0] - 0.1).abs() < 1e-12);
    assert!((c.stderr.as_ref().unwrap()[0] - (0.02f64 / 12.0).sqrt()).abs() < 1e-12);
    // Step 1500: .4, .8, .6, .2 -> mean .5, deviations sum of squares .2.
    assert!((c.mean[2] - 0.5).abs() < 1e-12);
    assert!((c.stderr.as_ref().unwrap()[2] - (0.2f64 / 12.0).sqrt()).abs() < 1e-12);
    let svg = render_svg(&[c], "toy");
    assert_eq!(svg.matches("<polygon class=\"band\"").count(), 1);
}

#[test]
fn single_run_is_unshaded_and_grids_must_match() {
    let one = vec![vec![row(500, 0.1), row(1000, 0.3)]];
    let c = aggregate("plain", &one).unwrap();
    assert!(c.stderr.is_none());
    let svg = render_svg(&[c], "");
    assert_eq!(svg.matches("<polyline class=\"mean\"").count(), 1);
    assert!(!svg.contains("<polygon"));
    let bad = vec![vec![row(500, 0.1), row(1000, 0.3)], vec![row(500, 0.1), row(1500, 0.3)]];
    assert!(aggregate("x", &bad).unwrap_err().to_string().contains("step grid"));
}

fn write_log(path: &Path, rows: &[EvalRow]) {
    let mut text = format!("{LOG_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn curves_group_by_label() {
    let tmp = tempfile::tempdir().unwrap();
    let paths: Vec<String> = (0..3)
        .map(|i| {
            let p = tmp.path().join(format!("s{i}.csv"));
            write_log(&p, &[row(500, i as f64), row(1000, 1.0)]);
            p.display().to_string()
        })
        .collect();
    let args = vec![
        format!("equi={}", paths[0]),
        format!("plain={}", paths[1]),
        format!("equi={}", paths[2]),
    ];
    let curves = load_curves(&args).unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0].label, "equi");
    assert_eq!(curves[0].mean, vec![1.0, 1.0]);
    assert!(curves[1].stderr.is_none());
}

#[test]
fn injected_fault_fails_the_equivariance_suite() {
    let clean = run_suite(Suite::Equivariance, &VerifyOptions::default()).unwrap();
    assert!(clean.passed(), "{clean}");
    let faulty = run_suite(Suite::Equivariance, &VerifyOptions { inject_fault: true, seed: 0 }).unwrap();
    assert!(!faulty.passed());
    assert!(faulty.check("dqn q-map f64").is_some_and(|c| !c.passed()));
    let text = faulty.to_string();
    assert!(text.contains("max deviation") && text.contains("FAIL"));
}

#[test]
fn binary_verify_and_plot() {
    let exe = env!("CARGO_BIN_EXE_equirl");
    let ok = Command::new(exe).args(["verify", "schur", "optimal_q"]).output().unwrap();
    assert!(ok.status.success());
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("schur: PASS") && text.contains("optimal_q: PASS"), "{text}");
    let bad = Command::new(exe).args(["verify", "equivariance", "--inject-fault"]).output().unwrap();
    assert!(!bad.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("a.csv");
    write_log(&csv, &[row(500, 0.2), row(1000, 0.4)]);
    let out = tmp.path().join("fig.svg");
    let status = Command::new(exe)
        .args(["plot", csv.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("<svg"));
}

#[test]
fn binary_train_uses_the_runs_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    let mut cfg = tiny(Algorithm::EquiDqn);
    cfg.total_steps = 500;
    cfg.save(&cfg_path).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_equirl"))
        .env("EQUIRL_RUNS", tmp.path())
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--seed", "3"])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let dir = tmp.path().join("equi_dqn-pull-s3");
    assert_eq!(read_log(dir.join(LOG_FILE)).unwrap().len(), 1);
    let eval = Command::new(env!("CARGO_BIN_EXE_equirl"))
        .args(["eval", dir.to_str().unwrap(), "--episodes", "2"])
        .output()
        .unwrap();
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("success_rate"));
}
