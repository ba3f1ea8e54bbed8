//! Shared fixture for the acceptance suite: runs the full shipped-default
//! pipeline twice (worker pool of 4, then 1) into a temporary directory, once
//! per test binary, and exposes the artifacts plus per-stage wall times.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use sibling_core::config::ExperimentConfig;
use sibling_core::pipeline::{
    cmd_attack, cmd_calibrate, cmd_evaluate, cmd_gen_data, cmd_report, cmd_train, read_report_csv,
    Algorithm, ReportRow, Workspace,
};

pub struct DeskRun {
    pub cfg: ExperimentConfig,
    /// Pipeline run with `--workers 4`.
    pub run_a: PathBuf,
    /// Independent pipeline run with `--workers 1`.
    pub run_b: PathBuf,
    /// Wall time of run A's gen-data, train, and calibrate stages.
    pub setup_time: Duration,
    /// Wall time of each run-A attack arm.
    pub attack_time: Vec<(Algorithm, Duration)>,
    /// Wall time of run A's evaluate stage.
    pub evaluate_time: Duration,
    _dir: tempfile::TempDir,
}

impl DeskRun {
    pub fn workspace_a(&self) -> Workspace {
        Workspace::new(&self.run_a)
    }

    pub fn report_a(&self) -> Vec<ReportRow> {
        read_report_csv(&Workspace::new(&self.run_a).report_csv_path()).expect("run A report")
    }

    /// Report row for one algorithm on one FR model.
    pub fn row(&self, alg: Algorithm, target: &str) -> ReportRow {
        self.report_a()
            .into_iter()
            .find(|r| r.algorithm == alg.label() && r.target == target)
            .unwrap_or_else(|| panic!("report row for {} on {target}", alg.name()))
    }

    pub fn attack_duration(&self, alg: Algorithm) -> Duration {
        self.attack_time
            .iter()
            .find(|(a, _)| *a == alg)
            .map(|(_, d)| *d)
            .expect("arm was run")
    }
}

pub fn shipped_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("configs")
        .join("default.json")
}

fn run_pipeline(cfg: &ExperimentConfig, root: &Path, workers: usize) -> DeskRunTimes {
    let mut times = DeskRunTimes::default();
    let t = Instant::now();
    cmd_gen_data(cfg, root).expect("gen-data");
    cmd_train(cfg, root).expect("train");
    cmd_calibrate(cfg, root).expect("calibrate");
    times.setup = t.elapsed();
    for alg in Algorithm::ALL {
        let t = Instant::now();
        cmd_attack(cfg, root, alg, workers, None).expect("attack");
        times.attack.push((alg, t.elapsed()));
    }
    let t = Instant::now();
    cmd_evaluate(cfg, root).expect("evaluate");
    times.evaluate = t.elapsed();
    cmd_report(cfg, root).expect("report");
    times
}

#[derive(Default)]
struct DeskRunTimes {
    setup: Duration,
    attack: Vec<(Algorithm, Duration)>,
    evaluate: Duration,
}

static DESK_RUN: OnceLock<DeskRun> = OnceLock::new();

/// The shared double pipeline run (computed on first use).
pub fn desk_run() -> &'static DeskRun {
    DESK_RUN.get_or_init(|| {
        let cfg = ExperimentConfig::load(&shipped_config_path()).expect("shipped default config");
        let dir = tempfile::tempdir().expect("tempdir");
        let run_a = dir.path().join("run_a");
        let run_b = dir.path().join("run_b");
        let times_a = run_pipeline(&cfg, &run_a, 4);
        run_pipeline(&cfg, &run_b, 1);
        DeskRun {
            cfg,
            run_a,
            run_b,
            setup_time: times_a.setup,
            attack_time: times_a.attack,
            evaluate_time: times_a.evaluate,
            _dir: dir,
        }
    })
}

/// Prints the per-criterion verdict line and panics on failure.
pub fn verdict(n: usize, what: &str, pass: bool, detail: String) {
    if pass {
        println!("criterion {n} ({what}): PASS — {detail}");
    } else {
        println!("criterion {n} ({what}): FAIL — {detail}");
        panic!("criterion {n} failed: {detail}");
    }
}
