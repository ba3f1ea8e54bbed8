//! Scratch diagnostic: per-arm ASR at calibrated thresholds plus white-box
//! loss quantiles, computed straight from attack archives.
//! Usage: cargo run --example diag -- CONFIG ALG [ALG...]

use sibling_core::config::ExperimentConfig;
use sibling_core::models::{load_surrogate, load_target};
use sibling_core::pipeline::{load_attack_archive, Algorithm, Workspace};
use sibling_core::tensor::{Tape, Tensor};

fn cos(a: &Tensor, b: &Tensor) -> f64 {
    let (mut ssa, mut ssb, mut dot) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        ssa += x * x;
        ssb += y * y;
        dot += x * y;
    }
    dot / (ssa.sqrt() * ssb.sqrt())
}

fn tau(ws: &Workspace, id: &str) -> f64 {
    let txt = std::fs::read_to_string(ws.calibration_path(id)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&txt).unwrap();
    v["tau"].as_f64().unwrap()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = ExperimentConfig::load(std::path::Path::new(&args.next().expect("config"))).unwrap();
    let ws = Workspace::new(&cfg.output_dir);
    let ds = sibling_core::pipeline::load_dataset(&cfg, &ws).unwrap();
    let sur = load_surrogate(&ws.weight_path("surrogate")).unwrap();
    let names = ["surrogate_fr", "target_fr_a", "target_fr_b"];
    let tgts: Vec<_> = names
        .iter()
        .skip(1)
        .map(|n| load_target(&ws.weight_path(n)).unwrap())
        .collect();
    let taus: Vec<f64> = names.iter().map(|n| tau(&ws, n)).collect();
    let flat = |t: &Tensor| t.with_shape(vec![t.data().len()]).unwrap();
    println!(
        "taus: {}",
        names
            .iter()
            .zip(&taus)
            .map(|(n, t)| format!("{n}={t:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    for name in args {
        let alg = Algorithm::parse(&name).unwrap();
        let arc = load_attack_archive(&ws.archive_path(alg), alg).unwrap();
        let mut hits = [0usize; 3];
        let mut wb_losses = Vec::new();
        for p in &arc.pairs {
            let tape = Tape::new();
            let xv = flat(&ds.samples[p.victim].image);
            let xa = flat(&p.x_adv);
            let scores = [
                cos(&sur.fr_embed(&tape, &xa).unwrap(), &sur.fr_embed(&tape, &xv).unwrap()),
                cos(&tgts[0].fr_embed(&tape, &xa).unwrap(), &tgts[0].fr_embed(&tape, &xv).unwrap()),
                cos(&tgts[1].fr_embed(&tape, &xa).unwrap(), &tgts[1].fr_embed(&tape, &xv).unwrap()),
            ];
            for (h, (s, t)) in hits.iter_mut().zip(scores.iter().zip(taus.iter())) {
                if s >= t {
                    *h += 1;
                }
            }
            wb_losses.push(1.0 - scores[0]);
        }
        wb_losses.sort_by(f64::total_cmp);
        let n = arc.pairs.len();
        println!(
            "{:<12} asr: wb={:.3} fr_a={:.3} fr_b={:.3} | wb loss p50={:.4} p90={:.4}",
            name,
            hits[0] as f64 / n as f64,
            hits[1] as f64 / n as f64,
            hits[2] as f64 / n as f64,
            wb_losses[n / 2],
            wb_losses[9 * n / 10]
        );
    }
}
