//! Scratch diagnostic: dumps per-pair adversarial cosine scores as CSV —
//! one row per pair, one column per (algorithm, model) combination.
//! Usage: cargo run --example pairscores -- CONFIG ALG [ALG...] > scores.csv

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

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = ExperimentConfig::load(std::path::Path::new(&args.next().expect("config"))).unwrap();
    let algs: Vec<Algorithm> = args.map(|a| Algorithm::parse(&a).unwrap()).collect();
    let ws = Workspace::new(&cfg.output_dir);
    let ds = sibling_core::pipeline::load_dataset(&cfg, &ws).unwrap();
    let sur = load_surrogate(&ws.weight_path("surrogate")).unwrap();
    let tgt_a = load_target(&ws.weight_path("target_fr_a")).unwrap();
    let flat = |t: &Tensor| t.with_shape(vec![t.data().len()]).unwrap();
    let tape = Tape::new();

    let mut header = vec!["pair".to_string(), "attr_hamming".to_string()];
    for alg in &algs {
        header.push(format!("{}_wb", alg.name()));
        header.push(format!("{}_tgt", alg.name()));
    }
    println!("{}", header.join(","));

    let archives: Vec<_> = algs
        .iter()
        .map(|&alg| load_attack_archive(&ws.archive_path(alg), alg).unwrap())
        .collect();
    let n = archives[0].pairs.len();
    for i in 0..n {
        let p0 = &archives[0].pairs[i];
        let sa = &ds.samples[p0.attacker];
        let sv = &ds.samples[p0.victim];
        let hamming: usize = sa
            .attributes
            .iter()
            .zip(sv.attributes.iter())
            .filter(|(a, v)| a != v)
            .count();
        let mut row = vec![format!("{i}"), format!("{hamming}")];
        for arc in &archives {
            let p = &arc.pairs[i];
            assert_eq!(p.attacker, p0.attacker);
            let xa = flat(&p.x_adv);
            let xv = flat(&sv.image);
            let wb = cos(
                &sur.fr_embed(&tape, &xa).unwrap(),
                &sur.fr_embed(&tape, &xv).unwrap(),
            );
            let tg = cos(
                &tgt_a.fr_embed(&tape, &xa).unwrap(),
                &tgt_a.fr_embed(&tape, &xv).unwrap(),
            );
            row.push(format!("{wb:.6}"));
            row.push(format!("{tg:.6}"));
        }
        println!("{}", row.join(","));
    }
}
