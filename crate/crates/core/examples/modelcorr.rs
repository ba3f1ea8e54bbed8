//! Scratch diagnostic: how similar the trained FR models are to each other.
//! Prints the Pearson correlation of impostor-pair cosine scores between every
//! pair of FR models, over a fresh sample of held-out impostor pairs.
//! Usage: cargo run --example modelcorr -- CONFIG [N_PAIRS]

use sibling_core::config::ExperimentConfig;
use sibling_core::models::{load_surrogate, load_target, FrModel};
use sibling_core::pipeline::{load_dataset, Workspace};
use sibling_core::synthface::{sample_pairs, IdentityPool, PairKind};
use sibling_core::tensor::{Tape, Tensor};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let (mut ca, mut cb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += (x - ma) * (x - ma);
        cb += (y - mb) * (y - mb);
        cab += (x - ma) * (y - mb);
    }
    cab / (ca.sqrt() * cb.sqrt())
}

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = ExperimentConfig::load(std::path::Path::new(&args.next().expect("config"))).unwrap();
    let n_pairs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(400);
    let ws = Workspace::new(&cfg.output_dir);
    let ds = load_dataset(&cfg, &ws).unwrap();
    let sur = load_surrogate(&ws.weight_path("surrogate")).unwrap();

    let mut names = vec!["surrogate".to_string()];
    let mut models: Vec<Box<dyn FrModel>> = Vec::new();
    for spec in cfg.models.fr_targets.iter().chain(cfg.models.white_box_fr.iter()) {
        names.push(spec.id.clone());
        models.push(Box::new(load_target(&ws.weight_path(&spec.id)).unwrap()));
    }

    let pairs = sample_pairs(&ds, PairKind::Impostor, IdentityPool::Heldout, n_pairs, 77707).unwrap();
    let flat = |t: &Tensor| t.with_shape(vec![t.data().len()]).unwrap();
    let tape = Tape::new();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for p in &pairs.pairs {
        let xa = flat(&ds.samples[p.attacker].image);
        let xv = flat(&ds.samples[p.victim].image);
        let ea = sur.fr_embed(&tape, &xa).unwrap();
        let ev = sur.fr_embed(&tape, &xv).unwrap();
        scores[0].push(tape.cosine_similarity(&ea, &ev).unwrap().item());
        for (k, m) in models.iter().enumerate() {
            let ea = m.embed(&tape, &xa).unwrap();
            let ev = m.embed(&tape, &xv).unwrap();
            scores[k + 1].push(tape.cosine_similarity(&ea, &ev).unwrap().item());
        }
    }
    println!("impostor-score Pearson correlations over {} pairs:", pairs.pairs.len());
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            println!("  {:<12} vs {:<12} r = {:.3}", names[i], names[j], pearson(&scores[i], &scores[j]));
        }
    }
}
