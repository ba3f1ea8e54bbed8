//! Scratch diagnostic: dumps the calibration impostor scores (model,score per
//! row) for the surrogate FR branch and each black-box FR target, using the
//! same pair sampling as the calibrate stage.
//! Usage: cargo run --example calscores -- CONFIG > cal.csv

use sibling_core::config::ExperimentConfig;
use sibling_core::eval::pair_scores;
use sibling_core::models::{load_surrogate, load_target, FrModel};
use sibling_core::pipeline::{load_dataset, Workspace};
use sibling_core::synthface::{sample_pairs, IdentityPool, PairKind};

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = ExperimentConfig::load(std::path::Path::new(&args.next().expect("config"))).unwrap();
    let ws = Workspace::new(&cfg.output_dir);
    let ds = load_dataset(&cfg, &ws).unwrap();
    let pairs = sample_pairs(
        &ds,
        PairKind::Impostor,
        IdentityPool::Heldout,
        cfg.eval.n_calibration_pairs,
        cfg.eval.calibration_seed,
    )
    .unwrap();

    let mut models: Vec<(String, Box<dyn FrModel>)> = vec![(
        "surrogate_fr".to_string(),
        Box::new(load_surrogate(&ws.weight_path("surrogate")).unwrap()),
    )];
    for spec in &cfg.models.fr_targets {
        models.push((
            spec.id.clone(),
            Box::new(load_target(&ws.weight_path(&spec.id)).unwrap()),
        ));
    }
    println!("model,score");
    for (name, model) in &models {
        for s in pair_scores(model.as_ref(), &ds, &pairs).unwrap() {
            println!("{name},{s:.17}");
        }
    }
}
