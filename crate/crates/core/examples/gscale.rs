//! Scratch diagnostic: how the two surrogate branches compete inside the
//! joint-loss sign. For sampled attack pairs, replays a joint trajectory and
//! prints per-branch input-gradient magnitudes, the fraction of pixels where
//! the branches disagree in sign, and who wins the disagreements.
//! Usage: cargo run --example gscale -- CONFIG [N_PAIRS]

use sibling_core::attack::{adv_loss_with, branch_features, project, sign, Branch};
use sibling_core::config::ExperimentConfig;
use sibling_core::models::load_surrogate;
use sibling_core::pipeline::{load_dataset, Workspace};
use sibling_core::synthface::{sample_pairs, IdentityPool, PairKind};
use sibling_core::tensor::{Tape, Tensor};

fn branch_g(
    model: &sibling_core::models::SurrogateModel,
    branch: Branch,
    f_v: &Tensor,
    x_a: &Tensor,
    eps: &[f64],
) -> Vec<f64> {
    let tape = Tape::new();
    let eps_leaf = tape.leaf(&Tensor::from_vec(vec![eps.len()], eps.to_vec()).unwrap());
    let x_adv = tape.add(&eps_leaf, x_a).unwrap();
    let loss = adv_loss_with(model, &tape, branch, &x_adv, f_v).unwrap();
    let grads = tape.backward(&loss).unwrap();
    grads.wrt(&eps_leaf).unwrap().to_vec()
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg = ExperimentConfig::load(std::path::Path::new(&args.next().expect("config"))).unwrap();
    let n_pairs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(8);
    let ws = Workspace::new(&cfg.output_dir);
    let ds = load_dataset(&cfg, &ws).unwrap();
    let sur = load_surrogate(&ws.weight_path("surrogate")).unwrap();
    let pairs = sample_pairs(
        &ds,
        PairKind::Impostor,
        IdentityPool::Heldout,
        cfg.eval.n_attack_pairs,
        cfg.attack.seed,
    )
    .unwrap();
    let acfg = cfg.attack.to_attack_config();
    let probe_iters = [0usize, 10, 50, 100, 199];

    // Accumulators per probe iteration: [mean|g_fr|, mean|g_ar|, frac sign
    // disagree, frac of disagreements won by AR magnitude].
    let mut acc = vec![[0.0f64; 4]; probe_iters.len()];

    for p in pairs.pairs.iter().take(n_pairs) {
        let x_a = ds.samples[p.attacker].image.with_shape(vec![256]).unwrap();
        let x_v = ds.samples[p.victim].image.with_shape(vec![256]).unwrap();
        let setup = Tape::new();
        let f_v_fr = branch_features(&sur, &setup, Branch::Fr, &x_v).unwrap();
        let f_v_ar = branch_features(&sur, &setup, Branch::Ar, &x_v).unwrap();
        let mut eps = vec![0.0f64; 256];
        for t in 0..acfg.iterations {
            let g_fr = branch_g(&sur, Branch::Fr, &f_v_fr, &x_a, &eps);
            let g_ar = branch_g(&sur, Branch::Ar, &f_v_ar, &x_a, &eps);
            if let Some(k) = probe_iters.iter().position(|&q| q == t) {
                let mut disagree = 0usize;
                let mut ar_wins = 0usize;
                for j in 0..256 {
                    if sign(g_fr[j]) != 0.0 && sign(g_ar[j]) != 0.0 && sign(g_fr[j]) != sign(g_ar[j])
                    {
                        disagree += 1;
                        if acfg.lambda2 * g_ar[j].abs() > acfg.lambda1 * g_fr[j].abs() {
                            ar_wins += 1;
                        }
                    }
                }
                acc[k][0] += mean_abs(&g_fr);
                acc[k][1] += mean_abs(&g_ar);
                acc[k][2] += disagree as f64 / 256.0;
                acc[k][3] += if disagree > 0 {
                    ar_wins as f64 / disagree as f64
                } else {
                    0.0
                };
            }
            // Joint signed step, mirroring the joint-loss baseline.
            for j in 0..256 {
                let g = acfg.lambda1 * g_fr[j] + acfg.lambda2 * g_ar[j];
                eps[j] -= acfg.alpha * sign(g);
            }
            project(&mut eps, x_a.data(), acfg.xi);
        }
    }
    let n = n_pairs as f64;
    println!("iter  mean|g_fr|   mean|g_ar|   disagree%  ar-wins%");
    for (k, &t) in probe_iters.iter().enumerate() {
        println!(
            "{t:>4}  {:.6e}  {:.6e}  {:>6.1}     {:>5.1}",
            acc[k][0] / n,
            acc[k][1] / n,
            100.0 * acc[k][2] / n,
            100.0 * acc[k][3] / n
        );
    }
}
