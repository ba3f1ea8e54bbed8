//! End-to-end experiment orchestration: dataset cache, model training,
//! threshold calibration, attack archives, evaluation reports, and visual
//! exports — all under one output directory, fully determined by the config.
//!
//! Every stage validates its upstream artifacts: a missing file is a
//! `MissingArtifact` error naming the stage to run first, and a cached
//! artifact that no longer matches the config is rejected as stale rather
//! than silently reused.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{
    basic_joint_attack, mifgsm_attack, pgd_attack, sibling_attack, AttackError, AttackOutcome,
    Branch,
};
use crate::config::{ConfigError, ExperimentConfig, TargetSpec};
use crate::container::{
    read_container, write_container, ContainerError, NamedTensor,
};
use crate::eval::{
    calibrate_threshold, mse, pgm_bytes, render_perturbation, saliency_map, ssim, to_gray_bytes,
    EvalError, ThresholdCalibration,
};
use crate::models::{
    load_surrogate, load_target, save_surrogate, save_target, train_ar_target, train_fr_target,
    train_surrogate, FrModel, ModelError, SurrogateArch, SurrogateModel, TargetKind, TargetModel,
    TrainConfig,
};
use crate::synthface::{
    sample_pairs, DataError, Dataset, DatasetSpec, IdentityPool, PairKind, IMG_PIXELS, IMG_SIDE,
    LATENT_DIM, N_ATTRS,
};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: String, hint: String },
    #[error("stale artifact {path}: {message}")]
    StaleArtifact { path: String, message: String },
    #[error("unknown algorithm {name:?}; expected one of {expected}")]
    UnknownAlgorithm { name: String, expected: String },
    #[error("malformed artifact {path}: {message}")]
    MalformedArtifact { path: String, message: String },
}

impl PipelineError {
    /// Machine-parsable error class, used as the CLI's single-line prefix.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownAlgorithm { .. } => "E_CONFIG",
            PipelineError::Io { .. } => "E_IO",
            PipelineError::Container(_) | PipelineError::MalformedArtifact { .. } => "E_FORMAT",
            PipelineError::MissingArtifact { .. } => "E_MISSING_ARTIFACT",
            PipelineError::Data(_)
            | PipelineError::Model(_)
            | PipelineError::Attack(_)
            | PipelineError::Eval(_)
            | PipelineError::Tensor(_)
            | PipelineError::StaleArtifact { .. } => "E_DOMAIN",
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "E_CONFIG" => 2,
            "E_IO" => 3,
            "E_FORMAT" => 4,
            "E_MISSING_ARTIFACT" => 5,
            _ => 6,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// --- algorithms -------------------------------------------------------------

/// The six attack arms of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Signed-gradient descent against one white-box FR model.
    PgdSingle,
    /// Signed-gradient descent against an ensemble of white-box FR models.
    PgdEnsemble,
    /// Momentum signed-gradient descent against one white-box FR model.
    Mifgsm,
    /// One signed step per iteration on the weighted joint FR+AR loss.
    BasicJoint,
    /// Alternating two-branch attack with the cross-task history term off.
    Jtmo,
    /// Alternating two-branch attack with cross-task gradient history.
    Sibling,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::PgdSingle,
        Algorithm::PgdEnsemble,
        Algorithm::Mifgsm,
        Algorithm::BasicJoint,
        Algorithm::Jtmo,
        Algorithm::Sibling,
    ];

    /// Short name used for CLI flags and artifact file names.
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PgdSingle => "pgd_single",
            Algorithm::PgdEnsemble => "pgd_ensemble",
            Algorithm::Mifgsm => "mifgsm",
            Algorithm::BasicJoint => "basic_joint",
            Algorithm::Jtmo => "jtmo",
            Algorithm::Sibling => "sibling",
        }
    }

    /// Label used in the report's algorithm column.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Jtmo => "jtmo (γ3=0 interpretation)",
            other => other.name(),
        }
    }

    pub fn parse(name: &str) -> Result<Algorithm, PipelineError> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| PipelineError::UnknownAlgorithm {
                name: name.to_string(),
                expected: Algorithm::ALL
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

// --- workspace layout -------------------------------------------------------

/// Resolves artifact paths under one output directory.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Workspace {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.sibw")
    }

    pub fn weight_path(&self, file_stem: &str) -> PathBuf {
        self.root.join("weights").join(format!("{file_stem}.sibw"))
    }

    pub fn calibration_path(&self, model_id: &str) -> PathBuf {
        self.root
            .join("calibration")
            .join(format!("{model_id}.json"))
    }

    pub fn archive_path(&self, alg: Algorithm) -> PathBuf {
        self.root.join("attacks").join(format!("{}.sibw", alg.name()))
    }

    pub fn loss_csv_path(&self, alg: Algorithm) -> PathBuf {
        self.root
            .join("attacks")
            .join(format!("{}_loss.csv", alg.name()))
    }

    pub fn report_csv_path(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_md_path(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn visuals_dir(&self, alg: Algorithm) -> PathBuf {
        self.root.join("visuals").join(alg.name())
    }
}

fn ensure_parent_dir(path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

fn require_file(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: hint.to_string(),
        })
    }
}

// --- small value encodings for container metadata ---------------------------

fn u64_to_f64_pair(v: u64) -> Vec<f64> {
    vec![(v & 0xFFFF_FFFF) as f64, (v >> 32) as f64]
}

fn f64_pair_to_u64(path: &Path, data: &[f64]) -> Result<u64, PipelineError> {
    let bad = |message: &str| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    if data.len() != 2 {
        return Err(bad("seed field must have two halves"));
    }
    let mut halves = [0u64; 2];
    for (i, &v) in data.iter().enumerate() {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 4294967296.0) {
            return Err(bad("seed halves must be 32-bit integers"));
        }
        halves[i] = v as u64;
    }
    Ok(halves[0] | (halves[1] << 32))
}

fn str_to_f64s(s: &str) -> Vec<f64> {
    s.bytes().map(|b| b as f64).collect()
}

fn f64s_to_str(path: &Path, data: &[f64]) -> Result<String, PipelineError> {
    let mut bytes = Vec::with_capacity(data.len());
    for &v in data {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 256.0) {
            return Err(PipelineError::MalformedArtifact {
                path: path.display().to_string(),
                message: "string field holds non-byte values".to_string(),
            });
        }
        bytes.push(v as u8);
    }
    String::from_utf8(bytes).map_err(|_| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        message: "string field is not UTF-8".to_string(),
    })
}

fn usize_from_f64(path: &Path, v: f64, what: &str) -> Result<usize, PipelineError> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= 9.007_199_254_740_992e15 {
        Ok(v as usize)
    } else {
        Err(PipelineError::MalformedArtifact {
            path: path.display().to_string(),
            message: format!("{what} must be a non-negative integer, got {v}"),
        })
    }
}

// --- dataset stage ----------------------------------------------------------

fn dataset_spec(cfg: &ExperimentConfig) -> DatasetSpec {
    DatasetSpec {
        seed: cfg.dataset.seed,
        n_identities: cfg.dataset.n_identities,
        samples_per_identity: cfg.dataset.samples_per_identity,
    }
}

fn dataset_tensors(ds: &Dataset) -> Result<Vec<NamedTensor>, PipelineError> {
    let n = ds.samples.len();
    let mut images = Vec::with_capacity(n * IMG_PIXELS);
    let mut attrs = Vec::with_capacity(n * N_ATTRS);
    let mut id_index = Vec::with_capacity(n);
    let mut variation = Vec::with_capacity(n);
    for s in &ds.samples {
        images.extend_from_slice(s.image.data());
        attrs.extend(s.attributes.iter().map(|&a| a as f64));
        id_index.push(s.id_index as f64);
        variation.push(s.variation as f64);
    }
    let mut latents = Vec::with_capacity(ds.identities.len() * LATENT_DIM);
    for ident in &ds.identities {
        latents.extend_from_slice(&ident.latent);
    }
    Ok(vec![
        NamedTensor::new("images", Tensor::from_vec(vec![n, IMG_PIXELS], images)?),
        NamedTensor::new("attributes", Tensor::from_vec(vec![n, N_ATTRS], attrs)?),
        NamedTensor::new("id_index", Tensor::from_vec(vec![n], id_index)?),
        NamedTensor::new("variation", Tensor::from_vec(vec![n], variation)?),
        NamedTensor::new(
            "latents",
            Tensor::from_vec(vec![ds.identities.len(), LATENT_DIM], latents)?,
        ),
    ])
}

/// Generates the dataset from the config seed and writes the cache file.
pub fn cmd_gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = Dataset::generate(dataset_spec(cfg))?;
    let path = ws.dataset_path();
    ensure_parent_dir(&path)?;
    write_container(&path, &dataset_tensors(&ds)?)?;
    Ok(())
}

/// Rebuilds the dataset from the config and checks it against the cache.
/// The cache must exist (run `gen-data` first) and must match bit for bit —
/// a cache produced under a different config is rejected as stale.
pub fn load_dataset(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Dataset, PipelineError> {
    let path = ws.dataset_path();
    require_file(&path, "run the gen-data stage first")?;
    let ds = Dataset::generate(dataset_spec(cfg))?;
    let stored = read_container(&path)?;
    let fresh = dataset_tensors(&ds)?;
    for want in &fresh {
        let got = crate::container::require(&stored, &want.name)?;
        if got.shape() != want.tensor.shape()
            || got
                .data()
                .iter()
                .zip(want.tensor.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(PipelineError::StaleArtifact {
                path: path.display().to_string(),
                message: format!(
                    "cached `{}` does not match the dataset regenerated from this config; \
                     rerun gen-data",
                    want.name
                ),
            });
        }
    }
    Ok(ds)
}

// --- training stage ---------------------------------------------------------

fn train_cfg(section: &crate::config::TrainSection, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: section.epochs,
        lr: section.lr,
        batch_size: section.batch_size,
        seed,
    }
}

fn train_one_target(
    section: &crate::config::TrainSection,
    ws: &Workspace,
    ds: &Dataset,
    spec: &TargetSpec,
    kind: TargetKind,
) -> Result<(), PipelineError> {
    let mut model = TargetModel::build(&spec.id, kind, IMG_PIXELS, &spec.widths, spec.arch_seed);
    match kind {
        TargetKind::Fr => train_fr_target(&mut model, ds, &train_cfg(section, spec.train_seed))?,
        TargetKind::Ar => train_ar_target(&mut model, ds, &train_cfg(section, spec.train_seed))?,
    };
    let path = ws.weight_path(&spec.id);
    ensure_parent_dir(&path)?;
    save_target(&path, &model)?;
    Ok(())
}

/// Trains the shared-trunk surrogate, the black-box FR/AR targets, and the
/// white-box baseline FR models, and writes all weight files. Attacker-side
/// models (surrogate, white-box baselines) use `models.train`; the black-box
/// targets use `models.target_train`.
pub fn cmd_train(cfg: &ExperimentConfig, root: &Path) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = load_dataset(cfg, &ws)?;

    let mut surrogate = SurrogateModel::build(&SurrogateArch::default(), cfg.models.surrogate.arch_seed);
    train_surrogate(
        &mut surrogate,
        &ds,
        &train_cfg(&cfg.models.train, cfg.models.surrogate.train_seed),
    )?;
    let path = ws.weight_path("surrogate");
    ensure_parent_dir(&path)?;
    save_surrogate(&path, &surrogate)?;

    for spec in &cfg.models.fr_targets {
        train_one_target(&cfg.models.target_train, &ws, &ds, spec, TargetKind::Fr)?;
    }
    train_one_target(
        &cfg.models.target_train,
        &ws,
        &ds,
        &cfg.models.ar_target,
        TargetKind::Ar,
    )?;
    for spec in &cfg.models.white_box_fr {
        train_one_target(&cfg.models.train, &ws, &ds, spec, TargetKind::Fr)?;
    }
    Ok(())
}

fn load_surrogate_checked(ws: &Workspace) -> Result<SurrogateModel, PipelineError> {
    let path = ws.weight_path("surrogate");
    require_file(&path, "run the train stage first")?;
    Ok(load_surrogate(&path)?)
}

fn load_target_checked(
    ws: &Workspace,
    id: &str,
    kind: TargetKind,
) -> Result<TargetModel, PipelineError> {
    let path = ws.weight_path(id);
    require_file(&path, "run the train stage first")?;
    let model = load_target(&path)?;
    if model.kind != kind {
        return Err(PipelineError::StaleArtifact {
            path: path.display().to_string(),
            message: format!("expected a {kind:?} model, file holds {:?}", model.kind),
        });
    }
    Ok(model)
}

// --- calibration stage ------------------------------------------------------

/// Calibrates a decision threshold for the surrogate FR branch and each
/// black-box FR target on held-out impostor pairs, and writes one JSON file
/// per model.
pub fn cmd_calibrate(cfg: &ExperimentConfig, root: &Path) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = load_dataset(cfg, &ws)?;
    let surrogate = load_surrogate_checked(&ws)?;
    let pairs = sample_pairs(
        &ds,
        PairKind::Impostor,
        IdentityPool::Heldout,
        cfg.eval.n_calibration_pairs,
        cfg.eval.calibration_seed,
    )?;

    let mut models: Vec<Box<dyn FrModel>> = vec![Box::new(surrogate)];
    for spec in &cfg.models.fr_targets {
        models.push(Box::new(load_target_checked(&ws, &spec.id, TargetKind::Fr)?));
    }
    for model in &models {
        let cal = calibrate_threshold(model.as_ref(), &ds, &pairs, cfg.eval.target_fpr)?;
        let path = ws.calibration_path(model.model_id());
        ensure_parent_dir(&path)?;
        let mut text = serde_json::to_string_pretty(&cal).expect("calibration serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

fn read_calibration(ws: &Workspace, model_id: &str) -> Result<ThresholdCalibration, PipelineError> {
    let path = ws.calibration_path(model_id);
    require_file(&path, "run the calibrate stage first")?;
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let cal: ThresholdCalibration =
        serde_json::from_str(&text).map_err(|e| PipelineError::MalformedArtifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if cal.model_id != model_id {
        return Err(PipelineError::StaleArtifact {
            path: path.display().to_string(),
            message: format!("file is for model {:?}, expected {model_id:?}", cal.model_id),
        });
    }
    Ok(cal)
}

// --- attack stage -----------------------------------------------------------

/// The attack-pair sampling seed: the config value unless overridden
/// (the CLI maps the `SIBLING_SEED` environment variable here).
pub fn effective_attack_seed(cfg: &ExperimentConfig, seed_override: Option<u64>) -> u64 {
    seed_override.unwrap_or(cfg.attack.seed)
}

fn run_arm(
    alg: Algorithm,
    surrogate: &SurrogateModel,
    white_box: &[TargetModel],
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &ExperimentConfig,
) -> Result<AttackOutcome, AttackError> {
    let acfg = cfg.attack.to_attack_config();
    match alg {
        Algorithm::PgdSingle => {
            let models: [&dyn FrModel; 1] = [&white_box[0]];
            pgd_attack(&models, x_a, x_v, &acfg)
        }
        Algorithm::PgdEnsemble => {
            let models: Vec<&dyn FrModel> = white_box.iter().map(|m| m as &dyn FrModel).collect();
            pgd_attack(&models, x_a, x_v, &acfg)
        }
        Algorithm::Mifgsm => {
            let models: [&dyn FrModel; 1] = [&white_box[0]];
            mifgsm_attack(&models, x_a, x_v, &acfg)
        }
        Algorithm::BasicJoint => basic_joint_attack(surrogate, x_a, x_v, &acfg),
        Algorithm::Jtmo => {
            let mut ablated = acfg;
            ablated.gamma3 = 0.0;
            sibling_attack(surrogate, x_a, x_v, &ablated)
        }
        Algorithm::Sibling => sibling_attack(surrogate, x_a, x_v, &acfg),
    }
}

/// Runs one attack arm over the configured impostor pairs and writes the
/// adversarial archive plus the per-iteration loss CSV. `workers` sets the
/// size of the worker pool; outputs are identical for any worker count.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    root: &Path,
    alg: Algorithm,
    workers: usize,
    seed_override: Option<u64>,
) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = load_dataset(cfg, &ws)?;
    let surrogate = load_surrogate_checked(&ws)?;
    let mut white_box = Vec::new();
    for spec in &cfg.models.white_box_fr {
        white_box.push(load_target_checked(&ws, &spec.id, TargetKind::Fr)?);
    }

    let seed = effective_attack_seed(cfg, seed_override);
    let pairs = sample_pairs(
        &ds,
        PairKind::Impostor,
        IdentityPool::Heldout,
        cfg.eval.n_attack_pairs,
        seed,
    )?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::MalformedArtifact {
            path: "<thread pool>".to_string(),
            message: e.to_string(),
        })?;
    let outcomes: Vec<AttackOutcome> = pool.install(|| {
        pairs
            .pairs
            .par_iter()
            .map(|p| {
                let x_a = &ds.samples[p.attacker].image;
                let x_v = &ds.samples[p.victim].image;
                run_arm(alg, &surrogate, &white_box, x_a, x_v, cfg)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    // Archive: per-pair tensors plus enough metadata to re-derive the row
    // indices, the seed, and the budget without re-reading the config.
    let mut tensors = Vec::with_capacity(outcomes.len() * 2 + 6);
    tensors.push(NamedTensor::new(
        "meta/algorithm",
        Tensor::vector(str_to_f64s(alg.name())),
    ));
    tensors.push(NamedTensor::new(
        "meta/seed",
        Tensor::vector(u64_to_f64_pair(seed)),
    ));
    tensors.push(NamedTensor::new(
        "meta/xi",
        Tensor::vector(vec![cfg.attack.xi]),
    ));
    tensors.push(NamedTensor::new(
        "meta/attacker",
        Tensor::vector(pairs.pairs.iter().map(|p| p.attacker as f64).collect()),
    ));
    tensors.push(NamedTensor::new(
        "meta/victim",
        Tensor::vector(pairs.pairs.iter().map(|p| p.victim as f64).collect()),
    ));
    tensors.push(NamedTensor::new(
        "meta/grad_evals",
        Tensor::vector(outcomes.iter().map(|o| o.grad_evals as f64).collect()),
    ));
    for (i, o) in outcomes.iter().enumerate() {
        tensors.push(NamedTensor::new(format!("pair_{i:04}/eps"), o.eps.clone()));
        tensors.push(NamedTensor::new(
            format!("pair_{i:04}/x_adv"),
            o.x_adv.clone(),
        ));
    }
    let archive = ws.archive_path(alg);
    ensure_parent_dir(&archive)?;
    write_container(&archive, &tensors)?;

    let mut csv = String::from("pair,iter,loss_fr,loss_ar\n");
    for (i, o) in outcomes.iter().enumerate() {
        for pt in &o.trace {
            csv.push_str(&format!("{i},{},{}", pt.iter, pt.loss_fr));
            match pt.loss_ar {
                Some(ar) => csv.push_str(&format!(",{ar}\n")),
                None => csv.push_str(",\n"),
            }
        }
    }
    let loss_path = ws.loss_csv_path(alg);
    std::fs::write(&loss_path, csv).map_err(io_err(&loss_path))?;
    Ok(())
}

/// One attacked pair loaded back from an archive.
#[derive(Debug)]
pub struct ArchivePair {
    pub attacker: usize,
    pub victim: usize,
    pub eps: Tensor,
    pub x_adv: Tensor,
    pub grad_evals: u64,
}

/// A fully validated attack archive.
#[derive(Debug)]
pub struct AttackArchive {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub xi: f64,
    pub pairs: Vec<ArchivePair>,
}

/// Loads an arm's archive and rechecks the stored perturbations: every `ε`
/// must satisfy `‖ε‖_∞ ≤ ξ` and every adversarial image must be in `[0,1]`.
pub fn load_attack_archive(path: &Path, alg: Algorithm) -> Result<AttackArchive, PipelineError> {
    require_file(path, "run the attack stage for this algorithm first")?;
    let tensors = read_container(path)?;
    let bad = |message: String| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        message,
    };
    let name = f64s_to_str(
        path,
        crate::container::require(&tensors, "meta/algorithm")?.data(),
    )?;
    if name != alg.name() {
        return Err(PipelineError::StaleArtifact {
            path: path.display().to_string(),
            message: format!("archive holds algorithm {name:?}, expected {:?}", alg.name()),
        });
    }
    let seed = f64_pair_to_u64(path, crate::container::require(&tensors, "meta/seed")?.data())?;
    let xi_t = crate::container::require(&tensors, "meta/xi")?;
    if xi_t.data().len() != 1 {
        return Err(bad("meta/xi must hold one value".to_string()));
    }
    let xi = xi_t.data()[0];
    let attacker = crate::container::require(&tensors, "meta/attacker")?;
    let victim = crate::container::require(&tensors, "meta/victim")?;
    let grad_evals = crate::container::require(&tensors, "meta/grad_evals")?;
    let n = attacker.data().len();
    if victim.data().len() != n || grad_evals.data().len() != n {
        return Err(bad("metadata arrays disagree on pair count".to_string()));
    }

    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let eps = crate::container::require(&tensors, &format!("pair_{i:04}/eps"))?;
        let x_adv = crate::container::require(&tensors, &format!("pair_{i:04}/x_adv"))?;
        let img_shape = [IMG_SIDE, IMG_SIDE];
        if eps.shape() != img_shape || x_adv.shape() != img_shape {
            return Err(bad(format!(
                "pair {i}: expected {IMG_SIDE}x{IMG_SIDE} tensors, got {:?} and {:?}",
                eps.shape(),
                x_adv.shape()
            )));
        }
        for &e in eps.data() {
            if !(e.is_finite() && e.abs() <= xi) {
                return Err(bad(format!(
                    "pair {i}: perturbation value {e} exceeds the budget {xi}"
                )));
            }
        }
        for &v in x_adv.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!(
                    "pair {i}: adversarial pixel {v} outside [0,1]"
                )));
            }
        }
        pairs.push(ArchivePair {
            attacker: usize_from_f64(path, attacker.data()[i], "attacker index")?,
            victim: usize_from_f64(path, victim.data()[i], "victim index")?,
            eps: eps.clone(),
            x_adv: x_adv.clone(),
            grad_evals: usize_from_f64(path, grad_evals.data()[i], "grad_evals")? as u64,
        });
    }
    Ok(AttackArchive {
        algorithm: alg,
        seed,
        xi,
        pairs,
    })
}

// --- evaluation stage -------------------------------------------------------

/// One row of the final report: one (algorithm, target) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub target: String,
    pub asr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Prediction-difference per attribute group, in config group order.
    pub pred: [f64; 4],
    /// Deterministic cost proxy: total backward passes / 1000.
    pub runtime_s: f64,
    pub seed: u64,
}

pub const REPORT_HEADER: &str =
    "algorithm,target,asr,ssim,mse,pred_eye,pred_nose,pred_mouth,pred_other,runtime_s,seed";

impl ReportRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.algorithm,
            self.target,
            self.asr,
            self.ssim,
            self.mse,
            self.pred[0],
            self.pred[1],
            self.pred[2],
            self.pred[3],
            self.runtime_s,
            self.seed
        )
    }
}

fn check_archive_matches_config(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    path: &Path,
    archive: &AttackArchive,
) -> Result<(), PipelineError> {
    let stale = |message: String| PipelineError::StaleArtifact {
        path: path.display().to_string(),
        message,
    };
    if archive.pairs.len() != cfg.eval.n_attack_pairs {
        return Err(stale(format!(
            "archive has {} pairs, config asks for {}; rerun attack",
            archive.pairs.len(),
            cfg.eval.n_attack_pairs
        )));
    }
    if archive.xi.to_bits() != cfg.attack.xi.to_bits() {
        return Err(stale(format!(
            "archive budget {} does not match config budget {}; rerun attack",
            archive.xi, cfg.attack.xi
        )));
    }
    let n_samples = ds.samples.len();
    for p in &archive.pairs {
        if p.attacker >= n_samples || p.victim >= n_samples {
            return Err(stale(
                "archive pair indices fall outside this dataset; rerun attack".to_string(),
            ));
        }
    }
    Ok(())
}

fn branch_scores(
    model: &dyn FrModel,
    ds: &Dataset,
    archive: &AttackArchive,
) -> Result<Vec<f64>, PipelineError> {
    let tape = Tape::new();
    let mut out = Vec::with_capacity(archive.pairs.len());
    for p in &archive.pairs {
        let adv = Tensor::vector(p.x_adv.data().to_vec());
        let vic = Tensor::vector(ds.samples[p.victim].image.data().to_vec());
        let ea = model.embed(&tape, &adv)?;
        let ev = model.embed(&tape, &vic)?;
        out.push(tape.cosine_similarity(&ea, &ev)?.item());
    }
    Ok(out)
}

/// Computes the full report: for every algorithm arm and every FR model
/// (surrogate first, then the black-box targets), the attack success rate at
/// that model's calibrated threshold, plus stealth and attribute-disruption
/// metrics shared across targets.
pub fn cmd_evaluate(cfg: &ExperimentConfig, root: &Path) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = load_dataset(cfg, &ws)?;
    let surrogate = load_surrogate_checked(&ws)?;
    let ar_target = load_target_checked(&ws, &cfg.models.ar_target.id, TargetKind::Ar)?;

    let mut fr_models: Vec<(String, Box<dyn FrModel>)> = Vec::new();
    fr_models.push(("surrogate_fr".to_string(), Box::new(surrogate)));
    for spec in &cfg.models.fr_targets {
        fr_models.push((
            spec.id.clone(),
            Box::new(load_target_checked(&ws, &spec.id, TargetKind::Fr)?),
        ));
    }
    let mut taus = BTreeMap::new();
    for (id, _) in &fr_models {
        taus.insert(id.clone(), read_calibration(&ws, id)?.tau);
    }

    let mut rows = Vec::new();
    for alg in Algorithm::ALL {
        let path = ws.archive_path(alg);
        let archive = load_attack_archive(&path, alg)?;
        check_archive_matches_config(cfg, &ds, &path, &archive)?;

        let n = archive.pairs.len();
        let mut ssim_sum = 0.0;
        let mut mse_sum = 0.0;
        for p in &archive.pairs {
            let x_a = &ds.samples[p.attacker].image;
            ssim_sum += ssim(&p.x_adv, x_a)?;
            mse_sum += mse(&p.x_adv, x_a)?;
        }
        let mean_ssim = ssim_sum / n as f64;
        let mean_mse = mse_sum / n as f64;

        let adv_benign: Vec<(Tensor, Tensor)> = archive
            .pairs
            .iter()
            .map(|p| (p.x_adv.clone(), ds.samples[p.attacker].image.clone()))
            .collect();
        let mut pred = [0.0f64; 4];
        for (gi, group) in cfg.eval.attribute_groups.iter().enumerate() {
            pred[gi] = crate::eval::pred_diff(&ar_target, &adv_benign, group)?;
        }

        let runtime_s =
            archive.pairs.iter().map(|p| p.grad_evals).sum::<u64>() as f64 / 1000.0;

        for (id, model) in &fr_models {
            let scores = branch_scores(model.as_ref(), &ds, &archive)?;
            let tau = taus[id];
            let asr = crate::eval::asr(&scores, tau)?;
            rows.push(ReportRow {
                algorithm: alg.label().to_string(),
                target: id.clone(),
                asr,
                ssim: mean_ssim,
                mse: mean_mse,
                pred,
                runtime_s,
                seed: archive.seed,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.algorithm
            .cmp(&b.algorithm)
            .then_with(|| a.target.cmp(&b.target))
    });

    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    let csv_path = ws.report_csv_path();
    ensure_parent_dir(&csv_path)?;
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let mut md = String::new();
    md.push_str("# Attack evaluation\n\n");
    md.push_str(&format!(
        "{} impostor pairs per arm; similarity thresholds calibrated per target model.\n\n",
        cfg.eval.n_attack_pairs
    ));
    md.push_str("| algorithm | target | asr | ssim | mse | pred_eye | pred_nose | pred_mouth | pred_other | runtime_s | seed |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for row in &rows {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.2} | {:.4} | {:.4} | {:.4} | {:.4} | {:.3} | {} |\n",
            row.algorithm,
            row.target,
            row.asr,
            row.ssim,
            row.mse,
            row.pred[0],
            row.pred[1],
            row.pred[2],
            row.pred[3],
            row.runtime_s,
            row.seed
        ));
    }
    let md_path = ws.report_md_path();
    std::fs::write(&md_path, md).map_err(io_err(&md_path))?;
    Ok(())
}

/// Reads a report CSV back into rows (the inverse of `cmd_evaluate`'s writer).
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, PipelineError> {
    require_file(path, "run the evaluate stage first")?;
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(bad(format!("row {ln}: expected 11 fields, got {}", fields.len())));
        }
        let num = |s: &str| -> Result<f64, PipelineError> {
            s.parse::<f64>()
                .map_err(|e| bad(format!("row {ln}: bad number {s:?}: {e}")))
        };
        rows.push(ReportRow {
            algorithm: fields[0].to_string(),
            target: fields[1].to_string(),
            asr: num(fields[2])?,
            ssim: num(fields[3])?,
            mse: num(fields[4])?,
            pred: [num(fields[5])?, num(fields[6])?, num(fields[7])?, num(fields[8])?],
            runtime_s: num(fields[9])?,
            seed: fields[10]
                .parse::<u64>()
                .map_err(|e| bad(format!("row {ln}: bad seed {:?}: {e}", fields[10])))?,
        });
    }
    Ok(rows)
}

// --- report stage -----------------------------------------------------------

/// Number of leading pairs per arm that also get saliency map exports.
const SALIENCY_PAIRS: usize = 8;

fn aggregate_loss_trace(
    ws: &Workspace,
    alg: Algorithm,
) -> Result<Vec<(usize, f64, Option<f64>)>, PipelineError> {
    let path = ws.loss_csv_path(alg);
    require_file(&path, "run the attack stage for this algorithm first")?;
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |message: String| PipelineError::MalformedArtifact {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("pair,iter,loss_fr,loss_ar") => {}
        other => return Err(bad(format!("unexpected loss header {other:?}"))),
    }
    // iter -> (count, sum_fr, sum_ar, ar_present)
    let mut acc: BTreeMap<usize, (usize, f64, f64, bool)> = BTreeMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let iter: usize = fields[1]
            .parse()
            .map_err(|e| bad(format!("bad iter {:?}: {e}", fields[1])))?;
        let fr: f64 = fields[2]
            .parse()
            .map_err(|e| bad(format!("bad loss {:?}: {e}", fields[2])))?;
        let entry = acc.entry(iter).or_insert((0, 0.0, 0.0, false));
        entry.0 += 1;
        entry.1 += fr;
        if !fields[3].is_empty() {
            let ar: f64 = fields[3]
                .parse()
                .map_err(|e| bad(format!("bad loss {:?}: {e}", fields[3])))?;
            entry.2 += ar;
            entry.3 = true;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(iter, (count, fr, ar, has_ar))| {
            let n = count as f64;
            (iter, fr / n, if has_ar { Some(ar / n) } else { None })
        })
        .collect())
}

fn ascii_trace(points: &[(usize, f64, Option<f64>)]) -> String {
    let mut out = String::from("iter    mean_loss_fr\n");
    if points.is_empty() {
        return out;
    }
    let max = points
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-12);
    // At most ~25 sampled rows, always including the first and last iteration.
    let stride = (points.len() / 25).max(1);
    let mut idx: Vec<usize> = (0..points.len()).step_by(stride).collect();
    if *idx.last().unwrap() != points.len() - 1 {
        idx.push(points.len() - 1);
    }
    for i in idx {
        let (iter, fr, _) = points[i];
        let width = ((fr / max) * 50.0).round().max(0.0) as usize;
        out.push_str(&format!("{iter:<7} {fr:<13.6} |{}\n", "#".repeat(width)));
    }
    out
}

/// Writes the visual artifacts for every arm: one perturbation PGM per pair,
/// saliency PGMs for the leading pairs, and an aggregated loss-vs-iteration
/// trace as CSV and ASCII.
pub fn cmd_report(cfg: &ExperimentConfig, root: &Path) -> Result<(), PipelineError> {
    let ws = Workspace::new(root);
    let ds = load_dataset(cfg, &ws)?;
    let surrogate = load_surrogate_checked(&ws)?;
    require_file(&ws.report_csv_path(), "run the evaluate stage first")?;

    for alg in Algorithm::ALL {
        let archive = load_attack_archive(&ws.archive_path(alg), alg)?;
        let dir = ws.visuals_dir(alg);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        for (i, p) in archive.pairs.iter().enumerate() {
            let pixels = render_perturbation(&p.eps, archive.xi)?;
            let bytes = pgm_bytes(IMG_SIDE, IMG_SIDE, &pixels)?;
            let path = dir.join(format!("pair_{i:04}_perturbation.pgm"));
            std::fs::write(&path, bytes).map_err(io_err(&path))?;

            if i < SALIENCY_PAIRS {
                for branch in [Branch::Fr, Branch::Ar] {
                    let x_v = &ds.samples[p.victim].image;
                    let map = saliency_map(&surrogate, &p.x_adv, x_v, branch)?;
                    let bytes = pgm_bytes(IMG_SIDE, IMG_SIDE, &to_gray_bytes(&map))?;
                    let path = dir.join(format!("pair_{i:04}_saliency_{}.pgm", branch.name()));
                    std::fs::write(&path, bytes).map_err(io_err(&path))?;
                }
            }
        }

        let trace = aggregate_loss_trace(&ws, alg)?;
        let mut csv = String::from("iter,mean_loss_fr,mean_loss_ar\n");
        for (iter, fr, ar) in &trace {
            match ar {
                Some(ar) => csv.push_str(&format!("{iter},{fr},{ar}\n")),
                None => csv.push_str(&format!("{iter},{fr},\n")),
            }
        }
        let csv_path = dir.join("loss_trace.csv");
        std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
        let txt_path = dir.join("loss_trace.txt");
        std::fs::write(&txt_path, ascii_trace(&trace)).map_err(io_err(&txt_path))?;
    }
    Ok(())
}
