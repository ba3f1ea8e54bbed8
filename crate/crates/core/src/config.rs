//! Strict JSON experiment configuration.
//!
//! Unknown keys are rejected and errors name the offending JSON path.
//! Every random choice in the pipeline is seeded from a config field —
//! there is no implicit entropy. Only the seeds are required; all other
//! fields default to the reference setting (budget 40/255, step 2/255,
//! 200 iterations, 4 inner steps, update weights (0.1, 0.9, 0.01)).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackConfig;
use crate::synthface::N_ATTRS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error at `{json_path}`: {message}")]
    Parse { json_path: String, message: String },
    #[error("invalid config value at `{json_path}`: {message}")]
    Invalid { json_path: String, message: String },
}

fn invalid(json_path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        json_path: json_path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Seed for the image generator, identity latents, and pixel noise.
    pub seed: u64,
    #[serde(default = "default_n_identities")]
    pub n_identities: usize,
    #[serde(default = "default_samples_per_identity")]
    pub samples_per_identity: usize,
}

fn default_n_identities() -> usize {
    96
}

fn default_samples_per_identity() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub arch_seed: u64,
    pub train_seed: u64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec {
            arch_seed: 101,
            train_seed: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Model identifier, used in artifact file names.
    pub id: String,
    /// Hidden and output layer widths of the trunk.
    pub widths: Vec<usize>,
    pub arch_seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub surrogate: SurrogateSpec,
    /// Black-box FR transfer targets (never used for gradients).
    pub fr_targets: Vec<TargetSpec>,
    /// Black-box AR model for prediction-difference evaluation.
    pub ar_target: TargetSpec,
    /// Single-task white-box FR models driving the FR-only baseline arms.
    pub white_box_fr: Vec<TargetSpec>,
    /// Training regime for the attacker-side models (surrogate and white-box
    /// baselines).
    pub train: TrainSection,
    /// Training regime for the black-box targets. Deployed models are not
    /// under the attacker's control, so their regime is configured
    /// independently; the default trains them shorter than the attacker-side
    /// models.
    pub target_train: TrainSection,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            surrogate: SurrogateSpec::default(),
            fr_targets: vec![
                TargetSpec {
                    id: "target_fr_a".into(),
                    widths: vec![96, 48, 24],
                    arch_seed: 401,
                    train_seed: 411,
                },
                TargetSpec {
                    id: "target_fr_b".into(),
                    widths: vec![160, 80, 40],
                    arch_seed: 402,
                    train_seed: 412,
                },
            ],
            ar_target: TargetSpec {
                id: "target_ar".into(),
                widths: vec![96, 32, N_ATTRS],
                arch_seed: 501,
                train_seed: 511,
            },
            white_box_fr: vec![
                TargetSpec {
                    id: "wb_fr_a".into(),
                    widths: vec![128, 64, 32],
                    arch_seed: 601,
                    train_seed: 611,
                },
                TargetSpec {
                    id: "wb_fr_b".into(),
                    widths: vec![112, 56, 28],
                    arch_seed: 602,
                    train_seed: 612,
                },
            ],
            train: TrainSection::default(),
            target_train: TrainSection {
                epochs: 8,
                ..TrainSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Seed for sampling the attacked impostor pairs (overridable by the
    /// `SIBLING_SEED` environment variable for smoke runs).
    pub seed: u64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_gamma1")]
    pub gamma1: f64,
    #[serde(default = "default_gamma2")]
    pub gamma2: f64,
    #[serde(default = "default_gamma3")]
    pub gamma3: f64,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_mu")]
    pub mifgsm_mu: f64,
}

fn default_xi() -> f64 {
    40.0 / 255.0
}

fn default_alpha() -> f64 {
    2.0 / 255.0
}

fn default_iterations() -> usize {
    200
}

fn default_inner_steps() -> usize {
    4
}

fn default_gamma1() -> f64 {
    0.1
}

fn default_gamma2() -> f64 {
    0.9
}

fn default_gamma3() -> f64 {
    0.01
}

fn default_lambda() -> f64 {
    0.5
}

fn default_mu() -> f64 {
    1.0
}

impl AttackSection {
    /// The numeric parameters consumed by the attack algorithms.
    pub fn to_attack_config(&self) -> AttackConfig {
        AttackConfig {
            xi: self.xi,
            alpha: self.alpha,
            iterations: self.iterations,
            inner_steps: self.inner_steps,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            gamma3: self.gamma3,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            mifgsm_mu: self.mifgsm_mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of attacked impostor pairs (the experiment scale).
    pub n_attack_pairs: usize,
    /// Impostor pairs used to calibrate each model's threshold.
    pub n_calibration_pairs: usize,
    pub calibration_seed: u64,
    /// False-positive rate the thresholds are calibrated to.
    pub target_fpr: f64,
    /// Four disjoint attribute index groups for the prediction-difference
    /// report columns.
    pub attribute_groups: Vec<Vec<usize>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_attack_pairs: 200,
            n_calibration_pairs: 1000,
            calibration_seed: 900,
            target_fpr: 0.01,
            attribute_groups: vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub models: ModelsSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> String {
    "out".to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                json_path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.n_identities < 10 {
            return Err(invalid(
                "dataset.n_identities",
                "need at least 10 identities so the held-out split contains 2+",
            ));
        }
        if d.samples_per_identity < 2 {
            return Err(invalid(
                "dataset.samples_per_identity",
                "need at least 2 samples per identity for genuine pairs",
            ));
        }

        let m = &self.models;
        let mut ids = vec![("models.surrogate", "surrogate".to_string())];
        for (i, t) in m.fr_targets.iter().enumerate() {
            ids.push(("models.fr_targets", format!("{}", t.id)));
            check_target_spec(&format!("models.fr_targets[{i}]"), t, None)?;
        }
        check_target_spec("models.ar_target", &m.ar_target, Some(N_ATTRS))?;
        ids.push(("models.ar_target", m.ar_target.id.clone()));
        for (i, t) in m.white_box_fr.iter().enumerate() {
            ids.push(("models.white_box_fr", t.id.clone()));
            check_target_spec(&format!("models.white_box_fr[{i}]"), t, None)?;
        }
        if m.fr_targets.is_empty() {
            return Err(invalid("models.fr_targets", "need at least one FR target"));
        }
        if m.white_box_fr.is_empty() {
            return Err(invalid(
                "models.white_box_fr",
                "need at least one white-box FR baseline model",
            ));
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if ids[i].1 == ids[j].1 {
                    return Err(invalid(
                        ids[j].0,
                        format!("duplicate model id {:?}", ids[j].1),
                    ));
                }
            }
        }
        for (prefix, section) in [
            ("models.train", &m.train),
            ("models.target_train", &m.target_train),
        ] {
            if section.epochs == 0 {
                return Err(invalid(&format!("{prefix}.epochs"), "must be at least 1"));
            }
            if !(section.lr.is_finite() && section.lr > 0.0) {
                return Err(invalid(
                    &format!("{prefix}.lr"),
                    "must be positive and finite",
                ));
            }
            if section.batch_size == 0 {
                return Err(invalid(
                    &format!("{prefix}.batch_size"),
                    "must be at least 1",
                ));
            }
        }

        let a = &self.attack;
        let positive = |name: &str, v: f64| -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be non-negative and finite, got {v}")))
            }
        };
        positive("attack.xi", a.xi)?;
        positive("attack.alpha", a.alpha)?;
        positive("attack.gamma1", a.gamma1)?;
        positive("attack.gamma2", a.gamma2)?;
        non_negative("attack.gamma3", a.gamma3)?;
        non_negative("attack.lambda1", a.lambda1)?;
        non_negative("attack.lambda2", a.lambda2)?;
        non_negative("attack.mifgsm_mu", a.mifgsm_mu)?;
        if a.iterations == 0 {
            return Err(invalid("attack.iterations", "must be at least 1"));
        }
        if a.inner_steps == 0 {
            return Err(invalid("attack.inner_steps", "must be at least 1"));
        }
        if a.xi > 1.0 {
            return Err(invalid(
                "attack.xi",
                "budget above 1 would allow replacing the whole image",
            ));
        }

        let e = &self.eval;
        if e.n_attack_pairs == 0 {
            return Err(invalid("eval.n_attack_pairs", "must be at least 1"));
        }
        if e.n_calibration_pairs < 2 {
            return Err(invalid("eval.n_calibration_pairs", "must be at least 2"));
        }
        if !(e.target_fpr > 0.0 && e.target_fpr < 1.0) {
            return Err(invalid(
                "eval.target_fpr",
                format!("must be in (0, 1), got {}", e.target_fpr),
            ));
        }
        if e.attribute_groups.len() != 4 {
            return Err(invalid(
                "eval.attribute_groups",
                format!(
                    "report schema has exactly 4 group columns, got {} groups",
                    e.attribute_groups.len()
                ),
            ));
        }
        let mut seen = [false; N_ATTRS];
        for (gi, group) in e.attribute_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(invalid(
                    &format!("eval.attribute_groups[{gi}]"),
                    "group must not be empty",
                ));
            }
            for &idx in group {
                if idx >= N_ATTRS {
                    return Err(invalid(
                        &format!("eval.attribute_groups[{gi}]"),
                        format!("attribute index {idx} out of range (0..{N_ATTRS})"),
                    ));
                }
                if seen[idx] {
                    return Err(invalid(
                        &format!("eval.attribute_groups[{gi}]"),
                        format!("attribute index {idx} appears in two groups"),
                    ));
                }
                seen[idx] = true;
            }
        }
        if self.output_dir.is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// All FR-capable model ids in report order: surrogate first, then the
    /// black-box targets as configured.
    pub fn report_fr_targets(&self) -> Vec<String> {
        let mut out = vec!["surrogate_fr".to_string()];
        out.extend(self.models.fr_targets.iter().map(|t| t.id.clone()));
        out
    }
}

fn check_target_spec(
    json_path: &str,
    t: &TargetSpec,
    required_out: Option<usize>,
) -> Result<(), ConfigError> {
    if t.id.is_empty() {
        return Err(invalid(json_path, "model id must not be empty"));
    }
    if !t
        .id
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    {
        return Err(invalid(
            json_path,
            format!(
                "model id {:?} may only contain lowercase letters, digits, and underscores (it becomes a file name)",
                t.id
            ),
        ));
    }
    if t.widths.is_empty() {
        return Err(invalid(json_path, "widths must not be empty"));
    }
    if t.widths.iter().any(|&w| w == 0) {
        return Err(invalid(json_path, "layer widths must be positive"));
    }
    if let Some(out) = required_out {
        if *t.widths.last().unwrap() != out {
            return Err(invalid(
                json_path,
                format!(
                    "attribute model must end with {out} outputs, got {}",
                    t.widths.last().unwrap()
                ),
            ));
        }
    }
    Ok(())
}
