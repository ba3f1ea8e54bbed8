//! Adversarial impersonation attack algorithms.
//!
//! All attacks optimise a perturbation `eps` of an attacker image `x_a` so
//! that `x_a + eps` impersonates a victim image `x_v` under a face
//! recognition model, subject to `‖eps‖_∞ ≤ xi` and `x_a + eps ∈ [0,1]`.
//!
//! * [`pgd_attack`] — projected signed gradient descent on the FR cosine
//!   loss of one or more white-box models (ensemble averages the losses).
//! * [`mifgsm_attack`] — the momentum variant (L1-normalised gradient
//!   accumulator).
//! * [`basic_joint_attack`] — descends a weighted sum of the FR and AR
//!   losses of the multi-task surrogate in one step.
//! * [`sibling_attack`] — the two-stage alternating attack: each iteration
//!   runs `inner_steps` signed steps on one task branch, collects the other
//!   branch's gradients at every intermediate perturbation, and applies one
//!   stabilised outer step that aggregates them.
//!
//! Everything here is deterministic: no RNG is consumed, and all reductions
//! run in ascending index order, so results are bitwise reproducible and
//! independent of worker scheduling.

use thiserror::Error;

use crate::models::{FrModel, ModelError, SurrogateModel};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid attack parameter {field}: {message}")]
    BadConfig {
        field: &'static str,
        message: String,
    },
    #[error("attacker and victim images have different shapes: {lhs:?} vs {rhs:?}")]
    ImageShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("image pixel {index} = {value} outside [0,1]")]
    ImageOutOfRange { index: usize, value: f64 },
    #[error("non-finite {branch} loss at iteration {iter}; aborting attack")]
    NonFiniteLoss { iter: usize, branch: &'static str },
    #[error("inner trajectory has {snapshots} snapshots but {grads} cross-branch gradients")]
    TrajectoryMismatch { snapshots: usize, grads: usize },
    #[error("trajectory must contain at least one snapshot")]
    EmptyTrajectory,
    #[error("attack needs at least one model")]
    EmptyEnsemble,
}

/// The two task branches of the multi-task surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Face recognition: unit-norm identity embedding.
    Fr,
    /// Attribute recognition: pre-logit attribute features.
    Ar,
}

impl Branch {
    pub fn other(self) -> Branch {
        match self {
            Branch::Fr => Branch::Ar,
            Branch::Ar => Branch::Fr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Fr => "fr",
            Branch::Ar => "ar",
        }
    }
}

/// Numeric attack hyperparameters. Defaults follow the reference setting:
/// budget 40/255, step 2/255, 200 iterations of 4 inner steps, update
/// weights (0.1, 0.9, 0.01), equal joint-loss weights, momentum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L∞ perturbation budget ξ.
    pub xi: f64,
    /// Signed step size α.
    pub alpha: f64,
    /// Outer iteration count T.
    pub iterations: usize,
    /// Inner steps per iteration N.
    pub inner_steps: usize,
    /// Inner-step gradient scale γ1 (inert inside sign for positive values;
    /// kept in the computation verbatim).
    pub gamma1: f64,
    /// Outer-step gradient scale γ2 (likewise inert when positive).
    pub gamma2: f64,
    /// Weight of historical cross-branch gradients γ3; 0 disables the
    /// history aggregation.
    pub gamma3: f64,
    /// FR weight λ1 in the joint loss.
    pub lambda1: f64,
    /// AR weight λ2 in the joint loss.
    pub lambda2: f64,
    /// Momentum decay μ for [`mifgsm_attack`].
    pub mifgsm_mu: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            xi: 40.0 / 255.0,
            alpha: 2.0 / 255.0,
            iterations: 200,
            inner_steps: 4,
            gamma1: 0.1,
            gamma2: 0.9,
            gamma3: 0.01,
            lambda1: 0.5,
            lambda2: 0.5,
            mifgsm_mu: 1.0,
        }
    }
}

impl AttackConfig {
    /// Validates ranges. `iterations = 0` is allowed (the attack is then a
    /// no-op); experiment configs enforce stricter minimums separately.
    pub fn validate(&self) -> Result<(), AttackError> {
        let positive = |field: &'static str, v: f64| -> Result<(), AttackError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(AttackError::BadConfig {
                    field,
                    message: format!("must be a positive finite number, got {v}"),
                })
            }
        };
        let non_negative = |field: &'static str, v: f64| -> Result<(), AttackError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(AttackError::BadConfig {
                    field,
                    message: format!("must be a non-negative finite number, got {v}"),
                })
            }
        };
        positive("xi", self.xi)?;
        positive("alpha", self.alpha)?;
        positive("gamma1", self.gamma1)?;
        positive("gamma2", self.gamma2)?;
        non_negative("gamma3", self.gamma3)?;
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("mifgsm_mu", self.mifgsm_mu)?;
        if self.inner_steps == 0 {
            return Err(AttackError::BadConfig {
                field: "inner_steps",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`: never perturbs where the gradient vanishes.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp01(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else if v > 1.0 {
        1.0
    } else {
        v
    }
}

/// Clamps each `eps[i]` first to `[-xi, xi]`, then so that
/// `x_a[i] + eps[i] ∈ [0, 1]`. Idempotent; the clamped sum is exactly
/// within `[0,1]` in floating point.
pub fn project(eps: &mut [f64], x_a: &[f64], xi: f64) {
    debug_assert_eq!(eps.len(), x_a.len());
    for (e, &x) in eps.iter_mut().zip(x_a.iter()) {
        let mut v = *e;
        if v > xi {
            v = xi;
        } else if v < -xi {
            v = -xi;
        }
        let hi = 1.0 - x;
        let lo = -x;
        if v > hi {
            v = hi;
        } else if v < lo {
            v = lo;
        }
        *e = v;
    }
}

/// Accumulated perturbation of one attacker image under an L∞ budget. Every
/// update goes through [`project`], so the invariants `‖eps‖_∞ ≤ xi` and
/// `x_a + eps ∈ [0,1]` hold after each step; `check_invariants` re-asserts
/// them (active in test builds via `debug_assert`).
#[derive(Debug, Clone)]
pub struct PerturbationState {
    /// Flattened attacker image, constant during the attack.
    pub x_a: Vec<f64>,
    /// Current accumulated perturbation, same length as `x_a`.
    pub eps: Vec<f64>,
    /// L∞ budget ξ.
    pub xi: f64,
}

impl PerturbationState {
    pub fn new(x_a: &Tensor, xi: f64) -> Result<Self, AttackError> {
        for (i, &v) in x_a.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(AttackError::ImageOutOfRange { index: i, value: v });
            }
        }
        Ok(PerturbationState {
            x_a: x_a.to_vec(),
            eps: vec![0.0; x_a.len()],
            xi,
        })
    }

    /// One signed descent step `eps <- project(eps - alpha * sign(gamma * g))`.
    /// `gamma` is kept inside the sign verbatim even though any positive
    /// value yields the same result.
    pub fn signed_step(&mut self, grad: &[f64], alpha: f64, gamma: f64) {
        debug_assert_eq!(grad.len(), self.eps.len());
        for (e, &g) in self.eps.iter_mut().zip(grad.iter()) {
            *e -= alpha * sign(gamma * g);
        }
        project(&mut self.eps, &self.x_a, self.xi);
        self.check_invariants();
    }

    /// Asserts the projection invariants; compiled out of release builds.
    pub fn check_invariants(&self) {
        #[cfg(debug_assertions)]
        for (i, (&e, &x)) in self.eps.iter().zip(self.x_a.iter()).enumerate() {
            debug_assert!(
                e.abs() <= self.xi,
                "|eps[{i}]| = {} exceeds budget {}",
                e.abs(),
                self.xi
            );
            let s = x + e;
            debug_assert!((0.0..=1.0).contains(&s), "x_a[{i}] + eps[{i}] = {s} outside [0,1]");
        }
    }

    /// The adversarial image `clamp01(x_a + eps)` (the clamp is a no-op
    /// after projection but kept as the defined form).
    pub fn x_adv(&self) -> Vec<f64> {
        self.x_a
            .iter()
            .zip(self.eps.iter())
            .map(|(&x, &e)| clamp01(x + e))
            .collect()
    }
}

/// Branch feature vector of an image under the surrogate: unit-norm FR
/// embedding or pre-logit AR features.
pub fn branch_features(
    model: &SurrogateModel,
    tape: &Tape,
    branch: Branch,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    match branch {
        Branch::Fr => model.fr_embed(tape, x),
        Branch::Ar => model.ar_features(tape, x),
    }
}

/// Adversarial loss `1 - cos(features(x_adv), victim_features)` for one
/// branch, given precomputed (constant) victim features. In `[0, 2]`.
pub fn adv_loss_with(
    model: &SurrogateModel,
    tape: &Tape,
    branch: Branch,
    x_adv: &Tensor,
    victim_features: &Tensor,
) -> Result<Tensor, TensorError> {
    let f_a = branch_features(model, tape, branch, x_adv)?;
    let cos = tape.cosine_similarity(&f_a, victim_features)?;
    tape.sub(&Tensor::scalar(1.0), &cos)
}

/// [`adv_loss_with`], computing the victim features in place.
pub fn adv_loss(
    model: &SurrogateModel,
    tape: &Tape,
    branch: Branch,
    x_adv: &Tensor,
    x_v: &Tensor,
) -> Result<Tensor, TensorError> {
    let f_v = branch_features(model, &Tape::new(), branch, x_v)?;
    adv_loss_with(model, tape, branch, x_adv, &f_v)
}

/// Weighted joint loss `lambda1 * L_fr + lambda2 * L_ar`.
pub fn joint_loss(
    model: &SurrogateModel,
    tape: &Tape,
    x_adv: &Tensor,
    x_v: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor, TensorError> {
    let l_fr = adv_loss(model, tape, Branch::Fr, x_adv, x_v)?;
    let l_ar = adv_loss(model, tape, Branch::Ar, x_adv, x_v)?;
    tape.add(
        &tape.scalar_mul(&l_fr, lambda1)?,
        &tape.scalar_mul(&l_ar, lambda2)?,
    )
}

/// Snapshots of one inner phase plus the other branch's gradients at each
/// snapshot, consumed by [`ctgs_outer_step`].
#[derive(Debug, Clone)]
pub struct InnerTrajectory {
    /// Branch the inner steps descended.
    pub branch: Branch,
    /// Post-projection perturbations after inner steps 1..=N.
    pub snapshots: Vec<Vec<f64>>,
    /// Other-branch gradients evaluated at each snapshot.
    pub cross_grads: Vec<Vec<f64>>,
}

/// Stabilised outer update: from the final inner snapshot `e_N`, step
/// against `sign(gamma2 * (g_N + gamma3 * sum of earlier g_i))` where `g_i`
/// are the other branch's gradients along the inner trajectory. With one
/// snapshot (or `gamma3 = 0`) only the final gradient contributes.
pub fn ctgs_outer_step(
    state: &mut PerturbationState,
    trajectory: &InnerTrajectory,
    alpha: f64,
    gamma2: f64,
    gamma3: f64,
) -> Result<(), AttackError> {
    if trajectory.snapshots.is_empty() {
        return Err(AttackError::EmptyTrajectory);
    }
    if trajectory.snapshots.len() != trajectory.cross_grads.len() {
        return Err(AttackError::TrajectoryMismatch {
            snapshots: trajectory.snapshots.len(),
            grads: trajectory.cross_grads.len(),
        });
    }
    let n = trajectory.cross_grads.len();
    let dim = state.eps.len();
    let final_grad = &trajectory.cross_grads[n - 1];
    let base = &trajectory.snapshots[n - 1];
    debug_assert_eq!(final_grad.len(), dim);
    debug_assert_eq!(base.len(), dim);

    let mut eps = base.clone();
    for j in 0..dim {
        let mut hist = 0.0;
        for g in &trajectory.cross_grads[..n - 1] {
            hist += g[j];
        }
        let v = gamma2 * (final_grad[j] + gamma3 * hist);
        eps[j] -= alpha * sign(v);
    }
    project(&mut eps, &state.x_a, state.xi);
    state.eps = eps;
    state.check_invariants();
    Ok(())
}

/// Per-iteration loss record. `loss_ar` is `None` for FR-only algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPoint {
    pub iter: usize,
    pub loss_fr: f64,
    pub loss_ar: Option<f64>,
}

/// Result of one attack run on one pair.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Final perturbation, in the shape of the attacker image.
    pub eps: Tensor,
    /// Final adversarial image `clamp01(x_a + eps)`, same shape.
    pub x_adv: Tensor,
    /// Losses at iterations `0..=T` (index 0 is the unperturbed loss).
    pub trace: Vec<LossPoint>,
    /// Number of backward passes performed — a deterministic cost measure.
    pub grad_evals: u64,
}

fn check_pair(x_a: &Tensor, x_v: &Tensor) -> Result<(), AttackError> {
    if x_a.shape() != x_v.shape() {
        return Err(AttackError::ImageShapeMismatch {
            lhs: x_a.shape().to_vec(),
            rhs: x_v.shape().to_vec(),
        });
    }
    for (i, &v) in x_v.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(AttackError::ImageOutOfRange { index: i, value: v });
        }
    }
    Ok(())
}

fn flatten(t: &Tensor) -> Tensor {
    t.with_shape(vec![t.len()]).expect("flatten keeps length")
}

fn shaped(data: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::from_vec(like.shape().to_vec(), data).expect("shape matches source image")
}

fn finite_or_abort(loss: f64, iter: usize, branch: &'static str) -> Result<f64, AttackError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(AttackError::NonFiniteLoss { iter, branch })
    }
}

/// Mean FR adversarial loss over an ensemble, with gradient w.r.t. `eps`.
/// Returns `(loss, gradient)`.
fn ensemble_fr_grad(
    models: &[&dyn FrModel],
    victim_embeds: &[Tensor],
    x_a: &Tensor,
    eps: &[f64],
) -> Result<(f64, Vec<f64>), AttackError> {
    let tape = Tape::new();
    let eps_leaf = tape.leaf(&Tensor::from_vec(vec![eps.len()], eps.to_vec())?);
    let x_adv = tape.add(&eps_leaf, x_a)?;
    let mut total: Option<Tensor> = None;
    for (model, f_v) in models.iter().zip(victim_embeds.iter()) {
        let f_a = model.embed(&tape, &x_adv)?;
        let cos = tape.cosine_similarity(&f_a, f_v)?;
        let l = tape.sub(&Tensor::scalar(1.0), &cos)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(&t, &l)?,
        });
    }
    let mean = tape.scalar_mul(&total.expect("non-empty ensemble"), 1.0 / models.len() as f64)?;
    let loss = mean.item();
    let grads = tape.backward(&mean)?;
    let g = grads.wrt(&eps_leaf).expect("eps is on the tape");
    Ok((loss, g.to_vec()))
}

fn ensemble_fr_loss(
    models: &[&dyn FrModel],
    victim_embeds: &[Tensor],
    x_adv_data: &[f64],
) -> Result<f64, AttackError> {
    let tape = Tape::new();
    let x_adv = Tensor::from_vec(vec![x_adv_data.len()], x_adv_data.to_vec())?;
    let mut acc = 0.0;
    for (model, f_v) in models.iter().zip(victim_embeds.iter()) {
        let f_a = model.embed(&tape, &x_adv)?;
        let cos = tape.cosine_similarity(&f_a, f_v)?;
        acc += 1.0 - cos.item();
    }
    Ok(acc / models.len() as f64)
}

fn victim_fr_embeds(models: &[&dyn FrModel], x_v: &Tensor) -> Result<Vec<Tensor>, AttackError> {
    let tape = Tape::new();
    models.iter().map(|m| Ok(m.embed(&tape, x_v)?)).collect()
}

/// Projected signed gradient descent on the (ensemble mean) FR loss.
pub fn pgd_attack(
    models: &[&dyn FrModel],
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    iterative_fr_attack(models, x_a, x_v, cfg, 0.0)
}

/// Momentum signed gradient attack: accumulates `g <- mu * g + grad/‖grad‖₁`
/// and steps against `sign(g)`. `mu = 0` reduces to [`pgd_attack`].
pub fn mifgsm_attack(
    models: &[&dyn FrModel],
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    iterative_fr_attack(models, x_a, x_v, cfg, cfg.mifgsm_mu)
}

/// Shared loop of the FR-only attacks; `mu = 0` is plain projected descent.
/// The L1 norm in the momentum update is floored at 1e-12.
fn iterative_fr_attack(
    models: &[&dyn FrModel],
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
    mu: f64,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(AttackError::EmptyEnsemble);
    }
    check_pair(x_a, x_v)?;
    let x_a_flat = flatten(x_a);
    let x_v_flat = flatten(x_v);
    let victim_embeds = victim_fr_embeds(models, &x_v_flat)?;
    let mut state = PerturbationState::new(&x_a_flat, cfg.xi)?;
    let mut momentum = vec![0.0; state.eps.len()];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut grad_evals = 0u64;

    for t in 1..=cfg.iterations {
        let (loss, grad) = ensemble_fr_grad(models, &victim_embeds, &x_a_flat, &state.eps)?;
        grad_evals += 1;
        finite_or_abort(loss, t - 1, "fr")?;
        trace.push(LossPoint {
            iter: t - 1,
            loss_fr: loss,
            loss_ar: None,
        });
        let step_dir: Vec<f64> = if mu == 0.0 {
            grad
        } else {
            let mut l1 = 0.0;
            for &g in &grad {
                l1 += g.abs();
            }
            if l1 < 1e-12 {
                l1 = 1e-12;
            }
            for (m, &g) in momentum.iter_mut().zip(grad.iter()) {
                *m = mu * *m + g / l1;
            }
            momentum.clone()
        };
        state.signed_step(&step_dir, cfg.alpha, 1.0);
    }
    let final_loss = {
        let x_adv = state.x_adv();
        finite_or_abort(
            ensemble_fr_loss(models, &victim_embeds, &x_adv)?,
            cfg.iterations,
            "fr",
        )?
    };
    trace.push(LossPoint {
        iter: cfg.iterations,
        loss_fr: final_loss,
        loss_ar: None,
    });
    Ok(AttackOutcome {
        eps: shaped(state.eps.clone(), x_a),
        x_adv: shaped(state.x_adv(), x_a),
        trace,
        grad_evals,
    })
}

/// Surrogate branch loss and gradient w.r.t. `eps` at `x_a + eps`.
fn branch_grad(
    model: &SurrogateModel,
    branch: Branch,
    victim_features: &Tensor,
    x_a: &Tensor,
    eps: &[f64],
) -> Result<(f64, Vec<f64>), AttackError> {
    let tape = Tape::new();
    let eps_leaf = tape.leaf(&Tensor::from_vec(vec![eps.len()], eps.to_vec())?);
    let x_adv = tape.add(&eps_leaf, x_a)?;
    let loss = adv_loss_with(model, &tape, branch, &x_adv, victim_features)?;
    let value = loss.item();
    let grads = tape.backward(&loss)?;
    let g = grads.wrt(&eps_leaf).expect("eps is on the tape");
    Ok((value, g.to_vec()))
}

/// Forward-only branch loss at `clamp01(x_a + eps)` (no tape nodes).
fn branch_loss(
    model: &SurrogateModel,
    branch: Branch,
    victim_features: &Tensor,
    x_a: &[f64],
    eps: &[f64],
) -> Result<f64, AttackError> {
    let tape = Tape::new();
    let x_adv: Vec<f64> = x_a
        .iter()
        .zip(eps.iter())
        .map(|(&x, &e)| clamp01(x + e))
        .collect();
    let x_adv = Tensor::from_vec(vec![x_a.len()], x_adv)?;
    Ok(adv_loss_with(model, &tape, branch, &x_adv, victim_features)?.item())
}

/// One inner update on `branch`:
/// `eps <- project(eps - alpha * sign(gamma1 * grad))`. Returns the loss at
/// the pre-step perturbation.
pub fn jtmo_inner_step(
    model: &SurrogateModel,
    branch: Branch,
    state: &mut PerturbationState,
    victim_features: &Tensor,
    alpha: f64,
    gamma1: f64,
) -> Result<f64, AttackError> {
    let x_a = Tensor::vector(state.x_a.clone());
    let (loss, grad) = branch_grad(model, branch, victim_features, &x_a, &state.eps)?;
    state.signed_step(&grad, alpha, gamma1);
    Ok(loss)
}

/// Joint-loss baseline: every iteration takes one signed step on
/// `lambda1 * L_fr + lambda2 * L_ar`.
pub fn basic_joint_attack(
    model: &SurrogateModel,
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    check_pair(x_a, x_v)?;
    let x_a_flat = flatten(x_a);
    let x_v_flat = flatten(x_v);
    let setup_tape = Tape::new();
    let f_v_fr = branch_features(model, &setup_tape, Branch::Fr, &x_v_flat)?;
    let f_v_ar = branch_features(model, &setup_tape, Branch::Ar, &x_v_flat)?;
    let mut state = PerturbationState::new(&x_a_flat, cfg.xi)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut grad_evals = 0u64;

    for t in 1..=cfg.iterations {
        let tape = Tape::new();
        let eps_leaf = tape.leaf(&Tensor::vector(state.eps.clone()));
        let x_adv = tape.add(&eps_leaf, &x_a_flat)?;
        let l_fr = adv_loss_with(model, &tape, Branch::Fr, &x_adv, &f_v_fr)?;
        let l_ar = adv_loss_with(model, &tape, Branch::Ar, &x_adv, &f_v_ar)?;
        let joint = tape.add(
            &tape.scalar_mul(&l_fr, cfg.lambda1)?,
            &tape.scalar_mul(&l_ar, cfg.lambda2)?,
        )?;
        finite_or_abort(joint.item(), t - 1, "joint")?;
        trace.push(LossPoint {
            iter: t - 1,
            loss_fr: l_fr.item(),
            loss_ar: Some(l_ar.item()),
        });
        let grads = tape.backward(&joint)?;
        grad_evals += 1;
        let g = grads.wrt(&eps_leaf).expect("eps is on the tape");
        state.signed_step(&g.to_vec(), cfg.alpha, 1.0);
    }
    let l_fr = branch_loss(model, Branch::Fr, &f_v_fr, &state.x_a, &state.eps)?;
    let l_ar = branch_loss(model, Branch::Ar, &f_v_ar, &state.x_a, &state.eps)?;
    finite_or_abort(cfg.lambda1 * l_fr + cfg.lambda2 * l_ar, cfg.iterations, "joint")?;
    trace.push(LossPoint {
        iter: cfg.iterations,
        loss_fr: l_fr,
        loss_ar: Some(l_ar),
    });
    Ok(AttackOutcome {
        eps: shaped(state.eps.clone(), x_a),
        x_adv: shaped(state.x_adv(), x_a),
        trace,
        grad_evals,
    })
}

/// Full two-stage attack with the default schedule: the FR branch is the
/// inner branch on odd iterations (t = 1, 3, ...).
pub fn sibling_attack(
    model: &SurrogateModel,
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    sibling_attack_with_order(model, x_a, x_v, cfg, Branch::Fr)
}

/// [`sibling_attack`] with an explicit choice of which branch is the inner
/// branch on odd iterations (the schedule alternates from there).
pub fn sibling_attack_with_order(
    model: &SurrogateModel,
    x_a: &Tensor,
    x_v: &Tensor,
    cfg: &AttackConfig,
    odd_inner: Branch,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    check_pair(x_a, x_v)?;
    let x_a_flat = flatten(x_a);
    let x_v_flat = flatten(x_v);
    let setup_tape = Tape::new();
    let f_v_fr = branch_features(model, &setup_tape, Branch::Fr, &x_v_flat)?;
    let f_v_ar = branch_features(model, &setup_tape, Branch::Ar, &x_v_flat)?;
    let victim_of = |b: Branch| -> &Tensor {
        match b {
            Branch::Fr => &f_v_fr,
            Branch::Ar => &f_v_ar,
        }
    };
    let mut state = PerturbationState::new(&x_a_flat, cfg.xi)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut grad_evals = 0u64;

    let record = |state: &PerturbationState, iter: usize| -> Result<LossPoint, AttackError> {
        let l_fr = branch_loss(model, Branch::Fr, &f_v_fr, &state.x_a, &state.eps)?;
        let l_ar = branch_loss(model, Branch::Ar, &f_v_ar, &state.x_a, &state.eps)?;
        finite_or_abort(l_fr, iter, "fr")?;
        finite_or_abort(l_ar, iter, "ar")?;
        Ok(LossPoint {
            iter,
            loss_fr: l_fr,
            loss_ar: Some(l_ar),
        })
    };
    trace.push(record(&state, 0)?);

    for t in 1..=cfg.iterations {
        let inner = if t % 2 == 1 { odd_inner } else { odd_inner.other() };
        let outer = inner.other();

        // Inner phase: N signed steps on the inner branch, recording each
        // post-projection perturbation.
        let mut trajectory = InnerTrajectory {
            branch: inner,
            snapshots: Vec::with_capacity(cfg.inner_steps),
            cross_grads: Vec::with_capacity(cfg.inner_steps),
        };
        for _ in 0..cfg.inner_steps {
            let loss = jtmo_inner_step(model, inner, &mut state, victim_of(inner), cfg.alpha, cfg.gamma1)?;
            grad_evals += 1;
            finite_or_abort(loss, t - 1, inner.name())?;
            trajectory.snapshots.push(state.eps.clone());
        }

        // Outer phase: the other branch's gradient at every snapshot, then
        // one stabilised step from the final snapshot.
        for snapshot in &trajectory.snapshots {
            let x_a_t = Tensor::vector(state.x_a.clone());
            let (loss, grad) = branch_grad(model, outer, victim_of(outer), &x_a_t, snapshot)?;
            grad_evals += 1;
            finite_or_abort(loss, t - 1, outer.name())?;
            trajectory.cross_grads.push(grad);
        }
        ctgs_outer_step(&mut state, &trajectory, cfg.alpha, cfg.gamma2, cfg.gamma3)?;
        trace.push(record(&state, t)?);
    }

    Ok(AttackOutcome {
        eps: shaped(state.eps.clone(), x_a),
        x_adv: shaped(state.x_adv(), x_a),
        trace,
        grad_evals,
    })
}
