//! Independent straight-line reimplementation of the alternating two-branch
//! attack, written against the documented update rules with naive loops and
//! no shared code with the library's tape/attack machinery. Used as a
//! bitwise oracle on toy-sized models.

use sibling_core::models::{Activation, SurrogateModel};

/// One dense layer's raw parameters.
struct RefLayer {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    relu: bool,
}

/// Raw weights of the three MLP stacks used by the attack.
pub struct RefNet {
    encoder: Vec<RefLayer>,
    fr: Vec<RefLayer>,
    ar: Vec<RefLayer>,
}

fn copy_mlp(mlp: &sibling_core::models::Mlp) -> Vec<RefLayer> {
    mlp.layers
        .iter()
        .map(|l| RefLayer {
            rows: l.w.shape()[0],
            cols: l.w.shape()[1],
            w: l.w.to_vec(),
            b: l.b.to_vec(),
            relu: matches!(l.act, Activation::Relu),
        })
        .collect()
}

impl RefNet {
    /// Copies the raw parameter values out of a surrogate model (data only;
    /// none of the model's forward/backward code is reused).
    pub fn from_model(m: &SurrogateModel) -> RefNet {
        RefNet {
            encoder: copy_mlp(&m.encoder),
            fr: copy_mlp(&m.fr),
            ar: copy_mlp(&m.ar_trunk),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
pub enum RefBranch {
    Fr,
    Ar,
}

fn sgn(v: f64) -> f64 {
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

fn project(eps: &mut [f64], x_a: &[f64], xi: f64) {
    for j in 0..eps.len() {
        let mut v = eps[j];
        if v > xi {
            v = xi;
        } else if v < -xi {
            v = -xi;
        }
        let hi = 1.0 - x_a[j];
        let lo = -x_a[j];
        if v > hi {
            v = hi;
        } else if v < lo {
            v = lo;
        }
        eps[j] = v;
    }
}

/// Forward pass through one layer stack, retaining every pre-activation
/// vector for the backward pass.
fn stack_forward(stack: &[RefLayer], x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut pre = Vec::with_capacity(stack.len());
    let mut h = x.to_vec();
    for layer in stack {
        let mut z = vec![0.0; layer.rows];
        for i in 0..layer.rows {
            let mut acc = 0.0;
            for k in 0..layer.cols {
                acc += layer.w[i * layer.cols + k] * h[k];
            }
            z[i] = acc;
        }
        for i in 0..layer.rows {
            z[i] += layer.b[i];
        }
        pre.push(z.clone());
        if layer.relu {
            for v in z.iter_mut() {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
        }
        h = z;
    }
    (pre, h)
}

/// Backward pass through one layer stack: given dL/d(output), accumulates
/// dL/d(input) with the same loop orders as the forward convention
/// (per-output-row gating, then a column-major accumulation).
fn stack_backward(stack: &[RefLayer], pre: &[Vec<f64>], mut g: Vec<f64>) -> Vec<f64> {
    for (li, layer) in stack.iter().enumerate().rev() {
        if layer.relu {
            let mut gated = vec![0.0; layer.rows];
            for i in 0..layer.rows {
                if pre[li][i] > 0.0 {
                    gated[i] += g[i];
                }
            }
            g = gated;
        }
        // Bias add passes the gradient through unchanged; the matrix product
        // maps it down to the layer input.
        let mut gx = vec![0.0; layer.cols];
        for k in 0..layer.cols {
            let mut acc = 0.0;
            for i in 0..layer.rows {
                acc += layer.w[i * layer.cols + k] * g[i];
            }
            gx[k] += acc;
        }
        g = gx;
    }
    g
}

struct CosParts {
    na: f64,
    denom: f64,
    cos: f64,
}

fn cos_parts(a: &[f64], b: &[f64]) -> CosParts {
    let mut ssa = 0.0;
    let mut ssb = 0.0;
    let mut dot = 0.0;
    for i in 0..a.len() {
        ssa += a[i] * a[i];
        ssb += b[i] * b[i];
        dot += a[i] * b[i];
    }
    let na = ssa.sqrt();
    let nb = ssb.sqrt();
    let denom = na * nb;
    CosParts {
        na,
        denom,
        cos: dot / denom,
    }
}

/// Branch features of an image: FR path ending in an L2 normalisation, or the
/// AR trunk's raw output. Returns per-stage caches for the backward pass.
struct BranchForward {
    enc_pre: Vec<Vec<f64>>,
    head_pre: Vec<Vec<f64>>,
    /// FR only: the head output before normalisation and its norm.
    raw: Vec<f64>,
    norm: f64,
    features: Vec<f64>,
}

fn branch_forward(net: &RefNet, branch: RefBranch, x: &[f64]) -> BranchForward {
    let (enc_pre, enc_out) = stack_forward(&net.encoder, x);
    let stack = match branch {
        RefBranch::Fr => &net.fr,
        RefBranch::Ar => &net.ar,
    };
    let (head_pre, head_out) = stack_forward(stack, &enc_out);
    match branch {
        RefBranch::Fr => {
            let mut ss = 0.0;
            for &v in &head_out {
                ss += v * v;
            }
            let norm = ss.sqrt();
            assert!(norm >= 1e-12, "degenerate embedding norm in reference");
            let mut features = vec![0.0; head_out.len()];
            for c in 0..head_out.len() {
                features[c] = head_out[c] / norm;
            }
            BranchForward {
                enc_pre,
                head_pre,
                raw: head_out,
                norm,
                features,
            }
        }
        RefBranch::Ar => BranchForward {
            enc_pre,
            head_pre,
            raw: Vec::new(),
            norm: 0.0,
            features: head_out,
        },
    }
}

/// Victim features of both branches (forward only).
pub fn victim_features(net: &RefNet, x_v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        branch_forward(net, RefBranch::Fr, x_v).features,
        branch_forward(net, RefBranch::Ar, x_v).features,
    )
}

/// Loss `1 - cos(features(clamp01(x_a + eps)), f_v)` of one branch.
fn branch_loss(net: &RefNet, branch: RefBranch, f_v: &[f64], x_a: &[f64], eps: &[f64]) -> f64 {
    let mut x_adv = vec![0.0; x_a.len()];
    for j in 0..x_a.len() {
        x_adv[j] = clamp01(x_a[j] + eps[j]);
    }
    let fwd = branch_forward(net, branch, &x_adv);
    1.0 - cos_parts(&fwd.features, f_v).cos
}

/// Loss and gradient of `1 - cos(features(x_a + eps), f_v)` w.r.t. `eps`.
fn branch_grad(
    net: &RefNet,
    branch: RefBranch,
    f_v: &[f64],
    x_a: &[f64],
    eps: &[f64],
) -> (f64, Vec<f64>) {
    let mut x_adv = vec![0.0; x_a.len()];
    for j in 0..x_a.len() {
        x_adv[j] = eps[j] + x_a[j];
    }
    let fwd = branch_forward(net, branch, &x_adv);
    let parts = cos_parts(&fwd.features, f_v);
    let loss = 1.0 - parts.cos;

    // d loss / d cos = -1; then the cosine's gradient w.r.t. its first input.
    let g0 = -1.0;
    let n_feat = fwd.features.len();
    let mut g_feat = vec![0.0; n_feat];
    for i in 0..n_feat {
        g_feat[i] += g0 * (f_v[i] / parts.denom - parts.cos * fwd.features[i] / (parts.na * parts.na));
    }

    let g_head = match branch {
        RefBranch::Fr => {
            // Through the L2 normalisation.
            let mut s = 0.0;
            for c in 0..n_feat {
                s += g_feat[c] * (fwd.raw[c] / fwd.norm);
            }
            let mut g_raw = vec![0.0; n_feat];
            for c in 0..n_feat {
                let y = fwd.raw[c] / fwd.norm;
                g_raw[c] += (g_feat[c] - y * s) / fwd.norm;
            }
            g_raw
        }
        RefBranch::Ar => g_feat,
    };
    let stack = match branch {
        RefBranch::Fr => &net.fr,
        RefBranch::Ar => &net.ar,
    };
    let g_enc = stack_backward(stack, &fwd.head_pre, g_head);
    let g_x = stack_backward(&net.encoder, &fwd.enc_pre, g_enc);
    // x_adv = eps + x_a: the gradient passes to eps unchanged.
    (loss, g_x)
}

/// Loss trace entry: `(iteration, fr_loss, ar_loss)`.
pub type RefTracePoint = (usize, f64, f64);

pub struct RefOutcome {
    pub eps: Vec<f64>,
    pub x_adv: Vec<f64>,
    pub trace: Vec<RefTracePoint>,
    pub grad_evals: u64,
}

/// Straight-line run of the full alternating two-branch attack: odd
/// iterations descend the FR branch for `n_inner` steps and take one
/// cross-branch outer step from the AR branch's gradients along the inner
/// snapshots; even iterations swap the branches.
#[allow(clippy::too_many_arguments)]
pub fn run(
    net: &RefNet,
    x_a: &[f64],
    x_v: &[f64],
    xi: f64,
    alpha: f64,
    iterations: usize,
    n_inner: usize,
    gamma1: f64,
    gamma2: f64,
    gamma3: f64,
) -> RefOutcome {
    let dim = x_a.len();
    let (f_v_fr, f_v_ar) = victim_features(net, x_v);
    let f_v = |b: RefBranch| -> &[f64] {
        match b {
            RefBranch::Fr => &f_v_fr,
            RefBranch::Ar => &f_v_ar,
        }
    };
    let mut eps = vec![0.0; dim];
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut grad_evals = 0u64;
    let record = |eps: &[f64], iter: usize| -> RefTracePoint {
        (
            iter,
            branch_loss(net, RefBranch::Fr, &f_v_fr, x_a, eps),
            branch_loss(net, RefBranch::Ar, &f_v_ar, x_a, eps),
        )
    };
    trace.push(record(&eps, 0));

    for t in 1..=iterations {
        let (inner, outer) = if t % 2 == 1 {
            (RefBranch::Fr, RefBranch::Ar)
        } else {
            (RefBranch::Ar, RefBranch::Fr)
        };

        let mut snapshots: Vec<Vec<f64>> = Vec::with_capacity(n_inner);
        for _ in 0..n_inner {
            let (_, grad) = branch_grad(net, inner, f_v(inner), x_a, &eps);
            grad_evals += 1;
            for j in 0..dim {
                eps[j] -= alpha * sgn(gamma1 * grad[j]);
            }
            project(&mut eps, x_a, xi);
            snapshots.push(eps.clone());
        }

        let mut cross: Vec<Vec<f64>> = Vec::with_capacity(n_inner);
        for snap in &snapshots {
            let (_, grad) = branch_grad(net, outer, f_v(outer), x_a, snap);
            grad_evals += 1;
            cross.push(grad);
        }

        let n = cross.len();
        let final_grad = &cross[n - 1];
        let mut stepped = snapshots[n - 1].clone();
        for j in 0..dim {
            let mut hist = 0.0;
            for g in &cross[..n - 1] {
                hist += g[j];
            }
            let v = gamma2 * (final_grad[j] + gamma3 * hist);
            stepped[j] -= alpha * sgn(v);
        }
        project(&mut stepped, x_a, xi);
        eps = stepped;
        trace.push(record(&eps, t));
    }

    let mut x_adv = vec![0.0; dim];
    for j in 0..dim {
        x_adv[j] = clamp01(x_a[j] + eps[j]);
    }
    RefOutcome {
        eps,
        x_adv,
        trace,
        grad_evals,
    }
}
