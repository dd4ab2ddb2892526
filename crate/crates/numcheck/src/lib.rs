//! Independent numerical oracles for the test suite.
//!
//! Everything here is written in plain `f64` loops and deliberately shares no
//! code with the tensor substrate it is used to check: central finite
//! differences for gradients, and explicit per-element evaluation of the
//! contrastive loss and multi-head attention.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumCheckError {
    #[error("loss is not finite ({value}) while perturbing element {index}")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("exp overflowed at query {row}, key {col} (logit {logit})")]
    Overflow { row: usize, col: usize, logit: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, NumCheckError>;

/// Default step used by the gradient checks.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Default tolerance on the relative gradient error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// One-sided slopes that disagree by more than this (relative to the slope
/// magnitude, floored at 1) mark an element as sitting on a kink.
pub const KINK_TOLERANCE: f64 = 1e-2;

/// Tolerance, relative to the central difference, on the smoothness identity
/// `c(ε) − c(ε/2) = 4·(c(ε/2) − c(ε/4))`. For a smooth loss the central
/// difference is `f′ + a·h² + O(h⁴)`, so the identity holds to `O(ε⁴)`; a kink
/// inside the step breaks it.
pub const STEP_AGREEMENT: f64 = 1e-6;

/// Finite-difference estimate of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGrad {
    /// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
    pub grad: Vec<f64>,
    /// Elements with a kink inside the finite-difference stencil.
    pub nonsmooth: Vec<usize>,
}

/// Central finite-difference gradient of `loss` at `params`.
///
/// `loss` must be pure and deterministic. Each element is perturbed in turn and
/// restored before the next one.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], eps: f64) -> Result<NumericGrad>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = params.to_vec();
    let base = loss(&point);
    if !base.is_finite() {
        return Err(NumCheckError::NonFiniteLoss { index: 0, value: base });
    }
    let mut grad = Vec::with_capacity(params.len());
    let mut nonsmooth = Vec::new();
    for i in 0..params.len() {
        let x = params[i];
        point[i] = x + eps;
        let plus = loss(&point);
        point[i] = x - eps;
        let minus = loss(&point);
        point[i] = x;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(NumCheckError::NonFiniteLoss { index: i, value: v });
            }
        }
        let mut central_at = |h: f64| {
            point[i] = x + h;
            let p = loss(&point);
            point[i] = x - h;
            let m = loss(&point);
            point[i] = x;
            (p - m) / (2.0 * h)
        };
        let half = central_at(0.5 * eps);
        let quarter = central_at(0.25 * eps);
        let central = (plus - minus) / (2.0 * eps);
        grad.push(central);
        let forward = (plus - base) / eps;
        let backward = (base - minus) / eps;
        let scale = forward.abs().max(backward.abs()).max(1.0);
        let curvature_gap = (central - half) - 4.0 * (half - quarter);
        // floor covers rounding of the loss itself, amplified by the 1/ε steps
        let agreement = STEP_AGREEMENT * central.abs().max(half.abs()) + 1e-9 * base.abs().max(1.0);
        if (forward - backward).abs() > KINK_TOLERANCE * scale || curvature_gap.abs() > agreement {
            nonsmooth.push(i);
        }
    }
    Ok(NumericGrad { grad, nonsmooth })
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
    pub max_rel_err: f64,
    /// Element with the largest absolute disagreement.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} rel_err={:.3e} worst={} tol={:.0e} {}",
            self.name,
            self.max_rel_err,
            self.worst_index,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compare one parameter tensor's analytic gradient with its numeric estimate.
pub fn compare_grads(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch for {name}");
    let mut worst_index = 0;
    let mut worst = 0.0f64;
    let mut scale = 1e-8f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let d = (a - n).abs();
        if d > worst || d.is_nan() {
            worst = d;
            worst_index = i;
        }
        scale = scale.max(a.abs()).max(n.abs());
    }
    let max_rel_err = worst / scale;
    GradReport {
        name: name.to_string(),
        max_rel_err,
        worst_index,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}

fn check_rows(what: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
    match rows.iter().position(|r| r.len() != width) {
        Some(i) => Err(NumCheckError::Shape(format!(
            "{what} row {i} has length {}, expected {width}",
            rows[i].len()
        ))),
        None => Ok(()),
    }
}

/// Contrastive loss evaluated directly from its definition.
///
/// Logit `l_ij = q_iᵀ W k_j`; the positive key for query `i` is key `i`. The
/// result is `−(1/B) Σ_i log(exp(l_ii) / Σ_j exp(l_ij))`. No max-subtraction is
/// applied, so large logits overflow and are reported as errors.
pub fn brute_force_infonce(queries: &[Vec<f64>], keys: &[Vec<f64>], w: &[Vec<f64>]) -> Result<f64> {
    let b = queries.len();
    if keys.len() != b || b == 0 {
        return Err(NumCheckError::Shape(format!("{b} queries vs {} keys", keys.len())));
    }
    let d = w.len();
    check_rows("query", queries, d)?;
    check_rows("key", keys, d)?;
    check_rows("W", w, d)?;
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        let mut positive = 0.0;
        for j in 0..b {
            let mut logit = 0.0;
            for r in 0..d {
                for c in 0..d {
                    logit += queries[i][r] * w[r][c] * keys[j][c];
                }
            }
            let e = logit.exp();
            if !e.is_finite() {
                return Err(NumCheckError::Overflow { row: i, col: j, logit });
            }
            denom += e;
            if i == j {
                positive = e;
            }
        }
        total += -(positive / denom).ln();
    }
    Ok(total / b as f64)
}

/// Weights of one multi-head self-attention layer, row-major.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    /// `dim × 3·dim`, columns ordered `[q | k | v]`, heads contiguous inside each.
    pub w_qkv: Vec<f64>,
    pub b_qkv: Vec<f64>,
    /// `dim × dim`.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// Multi-head self-attention evaluated pair by pair.
pub fn brute_force_attention(tokens: &[Vec<f64>], p: &AttentionParams) -> Result<Vec<Vec<f64>>> {
    let d = p.dim;
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(NumCheckError::Shape(format!("dim {d} not divisible by {} heads", p.heads)));
    }
    if p.w_qkv.len() != d * 3 * d || p.b_qkv.len() != 3 * d || p.w_out.len() != d * d || p.b_out.len() != d {
        return Err(NumCheckError::Shape("attention parameter sizes".into()));
    }
    check_rows("token", tokens, d)?;
    let n = tokens.len();
    let hd = d / p.heads;

    // project every token to q, k, v
    let mut qkv = vec![vec![0.0; 3 * d]; n];
    for t in 0..n {
        for c in 0..3 * d {
            let mut acc = p.b_qkv[c];
            for r in 0..d {
                acc += tokens[t][r] * p.w_qkv[r * 3 * d + c];
            }
            qkv[t][c] = acc;
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = vec![vec![0.0; d]; n];
    for h in 0..p.heads {
        let off = h * hd;
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..hd {
                    s += qkv[i][off + c] * qkv[j][d + off + c];
                }
                scores[j] = s * scale;
            }
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..n {
                let weight = scores[j].exp() / total;
                for c in 0..hd {
                    mixed[i][off + c] += weight * qkv[j][2 * d + off + c];
                }
            }
        }
    }

    let mut out = vec![vec![0.0; d]; n];
    for t in 0..n {
        for c in 0..d {
            let mut acc = p.b_out[c];
            for r in 0..d {
                acc += mixed[t][r] * p.w_out[r * d + c];
            }
            out[t][c] = acc;
        }
    }
    Ok(out)
}
