use pixrl_numcheck::*;

#[test]
fn square_derivative_at_three() {
    let g = finite_diff_grad(|v| v[0] * v[0], &[3.0], DEFAULT_EPS).unwrap();
    assert!((g.grad[0] - 6.0).abs() < 1e-8);
    assert!(g.nonsmooth.is_empty());
}

#[test]
fn constant_function_has_zero_gradient() {
    let g = finite_diff_grad(|_| 4.25, &[1.0, -2.0, 0.5], DEFAULT_EPS).unwrap();
    assert!(g.grad.iter().all(|&x| x == 0.0));
}

#[test]
fn abs_at_zero_is_flagged_nonsmooth() {
    let g = finite_diff_grad(|v| v[0].abs(), &[0.0], DEFAULT_EPS).unwrap();
    assert_eq!(g.nonsmooth, vec![0]);
    let g = finite_diff_grad(|v| v[0].abs(), &[0.5], DEFAULT_EPS).unwrap();
    assert!(g.nonsmooth.is_empty());
}

#[test]
fn small_kink_inside_the_step_is_flagged() {
    // slope changes by 0.02 at 3e-5, too gentle for the one-sided test
    let f = |v: &[f64]| 0.01 * v[0] + 0.01 * (v[0] - 3e-5).abs();
    let g = finite_diff_grad(f, &[0.0], DEFAULT_EPS).unwrap();
    assert_eq!(g.nonsmooth, vec![0]);
    for offset in [1e-6, 1.5e-5, 4e-5, 7e-5, -9e-5] {
        let f = |v: &[f64]| 0.01 * (v[0] - offset).abs();
        assert_eq!(finite_diff_grad(f, &[0.0], DEFAULT_EPS).unwrap().nonsmooth, vec![0], "kink at {offset}");
    }
    let relu = |v: &[f64]| 0.3 * (v[0] - 2e-5).max(0.0);
    assert_eq!(finite_diff_grad(relu, &[0.0], DEFAULT_EPS).unwrap().nonsmooth, vec![0]);
}

#[test]
fn smooth_curvature_is_not_flagged() {
    let g = finite_diff_grad(|v| (3.0 * v[0]).exp() + v[1].tanh(), &[1.0, -0.3], DEFAULT_EPS).unwrap();
    assert!(g.nonsmooth.is_empty());
    // tiny slope under large third derivative
    let g = finite_diff_grad(|v| 1e-6 * v[0] + 50.0 * v[0].powi(3), &[0.0], DEFAULT_EPS).unwrap();
    assert!(g.nonsmooth.is_empty());
}

#[test]
fn non_finite_loss_is_an_error() {
    let err = finite_diff_grad(|v| (v[0] - 1e-4).ln(), &[0.0], DEFAULT_EPS).unwrap_err();
    assert!(matches!(err, NumCheckError::NonFiniteLoss { .. }));
}

#[test]
fn report_uses_floored_denominator() {
    let r = compare_grads("zeros", &[0.0, 0.0], &[0.0, 0.0], 1e-5);
    assert!(r.passed);
    assert_eq!(r.max_rel_err, 0.0);
    let r = compare_grads("off", &[1.0, 2.0], &[1.0, 2.1], 1e-5);
    assert!(!r.passed);
    assert_eq!(r.worst_index, 1);
    assert!((r.max_rel_err - 0.1 / 2.1).abs() < 1e-12);
}

fn eye(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

#[test]
fn infonce_uniform_logits_is_log_batch() {
    let q = vec![vec![0.3, -0.2]; 4];
    let k = vec![vec![0.1, 0.5]; 4];
    let loss = brute_force_infonce(&q, &k, &eye(2)).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn infonce_zero_bilinear_is_log_batch() {
    let q = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 7.0]];
    let k = vec![vec![4.0, -1.0], vec![0.2, 0.2], vec![9.0, 1.0]];
    let w = vec![vec![0.0; 2]; 2];
    let loss = brute_force_infonce(&q, &k, &w).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn infonce_two_by_two_identity() {
    let q = eye(2);
    let k = eye(2);
    let loss = brute_force_infonce(&q, &k, &eye(2)).unwrap();
    let e = 1f64.exp();
    assert!((loss + (e / (e + 1.0)).ln()).abs() < 1e-12);
    assert!((loss - 0.31326168751822286).abs() < 1e-12);
}

#[test]
fn infonce_reports_overflow() {
    let q = vec![vec![1000.0]];
    let k = vec![vec![1000.0]];
    let err = brute_force_infonce(&q, &k, &[vec![1.0]]).unwrap_err();
    assert!(matches!(err, NumCheckError::Overflow { .. }));
}

#[test]
fn attention_single_token_returns_value_projection() {
    // identity value/output projections: output equals the token itself
    let d = 4;
    let mut w_qkv = vec![0.0; d * 3 * d];
    for r in 0..d {
        w_qkv[r * 3 * d + 2 * d + r] = 1.0;
        w_qkv[r * 3 * d + r] = 0.7;
    }
    let mut w_out = vec![0.0; d * d];
    for r in 0..d {
        w_out[r * d + r] = 1.0;
    }
    let p = AttentionParams { dim: d, heads: 2, w_qkv, b_qkv: vec![0.0; 3 * d], w_out, b_out: vec![0.0; d] };
    let tok = vec![vec![0.5, -1.0, 2.0, 0.25]];
    let out = brute_force_attention(&tok, &p).unwrap();
    assert_eq!(out, tok);
}

#[test]
fn attention_is_permutation_equivariant() {
    let d = 4;
    let w_qkv: Vec<f64> = (0..d * 3 * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
    let w_out: Vec<f64> = (0..d * d).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
    let p = AttentionParams { dim: d, heads: 2, w_qkv, b_qkv: vec![0.1; 3 * d], w_out, b_out: vec![-0.2; d] };
    let toks: Vec<Vec<f64>> = (0..3).map(|t| (0..d).map(|c| ((t * 5 + c * 3) % 7) as f64 * 0.3 - 1.0).collect()).collect();
    let out = brute_force_attention(&toks, &p).unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| toks[i].clone()).collect();
    let out_p = brute_force_attention(&permuted, &p).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..d {
            assert!((out_p[k][c] - out[i][c]).abs() < 1e-12);
        }
    }
}
