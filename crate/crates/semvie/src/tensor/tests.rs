use super::*;
use crate::rng;

fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], trainable: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng::uniform_in(rng, -1.0, 1.0)).collect();
    if trainable {
        Tensor::param(shape, data).unwrap()
    } else {
        Tensor::new(shape, data).unwrap()
    }
}

fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (tol {tol})"
        );
    }
}

// --- matmul -----------------------------------------------------------------

#[test]
fn matmul_identity_leaves_input_unchanged() {
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = Tensor::new(&[2, 3], vec![5.0, -1.0, 2.0, 0.5, 7.0, 3.0]).unwrap();
    let y = eye.matmul(&x).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn matmul_two_by_two_matches_defining_sum() {
    // Direct evaluation of c[i][j] = Σ_p a[i][p]·b[p][j]:
    // [1,2;3,4]·[5,6;7,8] = [1·5+2·7, 1·6+2·8; 3·5+4·7, 3·6+4·8]
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_zero_matrix_gives_zeros() {
    let z = Tensor::zeros(&[2, 2]).unwrap();
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(z.matmul(&x).unwrap().to_vec(), vec![0.0; 4]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]).unwrap();
    let b = Tensor::zeros(&[2, 2]).unwrap();
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_associative_on_small_random_matrices() {
    let mut rng = rng::seeded(11);
    for _ in 0..20 {
        let a = random_tensor(&mut rng, &[3, 4], false);
        let b = random_tensor(&mut rng, &[4, 5], false);
        let c = random_tensor(&mut rng, &[5, 2], false);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.to_vec().iter().zip(right.to_vec()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel < 1e-4, "{x} vs {y}");
        }
    }
}

// --- softmax ----------------------------------------------------------------

#[test]
fn softmax_uniform_inputs_give_uniform_distribution() {
    let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
    assert_close(&p, &[1.0 / 3.0; 3], 1e-7);
}

#[test]
fn softmax_closed_form_quarter_three_quarters() {
    // e^0 = 1 and e^{ln 3} = 3, so probabilities are 1/4 and 3/4.
    let p = softmax(&[0.0, 3.0f32.ln()], 1.0).unwrap();
    assert_close(&p, &[0.25, 0.75], 1e-6);
}

#[test]
fn softmax_invariant_under_constant_shift() {
    let xs = [0.3, -1.2, 2.5, 0.0];
    let shifted: Vec<f32> = xs.iter().map(|v| v + 123.0).collect();
    let a = softmax(&xs, 1.0).unwrap();
    let b = softmax(&shifted, 1.0).unwrap();
    assert_close(&a, &b, 1e-6);
}

#[test]
fn softmax_sums_to_one_for_large_magnitudes() {
    let mut rng = rng::seeded(5);
    for _ in 0..50 {
        let xs: Vec<f32> = (0..16).map(|_| rng::uniform_in(&mut rng, -1e4, 1e4)).collect();
        let p = softmax(&xs, 1.0).unwrap();
        let total: f32 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "sum {total}");
        assert!(p.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    assert!(matches!(
        softmax(&[0.0, f32::NAN], 1.0),
        Err(Error::Numeric(_))
    ));
}

// --- layer norm ---------------------------------------------------------------

#[test]
fn layer_norm_constant_row_collapses_to_zero() {
    let x = Tensor::new(&[4], vec![7.0; 4]).unwrap();
    let gamma = Tensor::new(&[4], vec![1.0; 4]).unwrap();
    let beta = Tensor::zeros(&[4]).unwrap();
    let y = layer_norm_rows(&x, &gamma, &beta, 1e-5).unwrap();
    assert_close(&y.to_vec(), &[0.0; 4], 1e-6);
}

#[test]
fn layer_norm_unit_variance_row_is_fixed_point() {
    // mean 0, variance 1, so with eps = 0 the row maps to itself.
    let x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
    let gamma = Tensor::new(&[2], vec![1.0; 2]).unwrap();
    let beta = Tensor::zeros(&[2]).unwrap();
    let y = layer_norm_rows(&x, &gamma, &beta, 0.0).unwrap();
    assert_close(&y.to_vec(), &[1.0, -1.0], 1e-6);
}

#[test]
fn layer_norm_zero_gamma_returns_beta() {
    let x = Tensor::new(&[3], vec![0.4, 9.0, -2.0]).unwrap();
    let gamma = Tensor::zeros(&[3]).unwrap();
    let beta = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = layer_norm_rows(&x, &gamma, &beta, 1e-5).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0]);
}

// --- cross entropy -------------------------------------------------------------

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let v = 11;
    let logits = Tensor::zeros(&[1, v]).unwrap();
    let loss = cross_entropy(&logits, 4).unwrap();
    assert!((loss.item() - (v as f32).ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_target_drives_loss_to_zero() {
    let mut data = vec![0.0f32; 8];
    data[5] = 60.0;
    let logits = Tensor::new(&[1, 8], data).unwrap();
    let loss = cross_entropy(&logits, 5).unwrap();
    assert!(loss.item() < 1e-6, "loss {}", loss.item());
}

#[test]
fn cross_entropy_closed_form_two_logits() {
    // softmax([0, ln 3]) = [1/4, 3/4]; −ln(3/4) = ln(4/3).
    let logits = Tensor::new(&[1, 2], vec![0.0, 3.0f32.ln()]).unwrap();
    let loss = cross_entropy(&logits, 1).unwrap();
    assert!((loss.item() - (4.0f32 / 3.0).ln()).abs() < 1e-6);
    assert!((loss.item() - 0.28768).abs() < 1e-4);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let logits = Tensor::zeros(&[1, 4]).unwrap();
    assert!(matches!(cross_entropy(&logits, 4), Err(Error::Index(_))));
}

// --- autodiff ----------------------------------------------------------------

/// Test-side oracle: central finite differences of an arbitrary f64 function.
fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[test]
fn square_gradient_matches_analytic_and_oracle() {
    // f(x) = x² at x = 3: reverse mode gives exactly 6, and the independent
    // f64 central-difference oracle agrees to well below 1e-6.
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let loss = x.mul_elem(&x).unwrap().sum_all();
    loss.backward().unwrap();
    let analytic = x.grad().unwrap()[0];
    assert_eq!(analytic, 6.0);

    let oracle = central_diff(|v| v * v, 3.0, 1e-3);
    assert!((analytic as f64 - oracle).abs() < 1e-6);

    let worst = grad_check(&[&x], || Ok(x.mul_elem(&x)?.sum_all()), 1e-2).unwrap();
    assert!(worst < 1e-3, "worst {worst}");
}

#[test]
fn linear_gradient_is_exact() {
    // f(x) = Σ c·x has constant gradient c; finite differences agree exactly
    // up to rounding.
    let c = Tensor::new(&[4], vec![2.0, -1.0, 0.5, 4.0]).unwrap();
    let x = Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let loss = x.mul_elem(&c).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), c.to_vec());
    let worst = grad_check(&[&x], || Ok(x.mul_elem(&c)?.sum_all()), 1e-2).unwrap();
    assert!(worst < 1e-4, "worst {worst}");
}

#[test]
fn frozen_tensors_never_accumulate_gradient() {
    let frozen = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let live = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
    let loss = frozen.matmul(&live).unwrap().sum_all();
    loss.backward().unwrap();
    assert!(frozen.grad().is_none());
    assert!(live.grad().is_some());
}

#[test]
fn no_grad_suppresses_graph_recording() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = no_grad(|| x.mul_elem(&x).unwrap().sum_all());
    assert!(!y.requires_grad());
    y.backward().unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::param(&[1], vec![2.0]).unwrap();
    for _ in 0..2 {
        let loss = x.mul_elem(&x).unwrap().sum_all();
        loss.backward().unwrap();
    }
    assert_eq!(x.grad().unwrap()[0], 8.0);
    x.zero_grad();
    assert!(x.grad().is_none());
}

/// Finite-difference check of every differentiable op on random small inputs.
#[test]
fn every_op_passes_finite_difference_check() {
    let mut rng = rng::seeded(7);

    // matmul, both sides
    let a = random_tensor(&mut rng, &[3, 4], true);
    let b = random_tensor(&mut rng, &[4, 2], true);
    let worst = grad_check(&[&a, &b], || Ok(a.matmul(&b)?.sum_all()), 1e-2).unwrap();
    assert!(worst < 1e-3, "matmul {worst}");

    // add / scale / transpose / slice / concat chained
    let x = random_tensor(&mut rng, &[3, 4], true);
    let y = random_tensor(&mut rng, &[3, 4], true);
    let worst = grad_check(
        &[&x, &y],
        || {
            let s = x.add(&y)?.scale(1.7).transpose()?; // 4×3
            let left = s.slice_cols(0, 2)?;
            let right = s.slice_cols(2, 1)?;
            Ok(concat_cols(&[right, left])?.sum_all())
        },
        1e-2,
    )
    .unwrap();
    assert!(worst < 1e-3, "add/scale/transpose/slice/concat {worst}");

    // gather + interleave (routing pair)
    let h = random_tensor(&mut rng, &[5, 3], true);
    let worst = grad_check(
        &[&h],
        || {
            let odd = gather_rows(&h, &[1, 3])?;
            let even = gather_rows(&h, &[0, 2, 4])?;
            let merged = interleave_rows(&[odd, even], &[vec![1, 3], vec![0, 2, 4]])?;
            Ok(merged.mul_elem(&merged)?.sum_all())
        },
        1e-2,
    )
    .unwrap();
    assert!(worst < 1e-3, "gather/interleave {worst}");

    // silu
    let x = random_tensor(&mut rng, &[2, 6], true);
    let worst = grad_check(&[&x], || Ok(x.silu().sum_all()), 1e-2).unwrap();
    assert!(worst < 1e-3, "silu {worst}");

    // layer norm (x, gamma, beta)
    let x = random_tensor(&mut rng, &[3, 8], true);
    let gamma = random_tensor(&mut rng, &[8], true);
    let beta = random_tensor(&mut rng, &[8], true);
    let w = random_tensor(&mut rng, &[3, 8], false);
    let worst = grad_check(
        &[&x, &gamma, &beta],
        || Ok(layer_norm_rows(&x, &gamma, &beta, 1e-5)?.mul_elem(&w)?.sum_all()),
        1e-2,
    )
    .unwrap();
    assert!(worst < 1e-3, "layer_norm {worst}");

    // softmax rows, plain and causal
    for causal in [false, true] {
        let x = random_tensor(&mut rng, &[4, 4], true);
        let w = random_tensor(&mut rng, &[4, 4], false);
        let worst = grad_check(
            &[&x],
            || Ok(softmax_rows(&x, 0.7, causal)?.mul_elem(&w)?.sum_all()),
            1e-2,
        )
        .unwrap();
        assert!(worst < 1e-3, "softmax causal={causal} {worst}");
    }

    // cross entropy with a mask
    let logits = random_tensor(&mut rng, &[4, 6], true);
    let targets = [2u32, 0, 5, 1];
    let mask = [true, false, true, true];
    let worst = grad_check(
        &[&logits],
        || cross_entropy_rows(&logits, &targets, &mask),
        1e-2,
    )
    .unwrap();
    assert!(worst < 1e-3, "cross_entropy {worst}");
}

#[test]
fn causal_softmax_zeroes_hidden_columns() {
    let x = Tensor::new(&[3, 3], vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 0.1, 0.2, 0.3]).unwrap();
    let p = softmax_rows(&x, 1.0, true).unwrap();
    let d = p.to_vec();
    assert_eq!(d[1], 0.0);
    assert_eq!(d[2], 0.0);
    assert_eq!(d[5], 0.0);
    assert!((d[0] - 1.0).abs() < 1e-6);
    assert!((d[3] - 0.5).abs() < 1e-6 && (d[4] - 0.5).abs() < 1e-6);
}

#[test]
fn cross_entropy_rows_requires_an_unmasked_row() {
    let logits = Tensor::zeros(&[2, 4]).unwrap();
    assert!(matches!(
        cross_entropy_rows(&logits, &[0, 1], &[false, false]),
        Err(Error::EmptyLoss(_))
    ));
}

#[test]
fn grad_check_rejects_out_of_range_eps() {
    let x = Tensor::param(&[1], vec![1.0]).unwrap();
    assert!(matches!(
        grad_check(&[&x], || Ok(x.sum_all()), 0.5),
        Err(Error::Config(_))
    ));
}
