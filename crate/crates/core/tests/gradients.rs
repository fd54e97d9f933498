mod common;

use common::{grad_check, gradient_suite, random_matrix, rng, FD_STEP};
use factornet::layers::{soft_pca_losses, AdditiveLayer, Bindings, LinearLayer};
use factornet::Tape;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, worst, tol) in gradient_suite(10, 7).unwrap() {
        assert!(worst < tol, "{name}: relative error {worst:e} exceeds {tol:e}");
    }
}

#[test]
fn soft_pca_losses_differentiate() {
    let mut r = rng(3);
    let x = random_matrix(&mut r, 8, 5);
    let w = random_matrix(&mut r, 5, 2);
    let err = grad_check(&[x, w], FD_STEP, 1, |t, ids| {
        let proj = t.matmul(ids[0], ids[1])?;
        let l = soft_pca_losses(t, ids[0], proj)?;
        let both = t.add(l.variance, l.orthogonality)?;
        // grad_check needs a matrix-valued output; a 1x1 works.
        Ok(both)
    })
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn additive_block_chain_differentiates() {
    let mut r = rng(4);
    let layer = AdditiveLayer::new(&[2, 3], &[2, 1], &mut r).unwrap();
    let x = random_matrix(&mut r, 6, 5);
    let err = grad_check(&[x], FD_STEP, 2, |t, ids| {
        let mut b = Bindings::default();
        let y = layer.forward(t, ids[0], &mut b)?;
        t.leaky_relu(y, 0.01)
    })
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn linear_layer_weight_gradient() {
    let mut r = rng(5);
    let lin = LinearLayer::new(4, 3, &mut r);
    let x = random_matrix(&mut r, 5, 4);
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let mut b = Bindings::default();
    let out = lin.forward(&mut tape, xi, &mut b).unwrap();
    let loss = tape.frobenius_sq(out).unwrap();
    tape.backward(loss).unwrap();
    let gw = tape.grad(b.slots()[0].unwrap()).unwrap().clone();
    // d‖XW + 1b‖² / dW = 2 Xᵀ(XW + 1b)
    let expected = x.t_matmul(tape.value(out)).unwrap().scale(2.0);
    assert!(gw.sub(&expected).unwrap().max_abs() < 1e-12);
}
