//! Finite-difference checks of the model's analytic gradients.

mod common;

use common::{jittered, project};
use irstd_diff::model::{IrstdDiff, ModelConfig};
use irstd_nn::gradcheck::check;
use irstd_nn::{Binding, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn assert_below(name: &str, worst: f64, tol: f64) {
    assert!(worst <= tol, "{name}: worst relative error {worst:e}");
}

#[test]
fn haar_layers() {
    assert_below("haar", common::haar_grad_error(), TOL);
}

#[test]
fn liw_block() {
    assert_below("liw", common::liw_grad_error(), TOL);
}

#[test]
fn losses() {
    for (name, err) in common::loss_grad_errors() {
        assert_below(name, err, TOL);
    }
}

#[test]
fn toy_denoiser() {
    assert_below("denoiser", common::denoiser_grad_error(), TOL);
}

#[test]
fn conditional_encoder_at_eighth_width() {
    let model = IrstdDiff::new(ModelConfig::scaled(64, 8).unwrap(), 14).unwrap();
    let store = model.params.cast::<f64>();
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let image = Var::constant(Tensor::<f64>::uniform([1, 1, 64, 64], 1.0, &mut r));
    let inputs = jittered(&store, 16);
    let g = check(
        &inputs,
        |v| {
            let p = Binding::from_vars(v.to_vec());
            let c = model.condition(&p, &image).unwrap();
            project(&c.prob, 17).add(&project(&c.latent, 18))
        },
        // Each probe moves thousands of ReLU inputs; a smaller step keeps
        // them off the kink.
        1e-8,
        3,
    );
    // ReLU kinks crossed by a probe are not a gradient error; they bound
    // what central differences can resolve for this network.
    let worst = g.rel_errors.iter().copied().fold(0.0, f64::max);
    assert_below("encoder", worst, 1e-3);
}
