//! Analytic gradients against central finite differences.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use dclr_core::autograd::Tape;
use dclr_core::contrastive::Pairing;
use dclr_core::convcrf::{self, CrfConfig, ProbMap};
use dclr_core::encoder::{DUNetConfig, EncoderModel, ProjectionConfig};
use dclr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use gradcheck::Outcome;

fn assert_within_tolerance(outcomes: Vec<Outcome>) {
    assert!(!outcomes.is_empty());
    for o in outcomes {
        eprintln!("{}: worst relative error {:e} over {} probes", o.name, o.worst, o.probes);
        assert!(o.passed(), "{}: relative error {:e} at {}", o.name, o.worst, o.detail);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn conv2d_padded() {
    assert_within_tolerance(gradcheck::conv2d_padded());
}

#[test]
fn conv2d_strided_unpadded() {
    assert_within_tolerance(gradcheck::conv2d_strided_unpadded());
}

#[test]
fn relu() {
    assert_within_tolerance(gradcheck::relu());
}

#[test]
fn maxpool2d() {
    assert_within_tolerance(gradcheck::maxpool2d());
}

#[test]
fn upsample2x() {
    assert_within_tolerance(gradcheck::upsample2x());
}

#[test]
fn concat_channels() {
    assert_within_tolerance(gradcheck::concat_channels());
}

#[test]
fn global_avg_pool() {
    assert_within_tolerance(gradcheck::global_avg_pool());
}

#[test]
fn linear() {
    assert_within_tolerance(gradcheck::linear());
}

#[test]
fn elementwise_ops() {
    assert_within_tolerance(gradcheck::elementwise_ops());
}

#[test]
fn nt_xent() {
    assert_within_tolerance(gradcheck::nt_xent());
}

#[test]
fn softmax_ops() {
    assert_within_tolerance(gradcheck::softmax_ops());
}

#[test]
fn crf_kernel_and_message() {
    assert_within_tolerance(gradcheck::crf_kernel_and_message());
}

#[test]
fn crf_refinement_parameters() {
    assert_within_tolerance(gradcheck::crf_refinement_parameters());
}

#[test]
fn encoder_projection_loss_composition() {
    assert_within_tolerance(gradcheck::encoder_projection_loss_composition());
}

#[test]
fn traced_refinement_matches_direct_refinement() {
    let (h, w) = (7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let fg: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect();
    let probs = ProbMap::from_foreground(h, w, &fg).unwrap();
    let image = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
    let specs = convcrf::default_specs();
    let cfg = CrfConfig {
        filter_size: 5,
        iterations: 3,
    };
    let direct = convcrf::crf_refine(&probs, &image, &specs, &cfg).unwrap();
    let mut tape = Tape::new();
    let (logits, _) = convcrf::trace_refine(&mut tape, &probs, &image, &specs, &cfg).unwrap();
    let traced = tape.softmax_channels(logits).unwrap();
    assert!(tape.value(traced).max_abs_diff(direct.tensor()).unwrap() < 1e-6);
}

#[test]
fn every_conv_weight_receives_gradient() {
    let model = EncoderModel::init(DUNetConfig::default(), ProjectionConfig::default(), 70).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = uniform(&mut rng, &[4, 3, 64, 64], 0.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = model.trace(&mut tape, xv, true).unwrap();
    let loss = tape.nt_xent(out.z, &Pairing::adjacent(4).unwrap(), 0.5).unwrap();
    tape.backward(loss).unwrap();
    for (name, &p) in model.names().iter().zip(&out.params) {
        if name.ends_with("weight") {
            let g = tape.grad_or_zeros(p);
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
}
