//! Analytic gradients against central finite differences, shared by the
//! gradient tests and the acceptance harness.
#![allow(dead_code)]

use dclr_core::autograd::{Tape, Var};
use dclr_core::contrastive::Pairing;
use dclr_core::convcrf::{self, CrfConfig, KernelOrientation, KernelSpec, ProbMap};
use dclr_core::encoder::{DUNetConfig, EncoderModel, ProjectionConfig};
use dclr_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst probe of one gradient check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub probes: usize,
    pub worst: f64,
    pub detail: String,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.worst <= TOLERANCE
    }
}

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const PROBES: usize = 30;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Value of `sum(out * r)` in f64.
fn weighted(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// `|a - n|` over the larger of `|a|`, `|n|` and `scale`, the largest
/// analytic gradient component of the function under test. The floor keeps
/// components far below the function's gradient scale from turning f32
/// rounding in the forward pass into a large relative error.
fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale)
}

/// Checks `sum(f(inputs) * R)` for a random `R` at `PROBES` random
/// coordinates of the differentiable inputs.
fn check<F>(name: &str, inputs: Vec<Tensor>, differentiable: &[bool], seed: u64, f: F) -> Outcome
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |values: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    };
    let out_shape = eval(&inputs).shape().to_vec();
    let r = uniform(&mut rng, &out_shape, -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward_with(out, r.clone()).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let candidates: Vec<usize> = (0..inputs.len()).filter(|&i| differentiable[i]).collect();
    let scale = candidates
        .iter()
        .flat_map(|&i| grads[i].data().iter())
        .fold(0.0f64, |m, &g| m.max(g.abs() as f64));
    if scale == 0.0 {
        return Outcome {
            name: name.to_string(),
            probes: 0,
            worst: f64::INFINITY,
            detail: "gradient is identically zero".into(),
        };
    }

    let mut worst = 0.0f64;
    let mut detail = String::new();
    for _ in 0..PROBES {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let c = rng.gen_range(0..inputs[i].len());
        let mut plus = inputs.clone();
        let mut minus = inputs.clone();
        let v = inputs[i].data()[c];
        plus[i].data_mut()[c] = v + STEP;
        minus[i].data_mut()[c] = v - STEP;
        // divide by the realized f32 displacement, not the requested one
        let h = (plus[i].data()[c] - minus[i].data()[c]) as f64;
        let numeric = (weighted(&eval(&plus), &r) - weighted(&eval(&minus), &r)) / h;
        let analytic = grads[i].data()[c] as f64;
        let err = relative_error(analytic, numeric, scale);
        if err > worst {
            worst = err;
            detail = format!("input {i}[{c}] analytic {analytic} numeric {numeric}");
        }
    }
    Outcome {
        name: name.to_string(),
        probes: PROBES,
        worst,
        detail,
    }
}

/// Values in [-1, 1] at least `gap` away from zero and from each other, so
/// that a perturbation of size `STEP` never crosses a kink or flips a max.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let slots = (2.0 / gap) as usize;
    assert!(slots > 2 * n, "shape too large for the requested gap");
    let mut picks: Vec<usize> = (0..slots).collect();
    for i in 0..n {
        let j = rng.gen_range(i..slots);
        picks.swap(i, j);
    }
    let data = picks[..n]
        .iter()
        .map(|&k| {
            let v = -1.0 + gap * (k as f32 + 0.5);
            if v.abs() < gap { v + gap * v.signum().max(0.0) * 2.0 + gap } else { v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn conv2d_padded() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0),
        uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    ];
    out.push(check("conv2d", inputs, &[true, true, true], 11, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)));
    out
}

pub fn conv2d_strided_unpadded() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        uniform(&mut rng, &[1, 2, 7, 7], -1.0, 1.0),
        uniform(&mut rng, &[3, 2, 3, 1], -1.0, 1.0),
    ];
    out.push(check("conv2d stride 2", inputs, &[true, true], 12, |t, v| t.conv2d(v[0], v[1], None, 2, 0)));
    out
}

pub fn relu() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    out.push(check("relu", vec![separated(&mut rng, &[2, 3, 4, 4], 0.01)], &[true], 13, |t, v| t.relu(v[0])));
    out
}

pub fn maxpool2d() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    out.push(check("maxpool2d", vec![separated(&mut rng, &[2, 2, 6, 4], 0.01)], &[true], 14, |t, v| {
        t.maxpool2d(v[0])
    }));
    out
}

pub fn upsample2x() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    out.push(check("upsample2x", vec![uniform(&mut rng, &[1, 3, 3, 2], -1.0, 1.0)], &[true], 15, |t, v| {
        t.upsample2x(v[0])
    }));
    out
}

pub fn concat_channels() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![
        uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
        uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0),
    ];
    out.push(check("concat_channels", inputs, &[true, true], 16, |t, v| t.concat_channels(v[0], v[1])));
    out
}

pub fn global_avg_pool() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    out.push(check("global_avg_pool", vec![uniform(&mut rng, &[3, 4, 5, 5], -1.0, 1.0)], &[true], 17, |t, v| {
        t.global_avg_pool(v[0])
    }));
    out
}

pub fn linear() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![uniform(&mut rng, &[5, 6], -1.0, 1.0), uniform(&mut rng, &[4, 6], -1.0, 1.0)];
    out.push(check("linear", inputs, &[true, true], 18, |t, v| t.linear(v[0], v[1])));
    out
}

pub fn elementwise_ops() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let s = uniform(&mut rng, &[1], -1.0, 1.0);
    out.push(check("add", vec![a.clone(), b.clone()], &[true, true], 19, |t, v| t.add(v[0], v[1])));
    out.push(check("mul", vec![a.clone(), b.clone()], &[true, true], 20, |t, v| t.mul(v[0], v[1])));
    out.push(check("scale", vec![a.clone(), s], &[true, true], 21, |t, v| t.scale(v[0], v[1])));
    out.push(check("square", vec![a.clone()], &[true], 22, |t, v| t.square(v[0])));
    out.push(check("sum", vec![a], &[true], 23, |t, v| t.sum(v[0])));
    out
}

pub fn nt_xent() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (views, tau) in [(4usize, 0.5f32), (8, 0.1), (6, 1.0)] {
        let pairing = Pairing::adjacent(views).unwrap();
        let z = uniform(&mut rng, &[views, 5], -1.0, 1.0);
        out.push(check(&format!("nt_xent 2b={views} tau={tau}"), vec![z], &[true], 24 + views as u64, |t, v| {
            t.nt_xent(v[0], &pairing, tau)
        }));
    }
    out
}

pub fn softmax_ops() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    out.push(check("softmax_channels", vec![x], &[true], 31, |t, v| t.softmax_channels(v[0])));
    // the loss is a per-pixel mean, so a small map keeps each component large
    let x = uniform(&mut rng, &[1, 3, 2, 3], -1.0, 1.0);
    let labels: Vec<u8> = (0..6).map(|_| rng.gen_range(0..3)).collect();
    out.push(check("softmax_cross_entropy", vec![x], &[true], 32, |t, v| t.softmax_cross_entropy(v[0], &labels)));
    out
}

pub fn crf_kernel_and_message() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let features = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
    let theta = uniform(&mut rng, &[3], 0.5, 1.5);
    for orientation in [KernelOrientation::Source, KernelOrientation::Gather] {
        let f = features.clone();
        out.push(check(&format!("gaussian_kernel {orientation:?}"), vec![theta.clone()], &[true], 41, move |t, v| {
            t.gaussian_kernel(&f, v[0], 3, orientation)
        }));
    }
    let kernel = uniform(&mut rng, &[1, 5, 5, 6, 6], -1.0, 1.0);
    let probs = uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    out.push(check("message_pass", vec![kernel, probs], &[true, true], 42, |t, v| t.message_pass(v[0], v[1])));
    out
}

pub fn crf_refinement_parameters() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (h, w) = (6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let fg: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect();
    let probs = ProbMap::from_foreground(h, w, &fg).unwrap();
    let image = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
    let labels: Vec<u8> = fg.iter().map(|&p| u8::from(p > 0.5)).collect();
    let cfg = CrfConfig {
        filter_size: 3,
        iterations: 2,
    };
    let base = [KernelSpec::spatial(2.0, 0.5), KernelSpec::bilateral(2.0, 0.5, 1.0)];
    let inputs = vec![
        Tensor::new(&[2], base[0].theta.clone()).unwrap(),
        Tensor::scalar(base[0].weight),
        Tensor::new(&[5], base[1].theta.clone()).unwrap(),
        Tensor::scalar(base[1].weight),
    ];
    out.push(check("crf refinement", inputs, &[true; 4], 51, |t, v| {
        let mut kernel = None;
        for (i, s) in base.iter().enumerate() {
            let f = convcrf::feature_map(s.feature, &image)?;
            let g = t.gaussian_kernel(&f, v[2 * i], cfg.filter_size, KernelOrientation::Gather)?;
            let g = t.scale(g, v[2 * i + 1])?;
            kernel = Some(match kernel {
                Some(k) => t.add(k, g)?,
                None => g,
            });
        }
        let kernel = kernel.unwrap();
        let unary = t.constant(probs.tensor().map(|p| p.max(1e-6).ln()));
        let mut q = t.constant(probs.tensor().clone());
        for _ in 0..cfg.iterations - 1 {
            let m = t.message_pass(kernel, q)?;
            let l = t.add(unary, m)?;
            q = t.softmax_channels(l)?;
        }
        let m = t.message_pass(kernel, q)?;
        let logits = t.add(unary, m)?;
        t.softmax_cross_entropy(logits, &labels)
    }));
    out
}

pub fn encoder_projection_loss_composition() -> Vec<Outcome> {
    let mut out = Vec::new();
    let unet = DUNetConfig {
        depth: 1,
        base_channels: 2,
        input_side: 4,
        embed_dim: 4,
        extra_bottleneck_conv: true,
    };
    let proj = ProjectionConfig {
        hidden_dim: 5,
        proj_dim: 3,
    };
    let model = EncoderModel::init(unet, proj, 60).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = uniform(&mut rng, &[4, 3, 4, 4], 0.0, 1.0);
    let pairing = Pairing::adjacent(4).unwrap();
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().cloned());
    let mut flags = vec![false];
    flags.extend(model.params().iter().map(|_| true));
    let names = model.names().to_vec();
    out.push(check("encoder+projection+nt_xent", inputs, &flags, 62, |t, v| {
        let named = names.iter().cloned().zip(v[1..].iter().map(|&p| t.value(p).clone())).collect();
        let m = EncoderModel::from_named(unet, proj, named)?;
        let out = m.trace_with(t, v[0], &v[1..])?;
        t.nt_xent(out.z, &pairing, 0.5)
    }));
    out
}


/// Every differentiable op and the encoder, projection and loss composition.
pub const CASES: &[(&str, fn() -> Vec<Outcome>)] = &[
    ("conv2d padded", conv2d_padded),
    ("conv2d strided", conv2d_strided_unpadded),
    ("relu", relu),
    ("maxpool2d", maxpool2d),
    ("upsample2x", upsample2x),
    ("concat_channels", concat_channels),
    ("global_avg_pool", global_avg_pool),
    ("linear", linear),
    ("elementwise", elementwise_ops),
    ("nt_xent", nt_xent),
    ("softmax", softmax_ops),
    ("crf kernel and message", crf_kernel_and_message),
    ("crf refinement", crf_refinement_parameters),
    ("encoder composition", encoder_projection_loss_composition),
];
