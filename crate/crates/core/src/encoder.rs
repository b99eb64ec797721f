//! DU-Net base encoder, MLP projection head and the cell-border weight map.
//!
//! Inputs in `[0, 1]` are mapped to `[-1, 1]` first. The encoder is then a
//! U-Net: `depth` down blocks (two 3x3 conv + ReLU, then
//! 2x2 max-pool), a bottleneck that carries one extra 3x3 conv layer when
//! `extra_bottleneck_conv` is set, and `depth` up blocks (nearest 2x
//! upsample, skip concatenation, two 3x3 conv + ReLU). A 1x1 conv maps the
//! top decoder features to `embed_dim` channels and global average pooling
//! yields the representation `h`. The projection head is
//! `z = W2 * relu(W1 * h)` without biases.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::rng;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DUNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_side: usize,
    pub embed_dim: usize,
    pub extra_bottleneck_conv: bool,
}

impl Default for DUNetConfig {
    fn default() -> Self {
        DUNetConfig {
            depth: 3,
            base_channels: 8,
            input_side: 64,
            embed_dim: 32,
            extra_bottleneck_conv: true,
        }
    }
}

impl DUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.input_side == 0 {
            return Err(Error::invalid(
                "DUNetConfig",
                "depth, base_channels and input_side must be positive",
            ));
        }
        if self.input_side % (1usize << self.depth) != 0 {
            return Err(Error::invalid(
                "DUNetConfig",
                format!(
                    "input_side {} not divisible by 2^{}",
                    self.input_side, self.depth
                ),
            ));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("DUNetConfig", "embed_dim must be at least 2"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionConfig {
    pub hidden_dim: usize,
    pub proj_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            hidden_dim: 32,
            proj_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding one output unit (for He initialization); 0 for biases.
    fan_in: usize,
}

/// Parameter names and shapes in forward order.
pub fn param_layout(unet: &DUNetConfig, proj: &ProjectionConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            fan_in: cin * k * k,
        });
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            fan_in: 0,
        });
    };
    let mut cin = 3;
    for l in 0..unet.depth {
        let c = unet.width(l);
        conv(format!("down{l}.conv1"), cin, c, 3);
        conv(format!("down{l}.conv2"), c, c, 3);
        cin = c;
    }
    let cb = unet.bottleneck_width();
    conv("bottleneck.conv1".into(), cin, cb, 3);
    conv("bottleneck.conv2".into(), cb, cb, 3);
    if unet.extra_bottleneck_conv {
        conv("bottleneck.conv3".into(), cb, cb, 3);
    }
    let mut below = cb;
    for l in (0..unet.depth).rev() {
        let c = unet.width(l);
        conv(format!("up{l}.conv1"), below + c, c, 3);
        conv(format!("up{l}.conv2"), c, c, 3);
        below = c;
    }
    conv("head".into(), unet.width(0), unet.embed_dim, 1);
    specs.push(ParamSpec {
        name: "proj.w1".into(),
        shape: vec![proj.hidden_dim, unet.embed_dim],
        fan_in: unet.embed_dim,
    });
    specs.push(ParamSpec {
        name: "proj.w2".into(),
        shape: vec![proj.proj_dim, proj.hidden_dim],
        fan_in: proj.hidden_dim,
    });
    specs
}

/// Encoder `f` and projection head `g` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    unet: DUNetConfig,
    projection: ProjectionConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Variables of one traced forward pass.
#[derive(Debug, Clone)]
pub struct TracedForward {
    pub params: Vec<Var>,
    pub h: Var,
    pub z: Var,
}

impl EncoderModel {
    /// He-normal weights, zero biases, drawn from a stream derived from `seed`.
    pub fn init(unet: DUNetConfig, projection: ProjectionConfig, seed: u64) -> Result<Self> {
        unet.validate()?;
        if projection.hidden_dim == 0 || projection.proj_dim == 0 {
            return Err(Error::invalid("ProjectionConfig", "dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, "encoder-init");
        let layout = param_layout(&unet, &projection);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for spec in layout {
            let n: usize = spec.shape.iter().product();
            let data = if spec.fan_in == 0 {
                vec![0.0; n]
            } else {
                let std = libm::sqrtf(2.0 / spec.fan_in as f32);
                (0..n).map(|_| std * rng::standard_normal(&mut rng)).collect()
            };
            params.push(Tensor::new(&spec.shape, data)?);
            names.push(spec.name);
        }
        Ok(EncoderModel {
            unet,
            projection,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the layout implied by the configs.
    pub fn from_named(
        unet: DUNetConfig,
        projection: ProjectionConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        unet.validate()?;
        let layout = param_layout(&unet, &projection);
        if layout.len() != named.len() {
            return Err(Error::invalid(
                "EncoderModel",
                format!("expected {} parameters, got {}", layout.len(), named.len()),
            ));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (spec, (name, t)) in layout.into_iter().zip(named) {
            if spec.name != name {
                return Err(Error::invalid(
                    "EncoderModel",
                    format!("expected parameter {}, got {name}", spec.name),
                ));
            }
            if spec.shape != t.shape() {
                return Err(Error::mismatch("EncoderModel parameter", &spec.shape, t.shape()));
            }
            names.push(name);
            params.push(t);
        }
        Ok(EncoderModel {
            unet,
            projection,
            names,
            params,
        })
    }

    pub fn unet(&self) -> &DUNetConfig {
        &self.unet
    }

    pub fn projection(&self) -> &ProjectionConfig {
        &self.projection
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != 3 {
            return Err(Error::invalid("encode", format!("expects 3 channels, got {c}")));
        }
        let s = self.unet.input_side;
        if h != s || w != s {
            return Err(Error::WrongInputSize {
                expected: s,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }

    /// Records `h = f(x)` and `z = g(h)` on `tape`. Parameters enter as
    /// trainable leaves when `trainable` is set, otherwise as constants.
    pub fn trace(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<TracedForward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.trace_with(tape, x, &params)
    }

    /// [`EncoderModel::trace`] with parameters already on the tape, in
    /// layout order.
    pub fn trace_with(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<TracedForward> {
        self.check_input(tape.value(x))?;
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "EncoderModel::trace_with",
                format!("expected {} parameters, got {}", self.params.len(), params.len()),
            ));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("layout covers every layer");
        let conv_relu = |tape: &mut Tape, x: Var, take: &mut dyn FnMut() -> Var| -> Result<Var> {
            let (w, b) = (take(), take());
            let y = tape.conv2d(x, w, Some(b), 1, 1)?;
            tape.relu(y)
        };

        let mut skips = Vec::with_capacity(self.unet.depth);
        let shift = tape.constant(Tensor::full(tape.value(x).shape(), -0.5)?);
        let two = tape.constant(Tensor::scalar(2.0));
        let centred = tape.add(x, shift)?;
        let mut cur = tape.scale(centred, two)?;
        for _ in 0..self.unet.depth {
            cur = conv_relu(tape, cur, &mut take)?;
            cur = conv_relu(tape, cur, &mut take)?;
            skips.push(cur);
            cur = tape.maxpool2d(cur)?;
        }
        cur = conv_relu(tape, cur, &mut take)?;
        cur = conv_relu(tape, cur, &mut take)?;
        if self.unet.extra_bottleneck_conv {
            cur = conv_relu(tape, cur, &mut take)?;
        }
        for skip in skips.into_iter().rev() {
            let up = tape.upsample2x(cur)?;
            cur = tape.concat_channels(up, skip)?;
            cur = conv_relu(tape, cur, &mut take)?;
            cur = conv_relu(tape, cur, &mut take)?;
        }
        let (hw, hb) = (take(), take());
        let head = tape.conv2d(cur, hw, Some(hb), 1, 0)?;
        let h = tape.global_avg_pool(head)?;
        let (w1, w2) = (take(), take());
        let hidden = tape.linear(h, w1)?;
        let hidden = tape.relu(hidden)?;
        let z = tape.linear(hidden, w2)?;
        Ok(TracedForward {
            params: params.to_vec(),
            h,
            z,
        })
    }

    /// `h = f(x)` for a batch `[b, 3, s, s]`, giving `[b, embed_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.trace(&mut tape, xv, false)?;
        Ok(tape.value(out.h).clone())
    }

    /// `z = W2 * relu(W1 * h)` row-wise.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        let n = self.params.len();
        project_with(h, &self.params[n - 2], &self.params[n - 1])
    }
}

/// Projection head with explicit weights.
pub fn project_with(h: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    h.check_finite("project")?;
    let hidden = crate::ops::relu(&crate::ops::linear(h, w1)?);
    crate::ops::linear(&hidden, w2)
}

/// Integer instance labels: 0 is background, `k > 0` is cell instance `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::mismatch("instance mask", &[height, width], &[labels.len()]));
        }
        Ok(InstanceMask {
            height,
            width,
            labels,
        })
    }

    /// Sorted distinct instance ids (excluding background).
    pub fn instances(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixels outside instance `id` that touch it (4-neighbourhood).
    pub fn border_of(&self, id: u32) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.labels[y * w + x] == id {
                    continue;
                }
                let touches = (y > 0 && self.labels[(y - 1) * w + x] == id)
                    || (y + 1 < h && self.labels[(y + 1) * w + x] == id)
                    || (x > 0 && self.labels[y * w + x - 1] == id)
                    || (x + 1 < w && self.labels[y * w + x + 1] == id);
                if touches {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// How the class-balancing term of the weight map is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassWeights {
    /// Inverse relative frequency of background/foreground, normalized so the
    /// per-pixel mean is 1.
    Balanced,
    Fixed { background: f32, foreground: f32 },
}

/// Class-balance term `w_c` per pixel.
pub fn class_weight_map(mask: &InstanceMask, weights: ClassWeights) -> Vec<f32> {
    let (bg, fg) = match weights {
        ClassWeights::Fixed {
            background,
            foreground,
        } => (background, foreground),
        ClassWeights::Balanced => {
            let n = mask.labels.len() as f64;
            let n_fg = mask.labels.iter().filter(|&&l| l > 0).count() as f64;
            let n_bg = n - n_fg;
            let present = (n_fg > 0.0) as u32 + (n_bg > 0.0) as u32;
            let w = |count: f64| {
                if count > 0.0 {
                    (n / (count * present as f64)) as f32
                } else {
                    0.0
                }
            };
            (w(n_bg), w(n_fg))
        }
    };
    mask.labels
        .iter()
        .map(|&l| if l > 0 { fg } else { bg })
        .collect()
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn sq_distance_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = ((q as f64) - p as f64) * ((q as f64) - p as f64) + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest of `sites`.
pub(crate) fn squared_distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0usize; n],
        vec![0.0; n + 1],
    );
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        sq_distance_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        sq_distance_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distances to the borders of the nearest and second-nearest instances;
/// `f64::INFINITY` where fewer than one/two instances have a border.
pub fn border_distances(mask: &InstanceMask) -> (Vec<f64>, Vec<f64>) {
    let n = mask.labels.len();
    let mut d1 = vec![f64::INFINITY; n];
    let mut d2 = vec![f64::INFINITY; n];
    for id in mask.instances() {
        let border = mask.border_of(id);
        if border.is_empty() {
            continue;
        }
        let sq = squared_distance_map(mask.height, mask.width, &border);
        for i in 0..n {
            let d = libm::sqrt(sq[i]);
            if d < d1[i] {
                d2[i] = d1[i];
                d1[i] = d;
            } else if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    (d1, d2)
}

/// `w(x) = w_c(x) + w0 * exp(-(d1(x) + d2(x))^2 / (2 sigma^2))`, `[h, w]`.
///
/// With no instances the boundary term is dropped (and a warning logged);
/// pixels with no second-nearest instance get no boundary term.
pub fn weight_map(
    mask: &InstanceMask,
    w0: f32,
    sigma: f32,
    class_weights: ClassWeights,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("weight_map", "sigma must be positive"));
    }
    let wc = class_weight_map(mask, class_weights);
    if w0 != 0.0 && mask.instances().is_empty() {
        log::warn!("weight_map: mask has no labeled instances; returning class weights only");
        return Tensor::new(&[mask.height, mask.width], wc);
    }
    let (d1, d2) = border_distances(mask);
    let two_s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let data = wc
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(&c, (&a, &b))| {
            let s = a + b;
            let term = if s.is_finite() {
                w0 as f64 * libm::exp(-(s * s) / two_s2)
            } else {
                0.0
            };
            (c as f64 + term) as f32
        })
        .collect();
    Tensor::new(&[mask.height, mask.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(DUNetConfig::default().validate().is_ok());
        let bad = DUNetConfig {
            input_side: 60,
            ..DUNetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DUNetConfig {
            embed_dim: 1,
            ..DUNetConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extra_conv_adds_one_bottleneck_layer() {
        let deep = DUNetConfig::default();
        let plain = DUNetConfig {
            extra_bottleneck_conv: false,
            ..deep
        };
        let p = ProjectionConfig::default();
        let a = EncoderModel::init(deep, p, 0).unwrap().parameter_count();
        let b = EncoderModel::init(plain, p, 0).unwrap().parameter_count();
        let cb = deep.bottleneck_width();
        assert_eq!(a - b, cb * cb * 9 + cb);
    }

    #[test]
    fn encode_shape_and_wrong_size() {
        let cfg = DUNetConfig {
            depth: 2,
            base_channels: 4,
            input_side: 16,
            embed_dim: 6,
            extra_bottleneck_conv: true,
        };
        let m = EncoderModel::init(cfg, ProjectionConfig::default(), 1).unwrap();
        let x = Tensor::full(&[2, 3, 16, 16], 0.5).unwrap();
        let h = m.encode(&x).unwrap();
        assert_eq!(h.shape(), &[2, 6]);
        assert_eq!(h.data()[..6], h.data()[6..]);
        let err = m.encode(&Tensor::full(&[1, 3, 8, 8], 0.5).unwrap()).unwrap_err();
        assert_eq!(
            err,
            Error::WrongInputSize {
                expected: 16,
                got_h: 8,
                got_w: 8
            }
        );
        assert_eq!(m.project(&h).unwrap().shape(), &[2, 16]);
    }

    #[test]
    fn projection_identity_and_relu() {
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            Tensor::new(&[n, n], d).unwrap()
        };
        let h = Tensor::new(&[2, 3], vec![0.5, 0.0, 2.0, 1.0, 3.0, 0.25]).unwrap();
        assert_eq!(project_with(&h, &eye(3), &eye(3)).unwrap(), h);
        let neg = h.map(|v| -v - 0.1);
        let w2 = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert!(project_with(&neg, &eye(3), &w2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let sites = [(1usize, 2usize), (5, 6), (6, 0)];
        let (h, w) = (7, 9);
        let got = squared_distance_map(h, w, &sites);
        for y in 0..h {
            for x in 0..w {
                let want = sites
                    .iter()
                    .map(|&(sy, sx)| {
                        let dy = y as f64 - sy as f64;
                        let dx = x as f64 - sx as f64;
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(got[y * w + x], want, "({y},{x})");
            }
        }
    }

    #[test]
    fn empty_mask_returns_class_weights() {
        let mask = InstanceMask::new(4, 4, vec![0; 16]).unwrap();
        let w = weight_map(&mask, 10.0, 5.0, ClassWeights::Balanced).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }
}
