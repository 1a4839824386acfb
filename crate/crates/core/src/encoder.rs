//! Patch-embedding encoder with a per-position MLP mixer and an MLP
//! projection head, with hand-written backpropagation.
//!
//! Per image: every `patch x patch` tile is flattened to `x`, embedded as
//! `e = W_pe x + b_pe`, mixed as `m = W_2 relu(W_1 e + b_1) + b_2`. The mixed
//! vectors form the feature map; `h` is their spatial mean and
//! `z = normalize(W_p2 relu(W_p1 h + b_p1) + b_p2)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ToyImage;
use crate::error::{Error, Result};
use crate::params::BiasFreeze;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub d1: usize,
    pub d_hidden: usize,
    pub d2: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            channels: 1,
            patch: 4,
            d1: 64,
            d_hidden: 64,
            d2: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(Error::ConfigInvalid(format!(
                "patch {} must divide image side {}",
                self.patch, self.image_side
            )));
        }
        if self.channels == 0 || self.d1 == 0 || self.d_hidden == 0 || self.d2 == 0 {
            return Err(Error::ConfigInvalid("encoder widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Dense affine map with `weight` stored `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `+-1/sqrt(inputs)`, biases zero.
    pub fn uniform(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = vec![0.0; outputs];
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + dot(row, x);
        }
    }

    /// `grad.weight += g x^T`, `grad.bias += g`.
    pub(crate) fn accumulate(&self, grad: &mut Linear, x: &[f32], g: &[f32]) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.bias[o] += go;
            let row = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += go * xi;
            }
        }
    }

    /// `W^T g`.
    pub(crate) fn backward_input(&self, g: &[f32], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (row, &go) in self.weight.chunks_exact(self.inputs).zip(g) {
            if go == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += go * w;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// Trainable parameters; gradients and optimizer buffers reuse this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub mixer1: Linear,
    pub mixer2: Linear,
    pub proj1: Linear,
    pub proj2: Linear,
}

pub type ParamGrads = EncoderParams;

pub const PARAM_NAMES: [&str; 5] = ["patch_embed", "mixer1", "mixer2", "proj1", "proj2"];

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let p = config.patch_pixels();
        Ok(Self {
            config,
            patch_embed: Linear::uniform(p, config.d1, rng),
            mixer1: Linear::uniform(config.d1, config.d1, rng),
            mixer2: Linear::uniform(config.d1, config.d1, rng),
            proj1: Linear::uniform(config.d1, config.d_hidden, rng),
            proj2: Linear::uniform(config.d_hidden, config.d2, rng),
        })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            patch_embed: Linear::zeros(config.patch_pixels(), config.d1),
            mixer1: Linear::zeros(config.d1, config.d1),
            mixer2: Linear::zeros(config.d1, config.d1),
            proj1: Linear::zeros(config.d1, config.d_hidden),
            proj2: Linear::zeros(config.d_hidden, config.d2),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.inputs, l.outputs);
        Self {
            config: self.config,
            patch_embed: z(&self.patch_embed),
            mixer1: z(&self.mixer1),
            mixer2: z(&self.mixer2),
            proj1: z(&self.proj1),
            proj2: z(&self.proj2),
        }
    }

    pub fn layers(&self) -> [&Linear; 5] {
        [
            &self.patch_embed,
            &self.mixer1,
            &self.mixer2,
            &self.proj1,
            &self.proj2,
        ]
    }

    /// Zeroes the bias entries selected by `which`; applied to gradients it
    /// keeps those biases fixed.
    pub fn clear_biases(&mut self, which: BiasFreeze) {
        let layers = self.layers_mut();
        let skip = match which {
            BiasFreeze::None => return,
            BiasFreeze::Projection => 3,
            BiasFreeze::All => 0,
        };
        for l in layers.into_iter().skip(skip) {
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.patch_embed,
            &mut self.mixer1,
            &mut self.mixer2,
            &mut self.proj1,
            &mut self.proj2,
        ]
    }

    /// Flat views of every parameter buffer, in a fixed order.
    pub fn buffers(&self) -> Vec<&[f32]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .layers()
                .iter()
                .zip(other.layers())
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    /// `self += scale * other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: f32) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for buf in self.buffers_mut() {
            buf.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.buffers()
            .iter()
            .flat_map(|b| b.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Named tensors (`<layer>.weight`, `<layer>.bias`) for checkpointing.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, l) in PARAM_NAMES.iter().zip(self.layers()) {
            out.push((
                format!("{name}.weight"),
                Tensor::new(vec![l.outputs, l.inputs], l.weight.clone()).expect("consistent"),
            ));
            out.push((
                format!("{name}.bias"),
                Tensor::new(vec![l.outputs], l.bias.clone()).expect("consistent"),
            ));
        }
        out
    }

    pub fn from_tensors(config: EncoderConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut params = EncoderParams::zeros(config)?;
        for (name, l) in PARAM_NAMES.iter().zip(params.layers_mut()) {
            let w = get(&format!("{name}.weight"))?;
            let b = get(&format!("{name}.bias"))?;
            if w.dims() != [l.outputs, l.inputs] || b.dims() != [l.outputs] {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected [{}, {}], got {:?} / {:?}",
                    l.outputs,
                    l.inputs,
                    w.dims(),
                    b.dims()
                )));
            }
            l.weight = w.into_data();
            l.bias = b.into_data();
        }
        Ok(params)
    }
}

/// Spatial feature map, stored channel-major `[d1][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub d1: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(d1: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != d1 * h * w {
            return Err(Error::ShapeMismatch(format!(
                "feature map [{d1}, {h}, {w}] needs {} values, got {}",
                d1 * h * w,
                data.len()
            )));
        }
        Ok(Self { d1, h, w, data })
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.h + i) * self.w + j]
    }

    /// Feature vector at grid cell `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f32> {
        (0..self.d1).map(|c| self.at(c, i, j)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.d1, self.h, self.w], self.data.clone()).expect("consistent")
    }
}

/// Unit-norm projected representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation(pub Vec<f32>);

impl Representation {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Activations of the feature trunk for one image, position-major.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub positions: usize,
    pub patches: Vec<f32>,
    pub embed: Vec<f32>,
    pub pre_mix: Vec<f32>,
    pub mixed: Vec<f32>,
    pub pooled: Vec<f32>,
}

/// Full forward activations, including the projection head.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub trunk: TrunkCache,
    pub pre_hidden: Vec<f32>,
    pub projected: Vec<f32>,
    pub norm: f32,
    pub z: Vec<f32>,
}

fn check_image(config: &EncoderConfig, image: &ToyImage) -> Result<()> {
    if image.width() != config.image_side
        || image.height() != config.image_side
        || image.channels() != config.channels
    {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {0}x{0}x{1}, image is {2}x{3}x{4}",
            config.image_side,
            config.channels,
            image.width(),
            image.height(),
            image.channels()
        )));
    }
    Ok(())
}

pub fn forward_trunk(params: &EncoderParams, image: &ToyImage) -> Result<TrunkCache> {
    let cfg = &params.config;
    check_image(cfg, image)?;
    let g = cfg.grid();
    let ps = cfg.patch;
    let pp = cfg.patch_pixels();
    let d1 = cfg.d1;
    let n = g * g;
    let mut patches = vec![0.0; n * pp];
    for i in 0..g {
        for j in 0..g {
            let dst = &mut patches[(i * g + j) * pp..(i * g + j + 1) * pp];
            let mut k = 0;
            for c in 0..cfg.channels {
                for dy in 0..ps {
                    for dx in 0..ps {
                        dst[k] = image.at(c, i * ps + dy, j * ps + dx);
                        k += 1;
                    }
                }
            }
        }
    }
    let mut embed = vec![0.0; n * d1];
    let mut pre_mix = vec![0.0; n * d1];
    let mut mixed = vec![0.0; n * d1];
    let mut hidden = vec![0.0; d1];
    let mut pooled = vec![0.0; d1];
    for p in 0..n {
        let x = &patches[p * pp..(p + 1) * pp];
        let e = &mut embed[p * d1..(p + 1) * d1];
        params.patch_embed.forward(x, e);
        let a = &mut pre_mix[p * d1..(p + 1) * d1];
        params.mixer1.forward(e, a);
        for (hv, &av) in hidden.iter_mut().zip(a.iter()) {
            *hv = relu(av);
        }
        let m = &mut mixed[p * d1..(p + 1) * d1];
        params.mixer2.forward(&hidden, m);
        for (acc, &mv) in pooled.iter_mut().zip(m.iter()) {
            *acc += mv;
        }
    }
    let inv = 1.0 / n as f32;
    pooled.iter_mut().for_each(|v| *v *= inv);
    Ok(TrunkCache {
        positions: n,
        patches,
        embed,
        pre_mix,
        mixed,
        pooled,
    })
}

pub fn forward(params: &EncoderParams, image: &ToyImage) -> Result<ForwardCache> {
    let trunk = forward_trunk(params, image)?;
    let (pre_hidden, projected, norm, z) = project_raw(params, &trunk.pooled);
    if norm < 1e-12 {
        return Err(Error::DegenerateNorm(norm));
    }
    Ok(ForwardCache {
        trunk,
        pre_hidden,
        projected,
        norm,
        z,
    })
}

fn project_raw(params: &EncoderParams, h: &[f32]) -> (Vec<f32>, Vec<f32>, f32, Vec<f32>) {
    let cfg = &params.config;
    let mut pre_hidden = vec![0.0; cfg.d_hidden];
    params.proj1.forward(h, &mut pre_hidden);
    let hidden: Vec<f32> = pre_hidden.iter().map(|&v| relu(v)).collect();
    let mut projected = vec![0.0; cfg.d2];
    params.proj2.forward(&hidden, &mut projected);
    let norm = dot(&projected, &projected).sqrt();
    let z = if norm > 0.0 {
        projected.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; cfg.d2]
    };
    (pre_hidden, projected, norm, z)
}

pub fn forward_map(params: &EncoderParams, image: &ToyImage) -> Result<FeatureMap> {
    Ok(feature_map(&params.config, &forward_trunk(params, image)?))
}

pub fn feature_map(config: &EncoderConfig, trunk: &TrunkCache) -> FeatureMap {
    let g = config.grid();
    let d1 = config.d1;
    let mut data = vec![0.0; d1 * g * g];
    for p in 0..g * g {
        for c in 0..d1 {
            data[c * g * g + p] = trunk.mixed[p * d1 + c];
        }
    }
    FeatureMap {
        d1,
        h: g,
        w: g,
        data,
    }
}

pub fn pool(m: &FeatureMap) -> Vec<f32> {
    let n = (m.h * m.w) as f32;
    m.data
        .chunks_exact(m.h * m.w)
        .map(|plane| plane.iter().sum::<f32>() / n)
        .collect()
}

pub fn project(params: &EncoderParams, h: &[f32]) -> Result<Representation> {
    if h.len() != params.config.d1 {
        return Err(Error::ShapeMismatch(format!(
            "pooled vector has {} entries, expected {}",
            h.len(),
            params.config.d1
        )));
    }
    let (_, _, norm, z) = project_raw(params, h);
    if norm < 1e-12 {
        return Err(Error::DegenerateNorm(norm));
    }
    Ok(Representation(z))
}

pub fn represent(params: &EncoderParams, image: &ToyImage) -> Result<Representation> {
    forward(params, image).map(|c| Representation(c.z))
}

/// Gradient of `z . upstream` with respect to every parameter.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, upstream: &[f32]) -> ParamGrads {
    let mut grads = params.zeros_like();
    backward_into(params, cache, upstream, &mut grads);
    grads
}

pub fn backward_into(params: &EncoderParams, cache: &ForwardCache, upstream: &[f32], grads: &mut ParamGrads) {
    let cfg = &params.config;
    // normalization Jacobian: (I - z z^T) / |u|
    let zg = dot(&cache.z, upstream);
    let du: Vec<f32> = upstream
        .iter()
        .zip(&cache.z)
        .map(|(g, z)| (g - z * zg) / cache.norm)
        .collect();
    let hidden: Vec<f32> = cache.pre_hidden.iter().map(|&v| relu(v)).collect();
    params.proj2.accumulate(&mut grads.proj2, &hidden, &du);
    let mut dhidden = vec![0.0; cfg.d_hidden];
    params.proj2.backward_input(&du, &mut dhidden);
    for (d, &q) in dhidden.iter_mut().zip(&cache.pre_hidden) {
        if q <= 0.0 {
            *d = 0.0;
        }
    }
    params.proj1.accumulate(&mut grads.proj1, &cache.trunk.pooled, &dhidden);
    let mut dh = vec![0.0; cfg.d1];
    params.proj1.backward_input(&dhidden, &mut dh);
    backward_trunk_into(params, &cache.trunk, &dh, grads);
}

/// Gradient of `h . upstream_h` with respect to the trunk parameters.
pub fn backward_trunk_into(params: &EncoderParams, trunk: &TrunkCache, upstream_h: &[f32], grads: &mut ParamGrads) {
    let d1 = params.config.d1;
    let pp = params.config.patch_pixels();
    let n = trunk.positions;
    // every position receives dh / n through the mean pool
    let dm: Vec<f32> = upstream_h.iter().map(|g| g / n as f32).collect();
    let mut hidden_sum = vec![0.0; d1];
    for p in 0..n {
        for (s, &a) in hidden_sum.iter_mut().zip(&trunk.pre_mix[p * d1..(p + 1) * d1]) {
            *s += relu(a);
        }
    }
    // sum_p dm r_p^T = dm (sum_p r_p)^T ; bias grad is n * dm
    for (o, &g) in dm.iter().enumerate() {
        grads.mixer2.bias[o] += g * n as f32;
        let row = &mut grads.mixer2.weight[o * d1..(o + 1) * d1];
        for (w, &s) in row.iter_mut().zip(&hidden_sum) {
            *w += g * s;
        }
    }
    let mut dr = vec![0.0; d1];
    params.mixer2.backward_input(&dm, &mut dr);
    let mut da = vec![0.0; d1];
    let mut de = vec![0.0; d1];
    for p in 0..n {
        let a = &trunk.pre_mix[p * d1..(p + 1) * d1];
        for ((dav, &drv), &av) in da.iter_mut().zip(&dr).zip(a) {
            *dav = if av > 0.0 { drv } else { 0.0 };
        }
        let e = &trunk.embed[p * d1..(p + 1) * d1];
        params.mixer1.accumulate(&mut grads.mixer1, e, &da);
        params.mixer1.backward_input(&da, &mut de);
        let x = &trunk.patches[p * pp..(p + 1) * pp];
        params.patch_embed.accumulate(&mut grads.patch_embed, x, &de);
    }
}

/// Online and momentum (EMA) copies of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub online: EncoderParams,
    pub momentum: EncoderParams,
    pub step_count: u64,
}

impl EncoderState {
    pub fn new(online: EncoderParams) -> Self {
        Self {
            momentum: online.clone(),
            online,
            step_count: 0,
        }
    }
}

/// `momentum <- coef * momentum + (1 - coef) * online`.
pub fn momentum_update(state: &mut EncoderState, coef: f32) {
    debug_assert!((0.0..1.0).contains(&coef));
    let online = &state.online;
    for (m, o) in state.momentum.buffers_mut().into_iter().zip(online.buffers()) {
        for (mv, &ov) in m.iter_mut().zip(o) {
            // written as a step towards `online` so equal copies stay bit-equal
            *mv += (1.0 - coef) * (ov - *mv);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub momentum: f32,
}

/// SGD with heavy-ball momentum; L2 decay is folded into the gradient.
///
/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step(params: &mut EncoderParams, grads: &ParamGrads, sgd: SgdConfig, velocity: &mut EncoderParams) {
    for ((p, g), v) in params
        .buffers_mut()
        .into_iter()
        .zip(grads.buffers())
        .zip(velocity.buffers_mut())
    {
        sgd_update(p, g, v, sgd);
    }
}

pub(crate) fn sgd_update(p: &mut [f32], g: &[f32], v: &mut [f32], sgd: SgdConfig) {
    for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *vv = sgd.momentum * *vv + gv + sgd.weight_decay * *pv;
        *pv -= sgd.lr * *vv;
    }
}
