//! Quantization-aware fine-tuning of a clustered scene.
//!
//! The free parameters are per-Gaussian positions, opacity logits and
//! `ln η`, plus the entries of both codebooks; codebook indices stay fixed.
//! Every forward pass runs the parameters through their quantizers with a
//! straight-through backward, renders all training views and takes the
//! mean L1 error against the targets.

use rayon::prelude::*;
use thiserror::Error;

use crate::cluster::{ColorClustering, ShapeClustering};
use crate::quant::{
    encode_position, f16_round, normalize_or, CompressedScene, QuantError, QuantRanges, QuantState, DEFAULT_BITS,
};
use crate::render::{render_activated, render_with_gradients, ActivatedGradients, RenderError, RenderOptions};
use crate::scene::{logit, sigmoid, ActivatedScene, Camera, GaussianScene, Image};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("{cameras} cameras but {targets} target images")]
    ViewCount { cameras: usize, targets: usize },
    #[error("no training views")]
    NoViews,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Per-group Adam step sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    /// Used for `ln η` and the unit-scale codebook entries.
    pub scaling: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    /// The usual 3DGS training rates, divided by ten.
    fn default() -> Self {
        LearningRates { position: 1.6e-5, sh_dc: 2.5e-4, sh_rest: 1.25e-5, opacity: 5e-3, scaling: 5e-4, rotation: 1e-4 }
    }
}

impl LearningRates {
    /// For runs of a few hundred steps: the undivided 3DGS rates, except
    /// positions, which take the final 3DGS position rate.
    pub fn short_schedule() -> Self {
        LearningRates { position: 1.6e-6, sh_dc: 2.5e-3, sh_rest: 1.25e-4, opacity: 5e-2, scaling: 5e-3, rotation: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: LearningRates,
    /// Scene extent used to scale the position step size.
    pub extent: f64,
    pub bits: u8,
    pub momentum: f64,
    /// Learning-rate multiplier reached at the last step, approached
    /// exponentially from 1. `1.0` keeps the rates constant.
    pub lr_final_factor: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 5000,
            lr: LearningRates::default(),
            extent: 1.0,
            bits: DEFAULT_BITS,
            momentum: 0.99,
            lr_final_factor: 1.0,
        }
    }
}

impl FinetuneConfig {
    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return 1.0;
        }
        self.lr_final_factor.powf(step as f64 / (self.steps - 1) as f64)
    }
}

/// 1.1 × the largest distance of a camera center from their mean.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<nalgebra::Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Continuous parameters of a clustered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct QatScene {
    pub sh_basis: usize,
    pub positions: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub log_eta: Vec<f64>,
    pub color_index: Vec<u32>,
    pub shape_index: Vec<u32>,
    pub color_entries: Vec<f64>,
    pub color_clustered: usize,
    pub shape_rotations: Vec<[f64; 4]>,
    pub shape_scales: Vec<[f64; 3]>,
    pub shape_clustered: usize,
}

/// One quantizer per quantized field.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantStates {
    pub opacity: QuantState,
    pub eta: QuantState,
    pub color: QuantState,
    pub rotation: QuantState,
    pub scale: QuantState,
}

impl QuantStates {
    pub fn new(bits: u8, momentum: f64) -> Result<Self, QuantError> {
        let mut s = QuantState::new(bits)?;
        s.momentum = momentum;
        Ok(QuantStates { opacity: s.clone(), eta: s.clone(), color: s.clone(), rotation: s.clone(), scale: s })
    }

    pub fn from_ranges(r: &QuantRanges) -> Self {
        QuantStates {
            opacity: QuantState::from_range(&r.opacity),
            eta: QuantState::from_range(&r.eta),
            color: QuantState::from_range(&r.color),
            rotation: QuantState::from_range(&r.rotation),
            scale: QuantState::from_range(&r.scale),
        }
    }

    fn all_mut(&mut self) -> [&mut QuantState; 5] {
        [&mut self.opacity, &mut self.eta, &mut self.color, &mut self.rotation, &mut self.scale]
    }

    /// Updates every running range from the current parameter values.
    pub fn observe(&mut self, q: &QatScene) {
        let opac: Vec<f64> = q.opacity_logits.iter().map(|&l| sigmoid(l)).collect();
        self.opacity.observe(&opac);
        self.eta.observe(&q.log_eta);
        self.color.observe(&q.color_entries);
        self.rotation.observe(q.shape_rotations.as_flattened());
        self.scale.observe(q.shape_scales.as_flattened());
    }

    pub fn freeze(&mut self) {
        self.all_mut().into_iter().for_each(QuantState::freeze);
    }

    pub fn ranges(&self) -> QuantRanges {
        QuantRanges {
            opacity: self.opacity.range(),
            eta: self.eta.range(),
            color: self.color.range(),
            rotation: self.rotation.range(),
            scale: self.scale.range(),
        }
    }
}

/// Parameter gradients of a [`QatScene`].
#[derive(Debug, Clone, PartialEq)]
pub struct QatGradients {
    pub positions: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub log_eta: Vec<f64>,
    pub color_entries: Vec<f64>,
    pub shape_rotations: Vec<[f64; 4]>,
    pub shape_scales: Vec<[f64; 3]>,
}

impl QatScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_dim(&self) -> usize {
        self.sh_basis * 3
    }

    /// Clustered scene: positions and opacities from `scene`, codebooks and
    /// magnitudes from the two clusterings.
    pub fn from_clustering(scene: &GaussianScene, colors: &ColorClustering, shapes: &ShapeClustering) -> Self {
        let book = &shapes.codebook;
        QatScene {
            sh_basis: scene.sh_basis,
            positions: scene.positions.clone(),
            opacity_logits: scene.opacity_logits.clone(),
            log_eta: shapes.etas.iter().map(|e| e.ln()).collect(),
            color_index: colors.indices.clone(),
            shape_index: shapes.indices.clone(),
            color_entries: colors.codebook.entries.clone(),
            color_clustered: colors.codebook.clustered_count,
            shape_rotations: book.entries.chunks_exact(7).map(|e| [e[0], e[1], e[2], e[3]]).collect(),
            shape_scales: book.entries.chunks_exact(7).map(|e| [e[4], e[5], e[6]]).collect(),
            shape_clustered: book.clustered_count,
        }
    }

    /// Continuous parameters holding the dequantized values of `c`, with
    /// quantizers initialized to its ranges.
    pub fn from_compressed(c: &CompressedScene) -> (QatScene, QuantStates) {
        let r = &c.ranges;
        let qat = QatScene {
            sh_basis: c.sh_basis,
            positions: c.decoded_positions(),
            opacity_logits: c.opacity.iter().map(|&q| logit(r.opacity.value(q).clamp(1e-7, 1.0 - 1e-7))).collect(),
            log_eta: c.eta.iter().map(|&q| r.eta.value(q)).collect(),
            color_index: c.color_index.clone(),
            shape_index: c.shape_index.clone(),
            color_entries: c.color_codebook.iter().map(|&q| r.color.value(q)).collect(),
            color_clustered: c.color_clustered,
            shape_rotations: c.shape_rotation.chunks_exact(4).map(|q| std::array::from_fn(|j| r.rotation.value(q[j]))).collect(),
            shape_scales: c.shape_scale.chunks_exact(3).map(|q| std::array::from_fn(|j| r.scale.value(q[j]))).collect(),
            shape_clustered: c.shape_clustered,
        };
        (qat, QuantStates::from_ranges(r))
    }

    /// Render inputs without any quantization.
    pub fn activated(&self) -> ActivatedScene {
        self.build(None)
    }

    /// Render inputs with every field passed through its quantizer and
    /// positions rounded to half precision.
    pub fn quantized(&self, states: &QuantStates) -> ActivatedScene {
        self.build(Some(states))
    }

    fn build(&self, states: Option<&QuantStates>) -> ActivatedScene {
        let fq = |s: Option<&QuantState>, v: f64| s.map_or(v, |s| s.fake_quantize(v));
        let d = self.sh_dim();
        let colors: Vec<f64> = self.color_entries.iter().map(|&v| fq(states.map(|s| &s.color), v)).collect();
        let rots: Vec<[f64; 4]> =
            self.shape_rotations.iter().map(|q| q.map(|v| fq(states.map(|s| &s.rotation), v))).collect();
        let units: Vec<[f64; 3]> = self
            .shape_scales
            .iter()
            .map(|u| normalize_or(u.map(|v| fq(states.map(|s| &s.scale), v)), [1.0 / 3f64.sqrt(); 3]))
            .collect();
        let n = self.len();
        let mut out = ActivatedScene {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            sh: Vec::with_capacity(n * d),
            sh_basis: self.sh_basis,
        };
        for i in 0..n {
            let k = self.shape_index[i] as usize;
            let eta = fq(states.map(|s| &s.eta), self.log_eta[i]).exp();
            out.positions.push(if states.is_some() { self.positions[i].map(f16_round) } else { self.positions[i] });
            out.rotations.push(rots[k]);
            out.scales.push(units[k].map(|v| v * eta));
            out.opacities.push(fq(states.map(|s| &s.opacity), sigmoid(self.opacity_logits[i])));
            let c = self.color_index[i] as usize;
            out.sh.extend_from_slice(&colors[c * d..(c + 1) * d]);
        }
        out
    }

    /// Chains render-input gradients back to the parameters, passing
    /// straight through every quantizer.
    pub fn backprop(&self, g: &ActivatedGradients, states: Option<&QuantStates>) -> QatGradients {
        let d = self.sh_dim();
        let fq = |s: Option<&QuantState>, v: f64| s.map_or(v, |s| s.fake_quantize(v));
        let mut out = QatGradients {
            positions: g.positions.clone(),
            opacity_logits: Vec::with_capacity(self.len()),
            log_eta: Vec::with_capacity(self.len()),
            color_entries: vec![0.0; self.color_entries.len()],
            shape_rotations: vec![[0.0; 4]; self.shape_rotations.len()],
            shape_scales: vec![[0.0; 3]; self.shape_scales.len()],
        };
        let raw_units: Vec<[f64; 3]> =
            self.shape_scales.iter().map(|u| u.map(|v| fq(states.map(|s| &s.scale), v))).collect();
        let units: Vec<[f64; 3]> = raw_units.iter().map(|u| normalize_or(*u, [1.0 / 3f64.sqrt(); 3])).collect();
        let mut d_units = vec![[0.0; 3]; units.len()];
        for i in 0..self.len() {
            let l = self.opacity_logits[i];
            out.opacity_logits.push(g.opacities[i] * sigmoid(l) * sigmoid(-l));

            let k = self.shape_index[i] as usize;
            let eta = fq(states.map(|s| &s.eta), self.log_eta[i]).exp();
            let ds = g.scales[i];
            out.log_eta.push((0..3).map(|j| ds[j] * units[k][j]).sum::<f64>() * eta);
            for j in 0..3 {
                d_units[k][j] += eta * ds[j];
            }
            for j in 0..4 {
                out.shape_rotations[k][j] += g.rotations[i][j];
            }
            let c = self.color_index[i] as usize;
            for (dst, src) in out.color_entries[c * d..(c + 1) * d].iter_mut().zip(&g.sh[i * d..(i + 1) * d]) {
                *dst += src;
            }
        }
        for k in 0..units.len() {
            let n = raw_units[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            let u = units[k];
            let du = d_units[k];
            let dot: f64 = (0..3).map(|j| u[j] * du[j]).sum();
            out.shape_scales[k] = std::array::from_fn(|j| (du[j] - u[j] * dot) / n);
        }
        out
    }

    /// Codes for every field under the given (normally frozen) quantizers.
    pub fn quantize(&self, states: &QuantStates) -> Result<CompressedScene, QuantError> {
        let r = states.ranges();
        let c = CompressedScene {
            sh_basis: self.sh_basis,
            positions: self.positions.iter().map(|&p| encode_position(p)).collect::<Result<_, _>>()?,
            opacity: self.opacity_logits.iter().map(|&l| r.opacity.code(sigmoid(l))).collect(),
            eta: self.log_eta.iter().map(|&v| r.eta.code(v)).collect(),
            color_index: self.color_index.clone(),
            shape_index: self.shape_index.clone(),
            color_codebook: self.color_entries.iter().map(|&v| r.color.code(v)).collect(),
            color_clustered: self.color_clustered,
            shape_rotation: self.shape_rotations.iter().flatten().map(|&v| r.rotation.code(v)).collect(),
            shape_scale: self.shape_scales.iter().flatten().map(|&v| r.scale.code(v)).collect(),
            shape_clustered: self.shape_clustered,
            ranges: r,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Adam with per-element step sizes.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-15;

    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Adam { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn uniform(lr: f64, n: usize) -> Self {
        Adam::new(vec![lr; n])
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_scaled(params, grads, 1.0);
    }

    /// One update with every step size multiplied by `scale`.
    pub fn step_scaled(&mut self, params: &mut [f64], grads: &[f64], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= scale * self.lr[i] * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Loss trace of a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Loss before each step's update.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

fn l1(img: &Image, target: &Image) -> f64 {
    img.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum()
}

fn check_views(cameras: &[Camera], targets: &[Image]) -> Result<(), FinetuneError> {
    if cameras.is_empty() {
        return Err(FinetuneError::NoViews);
    }
    if cameras.len() != targets.len() {
        return Err(FinetuneError::ViewCount { cameras: cameras.len(), targets: targets.len() });
    }
    for (cam, t) in cameras.iter().zip(targets) {
        if cam.width != t.width || cam.height != t.height {
            return Err(RenderError::DimensionMismatch(t.width, t.height, cam.width, cam.height).into());
        }
    }
    Ok(())
}

/// Mean absolute error of the quantized scene over all views.
pub fn quantized_loss(qat: &QatScene, states: &QuantStates, cameras: &[Camera], targets: &[Image]) -> f64 {
    let scene = qat.quantized(states);
    let opts = RenderOptions::default();
    let count: usize = targets.iter().map(|t| t.data.len()).sum();
    let total: f64 = cameras.iter().zip(targets).map(|(c, t)| l1(&render_activated(&scene, c, &opts), t)).sum();
    total / count as f64
}

/// Runs `config.steps` Adam steps on `qat`, updating the running quantizer
/// ranges before every step.
pub fn finetune_qat(
    qat: &mut QatScene,
    states: &mut QuantStates,
    cameras: &[Camera],
    targets: &[Image],
    config: &FinetuneConfig,
) -> Result<FinetuneReport, FinetuneError> {
    check_views(cameras, targets)?;
    let lr = &config.lr;
    let d = qat.sh_dim();
    let color_lr: Vec<f64> =
        (0..qat.color_entries.len()).map(|j| if j % d.max(1) < 3 { lr.sh_dc } else { lr.sh_rest }).collect();
    let mut opt_pos = Adam::uniform(lr.position * config.extent, qat.len() * 3);
    let mut opt_opacity = Adam::uniform(lr.opacity, qat.len());
    let mut opt_eta = Adam::uniform(lr.scaling, qat.len());
    let mut opt_color = Adam::new(color_lr);
    let mut opt_rot = Adam::uniform(lr.rotation, qat.shape_rotations.len() * 4);
    let mut opt_scale = Adam::uniform(lr.scaling, qat.shape_scales.len() * 3);

    let count: usize = targets.iter().map(|t| t.data.len()).sum();
    let inv = 1.0 / count as f64;
    let opts = RenderOptions::default();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        states.observe(qat);
        let scene = qat.quantized(states);
        let per_view: Vec<(f64, ActivatedGradients)> = cameras
            .par_iter()
            .zip(targets)
            .map(|(cam, target)| {
                let mut loss = 0.0;
                let (_, g) = render_with_gradients(&scene, cam, &opts, |img| {
                    loss = l1(img, target);
                    let mut up = Image::new(img.width, img.height);
                    for ((u, a), b) in up.data.iter_mut().zip(&img.data).zip(&target.data) {
                        *u = if a > b { inv } else if a < b { -inv } else { 0.0 };
                    }
                    up
                })?;
                Ok((loss, g))
            })
            .collect::<Result<_, RenderError>>()?;
        let mut loss = 0.0;
        let mut grads = ActivatedGradients::zeros(scene.len(), d);
        for (l, g) in &per_view {
            loss += l;
            add_into(&mut grads, g);
        }
        let loss = loss * inv;
        if !loss.is_finite() {
            return Err(FinetuneError::NonFinite { step });
        }
        losses.push(loss);
        let g = qat.backprop(&grads, Some(states));
        let f = config.lr_factor(step);
        opt_pos.step_scaled(qat.positions.as_flattened_mut(), g.positions.as_flattened(), f);
        opt_opacity.step_scaled(&mut qat.opacity_logits, &g.opacity_logits, f);
        opt_eta.step_scaled(&mut qat.log_eta, &g.log_eta, f);
        opt_color.step_scaled(&mut qat.color_entries, &g.color_entries, f);
        opt_rot.step_scaled(qat.shape_rotations.as_flattened_mut(), g.shape_rotations.as_flattened(), f);
        opt_scale.step_scaled(qat.shape_scales.as_flattened_mut(), g.shape_scales.as_flattened(), f);
        if step % 50 == 0 {
            log::debug!("finetune step {step}: loss {loss:.6}");
        }
    }
    let final_loss = quantized_loss(qat, states, cameras, targets);
    if !final_loss.is_finite() {
        return Err(FinetuneError::NonFinite { step: config.steps });
    }
    Ok(FinetuneReport { losses, final_loss })
}

fn add_into(dst: &mut ActivatedGradients, src: &ActivatedGradients) {
    fn add(a: &mut [f64], b: &[f64]) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    add(dst.positions.as_flattened_mut(), src.positions.as_flattened());
    add(dst.rotations.as_flattened_mut(), src.rotations.as_flattened());
    add(dst.scales.as_flattened_mut(), src.scales.as_flattened());
    add(&mut dst.opacities, &src.opacities);
    add(&mut dst.sh, &src.sh);
    add(dst.covariances.as_flattened_mut(), src.covariances.as_flattened());
}

/// Fine-tunes a compressed scene against `targets` and re-quantizes it with
/// the frozen ranges. `steps = 0` returns the input unchanged.
pub fn finetune(
    c: &CompressedScene,
    cameras: &[Camera],
    targets: &[Image],
    config: &FinetuneConfig,
) -> Result<CompressedScene, FinetuneError> {
    if config.steps == 0 {
        return Ok(c.clone());
    }
    let (mut qat, mut states) = QatScene::from_compressed(c);
    for s in states.all_mut() {
        s.momentum = config.momentum;
    }
    finetune_qat(&mut qat, &mut states, cameras, targets, config)?;
    states.freeze();
    Ok(qat.quantize(&states)?)
}
