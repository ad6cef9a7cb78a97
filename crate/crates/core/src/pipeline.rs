//! End-to-end compression: sensitivity, pruning, color and shape
//! clustering, quantization-aware fine-tuning, and container encoding, with
//! size and image quality recorded after every stage.

use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::cluster::{cluster_colors, cluster_shapes, ClusterConfig, ClusterError, UpdateRule};
use crate::codec::{self, index_bits, CodecError, Ordering, HEADER_LEN};
use crate::finetune::{camera_extent, finetune_qat, FinetuneConfig, FinetuneError, LearningRates, QatScene, QuantStates};
use crate::quant::{dequantize_scene, QuantError, DEFAULT_BITS, DEFAULT_MOMENTUM};
use crate::render::{psnr, render_activated, RenderError, RenderOptions};
use crate::scene::{ActivatedScene, Camera, GaussianScene, Image};
use crate::sensitivity::{
    parameter_sensitivity, prune_zero_sensitivity, SensitivityError, DEFAULT_BETA_COLOR, DEFAULT_BETA_SHAPE,
};

/// Every `HELDOUT_STRIDE`-th camera (starting at 0) is held out for the
/// stage report.
pub const HELDOUT_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no cameras given")]
    NoCameras,
    #[error("{cameras} cameras but {targets} target images")]
    TargetCount { cameras: usize, targets: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k_color: usize,
    pub k_shape: usize,
    pub beta_color: f64,
    pub beta_shape: f64,
    /// Moving-average decay of the k-means centroid updates.
    pub decay: f64,
    pub color_steps: usize,
    pub shape_steps: usize,
    pub color_batch: usize,
    pub shape_batch: usize,
    pub finetune_steps: usize,
    pub lr: LearningRates,
    /// See [`FinetuneConfig::lr_final_factor`].
    pub lr_final_factor: f64,
    pub bits: u8,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_color: 4096,
            k_shape: 4096,
            beta_color: DEFAULT_BETA_COLOR,
            beta_shape: DEFAULT_BETA_SHAPE,
            decay: 0.8,
            color_steps: 100,
            shape_steps: 800,
            color_batch: 1 << 18,
            shape_batch: 1 << 20,
            finetune_steps: 5000,
            lr: LearningRates::default(),
            lr_final_factor: 1.0,
            bits: DEFAULT_BITS,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let counts = [
            ("k_color", self.k_color),
            ("k_shape", self.k_shape),
            ("color_steps", self.color_steps),
            ("shape_steps", self.shape_steps),
            ("color_batch", self.color_batch),
            ("shape_batch", self.shape_batch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(PipelineError::Config(format!("{name} must be positive")));
        }
        if !(self.beta_color >= 0.0 && self.beta_shape >= 0.0) {
            return Err(PipelineError::Config("thresholds must be non-negative".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(PipelineError::Config("decay must lie in (0, 1]".into()));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(PipelineError::Config("bits must lie in 1..=16".into()));
        }
        Ok(())
    }

    fn color_clustering(&self) -> ClusterConfig {
        ClusterConfig {
            k: self.k_color,
            steps: self.color_steps,
            batch_size: self.color_batch,
            decay: self.decay,
            seed: self.seed,
            update: UpdateRule::MovingAverage,
            reseed_idle: true,
        }
    }

    fn shape_clustering(&self) -> ClusterConfig {
        ClusterConfig {
            k: self.k_shape,
            steps: self.shape_steps,
            batch_size: self.shape_batch,
            seed: self.seed.wrapping_add(1),
            ..self.color_clustering()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Pruning,
    ColorClustering,
    GaussianClustering,
    QaFinetune,
    Encode,
    MortonOrder,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Baseline,
        Stage::Pruning,
        Stage::ColorClustering,
        Stage::GaussianClustering,
        Stage::QaFinetune,
        Stage::Encode,
        Stage::MortonOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Pruning => "pruning",
            Stage::ColorClustering => "color_clustering",
            Stage::GaussianClustering => "gaussian_clustering",
            Stage::QaFinetune => "qa_finetune",
            Stage::Encode => "encode",
            Stage::MortonOrder => "morton_order",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// PSNR values serialize as numbers, or the string `"inf"` for identical
/// images.
pub fn serialize_psnr<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: Stage,
    /// Storage of the scene as represented after this stage.
    pub size_bytes: usize,
    /// Mean PSNR on the held-out views against the baseline renders.
    #[serde(serialize_with = "serialize_psnr")]
    pub heldout_psnr: f64,
    /// Mean PSNR on the training views against the training targets.
    #[serde(serialize_with = "serialize_psnr")]
    pub training_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub rows: Vec<StageRow>,
    pub original_count: usize,
    pub pruned_count: usize,
    /// Color vectors kept verbatim instead of clustered.
    pub color_retained: usize,
    pub shape_retained: usize,
    pub heldout_views: Vec<usize>,
    pub training_views: Vec<usize>,
    /// Held-out PSNR of the clustered scene quantized without fine-tuning.
    #[serde(serialize_with = "serialize_psnr")]
    pub quantized_heldout_psnr: f64,
    #[serde(serialize_with = "serialize_psnr")]
    pub quantized_training_psnr: f64,
    pub finetune_losses: Vec<f64>,
    /// Uncompressed layout size over the final container size.
    pub ratio: f64,
}

impl StageReport {
    pub fn row(&self, stage: Stage) -> &StageRow {
        self.rows.iter().find(|r| r.stage == stage).expect("every stage is recorded")
    }

    /// Tab-separated table, one row per stage, followed by `key<TAB>value`
    /// summary lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("stage\tsize_bytes\theldout_psnr_db\ttraining_psnr_db\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.stage,
                r.size_bytes,
                format_psnr(r.heldout_psnr),
                format_psnr(r.training_psnr)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "original_count\t{}", self.original_count);
        let _ = writeln!(out, "pruned_count\t{}", self.pruned_count);
        let _ = writeln!(out, "color_retained\t{}", self.color_retained);
        let _ = writeln!(out, "shape_retained\t{}", self.shape_retained);
        let _ = writeln!(out, "quantized_heldout_psnr_db\t{}", format_psnr(self.quantized_heldout_psnr));
        let _ = writeln!(out, "quantized_training_psnr_db\t{}", format_psnr(self.quantized_training_psnr));
        let _ = writeln!(out, "ratio\t{:.3}", self.ratio);
        out
    }
}

/// Indices of the held-out cameras and of the training cameras. When every
/// camera would be held out, all of them are used for training as well.
pub fn split_views(count: usize) -> (Vec<usize>, Vec<usize>) {
    let heldout: Vec<usize> = (0..count).step_by(HELDOUT_STRIDE).collect();
    let training: Vec<usize> = (0..count).filter(|i| i % HELDOUT_STRIDE != 0).collect();
    if training.is_empty() {
        (heldout, (0..count).collect())
    } else {
        (heldout, training)
    }
}

fn mean_psnr(scene: &ActivatedScene, cameras: &[&Camera], references: &[&Image]) -> Result<f64, RenderError> {
    let opts = RenderOptions::default();
    let mut sum = 0.0;
    for (cam, reference) in cameras.iter().zip(references) {
        sum += psnr(&render_activated(scene, cam, &opts), reference)?;
    }
    Ok(sum / cameras.len() as f64)
}

fn index_bytes(count: usize, total: usize) -> usize {
    (count * index_bits(total) as usize).div_ceil(8)
}

struct Evaluator<'a> {
    heldout: Vec<&'a Camera>,
    heldout_refs: Vec<Image>,
    training: Vec<&'a Camera>,
    training_refs: Vec<&'a Image>,
}

impl Evaluator<'_> {
    fn row(&self, stage: Stage, size_bytes: usize, scene: &ActivatedScene) -> Result<StageRow, RenderError> {
        let refs: Vec<&Image> = self.heldout_refs.iter().collect();
        let row = StageRow {
            stage,
            size_bytes,
            heldout_psnr: mean_psnr(scene, &self.heldout, &refs)?,
            training_psnr: mean_psnr(scene, &self.training, &self.training_refs)?,
        };
        log::info!("{stage}: {} bytes, held-out {} dB", size_bytes, format_psnr(row.heldout_psnr));
        Ok(row)
    }
}

/// Compresses `scene` into a Morton-ordered container. Without `targets`,
/// the training targets are renders of the input scene. Sensitivities and
/// fine-tuning use the training views only; the report's held-out PSNR
/// compares against renders of the input scene.
pub fn compress(
    scene: &GaussianScene,
    cameras: &[Camera],
    targets: Option<&[Image]>,
    config: &PipelineConfig,
) -> Result<(Vec<u8>, StageReport), PipelineError> {
    config.validate()?;
    if cameras.is_empty() {
        return Err(PipelineError::NoCameras);
    }
    if let Some(t) = targets {
        if t.len() != cameras.len() {
            return Err(PipelineError::TargetCount { cameras: cameras.len(), targets: t.len() });
        }
    }
    let opts = RenderOptions::default();
    let baseline = scene.activated();
    let (heldout_idx, training_idx) = split_views(cameras.len());
    let own_targets: Vec<Image>;
    let all_targets: &[Image] = match targets {
        Some(t) => t,
        None => {
            own_targets = cameras.iter().map(|c| render_activated(&baseline, c, &opts)).collect();
            &own_targets
        }
    };
    let training_cams: Vec<Camera> = training_idx.iter().map(|&i| cameras[i].clone()).collect();
    let training_targets: Vec<Image> = training_idx.iter().map(|&i| all_targets[i].clone()).collect();
    let eval = Evaluator {
        heldout: heldout_idx.iter().map(|&i| &cameras[i]).collect(),
        heldout_refs: heldout_idx.iter().map(|&i| render_activated(&baseline, &cameras[i], &opts)).collect(),
        training: training_idx.iter().map(|&i| &cameras[i]).collect(),
        training_refs: training_idx.iter().map(|&i| &all_targets[i]).collect(),
    };

    let sh_dim = scene.sh_dim();
    let float_bytes = |scalars: usize| scalars * 4;
    let mut rows = Vec::with_capacity(Stage::ALL.len());
    rows.push(eval.row(Stage::Baseline, float_bytes(scene.len() * (11 + sh_dim)), &baseline)?);

    let field = parameter_sensitivity(scene, &training_cams)?;
    let pruned = prune_zero_sensitivity(scene, &field);
    let n = pruned.scene.len();
    rows.push(eval.row(Stage::Pruning, float_bytes(n * (11 + sh_dim)), &pruned.scene.activated())?);

    let colors = cluster_colors(&pruned.scene, &pruned.field.color_sensitivity(), config.beta_color, &config.color_clustering())?;
    let color_total = colors.codebook.len();
    let mut color_scene = pruned.scene.clone();
    for (i, &c) in colors.indices.iter().enumerate() {
        color_scene.sh[i * sh_dim..(i + 1) * sh_dim].copy_from_slice(colors.codebook.entry(c as usize));
    }
    let color_size = float_bytes(n * 11 + color_total * sh_dim) + index_bytes(n, color_total);
    rows.push(eval.row(Stage::ColorClustering, color_size, &color_scene.activated())?);

    let shapes = cluster_shapes(&pruned.scene, &pruned.field.shape_sensitivity(), config.beta_shape, &config.shape_clustering())?;
    let shape_total = shapes.codebook.len();
    let mut qat = QatScene::from_clustering(&pruned.scene, &colors, &shapes);
    let shape_size = float_bytes(n * 5 + color_total * sh_dim + shape_total * shapes.codebook.dim)
        + index_bytes(n, color_total)
        + index_bytes(n, shape_total);
    rows.push(eval.row(Stage::GaussianClustering, shape_size, &qat.activated())?);

    let mut states = QuantStates::new(config.bits, DEFAULT_MOMENTUM)?;
    let (quantized_heldout_psnr, quantized_training_psnr) = {
        let mut s = states.clone();
        s.observe(&qat);
        s.freeze();
        let plain = dequantize_scene(&qat.quantize(&s)?)?;
        let refs: Vec<&Image> = eval.heldout_refs.iter().collect();
        (mean_psnr(&plain, &eval.heldout, &refs)?, mean_psnr(&plain, &eval.training, &eval.training_refs)?)
    };
    let ft = FinetuneConfig {
        steps: config.finetune_steps,
        lr: config.lr,
        extent: camera_extent(&training_cams),
        bits: config.bits,
        momentum: DEFAULT_MOMENTUM,
        lr_final_factor: config.lr_final_factor,
    };
    let losses = if ft.steps > 0 {
        finetune_qat(&mut qat, &mut states, &training_cams, &training_targets, &ft)?.losses
    } else {
        states.observe(&qat);
        Vec::new()
    };
    states.freeze();
    let compressed = qat.quantize(&states)?;

    let plain = codec::encode_with(&compressed, Ordering::AsIs)?;
    let header = codec::decode_header(&plain)?;
    let raw_size = HEADER_LEN + header.sections.iter().map(|s| s.raw_len as usize).sum::<usize>();
    rows.push(eval.row(Stage::QaFinetune, raw_size, &dequantize_scene(&compressed)?)?);
    rows.push(eval.row(Stage::Encode, plain.len(), &dequantize_scene(&codec::decode(&plain)?)?)?);

    let bytes = codec::encode(&compressed)?;
    rows.push(eval.row(Stage::MortonOrder, bytes.len(), &dequantize_scene(&codec::decode(&bytes)?)?)?);

    let ratio = codec::report(&bytes, scene.len())?.ratio;
    let report = StageReport {
        rows,
        original_count: scene.len(),
        pruned_count: pruned.removed_count,
        color_retained: color_total - colors.codebook.clustered_count,
        shape_retained: shape_total - shapes.codebook.clustered_count,
        heldout_views: heldout_idx,
        training_views: training_idx,
        quantized_heldout_psnr,
        quantized_training_psnr,
        finetune_losses: losses,
        ratio,
    };
    Ok((bytes, report))
}
