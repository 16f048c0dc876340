//! The hybrid network: conv stages, ISTA-trained deconvolutional layers and per-patch heads.

mod config;
mod experiments;
mod persist;
mod train;

use rayon::prelude::*;

use crate::cnn::{conv_stage_forward, head_forward, ConvStageParams, HeadParams};
use crate::data::{local_contrast_normalize, SceneSample, Standardization};
use crate::deconv::{infer_stack, DeconvEpochLog, DeconvLayerConfig, FilterBank};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::multipatch::{make_grid, PatchGrid};
use crate::tensor::Tensor;

pub use config::{ConvSpec, DeconvInput, NetworkConfig, TrunkSharing};
pub use experiments::{
    run_ablation, run_seed_study, seed_list, summarize, AblationMode, AblationRecord, SeedStudy,
    SeedSummary,
};
pub use persist::{load_model, save_model, ModelFile};
pub use train::{build_and_train, prepare_dataset, train_sequential};

/// Feature extractor: supervised conv stages followed by unsupervised deconv layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub conv: Vec<ConvStageParams<f64>>,
    pub banks: Vec<FilterBank<f64>>,
    /// Per-dimension affine normalization of the flattened features, fitted on training data.
    pub feature_mean: Tensor<f64>,
    pub feature_std: Tensor<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    ConvSgd,
    DeconvIsta,
    HeadSgd,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::ConvSgd => "conv_sgd",
            StageKind::DeconvIsta => "deconv_ista",
            StageKind::HeadSgd => "head_sgd",
        }
    }
}

/// One training stage; `values` holds a per-epoch loss (SGD) or mean ISTA cost (deconv).
#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub kind: StageKind,
    pub trunk: usize,
    pub layer: Option<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub stages: Vec<StageLog>,
    pub deconv: Vec<DeconvEpochLog>,
}

impl TrainingLog {
    pub fn stage_order(&self) -> Vec<StageKind> {
        self.stages.iter().map(|s| s.kind).collect()
    }

    pub const CSV_HEADER: &'static str = "stage,trunk,layer,epoch,value";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for s in &self.stages {
            let layer = s.layer.map_or(String::new(), |l| l.to_string());
            for (e, v) in s.values.iter().enumerate() {
                rows.push(format!("{},{},{layer},{},{v:.10}", s.kind.name(), s.trunk, e + 1));
            }
        }
        rows
    }
}

/// How raw images are mapped to network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub standardization: Standardization,
    /// Local contrast normalization window, `None` to skip.
    pub lcn_window: Option<usize>,
}

impl Preprocess {
    pub fn apply(&self, raw: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = self.standardization.apply(raw)?;
        match self.lcn_window {
            Some(w) => local_contrast_normalize(&s, w),
            None => Ok(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub grid: PatchGrid,
    /// One shared trunk, or one per patch.
    pub trunks: Vec<Trunk>,
    /// One head per patch, row-major.
    pub heads: Vec<HeadParams<f64>>,
    pub preprocess: Option<Preprocess>,
    pub log: TrainingLog,
}

impl Network {
    pub fn trunk_for(&self, patch: usize) -> &Trunk {
        &self.trunks[if self.trunks.len() == 1 { 0 } else { patch }]
    }

    /// Conv stages + deconv layers + the fully connected layer + its softmax/sigmoid.
    pub fn layer_count(&self) -> usize {
        self.trunks[0].conv.len() + self.trunks[0].banks.len() + 2
    }

    pub fn parameter_count(&self) -> usize {
        let trunk: usize = self
            .trunks
            .iter()
            .map(|t| {
                t.conv.iter().map(ConvStageParams::parameter_count).sum::<usize>()
                    + t.banks.iter().map(|b| b.filters.len()).sum::<usize>()
            })
            .sum();
        trunk + self.heads.iter().map(HeadParams::parameter_count).sum::<usize>()
    }
}

/// Initialized, untrained network.
pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    let grid = make_grid(cfg.input_height, cfg.input_width, cfg.patches_m, cfg.patches_n)?;
    let dim = cfg.feature_dim()?;
    let trunk_count = match cfg.sharing {
        TrunkSharing::Shared => 1,
        TrunkSharing::Independent => grid.patch_count(),
    };
    let trunks = (0..trunk_count)
        .map(|t| train::init_trunk(cfg, train::trunk_seed(cfg, t)))
        .collect::<Result<Vec<_>>>()?;
    let heads = (0..grid.patch_count())
        .map(|i| train::init_head(cfg, &grid, dim, i))
        .collect();
    Ok(Network {
        config: cfg.clone(),
        grid,
        trunks,
        heads,
        preprocess: None,
        log: TrainingLog::default(),
    })
}

/// Output of the conv stages (inference mode).
pub fn conv_features(conv: &[ConvStageParams<f64>], image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut x = image.clone();
    for p in conv {
        x = conv_stage_forward(&x, p)?.0;
    }
    Ok(x)
}

/// Flattened, unnormalized head input: the pooled top deconv maps, or the last conv output.
pub fn raw_features(
    trunk: &Trunk,
    cfg: &NetworkConfig,
    image: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (c, h, w) = image.dims3()?;
    if (c, h, w) != (cfg.input_channels, cfg.input_height, cfg.input_width) {
        return Err(Error::Dimension(format!(
            "image is {c}x{h}x{w}, network expects {}x{}x{}",
            cfg.input_channels, cfg.input_height, cfg.input_width
        )));
    }
    let y = match cfg.deconv_input {
        DeconvInput::Conv => conv_features(&trunk.conv, image)?,
        DeconvInput::Image if !trunk.banks.is_empty() => image.clone(),
        DeconvInput::Image => conv_features(&trunk.conv, image)?,
    };
    let out = if trunk.banks.is_empty() {
        y
    } else {
        let cfgs: Vec<DeconvLayerConfig> = cfg.deconv_configs().iter().map(DeconvLayerConfig::for_inference).collect();
        let states = infer_stack(&y, &trunk.banks, &cfgs)?;
        states.into_iter().last().expect("nonempty stack").pooled
    };
    let n = out.len();
    out.reshape(&[n])
}

/// Normalized head input.
pub fn features(trunk: &Trunk, cfg: &NetworkConfig, image: &Tensor<f64>) -> Result<Tensor<f64>> {
    normalize_features(trunk, raw_features(trunk, cfg, image)?)
}

pub(crate) fn normalize_features(trunk: &Trunk, mut f: Tensor<f64>) -> Result<Tensor<f64>> {
    if f.len() != trunk.feature_mean.len() {
        return Err(Error::Dimension(format!(
            "{} features, normalization covers {}",
            f.len(),
            trunk.feature_mean.len()
        )));
    }
    for ((v, m), s) in f
        .data_mut()
        .iter_mut()
        .zip(trunk.feature_mean.data())
        .zip(trunk.feature_std.data())
    {
        *v = (*v - m) / s;
    }
    Ok(f)
}

/// Label map and class probabilities `[C, H, W]` for a preprocessed image.
pub fn predict(net: &Network, image: &Tensor<f64>) -> Result<(LabelMap, Tensor<f64>)> {
    let g = &net.grid;
    let c = net.config.classes;
    let shared = if net.trunks.len() == 1 {
        Some(features(&net.trunks[0], &net.config, image)?)
    } else {
        None
    };
    let plane = g.height * g.width;
    let mut probs = vec![0.0; c * plane];
    let (ph, pw) = (g.patch_height(), g.patch_width());
    for (i, head) in net.heads.iter().enumerate() {
        let own;
        let f = match &shared {
            Some(f) => f,
            None => {
                own = features(net.trunk_for(i), &net.config, image)?;
                &own
            }
        };
        let out = head_forward(f, head)?;
        let (r0, c0) = ((i / g.cols) * ph, (i % g.cols) * pw);
        for y in 0..ph {
            for x in 0..pw {
                for k in 0..c {
                    probs[k * plane + (r0 + y) * g.width + c0 + x] = out.data()[(y * pw + x) * c + k];
                }
            }
        }
    }
    let labels = (0..plane)
        .map(|q| {
            (1..c).fold(0, |best, k| if probs[k * plane + q] > probs[best * plane + q] { k } else { best })
        })
        .collect();
    Ok((
        LabelMap::new(g.height, g.width, labels)?,
        Tensor::from_vec(&[c, g.height, g.width], probs)?,
    ))
}

/// Metrics over preprocessed samples; binary curves use the class-1 probability.
pub fn evaluate(net: &Network, samples: &[SceneSample]) -> Result<MetricsReport> {
    let c = net.config.classes;
    let preds = samples
        .par_iter()
        .map(|s| predict(net, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::zeros(c);
    let mut scores = Vec::new();
    let mut gt = Vec::new();
    for (s, (labels, probs)) in samples.iter().zip(&preds) {
        confusion.merge(&crate::metrics::confusion_matrix(&labels.data, &s.labels.data, c)?)?;
        if c == 2 {
            let plane = labels.len();
            scores.extend_from_slice(&probs.data()[plane..]);
            gt.extend_from_slice(&s.labels.data);
        }
    }
    let has_both = c == 2 && gt.contains(&0) && gt.contains(&1);
    MetricsReport::from_confusion(confusion, has_both.then_some((scores.as_slice(), gt.as_slice())))
}
