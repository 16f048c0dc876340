use rayon::prelude::*;

use super::train::{
    deconv_inputs, fit_features, init_trunk, train_conv_stack, train_deconv_level, train_heads,
    trunk_seed, build_and_train,
};
use super::{evaluate, Network, NetworkConfig, StageKind, StageLog, TrainingLog, TrunkSharing};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::multipatch::make_grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Drop deconv layers from the top.
    Remove,
    /// Swap deconv layers for plain conv stages of the same shape.
    Replace,
}

impl AblationMode {
    /// Variant names from the deepest down to the bare conv stages.
    pub fn variants(self, base: &NetworkConfig) -> Vec<String> {
        let convs = base.conv_maps.len();
        let depth = convs + base.deconv_layers.max(base.replacement_convs);
        let mut v: Vec<String> = (convs + 1..=depth)
            .rev()
            .map(|k| match self {
                AblationMode::Remove => format!("Deconv-{k}"),
                AblationMode::Replace => format!("CNN-{k}"),
            })
            .collect();
        v.push(format!("CNN-{convs}"));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRecord {
    pub variant: String,
    pub seed: u64,
    pub dataset: String,
    pub pixel_acc: f64,
    pub class_acc: f64,
}

impl AblationRecord {
    pub const CSV_HEADER: &'static str = "variant,seed,dataset,pixel_acc,class_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.8},{:.8}",
            self.variant, self.seed, self.dataset, self.pixel_acc, self.class_acc
        )
    }
}

fn record(variant: &str, seed: u64, dataset: &str, net: &Network, test: &[SceneSample]) -> Result<AblationRecord> {
    let m = evaluate(net, test)?;
    Ok(AblationRecord {
        variant: variant.to_string(),
        seed,
        dataset: dataset.to_string(),
        pixel_acc: m.pixel_accuracy,
        class_acc: m.class_accuracy,
    })
}

/// Remove mode with a shared trunk: stage 1 and each deconv layer are trained once and
/// every shallower variant reuses the prefix, exactly as if trained on its own.
fn remove_mode_shared(
    base: &NetworkConfig,
    seed: u64,
    train: &[SceneSample],
    test: &[SceneSample],
    dataset: &str,
) -> Result<Vec<AblationRecord>> {
    let mut cfg = base.variant(&format!("Deconv-{}", base.conv_maps.len() + base.deconv_layers))?;
    cfg.seed = seed;
    let grid = make_grid(cfg.input_height, cfg.input_width, cfg.patches_m, cfg.patches_n)?;
    let bseed = trunk_seed(&cfg, 0);
    let init = init_trunk(&cfg, bseed)?;
    let (conv, conv_losses) = train_conv_stack(&cfg, bseed, train, init.conv.clone())?;
    let inputs = if cfg.deconv_layers > 0 {
        deconv_inputs(&cfg, &conv, train)?
    } else {
        vec![]
    };
    let mut banks = Vec::new();
    let mut stage_logs = vec![StageLog {
        kind: StageKind::ConvSgd,
        trunk: 0,
        layer: None,
        values: conv_losses,
    }];
    for l in 0..cfg.deconv_layers {
        let (bank, dlog) = train_deconv_level(&cfg, bseed, &inputs, &banks)?;
        stage_logs.push(StageLog {
            kind: StageKind::DeconvIsta,
            trunk: 0,
            layer: Some(l),
            values: dlog.iter().map(|d| d.mean_cost).collect(),
        });
        banks.push(bank);
    }
    let mut out = Vec::new();
    for d in (0..=cfg.deconv_layers).rev() {
        let mut vcfg = cfg.clone();
        vcfg.deconv_layers = d;
        let mut trunk = super::Trunk {
            conv: conv.clone(),
            banks: banks[..d].to_vec(),
            ..init_trunk(&vcfg, bseed)?
        };
        let feats = fit_features(&mut trunk, &vcfg, train)?;
        let (heads, losses) = train_heads(&vcfg, &grid, &[feats], train)?;
        let mut log = TrainingLog {
            stages: stage_logs[..=d].to_vec(),
            deconv: vec![],
        };
        log.stages.push(StageLog {
            kind: StageKind::HeadSgd,
            trunk: 0,
            layer: None,
            values: losses,
        });
        let net = Network {
            config: vcfg.clone(),
            grid,
            trunks: vec![trunk],
            heads,
            preprocess: None,
            log,
        };
        out.push(record(&vcfg.variant_name(), seed, dataset, &net, test)?);
    }
    Ok(out)
}

/// Trains and evaluates every variant of `mode` for every seed. Rows are ordered by
/// variant (deepest first), then by seed.
pub fn run_ablation(
    base: &NetworkConfig,
    train: &[SceneSample],
    test: &[SceneSample],
    mode: AblationMode,
    seeds: &[u64],
    dataset: &str,
) -> Result<Vec<AblationRecord>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let variants = mode.variants(base);
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            if mode == AblationMode::Remove && base.sharing == TrunkSharing::Shared {
                return remove_mode_shared(base, seed, train, test, dataset);
            }
            variants
                .iter()
                .map(|v| {
                    let mut cfg = base.variant(v)?;
                    cfg.seed = seed;
                    let net = build_and_train(&cfg, train)?;
                    record(v, seed, dataset, &net, test)
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<AblationRecord>>>>()?;
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for vi in 0..variants.len() {
        for recs in &per_seed {
            rows.push(recs[vi].clone());
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample variance (n − 1 denominator).
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedStudy {
    pub records: Vec<AblationRecord>,
    pub summaries: Vec<SeedSummary>,
}

impl SeedStudy {
    pub const CSV_HEADER: &'static str = "variant,seed,pixel_acc";

    pub fn csv_rows(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| format!("{},{},{:.8}", r.variant, r.seed, r.pixel_acc))
            .collect()
    }
}

/// `n` consecutive seeds starting at `first`.
pub fn seed_list(first: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| first.wrapping_add(i)).collect()
}

pub fn summarize(variant: &str, values: &[f64]) -> SeedSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    SeedSummary {
        variant: variant.to_string(),
        runs: values.len(),
        mean,
        variance,
    }
}

/// Trains each named variant of `base` once per seed.
pub fn run_seed_study(
    base: &NetworkConfig,
    variants: &[&str],
    train: &[SceneSample],
    test: &[SceneSample],
    seeds: &[u64],
    dataset: &str,
) -> Result<SeedStudy> {
    if seeds.len() < 2 {
        return Err(Error::Config("seed study needs at least 2 runs".into()));
    }
    let cfgs = variants.iter().map(|v| base.variant(v)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..cfgs.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let records = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let mut cfg = cfgs[v].clone();
            cfg.seed = seed;
            let net = build_and_train(&cfg, train)?;
            record(variants[v], seed, dataset, &net, test)
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = variants
        .iter()
        .map(|v| {
            let vals: Vec<f64> = records.iter().filter(|r| r.variant == *v).map(|r| r.pixel_acc).collect();
            summarize(v, &vals)
        })
        .collect();
    Ok(SeedStudy { records, summaries })
}
