use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    build_network, conv_features, normalize_features, raw_features, DeconvInput, Network,
    NetworkConfig, Preprocess, StageKind, StageLog, TrainingLog, Trunk, TrunkSharing,
};
use crate::cnn::{
    conv_stage_backward, conv_stage_forward_cached, dropout_apply, dropout_mask, head_sgd_step,
    sgd_step, ConvStageParams, HeadParams, PixelClassifier, PixelTarget,
};
use crate::data::{BalancedSampler, PixelRef, SceneSample, Standardization, STD_FLOOR};
use crate::deconv::{train_deconv_layer, DeconvEpochLog, FilterBank};
use crate::error::{Error, Result};
use crate::multipatch::{head_seed, train_multipatch, PatchGrid};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

// seed-path tags
const CONV_INIT: u64 = 1;
const CONV_ORDER: u64 = 2;
const CONV_DROPOUT: u64 = 3;
const DECONV: u64 = 4;
const HEAD_INIT: u64 = 5;
const HEAD_STREAM: u64 = 6;

/// Base seed of trunk `t`: the run seed when shared, the patch's head seed otherwise.
pub(crate) fn trunk_seed(cfg: &NetworkConfig, t: usize) -> u64 {
    match cfg.sharing {
        TrunkSharing::Shared => cfg.seed,
        TrunkSharing::Independent => head_seed(cfg.seed, t),
    }
}

pub(crate) fn init_trunk(cfg: &NetworkConfig, base: u64) -> Result<Trunk> {
    let mut in_maps = cfg.input_channels;
    let mut conv = Vec::new();
    for (i, s) in cfg.conv_specs().iter().enumerate() {
        conv.push(ConvStageParams::random(
            s.maps,
            in_maps,
            s.kernel,
            s.pool,
            derive_seed(base, &[CONV_INIT, i as u64]),
        ));
        in_maps = s.maps / s.pool.depth;
    }
    if cfg.deconv_input == DeconvInput::Image {
        in_maps = cfg.input_channels;
    }
    let mut banks = Vec::new();
    for l in 0..cfg.deconv_layers {
        banks.push(FilterBank::random(
            l,
            cfg.deconv.maps,
            in_maps,
            cfg.deconv.kernel,
            derive_seed(base, &[DECONV, l as u64]),
        ));
        in_maps = cfg.deconv.maps / cfg.deconv.pool.depth;
    }
    let d = cfg.feature_dim()?;
    Ok(Trunk {
        conv,
        banks,
        feature_mean: Tensor::zeros(&[d]),
        feature_std: Tensor::filled(&[d], 1.0),
    })
}

pub(crate) fn init_head(cfg: &NetworkConfig, grid: &PatchGrid, dim: usize, patch: usize) -> HeadParams<f64> {
    HeadParams::random(
        dim,
        grid.patch_height(),
        grid.patch_width(),
        cfg.classes,
        cfg.head_mode,
        derive_seed(head_seed(cfg.seed, patch), &[HEAD_INIT]),
    )
}

/// Standardizes with training-split statistics, then applies local contrast normalization.
pub fn prepare_dataset(
    train: &[SceneSample],
    test: &[SceneSample],
    lcn_window: usize,
) -> Result<(Vec<SceneSample>, Vec<SceneSample>, Preprocess)> {
    let imgs: Vec<_> = train.iter().map(|s| &s.image).collect();
    let pre = Preprocess {
        standardization: Standardization::fit(&imgs)?,
        lcn_window: (lcn_window > 0).then_some(lcn_window),
    };
    let apply = |set: &[SceneSample]| -> Result<Vec<SceneSample>> {
        set.par_iter()
            .map(|s| SceneSample::new(pre.apply(&s.image)?, s.labels.clone()))
            .collect()
    };
    Ok((apply(train)?, apply(test)?, pre))
}

fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite {what} loss at epoch {} step {step}",
            epoch + 1
        )))
    }
}

/// Label pixel under each location of an `fh × fw` feature map (receptive-field centres).
fn location_pixels(cfg: &NetworkConfig, fh: usize, fw: usize) -> Vec<usize> {
    let (mut off_r, mut off_c, mut str_r, mut str_c) = (0.0, 0.0, 1.0, 1.0);
    for s in cfg.conv_specs() {
        let k = (s.kernel - 1) as f64 / 2.0;
        off_r += k * str_r;
        off_c += k * str_c;
        off_r += (s.pool.height - 1) as f64 / 2.0 * str_r;
        off_c += (s.pool.width - 1) as f64 / 2.0 * str_c;
        str_r *= s.pool.height as f64;
        str_c *= s.pool.width as f64;
    }
    let mut out = Vec::with_capacity(fh * fw);
    for i in 0..fh {
        let r = ((off_r + str_r * i as f64) as usize).min(cfg.input_height - 1);
        for j in 0..fw {
            let c = ((off_c + str_c * j as f64) as usize).min(cfg.input_width - 1);
            out.push(r * cfg.input_width + c);
        }
    }
    out
}

/// Loss weights summing to one; with balancing, every present class gets equal mass.
fn weighted_targets(classes: &[usize], n_classes: usize, balanced: bool) -> Vec<PixelTarget<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &c in classes {
        counts[c] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    classes
        .iter()
        .enumerate()
        .map(|(pixel, &class)| PixelTarget {
            pixel,
            class,
            weight: if balanced {
                1.0 / (present * counts[class] as f64)
            } else {
                1.0 / classes.len() as f64
            },
        })
        .collect()
}

/// Stage 1: conv stages plus a throwaway per-location softmax, by per-image SGD.
pub(crate) fn train_conv_stack(
    cfg: &NetworkConfig,
    base: u64,
    samples: &[SceneSample],
    mut params: Vec<ConvStageParams<f64>>,
) -> Result<(Vec<ConvStageParams<f64>>, Vec<f64>)> {
    if params.is_empty() {
        return Ok((params, vec![]));
    }
    let shapes = cfg.layer_shapes()?;
    let [k, fh, fw] = shapes[params.len() - 1];
    let locs = location_pixels(cfg, fh, fw);
    let targets: Vec<Vec<PixelTarget<f64>>> = samples
        .iter()
        .map(|s| {
            let cls: Vec<usize> = locs.iter().map(|&p| s.labels.data[p]).collect();
            weighted_targets(&cls, cfg.classes, cfg.balanced)
        })
        .collect();
    let mut clf = PixelClassifier::zeros(cfg.classes, k);
    let lr = cfg.conv_lr;
    let mut losses = Vec::with_capacity(cfg.conv_epochs);
    for epoch in 0..cfg.conv_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(base, &[CONV_ORDER, epoch as u64])));
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let dseed = derive_seed(base, &[CONV_DROPOUT, epoch as u64, step as u64]);
            let mut a = dropout_apply(&samples[i].image, cfg.dropout.input, derive_seed(dseed, &[0]), true)?;
            let mut caches = Vec::with_capacity(params.len());
            let mut masks = Vec::with_capacity(params.len());
            for (j, p) in params.iter().enumerate() {
                let (out, cache) = conv_stage_forward_cached(&a, p)?;
                caches.push(cache);
                a = out;
                // hidden dropout between stages only; the classifier sees clean features
                if j + 1 < params.len() && cfg.dropout.hidden > 0.0 {
                    let m = dropout_mask(a.shape(), cfg.dropout.hidden, derive_seed(dseed, &[1, j as u64]))?;
                    a = a.mul_elem(&m)?;
                    masks.push(Some(m));
                } else {
                    masks.push(None);
                }
            }
            let (loss, g_clf, mut g) = clf.backward(&a, &targets[i])?;
            check_finite(loss, "conv stage", epoch, step)?;
            total += loss;
            let mut grads = Vec::with_capacity(params.len());
            for j in (0..params.len()).rev() {
                if let Some(m) = &masks[j] {
                    g = g.mul_elem(m)?;
                }
                let (gin, gr) = conv_stage_backward(&caches[j], &params[j], &g)?;
                grads.push(gr);
                g = gin;
            }
            sgd_step(&mut clf.weights, &g_clf.weights, lr)?;
            sgd_step(&mut clf.biases, &g_clf.biases, lr)?;
            for (p, gr) in params.iter_mut().zip(grads.into_iter().rev()) {
                sgd_step(&mut p.filters, &gr.filters, lr)?;
                sgd_step(&mut p.biases, &gr.biases, lr)?;
            }
        }
        losses.push(total / samples.len() as f64);
    }
    Ok((params, losses))
}

/// Inputs of the deconv stack for the training subset.
pub(crate) fn deconv_inputs(
    cfg: &NetworkConfig,
    conv: &[ConvStageParams<f64>],
    samples: &[SceneSample],
) -> Result<Vec<Tensor<f64>>> {
    let n = match cfg.deconv_train_images {
        0 => samples.len(),
        k => k.min(samples.len()),
    };
    samples[..n]
        .par_iter()
        .map(|s| match cfg.deconv_input {
            DeconvInput::Conv => conv_features(conv, &s.image),
            DeconvInput::Image => Ok(s.image.clone()),
        })
        .collect()
}

/// Stage 2 for one layer on top of `lower`.
pub(crate) fn train_deconv_level(
    cfg: &NetworkConfig,
    base: u64,
    inputs: &[Tensor<f64>],
    lower: &[FilterBank<f64>],
) -> Result<(FilterBank<f64>, Vec<DeconvEpochLog>)> {
    let l = lower.len();
    let cfgs = cfg.deconv_configs();
    train_deconv_layer(
        inputs,
        lower,
        &cfgs[..l],
        &cfgs[l],
        cfg.deconv_epochs,
        derive_seed(base, &[DECONV, l as u64]),
    )
}

/// Computes every sample's features and fits the trunk's feature normalization on them.
pub(crate) fn fit_features(
    trunk: &mut Trunk,
    cfg: &NetworkConfig,
    samples: &[SceneSample],
) -> Result<Vec<Tensor<f64>>> {
    let raw = samples
        .par_iter()
        .map(|s| raw_features(trunk, cfg, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let d = raw[0].len();
    let n = raw.len() as f64;
    let mut mean = vec![0.0; d];
    for f in &raw {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in &raw {
        for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    trunk.feature_mean = Tensor::from_vec(&[d], mean)?;
    trunk.feature_std = Tensor::from_vec(&[d], std)?;
    raw.into_iter().map(|f| normalize_features(trunk, f)).collect()
}

enum PixelDraw {
    Balanced(BalancedSampler, Vec<usize>),
    Uniform(Vec<(usize, PixelRef)>),
}

/// Stage 3 for one patch head: SGD on single target pixels drawn from the patch.
pub(crate) fn train_head(
    cfg: &NetworkConfig,
    grid: &PatchGrid,
    patch: usize,
    feats: &[Tensor<f64>],
    samples: &[SceneSample],
    mut head: HeadParams<f64>,
    hseed: u64,
) -> Result<(HeadParams<f64>, Vec<f64>)> {
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let (r0, c0) = ((patch / grid.cols) * ph, (patch % grid.cols) * pw);
    let mut by_class = vec![Vec::new(); cfg.classes];
    for (i, s) in samples.iter().enumerate() {
        for y in 0..ph {
            for x in 0..pw {
                let c = s.labels.get(r0 + y, c0 + x);
                by_class[c].push(PixelRef {
                    image: i as u32,
                    pixel: (y * pw + x) as u32,
                });
            }
        }
    }
    let present: Vec<usize> = (0..cfg.classes).filter(|&c| !by_class[c].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hseed, &[HEAD_STREAM]));
    let mut draw = if cfg.balanced && present.len() >= 2 {
        let pools = present.iter().map(|&c| std::mem::take(&mut by_class[c])).collect();
        PixelDraw::Balanced(BalancedSampler::from_pixels(pools, rng.gen())?, present)
    } else {
        PixelDraw::Uniform(
            by_class
                .into_iter()
                .enumerate()
                .flat_map(|(c, v)| v.into_iter().map(move |p| (c, p)))
                .collect(),
        )
    };
    let steps = cfg.pixels_per_image * samples.len();
    let keep = 1.0 / (1.0 - cfg.dropout.fc);
    let mut f = Tensor::zeros(&[head.feature_dim()]);
    let mut losses = Vec::with_capacity(cfg.head_epochs);
    for epoch in 0..cfg.head_epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let (class, p) = match &mut draw {
                PixelDraw::Balanced(s, present) => {
                    let (c, p) = s.draw();
                    (present[c], p)
                }
                PixelDraw::Uniform(all) => all[rng.gen_range(0..all.len())],
            };
            let src = feats[p.image as usize].data();
            for (o, &v) in f.data_mut().iter_mut().zip(src) {
                *o = if cfg.dropout.fc > 0.0 {
                    if rng.gen::<f64>() < cfg.dropout.fc { 0.0 } else { v * keep }
                } else {
                    v
                };
            }
            let target = PixelTarget {
                pixel: p.pixel as usize,
                class,
                weight: 1.0,
            };
            let loss = head_sgd_step(&f, &mut head, &[target], cfg.head_lr)?;
            check_finite(loss, "head", epoch, step)?;
            total += loss;
        }
        losses.push(total / steps as f64);
    }
    Ok((head, losses))
}

/// Stage 3 for every patch, in parallel; returns heads and the per-epoch mean loss over heads.
pub(crate) fn train_heads(
    cfg: &NetworkConfig,
    grid: &PatchGrid,
    feats: &[Vec<Tensor<f64>>],
    samples: &[SceneSample],
) -> Result<(Vec<HeadParams<f64>>, Vec<f64>)> {
    let dim = feats[0][0].len();
    let trained = train_multipatch(grid, cfg.seed, |i, hs| {
        let f = &feats[if feats.len() == 1 { 0 } else { i }];
        train_head(cfg, grid, i, f, samples, init_head(cfg, grid, dim, i), hs)
    })?;
    let epochs = cfg.head_epochs;
    let mean: Vec<f64> = (0..epochs)
        .map(|e| trained.iter().map(|(_, l)| l[e]).sum::<f64>() / trained.len() as f64)
        .collect();
    Ok((trained.into_iter().map(|(h, _)| h).collect(), mean))
}

fn check_samples(cfg: &NetworkConfig, samples: &[SceneSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        let dims = s.image.dims3()?;
        if dims != (cfg.input_channels, cfg.input_height, cfg.input_width) {
            return Err(Error::Dimension(format!(
                "sample {i} is {dims:?}, network expects {}x{}x{}",
                cfg.input_channels, cfg.input_height, cfg.input_width
            )));
        }
        s.labels.check_classes(cfg.classes)?;
    }
    Ok(())
}

/// Stages 1 and 2 for one trunk; appends the stage logs.
pub(crate) fn train_trunk(
    cfg: &NetworkConfig,
    t: usize,
    trunk: Trunk,
    samples: &[SceneSample],
    log: &mut TrainingLog,
) -> Result<Trunk> {
    let base = trunk_seed(cfg, t);
    let (conv, losses) = train_conv_stack(cfg, base, samples, trunk.conv)?;
    log.stages.push(StageLog {
        kind: StageKind::ConvSgd,
        trunk: t,
        layer: None,
        values: losses,
    });
    let mut banks = Vec::with_capacity(cfg.deconv_layers);
    if cfg.deconv_layers > 0 {
        let inputs = deconv_inputs(cfg, &conv, samples)?;
        for l in 0..cfg.deconv_layers {
            let (bank, dlog) = train_deconv_level(cfg, base, &inputs, &banks)?;
            log.stages.push(StageLog {
                kind: StageKind::DeconvIsta,
                trunk: t,
                layer: Some(l),
                values: dlog.iter().map(|d| d.mean_cost).collect(),
            });
            log.deconv.extend(dlog);
            banks.push(bank);
        }
    }
    Ok(Trunk { conv, banks, ..trunk })
}

/// Trains every stage in order: conv SGD, deconv ISTA layer by layer, then the heads on
/// frozen features. `samples` must already be preprocessed.
pub fn train_sequential(net: Network, samples: &[SceneSample]) -> Result<Network> {
    let cfg = net.config.clone();
    check_samples(&cfg, samples)?;
    let mut log = TrainingLog::default();
    let mut trunks = Vec::with_capacity(net.trunks.len());
    for (t, trunk) in net.trunks.into_iter().enumerate() {
        trunks.push(train_trunk(&cfg, t, trunk, samples, &mut log)?);
    }
    let feats = trunks
        .iter_mut()
        .map(|t| fit_features(t, &cfg, samples))
        .collect::<Result<Vec<_>>>()?;
    let (heads, losses) = train_heads(&cfg, &net.grid, &feats, samples)?;
    log.stages.push(StageLog {
        kind: StageKind::HeadSgd,
        trunk: 0,
        layer: None,
        values: losses,
    });
    Ok(Network {
        trunks,
        heads,
        log,
        ..net
    })
}

/// Convenience: build and train from a config.
pub fn build_and_train(cfg: &NetworkConfig, samples: &[SceneSample]) -> Result<Network> {
    train_sequential(build_network(cfg)?, samples)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::generate_synthetic_scenes;

    pub(crate) fn tiny_config() -> NetworkConfig {
        let mut c = NetworkConfig::default();
        for (k, v) in [
            ("input_height", "40"), ("input_width", "40"), ("classes", "3"), ("conv_maps", "4,4"),
            ("deconv_maps", "4"), ("ista_iterations", "4"), ("ista_iterations_infer", "6"),
            ("cg_max_iterations", "20"), ("patches_m", "2"), ("patches_n", "2"), ("conv_epochs", "2"),
            ("deconv_epochs", "1"), ("head_epochs", "2"), ("pixels_per_image", "300"), ("head_lr", "0.05"), ("lcn_window", "5"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    pub(crate) fn tiny_data(n: usize, seed: u64) -> Vec<SceneSample> {
        let (raw, _) = generate_synthetic_scenes(n, 3, 40, seed).unwrap();
        prepare_dataset(&raw, &[], 5).unwrap().0
    }

    #[test]
    fn heads_are_independent_of_training_order() {
        let cfg = tiny_config();
        let data = tiny_data(6, 1);
        let net = build_and_train(&cfg, &data).unwrap();
        let mut trunk = net.trunks[0].clone();
        let feats = fit_features(&mut trunk, &cfg, &data).unwrap();
        let d = feats[0].len();
        // train patches in reverse order, one at a time
        for i in (0..4).rev() {
            let (h, _) = train_head(&cfg, &net.grid, i, &feats, &data, init_head(&cfg, &net.grid, d, i), head_seed(cfg.seed, i)).unwrap();
            assert_eq!(h, net.heads[i]);
        }
    }

    #[test]
    fn head_stage_leaves_filters_untouched() {
        let cfg = tiny_config();
        let data = tiny_data(6, 2);
        let mut log = TrainingLog::default();
        let trunk = train_trunk(&cfg, 0, init_trunk(&cfg, cfg.seed).unwrap(), &data, &mut log).unwrap();
        let net = build_and_train(&cfg, &data).unwrap();
        assert_eq!(net.trunks[0].banks, trunk.banks);
        assert_eq!(net.trunks[0].conv, trunk.conv);
    }

    #[test]
    fn receptive_field_centres() {
        let cfg = NetworkConfig::default();
        // conv5 -> pool2 -> conv5 -> pool2: offset 7.5, stride 4
        let p = location_pixels(&cfg, 13, 13);
        assert_eq!(p[0], 7 * 64 + 7);
        assert_eq!(p[1], 7 * 64 + 11);
        assert_eq!(p[13], 11 * 64 + 7);
        assert_eq!(p[168], 55 * 64 + 55);
    }

    #[test]
    fn target_weights() {
        let t = weighted_targets(&[0, 0, 0, 1], 3, true);
        assert_eq!(t.iter().map(|t| t.weight).collect::<Vec<_>>(), vec![1.0 / 6.0; 3].into_iter().chain([0.5]).collect::<Vec<_>>());
        let u = weighted_targets(&[0, 0, 0, 1], 3, false);
        assert!(u.iter().all(|t| t.weight == 0.25));
    }
}
