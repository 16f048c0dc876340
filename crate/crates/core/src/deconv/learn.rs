use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{convolve_bank_full, correlate_bank, filter_gradient, Tensor};

use super::{cg_solve, infer_stack, ista_infer, pool_fixed, unpool, DeconvLayerConfig, FilterBank, LayerState, SwitchSet};

/// Outcome of one filter update.
#[derive(Clone, Debug)]
pub struct FilterUpdate<T> {
    /// Bank to use from now on: the normalized solution, or the previous bank when CG
    /// did not converge.
    pub bank: FilterBank<T>,
    /// Least-squares solution before normalization.
    pub solved: Tensor<T>,
    /// Summed squared reconstruction error with the previous filters.
    pub error_before: T,
    /// Summed squared reconstruction error with `solved`.
    pub error_after: T,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub cg_relative_residual: T,
}

/// Maps top-layer filters to the reconstruction of one image with codes and lower
/// switches held fixed: `f -> R_{l-1} U (f * z)`.
struct FilterMap<'a, T> {
    z: &'a Tensor<T>,
    lower: &'a [FilterBank<T>],
    switches: &'a [SwitchSet],
}

impl<T: Scalar> FilterMap<'_, T> {
    fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut t = convolve_bank_full(self.z, f)?;
        for k in (0..self.lower.len()).rev() {
            t = unpool(&t, &self.switches[k], self.switches[k].input_shape)?;
            t = convolve_bank_full(&t, &self.lower[k].filters)?;
        }
        Ok(t)
    }

    fn adjoint(&self, r: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
        let mut g = r.clone();
        for k in 0..self.lower.len() {
            g = correlate_bank(&g, &self.lower[k].filters)?;
            g = pool_fixed(&g, &self.switches[k])?;
        }
        filter_gradient(&g, self.z, kh, kw)
    }
}

fn sum_ordered<T: Scalar>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    for p in it {
        acc.axpy(T::one(), &p)?;
    }
    Ok(acc)
}

/// Refits the top bank of `banks` to minimize `sum_i ||R_i(z_i; f) - y_i||^2` with codes
/// and switches fixed, solving the normal equations matrix-free by conjugate gradients
/// warm-started at the current filters.
pub fn update_filters<T: Scalar>(
    batch: &[(Tensor<T>, LayerState<T>)],
    banks: &[FilterBank<T>],
    cfg: &DeconvLayerConfig,
) -> Result<FilterUpdate<T>> {
    if batch.is_empty() {
        return Err(Error::Dataset("filter update needs a nonempty batch".into()));
    }
    let (top, lower) = banks
        .split_last()
        .ok_or_else(|| Error::Dimension("empty filter-bank stack".into()))?;
    for (_, s) in batch {
        if s.lower_switches.len() != lower.len() {
            return Err(Error::Dimension(format!(
                "state carries {} lower switch sets, stack has {} lower layers",
                s.lower_switches.len(),
                lower.len()
            )));
        }
    }
    let (kh, kw) = top.kernel();
    let maps: Vec<FilterMap<T>> = batch
        .iter()
        .map(|(_, s)| FilterMap {
            z: &s.z,
            lower,
            switches: &s.lower_switches,
        })
        .collect();

    let apply = |f: &Tensor<T>| -> Result<Tensor<T>> {
        let parts = maps
            .par_iter()
            .map(|m| m.adjoint(&m.forward(f)?, kh, kw))
            .collect::<Result<Vec<_>>>()?;
        sum_ordered(parts)
    };
    let error = |f: &Tensor<T>| -> Result<T> {
        let errs = maps
            .par_iter()
            .zip(batch.par_iter())
            .map(|(m, (y, _))| Ok(m.forward(f)?.sub(y)?.norm_sq()))
            .collect::<Result<Vec<T>>>()?;
        Ok(errs.into_iter().sum())
    };

    let rhs = sum_ordered(
        maps.par_iter()
            .zip(batch.par_iter())
            .map(|(m, (y, _))| m.adjoint(y, kh, kw))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let current = &top.filters;
    let residual_rhs = rhs.sub(&apply(current)?)?;
    let sol = cg_solve(apply, &residual_rhs, cfg.cg_tolerance, cfg.cg_max_iterations)?;
    let solved = current.add(&sol.x)?;

    let error_before = error(current)?;
    let error_after = error(&solved)?;

    let bank = if sol.converged {
        let mut next = FilterBank::new(top.layer, solved.clone())?;
        if cfg.unit_norm {
            restore_dead_slices(&mut next, top);
            next.normalize();
        }
        next
    } else {
        top.clone()
    };
    if !bank.filters.is_finite() {
        return Err(Error::Numerical("filter update produced non-finite filters".into()));
    }
    Ok(FilterUpdate {
        bank,
        solved,
        error_before,
        error_after,
        cg_iterations: sol.iterations,
        cg_converged: sol.converged,
        cg_relative_residual: sol.relative_residual,
    })
}

// Slices that collapsed to zero keep their previous (unit-norm) values.
fn restore_dead_slices<T: Scalar>(next: &mut FilterBank<T>, prev: &FilterBank<T>) {
    let n = next.filters.len() / next.maps();
    let prev_data = prev.filters.data();
    for (k, slice) in next.filters.data_mut().chunks_mut(n).enumerate() {
        if slice.iter().all(|v| v.is_zero()) {
            slice.copy_from_slice(&prev_data[k * n..(k + 1) * n]);
        }
    }
}

/// Per-epoch training record of one deconvolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvEpochLog {
    pub epoch: usize,
    pub layer: usize,
    /// Mean final ISTA cost over the images, with the filters entering the epoch.
    pub mean_cost: f64,
    pub mean_nnz_fraction: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
}

/// Learns the filters of layer `lower.len()` on top of fixed lower layers by alternating
/// ISTA inference over all images with a conjugate-gradient filter update.
pub fn train_deconv_layer<T: Scalar>(
    images: &[Tensor<T>],
    lower: &[FilterBank<T>],
    lower_cfgs: &[DeconvLayerConfig],
    cfg: &DeconvLayerConfig,
    epochs: usize,
    seed: u64,
) -> Result<(FilterBank<T>, Vec<DeconvEpochLog>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("no images for deconvolutional training".into()));
    }
    let layer = lower.len();
    let in_maps = match (lower.last(), lower_cfgs.last()) {
        (Some(b), Some(c)) => b.maps() / c.pool.depth,
        (None, None) => images[0].dims3()?.0,
        _ => return Err(Error::Config("lower banks and configs disagree".into())),
    };
    let switches: Vec<Vec<SwitchSet>> = images
        .par_iter()
        .map(|y| {
            Ok(infer_stack(y, lower, lower_cfgs)?
                .into_iter()
                .map(|s| s.top_switches)
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut bank = FilterBank::random(layer, cfg.maps, in_maps, cfg.kernel, seed);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut stack = lower.to_vec();
        stack.push(bank.clone());
        let states = images
            .par_iter()
            .zip(switches.par_iter())
            .map(|(y, s)| ista_infer(y, &stack, s, cfg))
            .collect::<Result<Vec<_>>>()?;
        let n = states.len() as f64;
        let mean_cost = states.iter().map(|s| s.costs.last().map_or(0.0, |c| c.as_f64())).sum::<f64>() / n;
        let mean_nnz_fraction = states
            .iter()
            .map(|s| s.z.count_nonzero() as f64 / s.z.len() as f64)
            .sum::<f64>()
            / n;
        let batch: Vec<(Tensor<T>, LayerState<T>)> = images.iter().cloned().zip(states).collect();
        let update = update_filters(&batch, &stack, cfg)?;
        bank = update.bank;
        logs.push(DeconvEpochLog {
            epoch,
            layer,
            mean_cost,
            mean_nnz_fraction,
            cg_iterations: update.cg_iterations,
            cg_converged: update.cg_converged,
        });
    }
    Ok((bank, logs))
}
