//! Deconvolutional layers: sparse feature maps inferred by ISTA against a stack of
//! learned filter banks, with filters fitted by conjugate gradients.
//!
//! Layer `l` (zero-based here) explains its input through
//! `y_hat = F_0 U_0 F_1 U_1 ... F_l z_l`, where `F_k` applies filter bank `k`
//! as a full convolution and `U_k` unpools with the switches recorded when layer
//! `k`'s maps were pooled. [`project`] is the exact adjoint of [`reconstruct`]
//! for fixed switches.

pub mod cg;
mod ista;
mod learn;
pub mod pool;

pub use cg::{cg_solve, CgSolution};
pub use ista::{infer_stack, ista_infer};
pub use learn::{train_deconv_layer, update_filters, DeconvEpochLog, FilterUpdate};
pub use pool::{pool, pool_fixed, unpool, PoolRegion, SwitchSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{convolve_bank_full, correlate_bank, Tensor};

/// Initial ISTA step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// Start at `1 / lambda`.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayerConfig {
    /// Number of feature maps `K_l`.
    pub maps: usize,
    /// Square filter extent.
    pub kernel: usize,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    pub pool: PoolRegion,
    /// ISTA iterations during training.
    pub ista_iterations: usize,
    /// ISTA iterations for final feature inference.
    pub ista_iterations_infer: usize,
    pub ista_step: StepSize,
    /// Soft-threshold level.
    pub shrink: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    pub unit_norm: bool,
}

impl Default for DeconvLayerConfig {
    fn default() -> Self {
        Self {
            maps: 16,
            kernel: 3,
            lambda: 1.0,
            pool: PoolRegion::new(1, 1, 2),
            ista_iterations: 20,
            ista_iterations_infer: 40,
            ista_step: StepSize::Auto,
            shrink: 0.05,
            cg_tolerance: 1e-6,
            cg_max_iterations: 200,
            unit_norm: true,
        }
    }
}

impl DeconvLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Parameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.shrink >= 0.0) {
            return Err(Error::Parameter(format!("shrink threshold must be >= 0, got {}", self.shrink)));
        }
        if self.ista_iterations == 0 || self.ista_iterations_infer == 0 {
            return Err(Error::Parameter("ista iterations must be >= 1".into()));
        }
        if let StepSize::Fixed(s) = self.ista_step {
            if !(s > 0.0) {
                return Err(Error::Parameter(format!("ista step must be positive, got {s}")));
            }
        }
        if self.maps == 0 || self.kernel == 0 {
            return Err(Error::Parameter("maps and kernel must be positive".into()));
        }
        if self.maps % self.pool.depth != 0 {
            return Err(Error::Parameter(format!(
                "{} maps not divisible by pool depth {}",
                self.maps, self.pool.depth
            )));
        }
        Ok(())
    }

    /// Copy with the training iteration count replaced by the inference count.
    pub fn for_inference(&self) -> Self {
        Self {
            ista_iterations: self.ista_iterations_infer,
            ..self.clone()
        }
    }
}

/// Filters of one deconvolutional layer, shaped `[K_l, K_{l-1}, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    pub layer: usize,
    pub filters: Tensor<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn new(layer: usize, filters: Tensor<T>) -> Result<Self> {
        if filters.rank() != 4 {
            return dim_err(format!("filter bank must be rank 4, got {:?}", filters.shape()));
        }
        Ok(Self { layer, filters })
    }

    /// Zero-mean Gaussian (sigma 0.01) initialization, unit-normalized per output map.
    pub fn random(layer: usize, maps: usize, in_maps: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid sigma");
        let n = maps * in_maps * kernel * kernel;
        let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let mut bank = Self {
            layer,
            filters: Tensor::from_vec(&[maps, in_maps, kernel, kernel], data).expect("finite init"),
        };
        bank.normalize();
        bank
    }

    pub fn maps(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_maps(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.filters.shape()[2], self.filters.shape()[3])
    }

    fn slice_len(&self) -> usize {
        self.filters.len() / self.maps()
    }

    /// L2 norm of each output-map slice.
    pub fn slice_norms(&self) -> Vec<T> {
        self.filters
            .data()
            .chunks(self.slice_len())
            .map(|s| s.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect()
    }

    /// Rescales every output-map slice to unit L2 norm; all-zero slices are left alone.
    pub fn normalize(&mut self) {
        let n = self.slice_len();
        for slice in self.filters.data_mut().chunks_mut(n) {
            let norm = slice.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in slice.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }
}

/// Per-image inference result for the top layer of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    /// Feature maps of the top layer.
    pub z: Tensor<T>,
    /// Top feature maps pooled with `top_switches`.
    pub pooled: Tensor<T>,
    pub top_switches: SwitchSet,
    /// Switches of every layer below the top, bottom first.
    pub lower_switches: Vec<SwitchSet>,
    /// Cost before the first iteration followed by the cost after each iteration.
    pub costs: Vec<T>,
    /// Step size in effect after the last iteration.
    pub step: T,
}

fn check_stack<T: Scalar>(banks: &[FilterBank<T>], switches: &[SwitchSet]) -> Result<()> {
    if banks.is_empty() {
        return dim_err("empty filter-bank stack");
    }
    if switches.len() + 1 != banks.len() {
        return dim_err(format!(
            "{} banks need {} switch sets, got {}",
            banks.len(),
            banks.len() - 1,
            switches.len()
        ));
    }
    Ok(())
}

/// `R z`: full convolution with the top bank, then unpool/convolve down to the input.
pub fn reconstruct<T: Scalar>(
    z_top: &Tensor<T>,
    banks: &[FilterBank<T>],
    switches: &[SwitchSet],
) -> Result<Tensor<T>> {
    check_stack(banks, switches)?;
    let top = banks.len() - 1;
    let mut t = convolve_bank_full(z_top, &banks[top].filters)?;
    for k in (0..top).rev() {
        t = unpool(&t, &switches[k], switches[k].input_shape)?;
        t = convolve_bank_full(&t, &banks[k].filters)?;
    }
    Ok(t)
}

/// `R^T y`: correlate with each bank and select by the fixed switches going up.
pub fn project<T: Scalar>(y: &Tensor<T>, banks: &[FilterBank<T>], switches: &[SwitchSet]) -> Result<Tensor<T>> {
    check_stack(banks, switches)?;
    let mut t = correlate_bank(y, &banks[0].filters)?;
    for k in 1..banks.len() {
        t = pool_fixed(&t, &switches[k - 1])?;
        t = correlate_bank(&t, &banks[k].filters)?;
    }
    Ok(t)
}

/// `(lambda/2) ||R z - y||^2 + ||z||_1` for explicit codes.
pub(crate) fn cost_of<T: Scalar>(
    y: &Tensor<T>,
    z: &Tensor<T>,
    banks: &[FilterBank<T>],
    switches: &[SwitchSet],
    lambda: T,
) -> Result<T> {
    let resid = reconstruct(z, banks, switches)?.sub(y)?;
    Ok(lambda / T::lit(2.0) * resid.norm_sq() + z.l1())
}

/// Layer cost of an inferred state.
pub fn layer_cost<T: Scalar>(
    y: &Tensor<T>,
    state: &LayerState<T>,
    banks: &[FilterBank<T>],
    cfg: &DeconvLayerConfig,
) -> Result<T> {
    cost_of(y, &state.z, banks, &state.lower_switches, T::lit(cfg.lambda))
}

/// Elementwise soft threshold `sign(x) * max(|x| - beta, 0)`.
pub fn shrink<T: Scalar>(z: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    if !(beta >= T::zero()) {
        return Err(Error::Parameter(format!("shrink threshold must be >= 0, got {beta}")));
    }
    Ok(z.map(|v| {
        let m = v.abs() - beta;
        if m > T::zero() {
            v.signum() * m
        } else {
            T::zero()
        }
    }))
}
