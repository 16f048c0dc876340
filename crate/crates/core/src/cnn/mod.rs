//! Supervised layers: convolution stages, dropout, the per-pixel classifier head,
//! cross-entropy and plain SGD.

mod dropout;
mod head;

pub use dropout::{dropout_apply, dropout_mask, DropoutSpec};
pub use head::{
    cross_entropy_loss, head_backward, head_forward, head_logits, head_sgd_step, HeadGrads, HeadMode, HeadParams,
    PixelClassifier, PixelTarget,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deconv::{pool, unpool, PoolRegion, SwitchSet};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{convolve_bank_full, correlate_bank, filter_gradient, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStageParams<T> {
    /// `[K_out, K_in, h, w]`
    pub filters: Tensor<T>,
    /// `[K_out]`
    pub biases: Tensor<T>,
    pub pool: PoolRegion,
}

impl<T: Scalar> ConvStageParams<T> {
    /// He-scaled Gaussian filters, zero biases.
    pub fn random(k_out: usize, k_in: usize, kernel: usize, pool: PoolRegion, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (k_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid sigma");
        let data = (0..k_out * k_in * kernel * kernel)
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Self {
            filters: Tensor::from_vec(&[k_out, k_in, kernel, kernel], data).expect("finite init"),
            biases: Tensor::zeros(&[k_out]),
            pool,
        }
    }

    pub fn out_maps(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.filters.shape()[2], self.filters.shape()[3])
    }

    pub fn parameter_count(&self) -> usize {
        self.filters.len() + self.biases.len()
    }

    /// Output `[C, H, W]` for an input `[C, H, W]`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let (kh, kw) = self.kernel();
        if c != self.filters.shape()[1] || kh > h || kw > w {
            return dim_err(format!("conv stage {:?} cannot take input {:?}", self.filters.shape(), input));
        }
        self.pool.pooled_shape(self.out_maps(), h - kh + 1, w - kw + 1)
    }
}

/// Everything backpropagation needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor<T>,
    pub preact: Tensor<T>,
    pub switches: SwitchSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub filters: Tensor<T>,
    pub biases: Tensor<T>,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `maxpool(relu(correlate(x, filters) + bias))`, returning the pooling switches.
pub fn conv_stage_forward<T: Scalar>(x: &Tensor<T>, p: &ConvStageParams<T>) -> Result<(Tensor<T>, SwitchSet)> {
    let (out, cache) = conv_stage_forward_cached(x, p)?;
    Ok((out, cache.switches))
}

pub fn conv_stage_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvStageParams<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    if p.biases.len() != p.out_maps() {
        return dim_err("bias count differs from output maps");
    }
    let mut pre = correlate_bank(x, &p.filters)?;
    let plane = pre.shape()[1] * pre.shape()[2];
    for (k, chunk) in pre.data_mut().chunks_mut(plane).enumerate() {
        let b = p.biases.data()[k];
        for v in chunk {
            *v += b;
        }
    }
    let act = relu(&pre);
    let (out, switches) = pool(&act, p.pool, None)?;
    Ok((
        out,
        ConvCache {
            input: x.clone(),
            preact: pre,
            switches,
        },
    ))
}

/// Gradients of a conv stage given the gradient at its pooled output.
pub fn conv_stage_backward<T: Scalar>(
    cache: &ConvCache<T>,
    p: &ConvStageParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let mut g = unpool(grad_out, &cache.switches, cache.switches.input_shape)?;
    for (gv, &pv) in g.data_mut().iter_mut().zip(cache.preact.data()) {
        if pv <= T::zero() {
            *gv = T::zero();
        }
    }
    let (kh, kw) = p.kernel();
    let filters = filter_gradient(&cache.input, &g, kh, kw)?;
    let plane = g.shape()[1] * g.shape()[2];
    let biases = Tensor::from_vec(
        &[p.out_maps()],
        g.data().chunks(plane).map(|c| c.iter().copied().sum()).collect(),
    )?;
    let grad_in = convolve_bank_full(&g, &p.filters)?;
    Ok((grad_in, ConvGrads { filters, biases }))
}

/// `params <- params - lr * grads`.
pub fn sgd_step<T: Scalar>(params: &mut Tensor<T>, grads: &Tensor<T>, lr: T) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::Dimension(format!(
            "parameter shape {:?} vs gradient shape {:?}",
            params.shape(),
            grads.shape()
        )));
    }
    params.axpy(-lr, grads)
}
