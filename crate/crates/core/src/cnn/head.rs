use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::{axpy_slice, dot, Tensor};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// `C` logits per pixel, softmax across them.
    Softmax,
    /// One logit per pixel; binary tasks only.
    Sigmoid,
}

/// Fully connected layer with one classifier per output pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `[output_units, feature_dim]`
    pub weights: Tensor<T>,
    /// `[output_units]`
    pub biases: Tensor<T>,
    pub mode: HeadMode,
    pub patch_h: usize,
    pub patch_w: usize,
    pub classes: usize,
}

impl<T: Scalar> HeadParams<T> {
    pub fn random(
        feature_dim: usize,
        patch_h: usize,
        patch_w: usize,
        classes: usize,
        mode: HeadMode,
        seed: u64,
    ) -> Self {
        let units = patch_h * patch_w * units_per_pixel(mode, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid sigma");
        let data = (0..units * feature_dim)
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Self {
            weights: Tensor::from_vec(&[units, feature_dim], data).expect("finite init"),
            biases: Tensor::zeros(&[units]),
            mode,
            patch_h,
            patch_w,
            classes,
        }
    }

    pub fn output_units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn pixels(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn per_pixel(&self) -> usize {
        units_per_pixel(self.mode, self.classes)
    }

    fn check(&self, features: &Tensor<T>) -> Result<()> {
        if self.mode == HeadMode::Sigmoid && self.classes != 2 {
            return Err(Error::Config("sigmoid head needs exactly 2 classes".into()));
        }
        if self.output_units() != self.pixels() * self.per_pixel() {
            return dim_err("head output units disagree with patch size and classes");
        }
        if features.len() != self.feature_dim() {
            return dim_err(format!(
                "head expects {} features, got {}",
                self.feature_dim(),
                features.len()
            ));
        }
        Ok(())
    }

    /// Logits of one pixel.
    fn pixel_logits(&self, features: &[T], pixel: usize, out: &mut [T]) {
        let d = self.feature_dim();
        let k = self.per_pixel();
        let w = self.weights.data();
        for (c, o) in out.iter_mut().enumerate().take(k) {
            let u = pixel * k + c;
            *o = dot(&w[u * d..(u + 1) * d], features) + self.biases.data()[u];
        }
    }

    /// Class distribution of one pixel from its logits.
    fn pixel_probs(&self, logits: &[T], out: &mut [T]) {
        match self.mode {
            HeadMode::Softmax => softmax(logits, out),
            HeadMode::Sigmoid => {
                let s = sigmoid(logits[0]);
                out[0] = T::one() - s;
                out[1] = s;
            }
        }
    }
}

fn units_per_pixel(mode: HeadMode, classes: usize) -> usize {
    match mode {
        HeadMode::Softmax => classes,
        HeadMode::Sigmoid => 1,
    }
}

fn softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Raw head outputs, `[output_units]`.
pub fn head_logits<T: Scalar>(features: &Tensor<T>, p: &HeadParams<T>) -> Result<Tensor<T>> {
    p.check(features)?;
    let d = p.feature_dim();
    let out = p
        .weights
        .data()
        .chunks(d)
        .zip(p.biases.data())
        .map(|(row, &b)| dot(row, features.data()) + b)
        .collect();
    Tensor::from_vec(&[p.output_units()], out)
}

/// Per-pixel class distribution `[patch_h, patch_w, C]`.
pub fn head_forward<T: Scalar>(features: &Tensor<T>, p: &HeadParams<T>) -> Result<Tensor<T>> {
    let logits = head_logits(features, p)?;
    let k = p.per_pixel();
    let c = p.classes;
    let mut out = vec![T::zero(); p.pixels() * c];
    for q in 0..p.pixels() {
        p.pixel_probs(&logits.data()[q * k..(q + 1) * k], &mut out[q * c..(q + 1) * c]);
    }
    Tensor::from_vec(&[p.patch_h, p.patch_w, c], out)
}

/// Mean over pixels of `-ln p(target)`, probabilities clamped to `[1e-12, 1]`.
pub fn cross_entropy_loss<T: Scalar>(pred: &Tensor<T>, target: &LabelMap) -> Result<T> {
    let [h, w, c] = match pred.shape() {
        [h, w, c] => [*h, *w, *c],
        s => return dim_err(format!("prediction must be [h, w, C], got {s:?}")),
    };
    if h != target.height || w != target.width {
        return dim_err(format!(
            "prediction {h}x{w} vs labels {}x{}",
            target.height, target.width
        ));
    }
    target.check_classes(c)?;
    if target.is_empty() {
        return dim_err("empty label map");
    }
    let floor = T::lit(PROB_FLOOR);
    let total: T = target
        .data
        .iter()
        .enumerate()
        .map(|(q, &l)| -pred.data()[q * c + l].max(floor).min(T::one()).ln())
        .sum();
    Ok(total / T::lit(target.len() as f64))
}

/// One supervised pixel with its loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTarget<T> {
    pub pixel: usize,
    pub class: usize,
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

/// Loss gradients w.r.t. each target pixel's logits, plus the weighted loss.
fn target_logit_grads<T: Scalar>(
    features: &[T],
    p: &HeadParams<T>,
    targets: &[PixelTarget<T>],
) -> Result<(T, Vec<T>)> {
    let k = p.per_pixel();
    let mut logits = vec![T::zero(); k];
    let mut probs = vec![T::zero(); p.classes];
    let mut grads = Vec::with_capacity(targets.len() * k);
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    for t in targets {
        if t.pixel >= p.pixels() {
            return dim_err(format!("pixel {} outside head patch", t.pixel));
        }
        if t.class >= p.classes {
            return Err(Error::Label(format!("label {} outside [0, {})", t.class, p.classes)));
        }
        p.pixel_logits(features, t.pixel, &mut logits);
        p.pixel_probs(&logits, &mut probs);
        loss += -t.weight * probs[t.class].max(floor).min(T::one()).ln();
        match p.mode {
            HeadMode::Softmax => {
                for (c, &pc) in probs.iter().enumerate() {
                    let onehot = if c == t.class { T::one() } else { T::zero() };
                    grads.push(t.weight * (pc - onehot));
                }
            }
            HeadMode::Sigmoid => {
                let y = if t.class == 1 { T::one() } else { T::zero() };
                grads.push(t.weight * (probs[1] - y));
            }
        }
    }
    Ok((loss, grads))
}

/// Weighted cross-entropy over `targets` with dense gradients for parameters and features.
pub fn head_backward<T: Scalar>(
    features: &Tensor<T>,
    p: &HeadParams<T>,
    targets: &[PixelTarget<T>],
) -> Result<(T, HeadGrads<T>, Tensor<T>)> {
    p.check(features)?;
    let (loss, grads) = target_logit_grads(features.data(), p, targets)?;
    let k = p.per_pixel();
    let d = p.feature_dim();
    let mut gw = Tensor::zeros(p.weights.shape());
    let mut gb = Tensor::zeros(p.biases.shape());
    let mut gf = Tensor::zeros(&[d]);
    for (t, g) in targets.iter().zip(grads.chunks(k)) {
        for (c, &gv) in g.iter().enumerate() {
            let u = t.pixel * k + c;
            axpy_slice(&mut gw.data_mut()[u * d..(u + 1) * d], gv, features.data());
            gb.data_mut()[u] += gv;
            axpy_slice(gf.data_mut(), gv, &p.weights.data()[u * d..(u + 1) * d]);
        }
    }
    Ok((loss, HeadGrads { weights: gw, biases: gb }, gf))
}

/// In-place SGD on the rows touched by `targets`; returns the weighted loss before the step.
pub fn head_sgd_step<T: Scalar>(
    features: &Tensor<T>,
    p: &mut HeadParams<T>,
    targets: &[PixelTarget<T>],
    lr: T,
) -> Result<T> {
    p.check(features)?;
    let (loss, grads) = target_logit_grads(features.data(), p, targets)?;
    let k = p.per_pixel();
    let d = p.feature_dim();
    for (t, g) in targets.iter().zip(grads.chunks(k)) {
        for (c, &gv) in g.iter().enumerate() {
            let u = t.pixel * k + c;
            axpy_slice(&mut p.weights.data_mut()[u * d..(u + 1) * d], -lr * gv, features.data());
            p.biases.data_mut()[u] -= lr * gv;
        }
    }
    Ok(loss)
}

/// Softmax classifier applied independently at every location of a `[K, H, W]` map
/// (a 1x1 convolution followed by softmax over classes).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifier<T> {
    /// `[C, K]`
    pub weights: Tensor<T>,
    /// `[C]`
    pub biases: Tensor<T>,
}

impl<T: Scalar> PixelClassifier<T> {
    pub fn zeros(classes: usize, maps: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[classes, maps]),
            biases: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Probabilities `[C, H, W]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, h, w) = features.dims3()?;
        let c = self.classes();
        if k != self.weights.shape()[1] {
            return dim_err(format!("classifier expects {} maps, got {k}", self.weights.shape()[1]));
        }
        let plane = h * w;
        let mut out = vec![T::zero(); c * plane];
        let mut col = vec![T::zero(); k];
        let mut logits = vec![T::zero(); c];
        let mut probs = vec![T::zero(); c];
        for q in 0..plane {
            for (m, v) in col.iter_mut().enumerate() {
                *v = features.data()[m * plane + q];
            }
            for (ci, l) in logits.iter_mut().enumerate() {
                *l = dot(&self.weights.data()[ci * k..(ci + 1) * k], &col) + self.biases.data()[ci];
            }
            softmax(&logits, &mut probs);
            for (ci, &pv) in probs.iter().enumerate() {
                out[ci * plane + q] = pv;
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }

    /// Weighted cross-entropy over `targets` (pixel = flat location); returns the loss,
    /// parameter gradients and the gradient w.r.t. the feature maps.
    pub fn backward(
        &self,
        features: &Tensor<T>,
        targets: &[PixelTarget<T>],
    ) -> Result<(T, PixelClassifier<T>, Tensor<T>)> {
        let probs = self.forward(features)?;
        let (k, h, w) = features.dims3()?;
        let c = self.classes();
        let plane = h * w;
        let floor = T::lit(PROB_FLOOR);
        let mut loss = T::zero();
        let mut grads = PixelClassifier::zeros(c, k);
        let mut gf = Tensor::zeros(features.shape());
        for t in targets {
            if t.pixel >= plane || t.class >= c {
                return Err(Error::Label(format!("target {:?} outside {c} classes / {plane} locations", (t.pixel, t.class))));
            }
            loss += -t.weight * probs.data()[t.class * plane + t.pixel].max(floor).ln();
            for ci in 0..c {
                let onehot = if ci == t.class { T::one() } else { T::zero() };
                let g = t.weight * (probs.data()[ci * plane + t.pixel] - onehot);
                grads.biases.data_mut()[ci] += g;
                for m in 0..k {
                    let fv = features.data()[m * plane + t.pixel];
                    grads.weights.data_mut()[ci * k + m] += g * fv;
                    gf.data_mut()[m * plane + t.pixel] += g * self.weights.data()[ci * k + m];
                }
            }
        }
        Ok((loss, grads, gf))
    }
}
