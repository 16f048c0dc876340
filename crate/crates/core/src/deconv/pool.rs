//! 3D max pooling with recorded switches, fixed-switch selection and unpooling.
//!
//! A pooling region spans `height x width` pixels across `depth` adjacent maps.
//! Positions inside a region are numbered row-major over `(row, col, map)`, so the
//! flat index is `(row * width + col) * depth + map`. Free pooling keeps the element
//! of largest magnitude (sign preserved) and breaks ties toward the lowest index.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolRegion {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl PoolRegion {
    pub const fn new(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth }
    }

    /// Spatial-only region (`depth == 1`).
    pub const fn spatial(size: usize) -> Self {
        Self::new(size, size, 1)
    }

    pub fn volume(&self) -> usize {
        self.height * self.width * self.depth
    }

    /// Pooled `[C, H, W]` shape for an input shape, if divisible.
    pub fn pooled_shape(&self, c: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        if self.volume() == 0 {
            return Err(Error::Parameter("pool region extents must be positive".into()));
        }
        if c % self.depth != 0 || h % self.height != 0 || w % self.width != 0 {
            return dim_err(format!(
                "input {c}x{h}x{w} not divisible by pool region {}x{}x{} (maps x rows x cols)",
                self.depth, self.height, self.width
            ));
        }
        Ok([c / self.depth, h / self.height, w / self.width])
    }

    #[inline]
    fn offset(&self, q: usize) -> (usize, usize, usize) {
        let d = q % self.depth;
        let rc = q / self.depth;
        (rc / self.width, rc % self.width, d)
    }
}

/// Argmax records of one pooling stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchSet {
    pub input_shape: [usize; 3],
    pub pooled_shape: [usize; 3],
    pub region: PoolRegion,
    /// One flat in-region index per pooled cell, row-major over the pooled shape.
    pub indices: Vec<u32>,
}

impl SwitchSet {
    /// Checks the switch set against an input shape.
    pub fn validate(&self, input_shape: [usize; 3]) -> Result<()> {
        if self.input_shape != input_shape {
            return Err(Error::Switch(format!(
                "switches recorded for {:?}, applied to {:?}",
                self.input_shape, input_shape
            )));
        }
        let [c, h, w] = input_shape;
        let pooled = self
            .region
            .pooled_shape(c, h, w)
            .map_err(|e| Error::Switch(e.to_string()))?;
        if pooled != self.pooled_shape {
            return Err(Error::Switch("pooled shape inconsistent with region".into()));
        }
        if self.indices.len() != pooled.iter().product::<usize>() {
            return Err(Error::Switch(format!(
                "{} switches for {} pooled cells",
                self.indices.len(),
                pooled.iter().product::<usize>()
            )));
        }
        let vol = self.region.volume() as u32;
        if let Some(bad) = self.indices.iter().find(|&&i| i >= vol) {
            return Err(Error::Switch(format!("switch index {bad} outside region volume {vol}")));
        }
        Ok(())
    }

    /// Flat input index selected by pooled cell `cell`.
    #[inline]
    fn source(&self, cell: usize) -> usize {
        let [_, ph, pw] = self.pooled_shape;
        let [_, h, w] = self.input_shape;
        let g = cell / (ph * pw);
        let i = (cell / pw) % ph;
        let j = cell % pw;
        let (a, b, d) = self.region.offset(self.indices[cell] as usize);
        let map = g * self.region.depth + d;
        (map * h + i * self.region.height + a) * w + j * self.region.width + b
    }
}

fn shape3<T: Scalar>(z: &Tensor<T>) -> Result<[usize; 3]> {
    let (c, h, w) = z.dims3()?;
    Ok([c, h, w])
}

/// Free pooling when `fixed` is `None`, selection `p = P_s z` otherwise.
pub fn pool<T: Scalar>(
    z: &Tensor<T>,
    region: PoolRegion,
    fixed: Option<&SwitchSet>,
) -> Result<(Tensor<T>, SwitchSet)> {
    let input_shape = shape3(z)?;
    let [c, h, w] = input_shape;
    let pooled_shape = region.pooled_shape(c, h, w)?;
    if let Some(s) = fixed {
        if s.region != region {
            return Err(Error::Switch(format!(
                "switch region {:?} differs from requested {:?}",
                s.region, region
            )));
        }
        return Ok((pool_fixed(z, s)?, s.clone()));
    }
    let [pc, ph, pw] = pooled_shape;
    let data = z.data();
    let mut out = Vec::with_capacity(pc * ph * pw);
    let mut indices = Vec::with_capacity(pc * ph * pw);
    for g in 0..pc {
        for i in 0..ph {
            for j in 0..pw {
                let mut best = T::zero();
                let mut best_mag = -T::one();
                let mut best_q = 0u32;
                for a in 0..region.height {
                    for b in 0..region.width {
                        for d in 0..region.depth {
                            let v = data[((g * region.depth + d) * h + i * region.height + a) * w
                                + j * region.width
                                + b];
                            if v.abs() > best_mag {
                                best_mag = v.abs();
                                best = v;
                                best_q = ((a * region.width + b) * region.depth + d) as u32;
                            }
                        }
                    }
                }
                out.push(best);
                indices.push(best_q);
            }
        }
    }
    Ok((
        Tensor::from_vec(&pooled_shape, out)?,
        SwitchSet {
            input_shape,
            pooled_shape,
            region,
            indices,
        },
    ))
}

/// Selection `P_s z`: copies the switch-selected element of each region.
pub fn pool_fixed<T: Scalar>(z: &Tensor<T>, s: &SwitchSet) -> Result<Tensor<T>> {
    s.validate(shape3(z)?)?;
    let data = z.data();
    let out = (0..s.indices.len()).map(|cell| data[s.source(cell)]).collect();
    Tensor::from_vec(&s.pooled_shape, out)
}

/// Unpooling `U_s p`: scatters pooled values to their switch positions, zeros elsewhere.
pub fn unpool<T: Scalar>(p: &Tensor<T>, s: &SwitchSet, target_shape: [usize; 3]) -> Result<Tensor<T>> {
    s.validate(target_shape)?;
    if shape3(p)? != s.pooled_shape {
        return Err(Error::Switch(format!(
            "pooled tensor {:?} does not match switches {:?}",
            p.shape(),
            s.pooled_shape
        )));
    }
    let mut out = vec![T::zero(); target_shape.iter().product()];
    for (cell, &v) in p.data().iter().enumerate() {
        out[s.source(cell)] = v;
    }
    Tensor::from_vec(&target_shape, out)
}
