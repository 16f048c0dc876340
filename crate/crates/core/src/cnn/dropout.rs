use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Drop probabilities per site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub input: f64,
    pub hidden: f64,
    /// Applied to the features entering the fully connected head.
    pub fc: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self {
            input: 0.2,
            hidden: 0.5,
            fc: 0.6975,
        }
    }
}

impl DropoutSpec {
    pub fn disabled() -> Self {
        Self {
            input: 0.0,
            hidden: 0.0,
            fc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("input", self.input), ("hidden", self.hidden), ("fc", self.fc)] {
            check_rate(r).map_err(|_| Error::Parameter(format!("{name} dropout rate {r} outside [0, 1)")))?;
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let n = shape.iter().product();
    if rate == 0.0 {
        return Ok(Tensor::filled(shape, T::one()));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Inverted dropout when `training`, identity otherwise.
pub fn dropout_apply<T: Scalar>(x: &Tensor<T>, rate: f64, seed: u64, training: bool) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    x.mul_elem(&dropout_mask(x.shape(), rate, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_cases() {
        let x = Tensor::<f64>::from_f64(&[4], &[1., -2., 3., 0.5]).unwrap();
        assert_eq!(dropout_apply(&x, 0.0, 1, true).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.9, 1, false).unwrap(), x);
    }

    #[test]
    fn rate_one_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(dropout_apply(&x, 1.0, 0, true), Err(Error::Parameter(_))));
        assert!(DropoutSpec { fc: 1.0, ..Default::default() }.validate().is_err());
        assert!(DropoutSpec::default().validate().is_ok());
    }

    #[test]
    fn seeded_masks_repeat() {
        let x = Tensor::<f64>::filled(&[100], 1.0);
        assert_eq!(dropout_apply(&x, 0.5, 9, true).unwrap(), dropout_apply(&x, 0.5, 9, true).unwrap());
    }

    #[test]
    fn expectation_is_preserved() {
        let x = Tensor::<f64>::filled(&[100_000], 1.0);
        let out = dropout_apply(&x, 0.5, 12, true).unwrap();
        let mean = out.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 100_000.0;
        assert!((zeros - 0.5).abs() < 0.01);
    }
}
