//! Matrix-free linear conjugate gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution<T> {
    pub x: Tensor<T>,
    pub iterations: usize,
    /// Final `||A x - b|| / ||b||` (zero when `b = 0`).
    pub relative_residual: T,
    pub converged: bool,
}

const PROBE_SEED: u64 = 0x5eed_c6;

/// Solves `A x = b` for a symmetric positive semidefinite operator given as a callback.
///
/// Stops once `||A x - b|| <= tol * ||b||` or after `max_iter` iterations; the latter is
/// reported through `converged = false` rather than as an error. A random probe rejects
/// operators whose bilinear form is visibly asymmetric.
pub fn cg_solve<T, F>(apply: F, b: &Tensor<T>, tol: f64, max_iter: usize) -> Result<CgSolution<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    check_symmetric(&apply, b.shape())?;

    let b_norm = b.norm_sq().sqrt();
    let mut x = Tensor::zeros(b.shape());
    if b_norm.is_zero() {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: T::zero(),
            converged: true,
        });
    }
    let tol = T::lit(tol);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    let mut iterations = 0;
    let mut converged = rs.sqrt() <= tol * b_norm;
    while !converged && iterations < max_iter {
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if !pap.is_finite() {
            return Err(Error::Numerical("non-finite curvature in conjugate gradients".into()));
        }
        if pap <= T::zero() {
            // direction in the null space of a semidefinite operator
            break;
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        let rs_new = r.norm_sq();
        iterations += 1;
        converged = rs_new.sqrt() <= tol * b_norm;
        let beta = rs_new / rs;
        rs = rs_new;
        let mut next = r.clone();
        next.axpy(beta, &p)?;
        p = next;
    }
    let true_resid = apply(&x)?.sub(b)?.norm_sq().sqrt() / b_norm;
    if !true_resid.is_finite() {
        return Err(Error::Numerical("non-finite residual in conjugate gradients".into()));
    }
    Ok(CgSolution {
        x,
        iterations,
        relative_residual: true_resid,
        converged: converged && true_resid <= tol * T::lit(10.0),
    })
}

fn check_symmetric<T, F>(apply: &F, shape: &[usize]) -> Result<()>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let n: usize = shape.iter().product();
    let mut draw = || {
        let v: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        Tensor::from_vec(shape, v)
    };
    let u = draw()?;
    let v = draw()?;
    let au = apply(&u)?;
    let av = apply(&v)?;
    if au.shape() != shape || av.shape() != shape {
        return Err(Error::Operator(format!(
            "operator maps {:?} to {:?}",
            shape,
            au.shape()
        )));
    }
    let lhs = au.dot(&v)?;
    let rhs = u.dot(&av)?;
    let scale = (au.norm_sq() * v.norm_sq()).sqrt() + (u.norm_sq() * av.norm_sq()).sqrt();
    let slack = T::lit(1e-8) * scale.max(T::min_positive_value());
    if (lhs - rhs).abs() > slack {
        return Err(Error::Operator(format!(
            "operator is not symmetric: <Au,v> = {lhs}, <u,Av> = {rhs}"
        )));
    }
    Ok(())
}
