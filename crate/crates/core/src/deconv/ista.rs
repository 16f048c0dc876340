use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{cost_of, pool, project, reconstruct, shrink, DeconvLayerConfig, FilterBank, LayerState, StepSize, SwitchSet};

const MAX_HALVINGS: usize = 40;

/// Infers the top-layer feature maps of `banks` for input `y` by ISTA.
///
/// `lower_switches` fixes the pooling of every layer below the top. The codes start at
/// zero; each iteration takes a gradient step on the reconstruction term, soft-thresholds,
/// and re-pools the top maps. The step halves until the cost does not increase; if no
/// step is accepted the codes stay put, so the recorded cost sequence never increases.
pub fn ista_infer<T: Scalar>(
    y: &Tensor<T>,
    banks: &[FilterBank<T>],
    lower_switches: &[SwitchSet],
    cfg: &DeconvLayerConfig,
) -> Result<LayerState<T>> {
    cfg.validate()?;
    let top = banks
        .last()
        .ok_or_else(|| Error::Dimension("empty filter-bank stack".into()))?;
    let code_shape = {
        let proj = project(y, banks, lower_switches)?;
        proj.shape().to_vec()
    };
    if code_shape[0] != top.maps() {
        return Err(Error::Dimension("code maps disagree with top bank".into()));
    }
    let lambda = T::lit(cfg.lambda);
    let beta = T::lit(cfg.shrink);
    let mut step = match cfg.ista_step {
        StepSize::Auto => T::one() / lambda,
        StepSize::Fixed(s) => T::lit(s),
    };

    let mut z = Tensor::zeros(&code_shape);
    let mut cost = cost_of(y, &z, banks, lower_switches, lambda)?;
    check_cost(cost, 0, step)?;
    let mut costs = Vec::with_capacity(cfg.ista_iterations + 1);
    costs.push(cost);
    let (mut pooled, mut top_switches) = pool(&z, cfg.pool, None)?;

    for it in 1..=cfg.ista_iterations {
        let resid = reconstruct(&z, banks, lower_switches)?.sub(y)?;
        let grad = project(&resid, banks, lower_switches)?.scale(lambda);
        for _ in 0..MAX_HALVINGS {
            let mut moved = z.clone();
            moved.axpy(-step, &grad)?;
            let cand = shrink(&moved, beta)?;
            let c = cost_of(y, &cand, banks, lower_switches, lambda)?;
            check_cost(c, it, step)?;
            if c <= cost {
                z = cand;
                cost = c;
                break;
            }
            step /= T::lit(2.0);
        }
        costs.push(cost);
        (pooled, top_switches) = pool(&z, cfg.pool, None)?;
    }

    Ok(LayerState {
        z,
        pooled,
        top_switches,
        lower_switches: lower_switches.to_vec(),
        costs,
        step,
    })
}

fn check_cost<T: Scalar>(cost: T, iteration: usize, step: T) -> Result<()> {
    if cost.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite ISTA cost {cost} at iteration {iteration} (step {step})"
        )))
    }
}

/// Greedy bottom-up inference through a whole stack: layer `l` is inferred with the
/// switches produced by layers `0..l`. Returns one state per layer.
pub fn infer_stack<T: Scalar>(
    y: &Tensor<T>,
    banks: &[FilterBank<T>],
    cfgs: &[DeconvLayerConfig],
) -> Result<Vec<LayerState<T>>> {
    if banks.len() != cfgs.len() {
        return Err(Error::Config(format!("{} banks but {} layer configs", banks.len(), cfgs.len())));
    }
    let mut switches: Vec<SwitchSet> = Vec::with_capacity(banks.len());
    let mut states = Vec::with_capacity(banks.len());
    for l in 0..banks.len() {
        let state = ista_infer(y, &banks[..=l], &switches, &cfgs[l])?;
        switches.push(state.top_switches.clone());
        states.push(state);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_stack;
    use super::super::{layer_cost, PoolRegion};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cfg() -> DeconvLayerConfig {
        DeconvLayerConfig {
            maps: 1,
            kernel: 1,
            lambda: 1.0,
            pool: PoolRegion::spatial(1),
            ista_iterations: 1,
            ista_step: StepSize::Fixed(1.0),
            shrink: 0.3,
            ..Default::default()
        }
    }

    fn unit_bank() -> FilterBank<f64> {
        FilterBank::new(0, Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap()).unwrap()
    }

    #[test]
    fn zero_input_is_a_fixed_point() {
        let y = Tensor::<f64>::zeros(&[1, 4, 4]);
        let s = ista_infer(&y, &[unit_bank()], &[], &unit_cfg()).unwrap();
        assert!(s.z.data().iter().all(|&v| v == 0.0));
        assert_eq!(*s.costs.last().unwrap(), 0.0);
    }

    #[test]
    fn single_unit_step_is_soft_threshold_of_input() {
        // large entries so the full step lowers the cost and is accepted
        let y = Tensor::from_f64(&[1, 2, 2], &[3.0, -0.2, 2.5, -4.0]).unwrap();
        let s = ista_infer(&y, &[unit_bank()], &[], &unit_cfg()).unwrap();
        let want = shrink(&y, 0.3).unwrap();
        assert_eq!(s.z, want);
        assert_eq!(layer_cost(&y, &s, &[unit_bank()], &unit_cfg()).unwrap(), *s.costs.last().unwrap());
    }

    #[test]
    fn rejected_steps_halve_the_step_size() {
        // shrink(y) costs more than z = 0 here, so the unit step is refused
        let y = Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap();
        let s = ista_infer(&y, &[unit_bank()], &[], &unit_cfg()).unwrap();
        assert!(s.step < 1.0);
        assert!(s.costs[1] <= s.costs[0]);
    }

    #[test]
    fn cost_never_increases_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bank = FilterBank::<f64>::random(0, 4, 1, 3, 5);
        let cfg = DeconvLayerConfig {
            maps: 4,
            ista_iterations: 50,
            ..Default::default()
        };
        let y = Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = ista_infer(&y, &[bank], &[], &cfg).unwrap();
        assert_eq!(s.costs.len(), 51);
        for w in s.costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        assert!(s.costs[50] < s.costs[0]);
    }

    #[test]
    fn stacked_inference_descends_at_every_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let (banks, switches, in_shape, _) = random_stack(&mut rng, 3);
            let n = in_shape.iter().product();
            let y = Tensor::from_vec(&in_shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let cfg = DeconvLayerConfig {
                ista_iterations: 15,
                pool: PoolRegion::spatial(1),
                maps: banks[2].maps(),
                ..Default::default()
            };
            let s = ista_infer(&y, &banks, &switches, &cfg).unwrap();
            for w in s.costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-10);
            }
        }
    }

    #[test]
    fn sparsity_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bank = FilterBank::<f64>::random(0, 4, 2, 3, 8);
        let y = Tensor::from_vec(&[2, 10, 10], (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut last = usize::MAX;
        for beta in [0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6] {
            let cfg = DeconvLayerConfig {
                maps: 4,
                shrink: beta,
                ista_iterations: 20,
                ..Default::default()
            };
            let nnz = ista_infer(&y, &[bank.clone()], &[], &cfg).unwrap().z.count_nonzero();
            assert!(nnz <= last, "beta {beta}: {nnz} > {last}");
            last = nnz;
        }
    }

    #[test]
    fn infer_stack_threads_switches_upward() {
        let banks = vec![
            FilterBank::<f64>::random(0, 4, 1, 3, 1),
            FilterBank::<f64>::random(1, 4, 2, 3, 2),
        ];
        let cfg = DeconvLayerConfig {
            maps: 4,
            ..Default::default()
        };
        let y = Tensor::from_vec(&[1, 12, 12], (0..144).map(|i| ((i * 37) % 11) as f64 / 11.0).collect()).unwrap();
        let states = infer_stack(&y, &banks, &[cfg.clone(), cfg]).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(states[1].lower_switches, vec![states[0].top_switches.clone()]);
        assert_eq!(states[1].z.shape(), &[4, 8, 8]);
        assert_eq!(states[1].pooled.shape(), &[2, 8, 8]);
    }
}
