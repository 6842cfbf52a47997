use rand::seq::index::sample;

use crate::error::{Error, Result};

use super::{seeded_rng, ParameterSet};

/// Compares an analytic gradient with central differences.
///
/// `f` returns the objective value and its analytic gradient at the given
/// parameters. At most `max_coords` scalar coordinates are checked (all of
/// them when the model is small enough); the subset is drawn from `seed`.
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, theta: &ParameterSet, h: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, ParameterSet)>,
{
    if h <= 0.0 {
        return Err(Error::usage("grad_check step h must be positive"));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() || !analytic.is_finite() {
        return Err(Error::Numeric("grad_check: objective is not finite".into()));
    }
    let n = theta.num_scalars();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = seeded_rng(seed);
        let mut picked = sample(&mut rng, n, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for k in coords {
        let x = theta.flat_get(k);
        probe.flat_set(k, x + h);
        let (up, _) = f(&probe)?;
        probe.flat_set(k, x - h);
        let (down, _) = f(&probe)?;
        probe.flat_set(k, x);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: objective not finite near coordinate {k}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic.flat_get(k) - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn theta() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(&[2, 2], vec![0.3, -1.1, 2.0, 0.5]).unwrap())
            .unwrap();
        p.insert("b", Tensor::from_vec(&[1], vec![-0.7]).unwrap()).unwrap();
        p
    }

    #[test]
    fn half_squared_norm() {
        let err = grad_check(
            |p| Ok((0.5 * p.dot(p)?, p.clone())),
            &theta(),
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(|p| Ok((3.0, p.zeros_like())), &theta(), 1e-5, 100, 0).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = grad_check(
            |p| {
                let mut g = p.clone();
                g.scale(2.0);
                Ok((0.5 * p.dot(p)?, g))
            },
            &theta(),
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_is_error() {
        let r = grad_check(|p| Ok((f64::NAN, p.clone())), &theta(), 1e-5, 100, 0);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn subset_sampling_is_deterministic() {
        let f = |p: &ParameterSet| Ok((0.5 * p.dot(p)?, p.clone()));
        let a = grad_check(f, &theta(), 1e-5, 2, 9).unwrap();
        let b = grad_check(f, &theta(), 1e-5, 2, 9).unwrap();
        assert_eq!(a, b);
    }
}
