//! Central finite-difference verification of tape gradients (in `f64`).

use super::{Graph, Tensor, Var};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any was checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a rectifier changes state within the kink band.
    pub skipped: usize,
}

/// Finite-difference gradient checker.
///
/// `f` receives a fresh graph and the variable holding the perturbed input
/// and must return a scalar node. A coordinate is skipped when moving it by
/// the kink band (default `100 * eps`) in either direction changes the
/// on/off state of any rectifier in the graph.
#[derive(Clone, Debug)]
pub struct GradCheck {
    eps: f64,
    kink_band: f64,
    coords: Option<Vec<usize>>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!(
                "finite-difference eps must be > 0, got {eps}"
            )));
        }
        Ok(GradCheck {
            eps,
            kink_band: eps * 100.0,
            coords: None,
        })
    }

    /// Restricts the check to a subset of coordinates.
    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = Some(coords);
        self
    }

    pub fn with_kink_band(mut self, band: f64) -> Self {
        self.kink_band = band;
        self
    }

    fn evaluate<F>(&self, f: &F, x: &Tensor<f64>) -> Result<(f64, Vec<bool>)>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v)?;
        let value = scalar(&g, out)?;
        Ok((value, g.activation_pattern()))
    }

    pub fn run<F>(&self, f: F, x: &Tensor<f64>) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v)?;
        scalar(&g, out)?;
        let base_pattern = g.activation_pattern();
        let grads = g.backward(out)?;
        let analytic = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);

        let coords: Vec<usize> = match &self.coords {
            Some(c) => c.clone(),
            None => (0..x.numel()).collect(),
        };
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            skipped: 0,
        };
        let shifted = |i: usize, delta: f64| {
            let mut y = x.clone();
            y.data_mut()[i] += delta;
            y
        };
        for i in coords {
            contract!(i < x.numel(), "coordinate {} out of range {}", i, x.numel());
            let (_, up) = self.evaluate(&f, &shifted(i, self.kink_band))?;
            let (_, down) = self.evaluate(&f, &shifted(i, -self.kink_band))?;
            if up != base_pattern || down != base_pattern {
                report.skipped += 1;
                continue;
            }
            let (fp, _) = self.evaluate(&f, &shifted(i, self.eps))?;
            let (fm, _) = self.evaluate(&f, &shifted(i, -self.eps))?;
            let numeric = (fp - fm) / (2.0 * self.eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_index = Some(i);
            }
        }
        Ok(report)
    }
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    contract!(
        t.numel() == 1,
        "gradient check needs a scalar output, got shape {:?}",
        t.shape()
    );
    let value = t.data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "function under gradient check evaluated to {value}"
        )));
    }
    Ok(value)
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`, over all coordinates away from kinks.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    GradCheck::new(eps)?.run(f, x).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MaskMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_sum_is_exact() {
        // sum(x) as gap(conv1x1(x, n)) on a [1, 1, n] tensor.
        let x = Tensor::from_fn(&[1, 1, 6], |i| i as f64 * 0.3 - 0.7);
        let err = finite_diff_check(
            |g, v| {
                let w = g.constant(Tensor::full(&[1, 1, 1, 1], 6.0));
                let b = g.constant(Tensor::zeros(&[1]));
                let y = g.conv2d(v, w, b, 1, 0)?;
                g.global_avg_pool(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[5], |_| rng.random_range(-3.0..3.0));
        let target = Tensor::new(vec![5], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let err = finite_diff_check(|g, v| g.bce_multilabel(v, &target), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn conv_crelu_gap_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mask = MaskMap::new(5, 5, (0..25).map(|_| rng.random_range(-1..=1)).collect()).unwrap();
        let report = GradCheck::new(1e-5)
            .unwrap()
            .run(
                |g, v| {
                    let wv = g.constant(w.clone());
                    let b = g.constant(Tensor::zeros(&[3]));
                    let y = g.conv2d(v, wv, b, 1, 1)?;
                    let y = g.c_relu(y, &mask)?;
                    let p = g.global_avg_pool(y)?;
                    g.bce_multilabel(p, &Tensor::new(vec![3], vec![1.0, 0.0, 1.0])?)
                },
                &x,
            )
            .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let x = Tensor::full(&[1], f64::NAN);
        let err = finite_diff_check(|g, v| g.bce_multilabel(v, &Tensor::zeros(&[1])), &x, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(GradCheck::new(0.0).is_err());
        assert!(GradCheck::new(-1.0).is_err());
    }
}
