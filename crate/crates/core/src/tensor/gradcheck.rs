//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator; gradients smaller than
    /// this are effectively compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (seeded sample).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink (one-sided slopes disagree), e.g. a
    /// ReLU input of exactly zero.
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn push(&mut self, e: GradcheckEntry) {
        self.entries.push(e);
        self.entries
            .sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<40} {:>12} {:>8} {:>8} {:>10}  status\n",
            "op", "max_rel_err", "checked", "excluded", "tol"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<40} {:>12.3e} {:>8} {:>8} {:>10.1e}  {}\n",
                e.name,
                e.max_rel_err,
                e.checked,
                e.excluded,
                e.tol,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `∂f/∂inputs` from [`Graph::grad`] with central differences.
///
/// `f` must build a one-element output from the given input variables.
pub fn check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
) -> Result<GradcheckEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let gvars = g.grad(out, &vars)?;
    let analytic: Vec<Tensor> = gvars.iter().map(|&v| g.value(v).clone()).collect();
    let f0 = g.value(out).item();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_err: f64 = 0.0;
    let (mut checked, mut excluded) = (0, 0);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + opts.step;
            let fp = evaluate(&f, &work)?;
            work[k].data_mut()[i] = x - opts.step;
            let fm = evaluate(&f, &work)?;
            work[k].data_mut()[i] = x;
            let right = (fp - f0) / opts.step;
            let left = (f0 - fm) / opts.step;
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
                excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(analytic[k].data()[i], numeric, opts.floor);
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        excluded,
        tol: opts.tol,
        passed: max_err < opts.tol && max_err.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> GradcheckOptions {
        GradcheckOptions::default()
    }

    #[test]
    fn correct_layer_passes() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.71).cos());
        let b = Tensor::from_fn(&[2], |i| i as f64 * 0.1);
        let e = check(
            "linear+tanh",
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let y = g.tanh(y);
                g.sum_all(y)
            },
            &[x, w, b],
            &opts(),
        )
        .unwrap();
        assert!(e.passed, "{e:?}");
        assert!(e.max_rel_err < 1e-6);
    }

    #[derive(Debug)]
    struct WrongSign;

    impl super::super::CustomOp for WrongSign {
        fn name(&self) -> &'static str {
            "square_with_flipped_gradient"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].map(|v| v * v))
        }
        fn backward(
            &self,
            g: &mut Graph,
            inputs: &[Var],
            _output: Var,
            grad: Var,
            _needs: &[bool],
        ) -> Result<Vec<Option<Var>>> {
            let two_x = g.scale(inputs[0], -2.0);
            Ok(vec![Some(g.mul(grad, two_x)?)])
        }
    }

    #[test]
    fn flipped_sign_is_reported_as_failing() {
        let op: std::sync::Arc<dyn super::super::CustomOp> = std::sync::Arc::new(WrongSign);
        let e = check(
            "flipped",
            |g, v| {
                let y = g.custom(op.clone(), &[v[0]])?;
                g.sum_all(y)
            },
            &[Tensor::from_fn(&[4], |i| 0.5 + i as f64)],
            &opts(),
        )
        .unwrap();
        assert!(!e.passed);
        let mut report = GradcheckReport::default();
        report.push(e);
        assert_eq!(report.failing().count(), 1);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let e = check(
            "relu",
            |g, v| {
                let y = g.relu(v[0]);
                let y = g.scale(y, 3.0);
                g.sum_all(y)
            },
            &[x],
            &opts(),
        )
        .unwrap();
        assert_eq!(e.excluded, 1);
        assert_eq!(e.checked, 3);
        assert!(e.passed);
    }
}
