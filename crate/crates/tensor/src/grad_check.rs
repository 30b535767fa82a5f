//! Central finite-difference check of taped gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Perturbation for central differences.
    pub eps: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// At most this many randomly chosen elements are checked per input.
    pub max_checks: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-3,
            max_checks: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Non-scalar outputs are contracted with fixed random weights so a single
/// backward pass covers every output element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let graph = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| graph.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&graph, &vars)?;
    let out_shape = out.shape();
    let weights = if out.value().len() == 1 {
        Tensor::ones(&out_shape)
    } else {
        Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0))
    };
    let w = graph.constant(weights.clone())?;
    let loss = out.mul(w)?.sum_all()?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs = perturbed
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&g, &vs)?;
        let value = y.value();
        Ok(value
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= opts.max_checks {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_checks).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}
