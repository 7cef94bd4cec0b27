//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_input` coordinates of every input, drawn without replacement.
    Sample {
        per_input: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Max relative error between the analytic gradient of scalar `f` at `x` and
/// its central difference with the given step, over every coordinate.
pub fn finite_difference_gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = gradcheck_inputs(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        step,
        Coords::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input variant: `f` receives one leaf per entry of `inputs`.
pub fn gradcheck_inputs<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        scalar(&g, root)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    scalar(&g, root)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, v);
        let n = inputs[which].len();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_input, seed } => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9e37_79b9));
                let mut idx = sample(&mut rng, n, per_input.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in picks {
            let orig = inputs[which].data()[i];
            perturbed[which].data_mut()[i] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((which, i));
            }
        }
    }
    Ok(report)
}

fn scalar(g: &Graph, root: Var) -> Result<f64> {
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradcheck function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
