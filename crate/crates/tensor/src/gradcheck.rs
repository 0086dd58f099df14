//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_coords: 64, seed: 0 }
    }
}

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Relative error used by the checker: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences, returning the worst relative error over sampled coordinates.
///
/// `f` must be deterministic and build its graph from the supplied leaves.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("trainable leaves always get a gradient"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let x0 = p.data()[coord];
            work[pi].data_mut()[coord] = x0 + cfg.epsilon;
            let fp = eval(&f, &work)?;
            work[pi].data_mut()[coord] = x0 - cfg.epsilon;
            let fm = eval(&f, &work)?;
            work[pi].data_mut()[coord] = x0;
            let a = analytic[pi].data()[coord];
            if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFiniteCheck { param: pi, coord });
            }
            let numeric = (fp - fm) / (2.0 * cfg.epsilon);
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = rel;
                report.param = pi;
                report.coord = coord;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
