//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_tensor: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &[Tensor<f64>], f: &F, with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(TensorError::NonFinite { op });
    }
    let value = tape.value(loss)[0];
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    Ok((value, grads))
}

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences over (a sample of) every parameter coordinate. `f` must be
/// deterministic.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(params, &f, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for ti in 0..params.len() {
        let len = params[ti].len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for ci in coords {
            let orig = params[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + cfg.eps;
            let (plus, _) = evaluate(&work, &f, false)?;
            work[ti].data_mut()[ci] = orig - cfg.eps;
            let (minus, _) = evaluate(&work, &f, false)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let rel = relative_error(analytic[ti][ci], numeric);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((ti, ci));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        passed: max_rel < cfg.tol,
    })
}
