//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Absolute differences below this are never reported as relative errors;
/// it sits well under the gradient magnitudes the checks produce and well
/// over the round-off of a central difference in f64.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < REL_FLOOR * 1e-2 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds a scalar loss from tracked leaves; called once per perturbation.
pub trait LossBuilder: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> LossBuilder for F {}

/// Compares tape gradients of `build` against central differences for every
/// entry of every input. Each evaluation gets a fresh graph seeded with
/// `seed`, so stochastic ops replay identically. Returns the largest
/// relative error.
pub fn check_gradients(inputs: &[Tensor], mode: Mode, seed: u64, step: f64, build: impl LossBuilder) -> Result<f64> {
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(mode, seed);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Reduces any tensor to a scalar through a fixed random projection, so a
/// gradient check exercises every output entry with a distinct weight.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = g.shape(y).to_vec();
    let r = g.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}
