//! Central finite-difference checks of hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::extractor::PolicyParams;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.max_rel_err() < tol
    }
}

/// Relative error with a small floor on the denominator so that two
/// near-zero values compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare `grad` with central differences of `loss` at `trials` random
/// coordinates of `x`. Coordinates with zero analytic gradient (unused
/// embedding rows, say) are mostly passed over in favour of live ones.
pub fn check_flat(x: &[f64], grad: &[f64], trials: usize, seed: u64, loss: impl Fn(&[f64]) -> f64) -> GradCheckReport {
    assert_eq!(x.len(), grad.len(), "parameter and gradient length");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live = grad.iter().filter(|g| g.abs() >= 1e-9).count();
    let mut probes = Vec::with_capacity(trials);
    let mut point = x.to_vec();
    while probes.len() < trials && !x.is_empty() {
        let i = rng.random_range(0..x.len());
        if grad[i].abs() < 1e-9 && live > 0 && rng.random_bool(0.8) {
            continue;
        }
        point[i] = x[i] + STEP;
        let up = loss(&point);
        point[i] = x[i] - STEP;
        let down = loss(&point);
        point[i] = x[i];
        let numeric = (up - down) / (2.0 * STEP);
        probes.push(Probe { index: i, analytic: grad[i], numeric, rel_err: rel_err(grad[i], numeric) });
    }
    GradCheckReport { probes }
}

fn flatten(p: &PolicyParams<f64>) -> Vec<f64> {
    p.tensors().concat()
}

fn unflatten(template: &PolicyParams<f64>, flat: &[f64]) -> PolicyParams<f64> {
    let mut out = template.clone();
    let mut at = 0;
    for t in out.tensors_mut() {
        t.copy_from_slice(&flat[at..at + t.len()]);
        at += t.len();
    }
    out
}

/// [`check_flat`] over every tensor of a policy.
pub fn check_policy(
    params: &PolicyParams<f64>,
    grads: &PolicyParams<f64>,
    trials: usize,
    seed: u64,
    loss: impl Fn(&PolicyParams<f64>) -> f64,
) -> GradCheckReport {
    check_flat(&flatten(params), &flatten(grads), trials, seed, |x| loss(&unflatten(params, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let x = [1.0, -2.0, 0.5];
        let loss = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(check_flat(&x, &good, 20, 1, loss).passes(1e-6));
        let bad: Vec<f64> = good.iter().map(|g| g * 1.01).collect();
        assert!(!check_flat(&x, &bad, 20, 1, loss).passes(1e-4));
    }
}
