//! Least-squares recovery of the interaction kernel `φ` from trajectories.
//!
//! With `φ̂ = Σ c_k ψ_k`, each basis function predicts the increment
//! `Ψ_k(X)_i = dt·(1/N) Σ_j ψ_k(|X_j − X_i|)(X_j − X_i)`. Matching observed
//! Euler increments gives the normal system `A c = b`. Sums are kept
//! unnormalized so systems from disjoint data add.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coercivity::HypothesisSpace;
use crate::dynamics::{build_frame, Ensemble, Layout};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RegressionProblem {
    pub n_basis: usize,
    /// `Σ dt·⟨Ψ_k, W Ψ_l⟩` over paths and steps.
    pub a_ls: DMatrix<f64>,
    /// `Σ ⟨Ψ_k, W ΔX⟩`.
    pub b_ls: DVector<f64>,
    /// Number of (path, step) increments used.
    pub increments: usize,
    pub window: (f64, f64),
    pub layout: Layout,
}

impl RegressionProblem {
    /// Sum of two systems built from disjoint data.
    pub fn merge(&self, other: &RegressionProblem) -> Result<RegressionProblem> {
        if self.n_basis != other.n_basis {
            return Err(Error::precondition("cannot merge systems of different sizes"));
        }
        Ok(RegressionProblem {
            n_basis: self.n_basis,
            a_ls: &self.a_ls + &other.a_ls,
            b_ls: &self.b_ls + &other.b_ls,
            increments: self.increments + other.increments,
            window: (self.window.0.min(other.window.0), self.window.1.max(other.window.1)),
            layout: self.layout,
        })
    }
}

/// Per-basis drift features in full coordinates: `out[k][i·d + c]`.
fn features(hs: &HypothesisSpace, n: usize, d: usize, x: &[f64], out: &mut [Vec<f64>], psi: &mut [f64]) {
    for o in out.iter_mut() {
        o.iter_mut().for_each(|v| *v = 0.0);
    }
    let inv_n = 1.0 / n as f64;
    let mut diff = vec![0.0; d];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r2 = 0.0;
            for c in 0..d {
                diff[c] = x[j * d + c] - x[i * d + c];
                r2 += diff[c] * diff[c];
            }
            hs.eval_into(r2.sqrt(), psi);
            for (k, p) in psi.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for c in 0..d {
                    let v = inv_n * p * diff[c];
                    out[k][i * d + c] += v;
                    out[k][j * d + c] -= v;
                }
            }
        }
    }
}

/// Builds the normal system from consecutive snapshots inside `window`.
///
/// Full-space data use the identity noise metric. Relative data carry
/// noise with covariance `A·dt`, so the metric is `A⁻¹ = I − 11ᵀ/N` per
/// spatial coordinate.
pub fn assemble(ens: &Ensemble, hs: &HypothesisSpace, window: (f64, f64)) -> Result<RegressionProblem> {
    let converted;
    let src = match ens.layout {
        Layout::Y => {
            converted = ens.to_layout(Layout::Relative)?;
            &converted
        }
        _ => ens,
    };
    let (n, d) = (src.n, src.d);
    let frame = build_frame(n, d)?;
    let intervals: Vec<usize> = (0..src.n_times().saturating_sub(1))
        .filter(|&k| src.times[k] + 1e-12 >= window.0 && src.times[k + 1] <= window.1 + 1e-12)
        .collect();
    let live: Vec<usize> = src.live_paths().collect();
    let count = intervals.len() * live.len();
    if count < hs.n || count == 0 {
        return Err(Error::precondition(format!(
            "window [{}, {}] holds {count} increments, fewer than the {} basis functions",
            window.0, window.1, hs.n
        )));
    }
    let nb = hs.n;
    let m = n * d;
    let relative = src.layout == Layout::Relative;
    // Fixed chunking keeps the reduction order independent of threads.
    let chunk = 64;
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = live
        .par_chunks(chunk)
        .map(|paths| {
            let mut a = DMatrix::zeros(nb, nb);
            let mut b = DVector::zeros(nb);
            let mut feats = vec![vec![0.0; m]; nb];
            let mut psi = vec![0.0; nb];
            let mut rel: Vec<Vec<f64>> = vec![vec![0.0; (n - 1) * d]; nb];
            for &p in paths {
                for &k in &intervals {
                    let h = src.times[k + 1] - src.times[k];
                    let s0 = src.state(p, k);
                    let s1 = src.state(p, k + 1);
                    let x = if relative { frame.relative_to_full(s0) } else { s0.to_vec() };
                    features(hs, n, d, &x, &mut feats, &mut psi);
                    let dx: Vec<f64> = s1.iter().zip(s0).map(|(a, b)| a - b).collect();
                    if relative {
                        for (r, f) in rel.iter_mut().zip(&feats) {
                            let fr = frame.full_to_relative(f);
                            r.copy_from_slice(&fr);
                        }
                        for kk in 0..nb {
                            let wf = a_inverse(n, d, &rel[kk]);
                            b[kk] += dot(&wf, &dx);
                            for l in 0..=kk {
                                let v = h * dot(&wf, &rel[l]);
                                a[(kk, l)] += v;
                                if l != kk {
                                    a[(l, kk)] += v;
                                }
                            }
                        }
                    } else {
                        for kk in 0..nb {
                            b[kk] += dot(&feats[kk], &dx);
                            for l in 0..=kk {
                                let v = h * dot(&feats[kk], &feats[l]);
                                a[(kk, l)] += v;
                                if l != kk {
                                    a[(l, kk)] += v;
                                }
                            }
                        }
                    }
                }
            }
            (a, b)
        })
        .collect();
    let mut a_ls = DMatrix::zeros(nb, nb);
    let mut b_ls = DVector::zeros(nb);
    for (a, b) in parts {
        a_ls += a;
        b_ls += b;
    }
    Ok(RegressionProblem { n_basis: nb, a_ls, b_ls, increments: count, window, layout: src.layout })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(I − 11ᵀ/N) ⊗ I_d` applied to a relative vector.
fn a_inverse(n: usize, d: usize, v: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; d];
    for (k, x) in v.iter().enumerate() {
        sums[k % d] += x;
    }
    v.iter().enumerate().map(|(k, x)| x - sums[k % d] / n as f64).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnReport {
    pub coefficients: Vec<f64>,
    pub regularization: f64,
    pub increments: usize,
    /// `‖φ̂ − φ‖_{L²(ρ)}` when the true kernel is known.
    pub l2_rho_error: Option<f64>,
    /// `‖φ‖_{L²(ρ)}` of the truth, for scale.
    pub l2_rho_truth: Option<f64>,
    /// Coercivity constant of the same space, when supplied.
    pub c_hat: Option<f64>,
}

/// Solves `(A + reg·I) c = b`. `reg = None` uses the numerical floor
/// `1e-10·tr(A)/n`.
pub fn solve(prob: &RegressionProblem, reg: Option<f64>) -> Result<(DVector<f64>, f64)> {
    let n = prob.n_basis;
    let lambda = reg.unwrap_or(1e-10 * prob.a_ls.trace() / n as f64);
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("regularization must be nonnegative, got {lambda}")));
    }
    let sys = &prob.a_ls + DMatrix::identity(n, n) * lambda;
    let chol = sys.cholesky().ok_or_else(|| {
        Error::numeric(format!(
            "normal matrix is singular at regularization {lambda:e}; use reg > 0 or a smaller basis"
        ))
    })?;
    // Cholesky succeeds on some numerically singular matrices; check the pivots.
    let l = chol.l();
    let diag: Vec<f64> = (0..n).map(|i| l[(i, i)]).collect();
    let top = diag.iter().fold(0.0f64, |m, v| m.max(*v));
    if diag.iter().any(|v| !(*v > 1e-12 * top)) {
        return Err(Error::numeric(format!(
            "normal matrix is singular at regularization {lambda:e}; use reg > 0 or a smaller basis"
        )));
    }
    Ok((chol.solve(&prob.b_ls), lambda))
}

/// Solves and, when `truth` is given, measures the error in `L²(ρ)` over
/// samples of `|r₁₂|`.
pub fn solve_and_report(
    prob: &RegressionProblem,
    hs: &HypothesisSpace,
    reg: Option<f64>,
    truth: Option<&dyn Fn(f64) -> f64>,
    distances: &[f64],
    c_hat: Option<f64>,
) -> Result<LearnReport> {
    let (c, lambda) = solve(prob, reg)?;
    let coefficients: Vec<f64> = c.iter().copied().collect();
    let (err, scale) = match truth {
        Some(phi) if !distances.is_empty() => {
            let m = distances.len() as f64;
            let e = distances.iter().map(|r| (hs.combine(&coefficients, *r) - phi(*r)).powi(2)).sum::<f64>() / m;
            let s = distances.iter().map(|r| phi(*r).powi(2)).sum::<f64>() / m;
            (Some(e.sqrt()), Some(s.sqrt()))
        }
        Some(_) => return Err(Error::precondition("an L2(rho) error needs distance samples")),
        None => (None, None),
    };
    Ok(LearnReport {
        coefficients,
        regularization: lambda,
        increments: prob.increments,
        l2_rho_error: err,
        l2_rho_truth: scale,
        c_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// One-step ensemble with exact increments `dt·drift_φ(X)`.
    fn manufactured(phi: &dyn Fn(f64) -> f64, n: usize, d: usize, paths: usize, dt: f64, layout: Layout) -> Ensemble {
        let mut r = rng::stream(11, 0, Purpose::Sampling);
        let frame = build_frame(n, d).unwrap();
        let mut states = Vec::new();
        for _ in 0..paths {
            let x: Vec<f64> = (0..n * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let mut x1 = x.clone();
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let diff: Vec<f64> = (0..d).map(|c| x[j * d + c] - x[i * d + c]).collect();
                    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for c in 0..d {
                        x1[i * d + c] += dt * phi(dist) * diff[c] / n as f64;
                    }
                }
            }
            match layout {
                Layout::Relative => {
                    states.extend(frame.full_to_relative(&x));
                    states.extend(frame.full_to_relative(&x1));
                }
                _ => {
                    states.extend(x);
                    states.extend(x1);
                }
            }
        }
        let dim = if layout == Layout::Relative { (n - 1) * d } else { n * d };
        Ensemble {
            layout,
            n,
            d,
            dim,
            dt,
            times: vec![0.0, dt],
            steps: vec![0, 1],
            n_paths: paths,
            seed: 11,
            states,
            diverged: vec![None; paths],
        }
    }

    #[test]
    fn constant_kernel_recovered_exactly() {
        let ens = manufactured(&|_| 2.0, 3, 1, 50, 0.01, Layout::Full);
        let hs = HypothesisSpace::constant();
        let prob = assemble(&ens, &hs, (0.0, 1.0)).unwrap();
        let (c, _) = solve(&prob, Some(0.0)).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-8, "{}", c[0]);
    }

    #[test]
    fn in_span_kernels_recovered_from_full_and_relative_data() {
        let hs = HypothesisSpace::hats(5, 6.0).unwrap();
        let mut r = rng::stream(12, 0, Purpose::Trial);
        for layout in [Layout::Full, Layout::Relative] {
            for _ in 0..3 {
                let coef: Vec<f64> = (0..5).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let h2 = hs.clone();
                let c2 = coef.clone();
                let phi = move |x: f64| h2.combine(&c2, x);
                let ens = manufactured(&phi, 4, 2, 200, 0.01, layout);
                let prob = assemble(&ens, &hs, (0.0, 1.0)).unwrap();
                let (c, _) = solve(&prob, Some(0.0)).unwrap();
                for (a, b) in c.iter().zip(&coef) {
                    assert!((a - b).abs() < 1e-8, "{layout:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn systems_add_over_disjoint_data() {
        let ens = manufactured(&|r| 1.0 + r, 3, 2, 40, 0.01, Layout::Full);
        let hs = HypothesisSpace::hats(4, 5.0).unwrap();
        let split = |lo: usize, hi: usize| {
            let mut e = ens.clone();
            e.n_paths = hi - lo;
            e.states = ens.states[lo * 2 * ens.dim..hi * 2 * ens.dim].to_vec();
            e.diverged = vec![None; hi - lo];
            assemble(&e, &hs, (0.0, 1.0)).unwrap()
        };
        let whole = assemble(&ens, &hs, (0.0, 1.0)).unwrap();
        let sum = split(0, 17).merge(&split(17, 40)).unwrap();
        assert!((&whole.a_ls - &sum.a_ls).amax() < 1e-12);
        assert!((&whole.b_ls - &sum.b_ls).amax() < 1e-12);
    }

    #[test]
    fn empty_window_and_singular_system() {
        let ens = manufactured(&|_| 2.0, 3, 1, 60, 0.01, Layout::Full);
        let hs = HypothesisSpace::hats(4, 5.0).unwrap();
        assert!(matches!(assemble(&ens, &hs, (0.5, 0.5)), Err(Error::Precondition(_))));
        // Hats beyond every observed distance leave zero rows.
        let far = HypothesisSpace::hats(40, 400.0).unwrap();
        let prob = assemble(&ens, &far, (0.0, 1.0)).unwrap();
        assert!(solve(&prob, Some(0.0)).is_err());
        assert!(solve(&prob, Some(1e-3)).is_ok());
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let ens = manufactured(&|_| 2.0, 3, 1, 20, 0.01, Layout::Full);
        let hs = HypothesisSpace::hats(3, 5.0).unwrap();
        let prob = assemble(&ens, &hs, (0.0, 1.0)).unwrap();
        let (c, _) = solve(&prob, Some(1e12)).unwrap();
        assert!(c.amax() < 1e-9);
    }
}
