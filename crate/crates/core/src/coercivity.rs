//! Coercivity of the bilinear form
//! `I(h) = E[h(|u|) h(|v|) ⟨u,v⟩/(|u||v|)]` over finite hypothesis spaces.
//!
//! Reports carry the form `G`, the `L²(ρ)` Gram `M`, the pencil minimum
//! `c_hat` and batch-means standard errors.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Ensemble;
use crate::error::{Error, Result};
use crate::quad::{self, QuadOptions};
use crate::rng::{self, Purpose};

/// Number of batches behind every reported standard error.
pub const BATCHES: usize = 20;

/// Points of the grid on which sup-norms are evaluated.
pub const SUP_GRID: usize = 10_000;

/// A user-supplied radial function.
#[derive(Clone)]
pub struct CustomFn {
    pub label: String,
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomFn({})", self.label)
    }
}

#[derive(Clone, Debug)]
enum Basis {
    Hats,
    BSplines { degree: usize, knots: Vec<f64> },
    Constant,
    Custom(Vec<CustomFn>),
}

/// Basis description for configs. `r_max` defaults to the 99.5th
/// percentile of observed `|r₁₂|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSpec {
    Hats {
        n: usize,
        #[serde(default)]
        r_max: Option<f64>,
    },
    Bsplines {
        n: usize,
        degree: usize,
        #[serde(default)]
        r_max: Option<f64>,
    },
    Constant,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        SpaceSpec::Hats { n: 8, r_max: None }
    }
}

/// A finite basis of radial functions supported on `[0, r_max]`.
#[derive(Clone, Debug)]
pub struct HypothesisSpace {
    basis: Basis,
    pub n: usize,
    pub r_max: f64,
    pub sup_norms: Vec<f64>,
}

impl HypothesisSpace {
    /// `n ≥ 2` piecewise-linear hats on uniform knots `kR/(n−1)`.
    pub fn hats(n: usize, r_max: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("a hat space needs n >= 2"));
        }
        Self::finish(Basis::Hats, n, r_max)
    }

    /// Clamped uniform B-splines of the given degree, `n > degree`.
    pub fn bsplines(n: usize, degree: usize, r_max: f64) -> Result<Self> {
        if n <= degree {
            return Err(Error::config(format!("a degree-{degree} spline space needs n > {degree}")));
        }
        let inner = n - degree;
        let mut knots = vec![0.0; degree];
        knots.extend((0..=inner).map(|k| r_max * k as f64 / inner as f64));
        knots.extend(vec![r_max; degree]);
        Self::finish(Basis::BSplines { degree, knots }, n, r_max)
    }

    /// The single function `h ≡ 1`, with unbounded support.
    pub fn constant() -> Self {
        Self { basis: Basis::Constant, n: 1, r_max: f64::INFINITY, sup_norms: vec![1.0] }
    }

    pub fn custom(fns: Vec<CustomFn>, r_max: f64) -> Result<Self> {
        let n = fns.len();
        if n == 0 {
            return Err(Error::config("a custom space needs at least one function"));
        }
        Self::finish(Basis::Custom(fns), n, r_max)
    }

    /// Builds a space from a config, taking a default `r_max` from the
    /// observed distances when needed.
    pub fn from_spec(spec: &SpaceSpec, distances: Option<&[f64]>) -> Result<Self> {
        let radius = |r: &Option<f64>| -> Result<f64> {
            match (r, distances) {
                (Some(r), _) => Ok(*r),
                (None, Some(ds)) => percentile(ds, 0.995),
                (None, None) => Err(Error::config("r_max not given and no samples to infer it from")),
            }
        };
        match spec {
            SpaceSpec::Hats { n, r_max } => Self::hats(*n, radius(r_max)?),
            SpaceSpec::Bsplines { n, degree, r_max } => Self::bsplines(*n, *degree, radius(r_max)?),
            SpaceSpec::Constant => Ok(Self::constant()),
        }
    }

    fn finish(basis: Basis, n: usize, r_max: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::config(format!("r_max must be positive and finite, got {r_max}")));
        }
        let mut hs = Self { basis, n, r_max, sup_norms: vec![0.0; n] };
        let mut buf = vec![0.0; n];
        for k in 0..SUP_GRID {
            hs.eval_into(r_max * k as f64 / (SUP_GRID - 1) as f64, &mut buf);
            for (s, b) in hs.sup_norms.iter_mut().zip(&buf) {
                *s = s.max(b.abs());
            }
        }
        if hs.sup_norms.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("basis function is unbounded on [0, r_max]"));
        }
        let g = hs.l2_gram()?;
        let eig = SymmetricEigen::new(g);
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > 1e-10 * hi) {
            return Err(Error::precondition(format!(
                "basis is numerically dependent: L2 Gram eigenvalue ratio {:e}",
                lo / hi
            )));
        }
        Ok(hs)
    }

    /// Gram matrix in `L²([0, r_max])`.
    pub fn l2_gram(&self) -> Result<DMatrix<f64>> {
        let (x, w) = quad::composite_legendre(0.0, self.r_max, 64 * self.n.max(4), 6);
        let mut g = DMatrix::zeros(self.n, self.n);
        let mut b = vec![0.0; self.n];
        for (x, w) in x.iter().zip(&w) {
            self.eval_into(*x, &mut b);
            for i in 0..self.n {
                for j in 0..self.n {
                    g[(i, j)] += w * b[i] * b[j];
                }
            }
        }
        Ok(g)
    }

    /// `ψ_i(r)` for all `i`.
    pub fn eval_into(&self, r: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match &self.basis {
            Basis::Constant => out[0] = 1.0,
            Basis::Custom(fs) => {
                if r <= self.r_max {
                    for (o, f) in out.iter_mut().zip(fs) {
                        *o = (f.f)(r);
                    }
                }
            }
            Basis::Hats => {
                if !(0.0..=self.r_max).contains(&r) {
                    return;
                }
                let h = self.r_max / (self.n - 1) as f64;
                let k = ((r / h) as usize).min(self.n - 2);
                let t = r / h - k as f64;
                out[k] = 1.0 - t;
                out[k + 1] = t;
            }
            Basis::BSplines { degree, knots } => {
                if !(0.0..=self.r_max).contains(&r) {
                    return;
                }
                let p = *degree;
                // Knot span with the right end folded into the last span.
                let mut span = p;
                while span + 1 < knots.len() - p - 1 && knots[span + 1] <= r {
                    span += 1;
                }
                let mut nv = vec![0.0; p + 1];
                nv[0] = 1.0;
                let mut left = vec![0.0; p + 1];
                let mut right = vec![0.0; p + 1];
                for j in 1..=p {
                    left[j] = r - knots[span + 1 - j];
                    right[j] = knots[span + j] - r;
                    let mut saved = 0.0;
                    for k in 0..j {
                        let tmp = nv[k] / (right[k + 1] + left[j - k]);
                        nv[k] = saved + right[k + 1] * tmp;
                        saved = left[j - k] * tmp;
                    }
                    nv[j] = saved;
                }
                for (k, v) in nv.iter().enumerate() {
                    out[span - p + k] = *v;
                }
            }
        }
    }

    pub fn eval(&self, r: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_into(r, &mut out);
        out
    }

    /// `Σ c_i ψ_i(r)`.
    pub fn combine(&self, c: &[f64], r: f64) -> f64 {
        self.eval(r).iter().zip(c).map(|(a, b)| a * b).sum()
    }
}

/// The `q`-quantile of a sample.
pub fn percentile(xs: &[f64], q: f64) -> Result<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::precondition("percentile of an empty sample"));
    }
    v.sort_by(f64::total_cmp);
    let k = ((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    Ok(v[k])
}

/// `|u|` for each `(u, v)` row.
pub fn pair_distances(samples: &[f64], d: usize) -> Vec<f64> {
    samples.chunks_exact(2 * d).map(|row| norm(&row[..d])).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub g: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub g_stderr: Vec<Vec<f64>>,
    pub m_stderr: Vec<Vec<f64>>,
    pub c_hat: f64,
    pub c_hat_stderr: f64,
    /// Minimizing coefficients, normalized so that `wᵀMw = 1`.
    pub eigenvector: Vec<f64>,
    pub samples: usize,
    pub batches: usize,
    pub seed: u64,
    /// Time horizon for time-averaged reports.
    pub horizon: Option<f64>,
    pub low_sample: bool,
}

impl CoercivityReport {
    pub fn g_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.g)
    }

    pub fn m_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.m)
    }

    /// `hᵀGh` for coefficients `h`.
    pub fn form(&self, h: &[f64]) -> f64 {
        let g = self.g_matrix();
        let h = DVector::from_column_slice(h);
        h.dot(&(&g * &h))
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Weighted sums of the per-sample contributions to `G` and `M`.
#[derive(Clone)]
struct Accum {
    g: DMatrix<f64>,
    m: DMatrix<f64>,
    weight: f64,
}

impl Accum {
    fn new(n: usize) -> Self {
        Self { g: DMatrix::zeros(n, n), m: DMatrix::zeros(n, n), weight: 0.0 }
    }

    fn add(&mut self, hs: &HypothesisSpace, d: usize, row: &[f64], w: f64, a: &mut [f64], b: &mut [f64]) {
        let (u, v) = (&row[..d], &row[d..2 * d]);
        let (nu, nv) = (norm(u), norm(v));
        hs.eval_into(nu, a);
        hs.eval_into(nv, b);
        let cos = if nu > 0.0 && nv > 0.0 { u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv) } else { 0.0 };
        let n = hs.n;
        for i in 0..n {
            for j in 0..n {
                self.g[(i, j)] += w * 0.5 * (a[i] * b[j] + a[j] * b[i]) * cos;
                // u and v share the marginal ρ, so both enter M.
                self.m[(i, j)] += w * 0.5 * (a[i] * a[j] + b[i] * b[j]);
            }
        }
        self.weight += w;
    }

    fn mean(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (&self.g / self.weight, &self.m / self.weight)
    }
}

/// Minimum of `hᵀGh` over `hᵀMh = 1`, with its minimizer.
pub fn pencil_min(g: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = m.nrows();
    if g.nrows() != n || g.ncols() != n || m.ncols() != n {
        return Err(Error::precondition("G and M must be square of the same size"));
    }
    let chol = m.clone().cholesky().ok_or_else(|| Error::numeric(near_singular(m)))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::numeric(near_singular(m)))?;
    let mut c = &linv * g * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let k = eig.eigenvalues.imin();
    let y = eig.eigenvectors.column(k).into_owned();
    let w = linv.transpose() * y;
    let val = eig.eigenvalues[k];
    if !val.is_finite() {
        return Err(Error::numeric("pencil minimum is not finite"));
    }
    Ok((val, w))
}

fn near_singular(m: &DMatrix<f64>) -> String {
    let top = (0..m.nrows()).map(|i| m[(i, i)]).fold(0.0, f64::max);
    let bad: Vec<usize> = (0..m.nrows()).filter(|&i| !(m[(i, i)] > 1e-10 * top)).collect();
    if bad.is_empty() {
        "L2(rho) Gram M is not positive definite; basis functions are nearly dependent on the data range".into()
    } else {
        format!("L2(rho) Gram M is singular: basis indices {bad:?} carry no mass on the data range")
    }
}

/// Minimum eigenvalue of `M^{−1/2} G M^{−1/2}`.
pub fn coercivity_constant(report: &CoercivityReport) -> Result<f64> {
    Ok(pencil_min(&report.g_matrix(), &report.m_matrix())?.0)
}

fn report_from_batches(
    batches: &[Accum],
    seed: u64,
    samples: usize,
    horizon: Option<f64>,
    low_sample: bool,
) -> Result<CoercivityReport> {
    let n = batches[0].g.nrows();
    let mut total = Accum::new(n);
    for b in batches {
        total.g += &b.g;
        total.m += &b.m;
        total.weight += b.weight;
    }
    let (g, m) = total.mean();
    let top = (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max);
    let bad: Vec<usize> = (0..n).filter(|&i| !(m[(i, i)] > 1e-10 * top)).collect();
    if !bad.is_empty() {
        return Err(Error::numeric(format!(
            "L2(rho) Gram M is singular: basis indices {bad:?} carry no mass on the data range"
        )));
    }
    let (c_hat, w) = pencil_min(&g, &m)?;
    let means: Vec<(DMatrix<f64>, DMatrix<f64>)> = batches.iter().map(|b| b.mean()).collect();
    let nb = means.len() as f64;
    let se = |f: &dyn Fn(&(DMatrix<f64>, DMatrix<f64>)) -> f64| {
        let v: Vec<f64> = means.iter().map(f).collect();
        let mu = v.iter().sum::<f64>() / nb;
        (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nb - 1.0) / nb).sqrt()
    };
    let g_se = DMatrix::from_fn(n, n, |i, j| se(&|b| b.0[(i, j)]));
    let m_se = DMatrix::from_fn(n, n, |i, j| se(&|b| b.1[(i, j)]));
    // Delta method: δc = wᵀδG w − c·wᵀδM w at the minimizer.
    let c_se = se(&|b| w.dot(&(&b.0 * &w)) - c_hat * w.dot(&(&b.1 * &w)));
    Ok(CoercivityReport {
        g: to_rows(&g),
        m: to_rows(&m),
        g_stderr: to_rows(&g_se),
        m_stderr: to_rows(&m_se),
        c_hat,
        c_hat_stderr: c_se,
        eigenvector: w.iter().copied().collect(),
        samples,
        batches: batches.len(),
        seed,
        horizon,
        low_sample,
    })
}

/// `I∞` from `(u, v)` rows drawn from the stationary law. Rows are split
/// into contiguous batches, so they should be exchangeable.
pub fn estimate_i_infty(hs: &HypothesisSpace, samples: &[f64], d: usize, seed: u64) -> Result<CoercivityReport> {
    let rows = samples.len() / (2 * d);
    if rows < BATCHES * 2 || !samples.len().is_multiple_of(2 * d) {
        return Err(Error::precondition(format!("need at least {} (u, v) rows, got {rows}", 2 * BATCHES)));
    }
    let batches: Vec<Accum> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let (lo, hi) = (b * rows / BATCHES, (b + 1) * rows / BATCHES);
            let mut acc = Accum::new(hs.n);
            let (mut a, mut c) = (vec![0.0; hs.n], vec![0.0; hs.n]);
            for r in lo..hi {
                acc.add(hs, d, &samples[r * 2 * d..(r + 1) * 2 * d], 1.0, &mut a, &mut c);
            }
            acc
        })
        .collect();
    report_from_batches(&batches, seed, rows, None, false)
}

/// Rows from all snapshots with `t ≥ from`, keeping every `thin`-th one.
pub fn pooled_samples(ens: &Ensemble, from: f64, thin: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, t) in ens.times.iter().enumerate() {
        if *t + 1e-12 >= from && (k % thin.max(1) == 0 || k + 1 == ens.n_times()) {
            out.extend(ens.pair_samples(k)?);
        }
    }
    Ok(out)
}

/// `Ī_T`: the form averaged over `[0, T]` by the trapezoidal rule on the
/// snapshot grid, with `M` taken against the time-averaged marginal.
/// Batches group whole paths.
pub fn estimate_i_bar_t(hs: &HypothesisSpace, ens: &Ensemble, horizon: f64, seed: u64) -> Result<CoercivityReport> {
    if ens.n < 3 {
        return Err(Error::precondition("the form needs N >= 3"));
    }
    let idx: Vec<usize> = (0..ens.n_times()).filter(|&k| ens.times[k] <= horizon + 1e-9).collect();
    if idx.is_empty()
        || ens.times[idx[0]] > 1e-12
        || (ens.times[*idx.last().unwrap()] - horizon).abs() > 1e-6 * horizon.max(1.0)
    {
        return Err(Error::precondition(format!("ensemble snapshots do not cover [0, {horizon}]")));
    }
    let live: Vec<usize> = ens.live_paths().collect();
    if live.len() < BATCHES {
        return Err(Error::precondition(format!("need at least {BATCHES} live paths, got {}", live.len())));
    }
    let mut tw = vec![0.0; idx.len()];
    for k in 1..idx.len() {
        let h = ens.times[idx[k]] - ens.times[idx[k - 1]];
        tw[k - 1] += 0.5 * h;
        tw[k] += 0.5 * h;
    }
    let single = idx.len() == 1;
    if single {
        tw[0] = 1.0;
    }
    let d = ens.d;
    let rel = if ens.layout == crate::dynamics::Layout::Relative {
        None
    } else {
        Some(ens.to_layout(crate::dynamics::Layout::Relative)?)
    };
    let src = rel.as_ref().unwrap_or(ens);
    let batches: Vec<Accum> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let (lo, hi) = (b * live.len() / BATCHES, (b + 1) * live.len() / BATCHES);
            let mut acc = Accum::new(hs.n);
            let (mut a, mut c) = (vec![0.0; hs.n], vec![0.0; hs.n]);
            for &p in &live[lo..hi] {
                for (k, &t) in idx.iter().enumerate() {
                    let s = src.state(p, t);
                    acc.add(hs, d, &s[..2 * d], tw[k], &mut a, &mut c);
                }
            }
            acc
        })
        .collect();
    let low = idx.len() < 3 || ens.times[idx[idx.len() - 1]] <= ens.dt * 1.5;
    report_from_batches(&batches, seed, live.len() * idx.len(), Some(horizon), low)
}

/// `G` and `M` by cell-midpoint quadrature against a gridded density of
/// `(u, v)`, normalized by the in-box mass.
pub fn forms_from_density(
    hs: &HypothesisSpace,
    grid: &crate::density::DensityGrid,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = grid.axes.d;
    let vol = grid.axes.cell_volume();
    let mut acc = Accum::new(hs.n);
    let (mut a, mut b) = (vec![0.0; hs.n], vec![0.0; hs.n]);
    for (i, v) in grid.values.iter().enumerate() {
        if *v > 0.0 {
            acc.add(hs, d, &grid.axes.cell_center(i), v * vol, &mut a, &mut b);
        }
    }
    if !(acc.weight > 0.0) {
        return Err(Error::precondition("density grid carries no mass"));
    }
    Ok(acc.mean())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupRatio {
    /// Best value found; a lower bound on the supremum.
    pub value: f64,
    pub lower_bound: bool,
    pub coefficients: Vec<f64>,
    pub restarts: usize,
    pub seed: u64,
}

/// Lower bound on `sup ‖h‖²_∞ / I∞(h)` over the space, by projected
/// gradient ascent on the `M`-unit sphere from 32 random starts.
pub fn estimate_s_h(hs: &HypothesisSpace, report: &CoercivityReport, seed: u64) -> Result<SupRatio> {
    if !(report.c_hat > 0.0) {
        return Err(Error::precondition(format!("S_H needs c_hat > 0, got {}", report.c_hat)));
    }
    let n = hs.n;
    let g = report.g_matrix();
    let m = report.m_matrix();
    let r_max = if hs.r_max.is_finite() { hs.r_max } else { 1.0 };
    let table: Vec<Vec<f64>> = (0..SUP_GRID).map(|k| hs.eval(r_max * k as f64 / (SUP_GRID - 1) as f64)).collect();
    let sup = |c: &DVector<f64>| -> (f64, usize) {
        let mut best = (0.0, 0);
        for (k, row) in table.iter().enumerate() {
            let v: f64 = row.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            if v.abs() > best.0 {
                best = (v.abs(), k);
            }
        }
        best
    };
    let ratio = |c: &DVector<f64>| -> f64 {
        let s = sup(c).0;
        s * s / c.dot(&(&g * c))
    };
    let project = |c: DVector<f64>| -> DVector<f64> {
        let q = c.dot(&(&m * &c)).sqrt();
        c / q
    };
    const RESTARTS: usize = 32;
    let runs: Vec<(f64, DVector<f64>)> = (0..RESTARTS)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, k as u64, Purpose::Trial);
            let mut c = project(DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)));
            let mut f = ratio(&c);
            let mut step = 0.1;
            for _ in 0..400 {
                let (s, k) = sup(&c);
                let h = table[k].iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>();
                let psi = DVector::from_column_slice(&table[k]);
                let q = c.dot(&(&g * &c));
                let grad = psi * (2.0 * h / q) - (&g * &c) * (2.0 * s * s / (q * q));
                let gn = grad.norm();
                if !(gn > 0.0) {
                    break;
                }
                let mut moved = false;
                while step > 1e-10 {
                    let trial = project(&c + &grad * (step / gn));
                    let ft = ratio(&trial);
                    if ft > f {
                        c = trial;
                        f = ft;
                        step *= 1.5;
                        moved = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            (f, c)
        })
        .collect();
    let best = runs.into_iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("at least one restart");
    if !best.0.is_finite() || best.0 <= 0.0 {
        return Err(Error::numeric(format!(
            "S_H search returned {}; the form is degenerate along some direction",
            best.0
        )));
    }
    Ok(SupRatio {
        value: best.0,
        lower_bound: n > 1,
        coefficients: best.1.iter().copied().collect(),
        restarts: RESTARTS,
        seed,
    })
}

/// `T_c = (8·C·N·S_H²)^{1/κ}` and `T_min = (1 + 4S_H)·T_c`.
pub fn time_threshold(s_h: f64, c: f64, n: usize, kappa: f64) -> Result<(f64, f64)> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::domain(format!("time threshold needs a finite positive rate kappa, got {kappa}")));
    }
    if !(c > 0.0) || !(s_h > 0.0) {
        return Err(Error::domain(format!("time threshold needs C > 0 and S_H > 0, got C={c}, S_H={s_h}")));
    }
    let tc = (8.0 * c * n as f64 * s_h * s_h).powf(1.0 / kappa);
    Ok((tc, (1.0 + 4.0 * s_h) * tc))
}

#[derive(Clone, Copy, Debug)]
pub struct NormStarOptions {
    pub k_max: usize,
    pub quad: QuadOptions,
}

impl Default for NormStarOptions {
    fn default() -> Self {
        Self { k_max: 120, quad: QuadOptions { abs_tol: 1e-13, rel_tol: 1e-9, max_intervals: 4000 } }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormStar {
    /// Partial sum plus the tail estimate.
    pub value: f64,
    pub partial_sum: f64,
    pub tail_estimate: f64,
    /// `(k, term)` for the nonzero terms.
    pub terms: Vec<(usize, f64)>,
    /// Fitted algebraic decay `term ≈ A·k^(−p)` of the last terms.
    pub decay_power: f64,
}

/// The series norm `‖h‖²_*` in one dimension for a radial `h` supported on
/// `[0, r_max]`. Terms with odd `k` vanish by parity and are skipped.
pub fn norm_star(
    h: &(dyn Fn(f64) -> f64 + Sync),
    r_max: f64,
    a: f64,
    gamma: f64,
    opts: NormStarOptions,
) -> Result<NormStar> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("norm_star needs gamma in (0, 1), got {gamma}")));
    }
    if !(a >= 0.0) || !(r_max > 0.0) {
        return Err(Error::domain("norm_star needs a >= 0 and r_max > 0"));
    }
    if opts.k_max < 10 {
        return Err(Error::config("norm_star needs k_max >= 10"));
    }
    let ks: Vec<usize> = (2..=opts.k_max).step_by(2).collect();
    let terms: Vec<f64> =
        ks.par_iter().map(|&k| norm_star_term(h, r_max, a, gamma, k, opts.quad)).collect::<Result<_>>()?;
    let partial: f64 = terms.iter().sum();
    if partial == 0.0 {
        return Ok(NormStar {
            value: 0.0,
            partial_sum: 0.0,
            tail_estimate: 0.0,
            terms: ks.into_iter().zip(terms).collect(),
            decay_power: f64::INFINITY,
        });
    }
    // Log-log fit on the last quarter of the terms.
    let start = ks.len() * 3 / 4;
    let xs: Vec<f64> = ks[start..].iter().map(|k| (*k as f64).ln()).collect();
    let ys: Vec<f64> = terms[start..].iter().map(|t| t.max(1e-300).ln()).collect();
    let nf = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / nf, ys.iter().sum::<f64>() / nf);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let p = -slope;
    if !(p > 1.05) {
        return Err(Error::numeric(format!(
            "norm_star terms decay like k^-{p:.3} at k_max = {}; increase k_max",
            opts.k_max
        )));
    }
    let amp = (my - slope * mx).exp();
    // Σ over even j > K of A j^-p ≈ ∫_K^∞ A x^-p dx / 2, midpoint corrected.
    let kk = opts.k_max as f64 + 1.0;
    let tail = amp * kk.powf(1.0 - p) / (2.0 * (p - 1.0));
    Ok(NormStar {
        value: partial + tail,
        partial_sum: partial,
        tail_estimate: tail,
        terms: ks.into_iter().zip(terms).collect(),
        decay_power: p,
    })
}

fn norm_star_term(
    h: &(dyn Fn(f64) -> f64 + Sync),
    r_max: f64,
    a: f64,
    gamma: f64,
    k: usize,
    opts: QuadOptions,
) -> Result<f64> {
    let kf = k as f64;
    let log_pref = (kf - 1.0) * 2f64.ln() + kf.ln() - statrs::function::gamma::ln_gamma(kf + 1.0);
    // λ = e^s; the integrand decays like e^{(k−1−γ)s} on the left and
    // e^{−(1+γ)s} on the right.
    let lo = -(40.0 / (kf - 1.0 - gamma)).min(60.0);
    let f = |s: f64| -> f64 {
        let lam = s.exp();
        let (log_i, sign) = inner_log(h, r_max, lam, k, opts);
        if sign == 0.0 {
            return 0.0;
        }
        (log_pref + (kf - 1.0) * s + 2.0 * log_i - lam * a - gamma * s).exp()
    };
    Ok(quad::integrate(f, lo, 60.0 / (1.0 + gamma), opts)?.value)
}

/// `log|2∫₀^R h(u) e^{−λu²} u^{k−1} du|` and its sign.
fn inner_log(h: &(dyn Fn(f64) -> f64 + Sync), r_max: f64, lam: f64, k: usize, opts: QuadOptions) -> (f64, f64) {
    let km = (k - 1) as f64;
    let peak = (km / (2.0 * lam)).sqrt().min(r_max);
    let shift = km * peak.max(1e-300).ln() - lam * peak * peak;
    let g = |u: f64| if u <= 0.0 { 0.0 } else { h(u) * (km * u.ln() - lam * u * u - shift).exp() };
    let width = (1.0 / lam).sqrt();
    let cut = (peak + 12.0 * width).min(r_max);
    let v = match quad::integrate(g, 0.0, cut, QuadOptions { abs_tol: 0.0, ..opts }) {
        Ok(r) => r.value,
        Err(Error::Quadrature { estimate, .. }) => estimate,
        Err(_) => f64::NAN,
    };
    if v == 0.0 || !v.is_finite() {
        return (0.0, 0.0);
    }
    ((2.0 * v.abs()).ln() + shift, v.signum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_samples(n: usize, seed: u64) -> Vec<f64> {
        // (u, v) with unit-half variances and correlation 1/2.
        let mut r = rng::stream(seed, 0, Purpose::Sampling);
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let z1: f64 = r.sample(StandardNormal);
            let z2: f64 = r.sample(StandardNormal);
            let u = z1 * 0.5f64.sqrt();
            let v = 0.5 * u + (0.5 - 0.125f64).sqrt() * z2;
            out.extend([u, v]);
        }
        out
    }

    #[test]
    fn pencil_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((pencil_min(&i2, &i2).unwrap().0 - 1.0).abs() < 1e-14);
        assert!(pencil_min(&DMatrix::zeros(2, 2), &i2).unwrap().0.abs() < 1e-14);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert!((pencil_min(&g, &i2).unwrap().0 - 1.0).abs() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(pencil_min(&g, &bad).is_err());
    }

    #[test]
    fn constant_basis_matches_arcsine_law() {
        let s = ou_samples(200_000, 5);
        let r = estimate_i_infty(&HypothesisSpace::constant(), &s, 1, 5).unwrap();
        assert!((r.c_hat - 1.0 / 3.0).abs() < 3.0 * r.c_hat_stderr + 1e-12, "{} ± {}", r.c_hat, r.c_hat_stderr);
        assert!((r.g[0][0] - r.c_hat).abs() < 1e-12);
    }

    #[test]
    fn hats_are_positive_and_basis_invariant() {
        let s = ou_samples(50_000, 6);
        // Larger hat spaces have pencil minima far below Monte Carlo
        // resolution on this law; two hats give c ≈ 0.03.
        let hs = HypothesisSpace::hats(2, 2.0).unwrap();
        let r = estimate_i_infty(&hs, &s, 1, 6).unwrap();
        assert!(r.c_hat > 3.0 * r.c_hat_stderr, "{} ± {}", r.c_hat, r.c_hat_stderr);
        let hs = HypothesisSpace::hats(6, 2.5).unwrap();
        let r = estimate_i_infty(&hs, &s, 1, 6).unwrap();
        let t = DMatrix::from_fn(6, 6, |i, j| if j >= i { 1.0 + (i * j) as f64 * 0.1 } else { 0.0 });
        let (g, m) = (r.g_matrix(), r.m_matrix());
        let c2 = pencil_min(&(t.transpose() * &g * &t), &(t.transpose() * &m * &t)).unwrap().0;
        assert!((c2 - r.c_hat).abs() < 1e-8);
        let w = &r.eigenvector;
        assert!((r.form(w) - r.c_hat).abs() < 1e-10);
    }

    #[test]
    fn unsupported_basis_is_named() {
        let s = ou_samples(1000, 7);
        let hs = HypothesisSpace::hats(4, 30.0).unwrap();
        match estimate_i_infty(&hs, &s, 1, 7) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("[2, 3]") || msg.contains("indices"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bsplines_partition_unity() {
        let hs = HypothesisSpace::bsplines(7, 3, 2.0).unwrap();
        for k in 0..=50 {
            let r = 2.0 * k as f64 / 50.0;
            let s: f64 = hs.eval(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "r={r}: {s}");
        }
        let hats = HypothesisSpace::hats(5, 1.0).unwrap();
        assert!(hats.sup_norms.iter().all(|s| (s - 1.0).abs() < 1e-3));
    }

    #[test]
    fn s_h_matches_grid_oracle() {
        let s = ou_samples(40_000, 8);
        let hs = HypothesisSpace::hats(2, 2.0).unwrap();
        let r = estimate_i_infty(&hs, &s, 1, 8).unwrap();
        let sh = estimate_s_h(&hs, &r, 1).unwrap();
        let ginv = r.g_matrix().try_inverse().unwrap();
        let oracle = (0..SUP_GRID)
            .map(|k| {
                let p = DVector::from_vec(hs.eval(2.0 * k as f64 / (SUP_GRID - 1) as f64));
                p.dot(&(&ginv * &p))
            })
            .fold(0.0, f64::max);
        assert!(sh.value <= oracle * (1.0 + 1e-9));
        assert!(sh.value >= 0.99 * oracle, "{} vs {oracle}", sh.value);
        let other = estimate_s_h(&hs, &r, 2).unwrap();
        assert!((other.value - sh.value).abs() < 0.05 * sh.value);
    }

    #[test]
    fn time_threshold_examples() {
        let (tc, tm) = time_threshold(1.0, 1.0, 3, 2.0).unwrap();
        assert!((tc - 24f64.sqrt()).abs() < 1e-12);
        assert!((tm - 5.0 * 24f64.sqrt()).abs() < 1e-12);
        assert!(time_threshold(1.0, 1.0, 3, 0.0).is_err());
        let (t1, _) = time_threshold(1.0, 1.0, 3, 1e6).unwrap();
        assert!(t1 > 1.0 && t1 < 1.0001);
    }

    #[test]
    fn norm_star_zero_and_oracle() {
        let z = norm_star(&|_| 0.0, 5.0, 0.0, 0.5, NormStarOptions::default()).unwrap();
        assert_eq!(z.value, 0.0);
        // h(u) = |u| e^{−u²}: the inner integral is Γ((k+1)/2)(1+λ)^{−(k+1)/2}.
        let ns = norm_star(&|u| u * (-u * u).exp(), 9.0, 0.0, 0.5, NormStarOptions::default()).unwrap();
        for &(k, t) in ns.terms.iter().take(5) {
            let kf = k as f64;
            let g2 = statrs::function::gamma::gamma((kf + 1.0) / 2.0).powi(2);
            let c = 2f64.powf(kf - 1.0) * kf / statrs::function::gamma::gamma(kf + 1.0) * g2;
            let f = |s: f64| {
                let l = s.exp();
                c * ((kf - 1.5) * s - (kf + 1.0) * l.ln_1p()).exp()
            };
            let o = quad::integrate(f, -80.0, 80.0, QuadOptions::default()).unwrap().value;
            assert!((t - o).abs() < 1e-7 * o, "k={k}: {t} vs {o}");
        }
        assert!(
            (ns.value - std::f64::consts::PI / 2f64.sqrt()).abs() < 1e-4,
            "{:?}",
            (ns.value, ns.partial_sum, ns.tail_estimate)
        );
    }

    #[test]
    fn quadrature_forms_on_ou_density() {
        let f = crate::dynamics::build_frame(3, 1).unwrap();
        let grid = crate::density::stationary_density(
            &f,
            &crate::potentials::Potential::quadratic(),
            &crate::density::GridSpec { bins: Some(200), ..Default::default() },
            &Default::default(),
        )
        .unwrap();
        let (g, m) = forms_from_density(&HypothesisSpace::constant(), &grid).unwrap();
        assert!((g[(0, 0)] - 1.0 / 3.0).abs() < 1e-3, "{}", g[(0, 0)]);
        assert!((m[(0, 0)] - 1.0).abs() < 1e-12);
        let (g, m) = forms_from_density(&HypothesisSpace::hats(2, 2.0).unwrap(), &grid).unwrap();
        let c = pencil_min(&g, &m).unwrap().0;
        assert!((c - 0.0304).abs() < 2e-3, "{c}");
    }
}
