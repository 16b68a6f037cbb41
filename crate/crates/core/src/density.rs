//! Densities of `(X₁ − X₂, X₁ − X₃)` on a box in `ℝ^{2d}`.
//!
//! The stationary density is
//! `p∞(u,v) = f(u,v) exp(−(2/N)[Φ(|u|) + Φ(|v|) + Φ(|u−v|)]) / Z`, where
//! `f` integrates the remaining particles out. For `N = 3`, `f ≡ 1` and
//! everything is deterministic quadrature; for `N > 3`, `f` and `Z` are
//! importance-sampled.
//!
//! All grids store cell averages, so histograms, kernel estimates and the
//! analytic density are directly comparable in `L¹`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dynamics::{hamiltonian, Ensemble, RelativeFrame};
use crate::error::{Error, Result};
use crate::io;
use crate::potentials::Potential;
use crate::quad::{self, QuadOptions};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    AnalyticStationary,
    EmpiricalHistogram,
    Kde,
}

/// A regular grid of cells on a box in `ℝ^{2d}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    pub d: usize,
    /// `[lo, hi]` per axis; axes `0..d` are `u`, axes `d..2d` are `v`.
    pub bounds: Vec<[f64; 2]>,
    pub bins: Vec<usize>,
}

impl Axes {
    /// The cube `[−L, L]^{2d}` with `bins` cells per axis.
    pub fn cube(d: usize, half_width: f64, bins: usize) -> Self {
        Self { d, bounds: vec![[-half_width, half_width]; 2 * d], bins: vec![bins; 2 * d] }
    }

    pub fn n_axes(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_cells(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.bounds[axis][1] - self.bounds[axis][0]) / self.bins[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.n_axes()).map(|a| self.width(a)).product()
    }

    /// Multi-index of a flat cell index (axis 0 slowest).
    pub fn unravel(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_axes()];
        for a in (0..self.n_axes()).rev() {
            out[a] = idx % self.bins[a];
            idx /= self.bins[a];
        }
        out
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        self.unravel(idx)
            .iter()
            .enumerate()
            .map(|(a, &k)| self.bounds[a][0] + (k as f64 + 0.5) * self.width(a))
            .collect()
    }

    fn bin_of(&self, axis: usize, x: f64) -> Option<usize> {
        let [lo, hi] = self.bounds[axis];
        if !(x >= lo && x < hi) {
            return None;
        }
        Some((((x - lo) / self.width(axis)) as usize).min(self.bins[axis] - 1))
    }

    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) || self.bounds.len() != 2 * self.d || self.bins.len() != 2 * self.d {
            return Err(Error::config(format!("a density grid needs 2d axes with d in 1..=3, got d={}", self.d)));
        }
        if self.bins.contains(&0) || self.bounds.iter().any(|[a, b]| !(b > a)) {
            return Err(Error::config("grid axes need positive bin counts and lo < hi"));
        }
        Ok(())
    }
}

/// A density on a grid, as cell averages.
#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub axes: Axes,
    pub values: Vec<f64>,
    /// Probability mass inside the box.
    pub normalization: f64,
    /// Mass outside the box, `1 − normalization` up to estimation error.
    pub deficit: f64,
    pub kind: DensityKind,
    /// Per-cell standard errors when the values are Monte Carlo estimates.
    pub std_errors: Option<Vec<f64>>,
}

impl DensityGrid {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.axes.cell_volume()
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<DensityManifest> {
        let data = format!("{stem}.bin");
        let sha256 = io::write_f64_le(&dir.join(&data), &self.values)?;
        let m = DensityManifest {
            format: "ipslab.density.v1".into(),
            axes: self.axes.clone(),
            normalization: self.normalization,
            deficit: self.deficit,
            kind: self.kind,
            data,
            sha256,
        };
        io::write_json_atomic(&dir.join(format!("{stem}.json")), &m)?;
        Ok(m)
    }

    pub fn load(manifest: &Path) -> Result<DensityGrid> {
        let m: DensityManifest = io::read_json(manifest)?;
        m.axes.validate()?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let values = io::read_f64_le(&dir.join(&m.data), Some(&m.sha256))?;
        if values.len() != m.axes.n_cells() {
            return Err(Error::config(format!(
                "{} holds {} cells, axes imply {}",
                m.data,
                values.len(),
                m.axes.n_cells()
            )));
        }
        Ok(DensityGrid {
            axes: m.axes,
            values,
            normalization: m.normalization,
            deficit: m.deficit,
            kind: m.kind,
            std_errors: None,
        })
    }

    /// The `u`-marginal as cell averages over the first `d` axes.
    pub fn marginal_u(&self) -> Vec<f64> {
        let d = self.axes.d;
        let outer: usize = self.axes.bins[..d].iter().product();
        let inner: usize = self.axes.bins[d..].iter().product();
        let vol_v: f64 = (d..2 * d).map(|a| self.axes.width(a)).product();
        (0..outer).map(|i| self.values[i * inner..(i + 1) * inner].iter().sum::<f64>() * vol_v).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityManifest {
    pub format: String,
    pub axes: Axes,
    pub normalization: f64,
    pub deficit: f64,
    pub kind: DensityKind,
    pub data: String,
    pub sha256: String,
}

/// Grid for [`stationary_density`]; the box defaults to `±6σ`, with `σ`
/// the moment-matched Gaussian scale of `exp(−(2/N)Φ(|r|))`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub half_width: Option<f64>,
    #[serde(default)]
    pub bins: Option<usize>,
    /// Gauss–Legendre points per axis inside each cell (`N = 3`).
    #[serde(default)]
    pub cell_order: Option<usize>,
}


/// Monte Carlo budget for `N > 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub samples: usize,
    /// Largest tolerated relative standard error of `f` over cells carrying
    /// at least `1e-4` of the peak density.
    pub max_rel_se: f64,
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        Self { samples: 20_000, max_rel_se: 0.05, seed: 0 }
    }
}

/// Standard deviation per coordinate of the density proportional to
/// `exp(−c Φ(|r|))` on `ℝ^d`.
pub fn matched_sigma(p: &Potential, c: f64, d: usize) -> Result<f64> {
    let base = p.value(0.0);
    let mut r_max = 1.0;
    while c * (p.value(r_max) - base) < 60.0 {
        r_max *= 2.0;
        if r_max > 1e8 {
            return Err(Error::precondition("exp(-c Phi) is not integrable: Phi does not grow"));
        }
    }
    let w = |s: f64, k: i32| s.powi(k) * (-c * (p.value(s) - base)).exp();
    let opts = QuadOptions { abs_tol: 1e-14, rel_tol: 1e-10, max_intervals: 4000 };
    let num = quad::integrate(|s| w(s, d as i32 + 1), 0.0, r_max, opts)?.value;
    let den = quad::integrate(|s| w(s, d as i32 - 1), 0.0, r_max, opts)?.value;
    Ok((num / den / d as f64).sqrt())
}

fn log_weight(frame: &RelativeFrame, p: &Potential, u: &[f64], v: &[f64]) -> f64 {
    -2.0 / frame.n as f64 * (p.value(norm(u)) + p.value(norm(v)) + p.value(dist(u, v)))
}

/// Evaluates `p∞` as cell averages on a grid.
pub fn stationary_density(frame: &RelativeFrame, p: &Potential, grid: &GridSpec, mc: &McSpec) -> Result<DensityGrid> {
    if frame.n < 3 {
        return Err(Error::precondition("the (r12, r13) density needs N >= 3"));
    }
    let d = frame.d;
    let sigma = matched_sigma(p, 2.0 / frame.n as f64, d)?;
    let half = grid.half_width.unwrap_or(6.0 * sigma);
    let bins = grid.bins.unwrap_or(match d {
        1 => 60,
        2 => 16,
        _ => 8,
    });
    // An even bin count keeps the grid aligned with the doubled grid used for Z.
    let bins = bins + bins % 2;
    let axes = Axes::cube(d, half, bins);
    axes.validate()?;
    if frame.n == 3 {
        stationary_three(
            frame,
            p,
            axes,
            grid.cell_order.unwrap_or(match d {
                1 => 4,
                2 => 2,
                _ => 1,
            }),
        )
    } else {
        stationary_many(frame, p, axes, sigma, mc)
    }
}

/// Tensor Gauss–Legendre nodes on a box.
fn tensor_rule(lo: &[f64], hi: &[f64], order: usize, panels: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let rules: Vec<(Vec<f64>, Vec<f64>)> =
        lo.iter().zip(hi).map(|(a, b)| quad::composite_legendre(*a, *b, panels, order)).collect();
    let per = rules[0].0.len();
    let total = per.pow(lo.len() as u32);
    let mut pts = Vec::with_capacity(total);
    let mut wts = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut x = vec![0.0; lo.len()];
        let mut w = 1.0;
        for a in (0..lo.len()).rev() {
            x[a] = rules[a].0[rem % per];
            w *= rules[a].1[rem % per];
            rem /= per;
        }
        pts.push(x);
        wts.push(w);
    }
    (pts, wts)
}

fn stationary_three(frame: &RelativeFrame, p: &Potential, axes: Axes, order: usize) -> Result<DensityGrid> {
    let d = frame.d;
    let dim = 2 * d;
    let q = |x: &[f64]| log_weight(frame, p, &x[..d], &x[d..]).exp();

    // Z uses the same cell rule on a grid twice as wide with twice the bins,
    // so the in-box cells are a subset of the cells summed for Z.
    let half = axes.bounds[0][1];
    let outer = Axes::cube(d, 2.0 * half, 2 * axes.bins[0]);
    let (unit, unit_w) = tensor_rule(&vec![0.0; dim], &vec![1.0; dim], order, 1);
    let widths: Vec<f64> = (0..dim).map(|a| outer.width(a)).collect();
    let cell_mean = |k: &[usize]| {
        let mut x = vec![0.0; dim];
        let mut acc = 0.0;
        for (node, w) in unit.iter().zip(&unit_w) {
            for a in 0..dim {
                x[a] = outer.bounds[a][0] + (k[a] as f64 + node[a]) * widths[a];
            }
            acc += w * q(&x);
        }
        acc
    };
    let all: Vec<f64> = (0..outer.n_cells()).into_par_iter().map(|c| cell_mean(&outer.unravel(c))).collect();
    let z = all.iter().sum::<f64>() * outer.cell_volume();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::numeric(format!("normalizing constant Z = {z} is not positive and finite")));
    }
    let shift = axes.bins[0] / 2;
    let values: Vec<f64> = (0..axes.n_cells())
        .map(|c| {
            let k: Vec<usize> = axes.unravel(c).iter().map(|k| k + shift).collect();
            let mut idx = 0;
            for a in 0..dim {
                idx = idx * outer.bins[a] + k[a];
            }
            all[idx] / z
        })
        .collect();
    let mass = values.iter().sum::<f64>() * axes.cell_volume();
    Ok(DensityGrid {
        axes,
        values,
        normalization: mass.min(1.0),
        deficit: (1.0 - mass).max(0.0),
        kind: DensityKind::AnalyticStationary,
        std_errors: None,
    })
}

fn stationary_many(frame: &RelativeFrame, p: &Potential, axes: Axes, sigma: f64, mc: &McSpec) -> Result<DensityGrid> {
    let (n, d) = (frame.n, frame.d);
    let extra = (n - 3) * d;
    let c = 2.0 / n as f64;
    // Proposal N(0, s²I) with s inflated over the matched scale to keep the
    // weights of the lighter-tailed target under control.
    let s = 1.5 * sigma;
    let log_q = |x: &[f64]| -> f64 {
        let k = x.len() as f64;
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() / (s * s) - k * (s * (2.0 * std::f64::consts::PI).sqrt()).ln()
    };
    let draw = |index: u64, len: usize| -> Vec<Vec<f64>> {
        (0..mc.samples)
            .into_par_iter()
            .map(|m| {
                let mut rng = rng::stream(mc.seed, index + m as u64, Purpose::Sampling);
                (0..len).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect()
    };

    // f(u,v) with common samples across cells.
    let rest = draw(0, extra);
    let cells = axes.n_cells();
    let est: Vec<(f64, f64)> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let x = axes.cell_center(cell);
            let (u, v) = (&x[..d], &x[d..]);
            let (mut sum, mut sum2) = (0.0, 0.0);
            for r in &rest {
                let mut e = 0.0;
                for l in 0..(n - 3) {
                    let rl = &r[l * d..(l + 1) * d];
                    e += p.value(norm(rl)) + p.value(dist(u, rl)) + p.value(dist(v, rl));
                    for m in (l + 1)..(n - 3) {
                        e += p.value(dist(rl, &r[m * d..(m + 1) * d]));
                    }
                }
                let w = (-c * e - log_q(r)).exp();
                sum += w;
                sum2 += w * w;
            }
            let m = mc.samples as f64;
            let mean = sum / m;
            let var = (sum2 / m - mean * mean).max(0.0) / m;
            let front = log_weight(frame, p, u, v).exp();
            (front * mean, front * var.sqrt())
        })
        .collect();

    // The box integral of the cell estimates fixes Z up to the mass outside
    // the box, which is estimated by self-normalized importance sampling.
    let inside = est.iter().map(|e| e.0).sum::<f64>() * axes.cell_volume();
    let full = draw(1 << 40, frame.dim());
    let weights: Vec<(f64, bool)> = full
        .par_iter()
        .map(|r| {
            let w = (-2.0 * hamiltonian(frame, p, r) - log_q(r)).exp();
            (w, r[..2 * d].iter().zip(&axes.bounds).all(|(x, [lo, hi])| x >= lo && x <= hi))
        })
        .collect();
    let total: f64 = weights.iter().map(|w| w.0).sum();
    let outside: f64 = weights.iter().filter(|w| !w.1).map(|w| w.0).sum();
    let outside = if total > 0.0 { outside / total } else { f64::NAN };
    let z = inside / (1.0 - outside);
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::numeric(format!("normalizing constant Z = {z} is not positive and finite")));
    }

    let peak = est.iter().map(|e| e.0).fold(0.0, f64::max);
    let mut worst = (0.0, 0usize);
    for (i, (v, se)) in est.iter().enumerate() {
        if *v >= 1e-4 * peak && *v > 0.0 && se / v > worst.0 {
            worst = (se / v, i);
        }
    }
    if worst.0 > mc.max_rel_se {
        return Err(Error::numeric(format!(
            "Monte Carlo relative standard error {:.3} of f exceeds {} at cell {:?} (centre {:?}); raise the sample budget",
            worst.0,
            mc.max_rel_se,
            axes.unravel(worst.1),
            axes.cell_center(worst.1)
        )));
    }
    let values: Vec<f64> = est.iter().map(|e| e.0 / z).collect();
    let std_errors = Some(est.iter().map(|e| e.1 / z).collect());
    Ok(DensityGrid {
        axes,
        values,
        normalization: 1.0 - outside,
        deficit: outside,
        kind: DensityKind::AnalyticStationary,
        std_errors,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// How to turn samples into a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimator {
    Histogram,
    /// Product Gaussian kernel with a fixed bandwidth; cell averages are
    /// computed exactly from the normal CDF.
    Kde {
        bandwidth: f64,
    },
}

/// Minimum number of in-box samples for an empirical grid.
pub const MIN_SAMPLES: usize = 100;

/// Density of samples stored as rows of length `2d`.
pub fn density_from_samples(samples: &[f64], axes: &Axes, est: Estimator) -> Result<DensityGrid> {
    axes.validate()?;
    let dim = axes.n_axes();
    let n = samples.len() / dim;
    if n == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::precondition(format!("{} values do not form rows of length {dim}", samples.len())));
    }
    let vol = axes.cell_volume();
    match est {
        Estimator::Histogram => {
            let mut counts = vec![0u64; axes.n_cells()];
            let mut inside = 0usize;
            'rows: for row in samples.chunks_exact(dim) {
                let mut idx = 0;
                for a in 0..dim {
                    match axes.bin_of(a, row[a]) {
                        Some(k) => idx = idx * axes.bins[a] + k,
                        None => continue 'rows,
                    }
                }
                counts[idx] += 1;
                inside += 1;
            }
            if inside < MIN_SAMPLES {
                return Err(Error::precondition(format!(
                    "only {inside} samples fall inside the grid (need {MIN_SAMPLES})"
                )));
            }
            let values = counts.iter().map(|c| *c as f64 / (n as f64 * vol)).collect();
            let mass = inside as f64 / n as f64;
            Ok(DensityGrid {
                axes: axes.clone(),
                values,
                normalization: mass,
                deficit: 1.0 - mass,
                kind: DensityKind::EmpiricalHistogram,
                std_errors: None,
            })
        }
        Estimator::Kde { bandwidth } => {
            if !(bandwidth > 0.0) {
                return Err(Error::config(format!("kde bandwidth must be positive, got {bandwidth}")));
            }
            let inside =
                samples.chunks_exact(dim).filter(|row| (0..dim).all(|a| axes.bin_of(a, row[a]).is_some())).count();
            if inside < MIN_SAMPLES {
                return Err(Error::precondition(format!(
                    "only {inside} samples fall inside the grid (need {MIN_SAMPLES})"
                )));
            }
            let cells = axes.n_cells();
            // Chunked sum for a thread-count-independent result.
            let chunk = 1024;
            let partial: Vec<Vec<f64>> = samples
                .par_chunks(chunk * dim)
                .map(|rows| {
                    let mut acc = vec![0.0; cells];
                    let mut masses: Vec<Vec<f64>> = vec![Vec::new(); dim];
                    let mut starts = vec![0usize; dim];
                    for row in rows.chunks_exact(dim) {
                        let mut empty = false;
                        for a in 0..dim {
                            let (s, m) = axis_masses(axes, a, row[a], bandwidth);
                            empty |= m.is_empty();
                            starts[a] = s;
                            masses[a] = m;
                        }
                        if !empty {
                            scatter(axes, &starts, &masses, &mut acc);
                        }
                    }
                    acc
                })
                .collect();
            let mut values = vec![0.0; cells];
            for part in partial {
                for (v, p) in values.iter_mut().zip(part) {
                    *v += p;
                }
            }
            let scale = 1.0 / (n as f64 * vol);
            values.iter_mut().for_each(|v| *v *= scale);
            let mass = values.iter().sum::<f64>() * vol;
            Ok(DensityGrid {
                axes: axes.clone(),
                values,
                normalization: mass.min(1.0),
                deficit: (1.0 - mass).max(0.0),
                kind: DensityKind::Kde,
                std_errors: None,
            })
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Probability that `x + h·ξ` falls in each bin of `axis`, restricted to
/// bins within `8h` of `x`.
fn axis_masses(axes: &Axes, axis: usize, x: f64, h: f64) -> (usize, Vec<f64>) {
    let [lo, _] = axes.bounds[axis];
    let w = axes.width(axis);
    let nb = axes.bins[axis] as isize;
    let first = (((x - 8.0 * h - lo) / w).floor() as isize).clamp(0, nb);
    let last = (((x + 8.0 * h - lo) / w).ceil() as isize).clamp(0, nb);
    let mut out = Vec::with_capacity((last - first).max(0) as usize);
    let mut prev = normal_cdf((lo + first as f64 * w - x) / h);
    for k in first..last {
        let next = normal_cdf((lo + (k + 1) as f64 * w - x) / h);
        out.push(next - prev);
        prev = next;
    }
    (first as usize, out)
}

fn scatter(axes: &Axes, starts: &[usize], masses: &[Vec<f64>], acc: &mut [f64]) {
    let dim = axes.n_axes();
    let mut k = vec![0usize; dim];
    loop {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..dim {
            idx = idx * axes.bins[a] + starts[a] + k[a];
            w *= masses[a][k[a]];
        }
        acc[idx] += w;
        let mut a = dim;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            k[a] += 1;
            if k[a] < masses[a].len() {
                break;
            }
            k[a] = 0;
        }
    }
}

/// Density of `(r₁₂, r₁₃)` at snapshot `t` of an ensemble.
pub fn empirical_density(ens: &Ensemble, t: usize, axes: &Axes, est: Estimator) -> Result<DensityGrid> {
    if axes.d != ens.d {
        return Err(Error::config(format!("grid is for d={}, ensemble has d={}", axes.d, ens.d)));
    }
    density_from_samples(&ens.pair_samples(t)?, axes, est)
}

/// `Σ|p − q|·vol + deficit_p + deficit_q`, an upper bound on the `L¹`
/// distance of the underlying densities on `ℝ^{2d}`.
pub fn l1_distance(p: &DensityGrid, q: &DensityGrid) -> Result<f64> {
    if p.axes != q.axes {
        return Err(Error::config("l1_distance needs identical grids"));
    }
    let inside: f64 = p.values.iter().zip(&q.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * p.axes.cell_volume();
    Ok(inside + p.deficit + q.deficit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// `distance ≈ c·t^(−κ̂/2)`.
    Polynomial,
    /// `distance ≈ c·e^(−λ̂t)`.
    Exponential,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateFit {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub fit_kind: FitKind,
    /// `κ̂` for polynomial fits, `λ̂` for exponential fits.
    pub fitted_rate: f64,
    /// `κ̂/2` (polynomial) or `λ̂` (exponential): the decay exponent of the
    /// distance itself.
    pub decay_exponent: f64,
    pub prefactor: f64,
    /// Root mean square of the residuals of `log distance`.
    pub residual: f64,
}

/// Least-squares fit of `log distance` against `log t` or `t`.
pub fn fit_decay(times: &[f64], distances: &[f64], kind: FitKind, noise_floor: f64) -> Result<RateFit> {
    if times.len() != distances.len() || times.len() < 5 {
        return Err(Error::precondition(format!(
            "fit_decay needs at least 5 (t, distance) pairs, got {}",
            times.len().min(distances.len())
        )));
    }
    if let Some(k) = distances.iter().position(|d| !(*d > noise_floor)) {
        return Err(Error::numeric(format!(
            "distance {:e} at t = {} is at the noise floor {noise_floor:e}; use a larger ensemble",
            distances[k], times[k]
        )));
    }
    if times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::precondition("fit_decay needs positive times"));
    }
    let xs: Vec<f64> = match kind {
        FitKind::Polynomial => times.iter().map(|t| t.ln()).collect(),
        FitKind::Exponential => times.to_vec(),
    };
    let ys: Vec<f64> = distances.iter().map(|d| d.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    let (fitted_rate, decay_exponent) = match kind {
        FitKind::Polynomial => (-2.0 * slope, -slope),
        FitKind::Exponential => (-slope, -slope),
    };
    Ok(RateFit {
        times: times.to_vec(),
        distances: distances.to_vec(),
        fit_kind: kind,
        fitted_rate,
        decay_exponent,
        prefactor: icpt.exp(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::build_frame;

    fn ou3() -> DensityGrid {
        let f = build_frame(3, 1).unwrap();
        stationary_density(&f, &Potential::quadratic(), &GridSpec::default(), &McSpec::default()).unwrap()
    }

    #[test]
    fn ou_stationary_density_is_the_expected_gaussian() {
        let g = ou3();
        assert!((g.mass() - 1.0).abs() < 1e-6, "{}", g.mass());
        let vol = g.axes.cell_volume();
        let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
        for (i, v) in g.values.iter().enumerate() {
            let x = g.axes.cell_center(i);
            suu += v * vol * x[0] * x[0];
            suv += v * vol * x[0] * x[1];
            svv += v * vol * x[1] * x[1];
        }
        // Midpoint moments carry a w²/12 binning term.
        let w2 = g.axes.width(0).powi(2) / 12.0;
        assert!((suu - w2 - 0.5).abs() < 1e-3, "{suu}");
        assert!((svv - w2 - 0.5).abs() < 1e-3);
        assert!((suv - 0.25).abs() < 1e-3, "{suv}");
    }

    #[test]
    fn ou_marginal_variance() {
        let g = ou3();
        let m = g.marginal_u();
        let w = g.axes.width(0);
        let var: f64 = m
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let x = g.axes.bounds[0][0] + (k as f64 + 0.5) * w;
                p * w * x * x
            })
            .sum::<f64>()
            - w * w / 12.0;
        assert!((var - 0.5).abs() < 1e-3);
    }

    #[test]
    fn stationary_density_symmetries() {
        let f = build_frame(3, 1).unwrap();
        let p = Potential::power_shifted(1.0, 1.5, 0.9).unwrap();
        let g =
            stationary_density(&f, &p, &GridSpec { bins: Some(40), ..Default::default() }, &McSpec::default()).unwrap();
        let b = 40;
        for i in 0..b {
            for j in 0..b {
                let v = g.values[i * b + j];
                assert!((v - g.values[j * b + i]).abs() <= 1e-12 * v.max(1e-300));
                assert!((v - g.values[(b - 1 - i) * b + (b - 1 - j)]).abs() <= 1e-12 * v.max(1e-300));
            }
        }
        assert!(g.deficit < 1e-6, "{}", g.deficit);
    }

    #[test]
    fn four_particle_density_is_symmetric_and_normalized() {
        let f = build_frame(4, 1).unwrap();
        let g = stationary_density(
            &f,
            &Potential::quadratic(),
            &GridSpec { bins: Some(24), ..Default::default() },
            &McSpec { samples: 4000, max_rel_se: 0.05, seed: 1 },
        )
        .unwrap();
        assert!((g.mass() - 1.0).abs() < 0.05, "{}", g.mass());
        let b = 24;
        let se = g.std_errors.as_ref().unwrap();
        for i in 0..b {
            for j in 0..b {
                let (x, y) = (g.values[i * b + j], g.values[j * b + i]);
                assert!((x - y).abs() <= 4.0 * (se[i * b + j] + se[j * b + i]) + 1e-12);
            }
        }
        // N = 4 OU: Cov(r) = A/4 in every dimension, so Var(u) = 1/2.
        let vol = g.axes.cell_volume();
        let var: f64 = g.values.iter().enumerate().map(|(i, v)| v * vol * g.axes.cell_center(i)[0].powi(2)).sum();
        assert!((var - 0.5).abs() < 0.03, "{var}");
    }

    #[test]
    fn histogram_of_point_mass() {
        let axes = Axes::cube(1, 2.0, 8);
        let samples: Vec<f64> = (0..200).flat_map(|_| [0.3, -0.7]).collect();
        let g = density_from_samples(&samples, &axes, Estimator::Histogram).unwrap();
        assert_eq!(g.values.iter().filter(|v| **v > 0.0).count(), 1);
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!(density_from_samples(&samples[..100], &axes, Estimator::Histogram).is_err());
    }

    #[test]
    fn kde_mass_and_permutation_symmetry() {
        let axes = Axes::cube(1, 5.0, 30);
        let mut r = rng::stream(3, 0, Purpose::Sampling);
        let s: Vec<f64> = (0..4000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let swapped: Vec<f64> = s.chunks(2).flat_map(|c| [c[1], c[0]]).collect();
        let a = density_from_samples(&s, &axes, Estimator::Kde { bandwidth: 0.3 }).unwrap();
        let b = density_from_samples(&swapped, &axes, Estimator::Kde { bandwidth: 0.3 }).unwrap();
        assert!((a.mass() + a.deficit - 1.0).abs() < 1e-12);
        for i in 0..30 {
            for j in 0..30 {
                assert!((a.values[i * 30 + j] - b.values[j * 30 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l1_examples() {
        let axes = Axes::cube(1, 1.0, 2);
        let unit = |cell: usize| {
            let mut v = vec![0.0; 4];
            v[cell] = 1.0;
            DensityGrid {
                axes: axes.clone(),
                values: v,
                normalization: 1.0,
                deficit: 0.0,
                kind: DensityKind::EmpiricalHistogram,
                std_errors: None,
            }
        };
        assert_eq!(l1_distance(&unit(0), &unit(0)).unwrap(), 0.0);
        assert_eq!(l1_distance(&unit(0), &unit(3)).unwrap(), 2.0);
        let mut other = unit(0);
        other.axes = Axes::cube(1, 2.0, 2);
        assert!(l1_distance(&unit(0), &other).is_err());
    }

    #[test]
    fn fit_examples() {
        let t = [1.0, 2.0, 4.0, 8.0, 16.0];
        let d: Vec<f64> = t.iter().map(|t| 1.0 / t).collect();
        let f = fit_decay(&t, &d, FitKind::Polynomial, 0.0).unwrap();
        assert!((f.fitted_rate - 2.0).abs() < 1e-6);
        assert!(f.residual < 1e-12);
        let d: Vec<f64> = t.iter().map(|t| (-t).exp()).collect();
        assert!(fit_decay(&t, &d, FitKind::Polynomial, 0.0).unwrap().residual > 0.5);
        assert!((fit_decay(&t, &d, FitKind::Exponential, 0.0).unwrap().fitted_rate - 1.0).abs() < 1e-9);
        assert!(fit_decay(&t[..4], &d[..4], FitKind::Polynomial, 0.0).is_err());
        assert!(matches!(fit_decay(&t, &d, FitKind::Polynomial, 1e-3), Err(Error::Numeric(_))));
    }

    #[test]
    fn density_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = ou3();
        g.save(dir.path(), "p").unwrap();
        let back = DensityGrid::load(&dir.path().join("p.json")).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(l1_distance(&g, &back).unwrap(), 2.0 * g.deficit);
    }
}
