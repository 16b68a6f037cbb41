//! Positive and negative definite kernels.
//!
//! A [`Kernel`] is a symmetric function on `X × X` with `X = ℝ^d` or
//! `X = [0, ∞)`, carrying the tree of constructors that produced it. The
//! testers ([`test_pd`], [`test_nd`]) are randomized refutation tests: they
//! sample point sets, form Gram matrices and look at the extreme eigenvalues.
//! A verdict is reproducible from `(n, trials, seed)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::{Potential, PotentialSpec};
use crate::quad::{self, QuadOptions};
use crate::rng::{self, Purpose};

type EvalFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync>;

/// The set a kernel is defined on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// `ℝ^d` for any `d`.
    Euclidean,
    /// `[0, ∞)`; points are scalars.
    HalfLine,
}

/// How a kernel was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Leaf(String),
    Sum(f64, Box<Provenance>, f64, Box<Provenance>),
    Product(Box<Provenance>, Box<Provenance>),
    Exp(Box<Provenance>),
    Pullback(String, Box<Provenance>),
    RankOne(String),
    TpnTriangle(Box<Provenance>),
    TpnBox(Box<Provenance>),
    Power(f64, Box<Provenance>),
    Log1p(Box<Provenance>),
    Scale(f64, Box<Provenance>),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Leaf(s) => write!(f, "{s}"),
            Provenance::Sum(a, k1, b, k2) => write!(f, "({a}*{k1} + {b}*{k2})"),
            Provenance::Product(k1, k2) => write!(f, "({k1} * {k2})"),
            Provenance::Exp(k) => write!(f, "exp({k})"),
            Provenance::Pullback(g, k) => write!(f, "{k}∘{g}"),
            Provenance::RankOne(g) => write!(f, "{g}(x){g}(y)"),
            Provenance::TpnTriangle(k) => write!(f, "D△[{k}]"),
            Provenance::TpnBox(k) => write!(f, "D□[{k}]"),
            Provenance::Power(a, k) => write!(f, "({k})^{a}"),
            Provenance::Log1p(k) => write!(f, "log(1 + {k})"),
            Provenance::Scale(c, k) => write!(f, "{c}*{k}"),
        }
    }
}

/// A symmetric real kernel.
#[derive(Clone)]
pub struct Kernel {
    eval: EvalFn,
    pub domain: Domain,
    pub provenance: Provenance,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Kernel[{:?}]({})", self.domain, self.provenance)
    }
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl Kernel {
    pub fn new(
        label: impl Into<String>,
        domain: Domain,
        eval: impl Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { eval: Arc::new(eval), domain, provenance: Provenance::Leaf(label.into()) }
    }

    /// `(x, y) ↦ f(|x − y|)` on `ℝ^d`.
    pub fn radial(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(label, Domain::Euclidean, move |x, y| Ok(f(dist(x, y))))
    }

    /// `Φ(|x − y|)` for a potential.
    pub fn from_potential(p: Potential) -> Self {
        Self::radial("Phi(|x-y|)", move |r| p.value(r))
    }

    /// `⟨x, y⟩`.
    pub fn inner_product() -> Self {
        Self::new("<x,y>", Domain::Euclidean, |x, y| Ok(dot(x, y)))
    }

    /// `exp(−|x − y|²/ℓ²)`.
    pub fn gaussian(length: f64) -> Self {
        let s = 1.0 / (length * length);
        Self::radial(format!("gauss({length})"), move |r| (-s * r * r).exp())
    }

    /// `|x − y|^p`.
    pub fn radial_power(p: f64) -> Self {
        Self::radial(format!("|x-y|^{p}"), move |r| if p == 2.0 { r * r } else { r.powf(p) })
    }

    /// `a + |x − y|²`.
    pub fn shifted_square(a: f64) -> Self {
        Self::radial(format!("{a}+|x-y|^2"), move |r| a + r * r)
    }

    /// `x^γ + y^γ − (x + y)^γ` on `[0, ∞)`.
    pub fn power_gap(gamma: f64) -> Self {
        Self::new(format!("x^{gamma}+y^{gamma}-(x+y)^{gamma}"), Domain::HalfLine, move |x, y| {
            let (x, y) = (x[0], y[0]);
            if x < 0.0 || y < 0.0 {
                return Err(Error::domain(format!("power_gap is defined on [0, inf), got ({x}, {y})")));
            }
            Ok(x.powf(gamma) + y.powf(gamma) - (x + y).powf(gamma))
        })
    }

    /// `x + y` on `[0, ∞)`.
    pub fn half_line_sum() -> Self {
        Self::new("x+y", Domain::HalfLine, |x, y| Ok(x[0] + y[0]))
    }

    /// `f(x) f(y)`.
    pub fn rank_one(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let label = label.into();
        Self {
            eval: Arc::new(move |x, y| Ok(f(x) * f(y))),
            domain: Domain::Euclidean,
            provenance: Provenance::RankOne(label),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        (self.eval)(x, y)
    }

    pub fn sum(c1: f64, k1: &Kernel, c2: f64, k2: &Kernel) -> Self {
        let (e1, e2) = (k1.eval.clone(), k2.eval.clone());
        Self {
            eval: Arc::new(move |x, y| Ok(c1 * e1(x, y)? + c2 * e2(x, y)?)),
            domain: k1.domain,
            provenance: Provenance::Sum(c1, Box::new(k1.provenance.clone()), c2, Box::new(k2.provenance.clone())),
        }
    }

    pub fn product(k1: &Kernel, k2: &Kernel) -> Self {
        let (e1, e2) = (k1.eval.clone(), k2.eval.clone());
        Self {
            eval: Arc::new(move |x, y| Ok(e1(x, y)? * e2(x, y)?)),
            domain: k1.domain,
            provenance: Provenance::Product(Box::new(k1.provenance.clone()), Box::new(k2.provenance.clone())),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let e = self.eval.clone();
        Self {
            eval: Arc::new(move |x, y| Ok(c * e(x, y)?)),
            domain: self.domain,
            provenance: Provenance::Scale(c, Box::new(self.provenance.clone())),
        }
    }

    pub fn exp(&self) -> Self {
        let e = self.eval.clone();
        Self {
            eval: Arc::new(move |x, y| Ok(e(x, y)?.exp())),
            domain: self.domain,
            provenance: Provenance::Exp(Box::new(self.provenance.clone())),
        }
    }

    /// `(x, y) ↦ k(g(x), g(y))`; `g` maps `ℝ^d` into the domain of `k`.
    pub fn pullback(&self, label: impl Into<String>, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        let e = self.eval.clone();
        Self {
            eval: Arc::new(move |x, y| e(&g(x), &g(y))),
            domain: Domain::Euclidean,
            provenance: Provenance::Pullback(label.into(), Box::new(self.provenance.clone())),
        }
    }
}

/// Gram matrix `G[i][j] = k(x_i, x_j)`.
///
/// Both triangles are evaluated; an asymmetry above `1e-10` (relative to
/// `max(1, max|G|)`) is an error, otherwise the result is symmetrized.
pub fn gram(k: &Kernel, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::precondition("gram needs at least one point"));
    }
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = k.eval(&points[i], &points[j]).map_err(|e| match e {
                Error::Domain(m) => Error::Domain(format!("at pair ({i}, {j}): {m}")),
                Error::Numeric(m) => Error::Numeric(format!("at pair ({i}, {j}): {m}")),
                other => other,
            })?;
            if !g[(i, j)].is_finite() {
                return Err(Error::numeric(format!("kernel is not finite at pair ({i}, {j})")));
            }
        }
    }
    let scale = g.amax().max(1.0);
    let mut worst: (f64, usize, usize) = (0.0, 0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (g[(i, j)] - g[(j, i)]).abs();
            if a > worst.0 {
                worst = (a, i, j);
            }
        }
    }
    if worst.0 > 1e-10 * scale {
        return Err(Error::numeric(format!(
            "kernel is not symmetric: |k(x{0},x{1}) - k(x{1},x{0})| = {2:e}",
            worst.1, worst.2, worst.0
        )));
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// Rows form an orthonormal basis of `{c : Σ c_j = 0}` (Helmert contrasts).
pub fn zero_sum_basis(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n.saturating_sub(1), n);
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for j in 0..k {
            q[(k - 1, j)] = 1.0 / norm;
        }
        q[(k - 1, k)] = -(k as f64) / norm;
    }
    q
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pd,
    Psd,
    Nd,
    Indefinite,
}

/// Outcome of a randomized Gram test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GramReport {
    pub kernel: String,
    pub n: usize,
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    /// Smallest Gram eigenvalue over all trials.
    pub min_eigenvalue: f64,
    /// Extreme eigenvalues of the Gram form restricted to zero-sum vectors.
    pub min_zero_sum_eigenvalue: f64,
    pub max_zero_sum_eigenvalue: f64,
    /// Largest `1e-9·n·max|G|` over trials.
    pub tol: f64,
    pub verdict: Verdict,
    /// Trial whose extreme eigenvalue decided the verdict.
    pub worst_trial: usize,
    /// Point set of that trial.
    pub points: Vec<Vec<f64>>,
}

impl GramReport {
    /// Positive semidefinite on every sample (strictly or up to tolerance).
    pub fn passed_pd(&self) -> bool {
        matches!(self.verdict, Verdict::Pd | Verdict::Psd)
    }

    pub fn passed_nd(&self) -> bool {
        self.verdict == Verdict::Nd
    }
}

struct TrialStats {
    min_eig: f64,
    min_zs: f64,
    max_zs: f64,
    tol: f64,
    points: Vec<Vec<f64>>,
}

/// Sample `n` points: standard Gaussian in `ℝ^d`, or `|N(0,1)|` scalars on
/// the half-line.
pub fn sample_points(domain: Domain, d: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| match domain {
            Domain::Euclidean => (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            Domain::HalfLine => vec![rng.sample::<f64, _>(StandardNormal).abs()],
        })
        .collect()
}

fn run_trial(k: &Kernel, d: usize, n: usize, seed: u64, trial: usize) -> Result<TrialStats> {
    let mut rng = rng::stream(seed, trial as u64, Purpose::Trial);
    let points = sample_points(k.domain, d, n, &mut rng);
    let g = gram(k, &points)?;
    let tol = 1e-9 * n as f64 * g.amax();
    let min_eig = SymmetricEigen::new(g.clone()).eigenvalues.min();
    let q = zero_sum_basis(n);
    let zs = SymmetricEigen::new(&q * g * q.transpose()).eigenvalues;
    Ok(TrialStats { min_eig, min_zs: zs.min(), max_zs: zs.max(), tol, points })
}

fn run_trials(k: &Kernel, d: usize, n: usize, trials: usize, seed: u64) -> Result<Vec<TrialStats>> {
    if n < 2 {
        return Err(Error::precondition(format!("Gram tests need n >= 2, got {n}")));
    }
    if trials == 0 {
        return Err(Error::precondition("Gram tests need at least one trial"));
    }
    (0..trials).into_par_iter().map(|t| run_trial(k, d, n, seed, t)).collect()
}

fn report(
    k: &Kernel,
    d: usize,
    n: usize,
    seed: u64,
    stats: Vec<TrialStats>,
    verdict: Verdict,
    worst: usize,
) -> GramReport {
    GramReport {
        kernel: k.provenance.to_string(),
        n,
        trials: stats.len(),
        dim: if k.domain == Domain::HalfLine { 1 } else { d },
        seed,
        min_eigenvalue: stats.iter().map(|s| s.min_eig).fold(f64::INFINITY, f64::min),
        min_zero_sum_eigenvalue: stats.iter().map(|s| s.min_zs).fold(f64::INFINITY, f64::min),
        max_zero_sum_eigenvalue: stats.iter().map(|s| s.max_zs).fold(f64::NEG_INFINITY, f64::max),
        tol: stats.iter().map(|s| s.tol).fold(0.0, f64::max),
        verdict,
        worst_trial: worst,
        points: stats[worst].points.clone(),
    }
}

/// Randomized positive-definiteness test.
///
/// Verdict `pd` when every trial's smallest eigenvalue exceeds its tolerance,
/// `psd` when some trial lands within `±tol`, `indefinite` otherwise.
pub fn test_pd(k: &Kernel, d: usize, n: usize, trials: usize, seed: u64) -> Result<GramReport> {
    let stats = run_trials(k, d, n, trials, seed)?;
    let worst = (0..stats.len())
        .min_by(|&a, &b| {
            (stats[a].min_eig / stats[a].tol.max(f64::MIN_POSITIVE))
                .total_cmp(&(stats[b].min_eig / stats[b].tol.max(f64::MIN_POSITIVE)))
        })
        .unwrap_or(0);
    let verdict = if stats.iter().all(|s| s.min_eig > s.tol) {
        Verdict::Pd
    } else if stats.iter().all(|s| s.min_eig >= -s.tol) {
        Verdict::Psd
    } else {
        Verdict::Indefinite
    };
    Ok(report(k, d, n, seed, stats, verdict, worst))
}

/// Randomized negative-definiteness test on the zero-sum subspace.
pub fn test_nd(k: &Kernel, d: usize, n: usize, trials: usize, seed: u64) -> Result<GramReport> {
    let stats = run_trials(k, d, n, trials, seed)?;
    let worst = (0..stats.len())
        .max_by(|&a, &b| (stats[a].max_zs - stats[a].tol).total_cmp(&(stats[b].max_zs - stats[b].tol)))
        .unwrap_or(0);
    let verdict = if stats.iter().all(|s| s.max_zs <= s.tol) { Verdict::Nd } else { Verdict::Indefinite };
    Ok(report(k, d, n, seed, stats, verdict, worst))
}

/// `ψ(x, x₀) + ψ(y, x₀) − ψ(x, y)`.
pub fn transform_triangle(psi: &Kernel, x0: Vec<f64>) -> Kernel {
    let e = psi.eval.clone();
    Kernel {
        eval: Arc::new(move |x, y| Ok(e(x, &x0)? + e(y, &x0)? - e(x, y)?)),
        domain: psi.domain,
        provenance: Provenance::TpnTriangle(Box::new(psi.provenance.clone())),
    }
}

/// `ψ(x, x₀) + ψ(y, x₀) − ψ(x, y) − ψ(x₀, x₀)`.
pub fn transform_box(psi: &Kernel, x0: Vec<f64>) -> Kernel {
    let e = psi.eval.clone();
    Kernel {
        eval: Arc::new(move |x, y| Ok(e(x, &x0)? + e(y, &x0)? - e(x, y)? - e(&x0, &x0)?)),
        domain: psi.domain,
        provenance: Provenance::TpnBox(Box::new(psi.provenance.clone())),
    }
}

/// `test_pd` of `exp(−tψ)` for each `t`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchoenbergReport {
    pub entries: Vec<(f64, GramReport)>,
    pub failures: Vec<f64>,
}

pub fn schoenberg_check(
    psi: &Kernel,
    t_list: &[f64],
    d: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<SchoenbergReport> {
    let mut entries = Vec::with_capacity(t_list.len());
    let mut failures = Vec::new();
    for &t in t_list {
        if !(t > 0.0) {
            return Err(Error::precondition(format!("schoenberg_check needs t > 0, got {t}")));
        }
        let r = test_pd(&psi.scale(-t).exp(), d, n, trials, seed)?;
        if !r.passed_pd() {
            failures.push(t);
        }
        entries.push((t, r));
    }
    Ok(SchoenbergReport { entries, failures })
}

/// `(ψ^α, log(1 + ψ))`, both negative definite when `ψ` is and `ψ(x,x) ≥ 0`.
/// Evaluating `ψ^α` where `ψ < 0` is a domain error.
pub fn power_and_log(psi: &Kernel, alpha: f64) -> Result<(Kernel, Kernel)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("power_and_log needs alpha in (0, 1), got {alpha}")));
    }
    let e = psi.eval.clone();
    let power = Kernel {
        eval: Arc::new(move |x, y| {
            let v = e(x, y)?;
            if v < 0.0 {
                return Err(Error::domain(format!("psi = {v} < 0 has no real power {alpha}")));
            }
            Ok(v.powf(alpha))
        }),
        domain: psi.domain,
        provenance: Provenance::Power(alpha, Box::new(psi.provenance.clone())),
    };
    let e = psi.eval.clone();
    let log = Kernel {
        eval: Arc::new(move |x, y| {
            let v = e(x, y)?;
            if v <= -1.0 {
                return Err(Error::domain(format!("log(1 + psi) undefined for psi = {v}")));
            }
            Ok(v.ln_1p())
        }),
        domain: psi.domain,
        provenance: Provenance::Log1p(Box::new(psi.provenance.clone())),
    };
    Ok((power, log))
}

/// `z^γ` through `γ/Γ(1−γ) ∫₀^∞ (1 − e^{−λz}) λ^{−γ−1} dλ`.
///
/// On `[0, 1]` the substitution `λ = w^p`, `p = 1/(1−γ)`, removes the
/// endpoint singularity. On `[1, ∞)` the substitution `λ = e^s` is integrated
/// until `z e^s ≥ 50`, after which the integrand is `e^{−γs}` to double
/// precision and the remainder is added in closed form.
pub fn gamma_representation(z: f64, gamma: f64, opts: QuadOptions) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::domain(format!("gamma_representation needs z > 0, got {z}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("gamma_representation needs gamma in (0, 1), got {gamma}")));
    }
    let p = 1.0 / (1.0 - gamma);
    let head = quad::integrate(
        |w: f64| {
            if w == 0.0 {
                return p * z;
            }
            let wp = w.powf(p);
            -p * (-z * wp).exp_m1() / wp
        },
        0.0,
        1.0,
        opts,
    )?;
    let s_max = (50.0 / z).ln().max(0.0);
    let body = quad::integrate(|s: f64| -(-z * s.exp()).exp_m1() * (-gamma * s).exp(), 0.0, s_max, opts)?;
    let tail = (-gamma * s_max).exp() / gamma;
    let c = gamma / statrs::function::gamma::gamma(1.0 - gamma);
    Ok(c * (head.value + body.value + tail))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub triples: usize,
    /// Largest `d(x,z) − d(x,y) − d(y,z)` seen, with `d = √ψ`.
    pub worst_violation: f64,
    pub pass: bool,
}

/// Triangle inequality of `√ψ` over all ordered triples of `points`.
pub fn metric_check(psi: &Kernel, points: &[Vec<f64>]) -> Result<MetricReport> {
    let n = points.len();
    let mut dm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let v = psi.eval(&points[i], &points[j])?;
            if v < -1e-12 {
                return Err(Error::precondition(format!("psi({i},{j}) = {v} < 0 has no square root")));
            }
            if i != j && v <= 0.0 && points[i] != points[j] {
                return Err(Error::precondition(format!(
                    "psi vanishes off the diagonal at distinct points {i}, {j}: zero set too large for a metric"
                )));
            }
            dm[i][j] = v.max(0.0).sqrt();
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                worst = worst.max(dm[i][k] - dm[i][j] - dm[j][k]);
            }
        }
    }
    Ok(MetricReport { triples: n * n * n, worst_violation: worst, pass: worst <= 1e-12 })
}

/// `∑ w_i w_j k(x_i, x_j)` on a tensor Gauss–Hermite grid: the quadrature
/// value of `∬ k(u,v) w(u) w(v) du dv` for the standard Gaussian weight.
pub fn gaussian_double_integral(k: &Kernel, d: usize, nodes: usize) -> Result<f64> {
    let (x, w) = quad::gauss_hermite_probabilists(nodes);
    let total = nodes.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    let mut wts = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut p = Vec::with_capacity(d);
        let mut wt = 1.0;
        for _ in 0..d {
            p.push(x[rem % nodes]);
            wt *= w[rem % nodes];
            rem /= nodes;
        }
        pts.push(p);
        wts.push(wt);
    }
    let mut s = 0.0;
    for i in 0..total {
        for j in 0..total {
            s += wts[i] * wts[j] * k.eval(&pts[i], &pts[j])?;
        }
    }
    Ok(s)
}

/// Leading principal minors of a Gram matrix.
pub fn leading_minors(g: &DMatrix<f64>) -> Vec<f64> {
    (1..=g.nrows()).map(|k| g.view((0, 0), (k, k)).determinant()).collect()
}

/// JSON description of a kernel for the `pdtest` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    InnerProduct,
    Gaussian { length: f64 },
    RadialPower { exponent: f64 },
    ShiftedSquare { a: f64 },
    Potential { potential: PotentialSpec },
    PowerGap { gamma: f64 },
    HalfLineSum,
    Sum { c1: f64, k1: Box<KernelSpec>, c2: f64, k2: Box<KernelSpec> },
    Product { k1: Box<KernelSpec>, k2: Box<KernelSpec> },
    Exp { kernel: Box<KernelSpec> },
    Scale { c: f64, kernel: Box<KernelSpec> },
    Triangle { psi: Box<KernelSpec>, x0: Vec<f64> },
    Box { psi: Box<KernelSpec>, x0: Vec<f64> },
    Power { alpha: f64, psi: Box<KernelSpec> },
    Log1p { psi: Box<KernelSpec> },
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        Ok(match self {
            KernelSpec::InnerProduct => Kernel::inner_product(),
            KernelSpec::Gaussian { length } => Kernel::gaussian(*length),
            KernelSpec::RadialPower { exponent } => Kernel::radial_power(*exponent),
            KernelSpec::ShiftedSquare { a } => Kernel::shifted_square(*a),
            KernelSpec::Potential { potential } => Kernel::from_potential(Potential::from_spec(potential)?),
            KernelSpec::PowerGap { gamma } => Kernel::power_gap(*gamma),
            KernelSpec::HalfLineSum => Kernel::half_line_sum(),
            KernelSpec::Sum { c1, k1, c2, k2 } => Kernel::sum(*c1, &k1.build()?, *c2, &k2.build()?),
            KernelSpec::Product { k1, k2 } => Kernel::product(&k1.build()?, &k2.build()?),
            KernelSpec::Exp { kernel } => kernel.build()?.exp(),
            KernelSpec::Scale { c, kernel } => kernel.build()?.scale(*c),
            KernelSpec::Triangle { psi, x0 } => transform_triangle(&psi.build()?, x0.clone()),
            KernelSpec::Box { psi, x0 } => transform_box(&psi.build()?, x0.clone()),
            KernelSpec::Power { alpha, psi } => power_and_log(&psi.build()?, *alpha)?.0,
            KernelSpec::Log1p { psi } => power_and_log(&psi.build()?, 0.5)?.1,
        })
    }
}

/// One line of the appendix property suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub kernel: String,
    pub passed: bool,
    pub detail: String,
}

fn entry_from(name: &str, r: &GramReport, passed: bool) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        kernel: r.kernel.clone(),
        passed,
        detail: format!(
            "verdict={:?} min_eig={:.3e} max_zero_sum={:.3e} tol={:.1e}",
            r.verdict, r.min_eigenvalue, r.max_zero_sum_eigenvalue, r.tol
        ),
    }
}

/// Randomized checks of the closure properties of positive and negative
/// definite kernels: sums, products, exponentials, pullbacks, rank-one and
/// inner-product kernels, integrals against a Gaussian weight, principal
/// minors, the `D△`/`D□` transforms, Schoenberg's exponential criterion,
/// powers and logarithms, the square-root metric, and the power-gap kernel
/// on the half-line and its pullbacks.
///
/// Random ingredients (coefficients, bandwidths, pullback maps) are drawn
/// from `seed`, so different seeds test different constructions.
pub fn appendix_suite(d: usize, n: usize, trials: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = rng::stream(seed, u64::MAX, Purpose::Sampling);
    let c1: f64 = rng.random_range(0.0..3.0);
    let c2: f64 = rng.random_range(0.0..3.0);
    let ell: f64 = rng.random_range(0.5..2.0);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let a: f64 = rng.random_range(0.1..2.0);
    let theta: f64 = rng.random_range(1.05..2.0);
    let gamma: f64 = rng.random_range(0.55..0.95);
    let alpha: f64 = rng.random_range(0.1..0.95);

    let gauss = Kernel::gaussian(ell);
    let inner = Kernel::inner_product();
    let mut out = Vec::new();
    let mut pd = |name: &str, k: &Kernel| -> Result<()> {
        let r = test_pd(k, d, n, trials, seed)?;
        out.push(entry_from(name, &r, r.passed_pd()));
        Ok(())
    };

    pd("t52.1 nonnegative combination", &Kernel::sum(c1, &gauss, c2, &inner))?;
    pd("t52.2 product", &Kernel::product(&gauss, &inner))?;
    pd("t52.3 exponential", &inner.scale(0.5).exp())?;
    let mix2 = mix.clone();
    let shift2 = shift.clone();
    let g = move |x: &[f64]| -> Vec<f64> {
        (0..x.len())
            .map(|i| (0..x.len()).map(|j| mix2[i * x.len() + j] * x[j]).sum::<f64>().sin() + shift2[i])
            .collect()
    };
    pd("t52.4 pullback", &gauss.pullback("sin(Mx)+b", g))?;
    pd("t52.5 inner product", &inner)?;
    let sh = shift.clone();
    pd("t52.6 rank one", &Kernel::rank_one("f", move |x| (dot(x, &sh)).cos() + x[0]))?;

    let phi0 = Potential::power_shifted(a, theta, gamma)?;
    let psi0 = Kernel::from_potential(phi0);
    pd("tpn triangle of Phi0", &transform_triangle(&psi0, vec![0.0; d]))?;
    pd("tpn box of Phi0", &transform_box(&psi0, shift.clone()))?;
    pd("l22 power gap", &Kernel::power_gap(gamma))?;
    pd("l23 pullback of power gap", &Kernel::power_gap(gamma).pullback("|x|^2", |x| vec![dot(x, x)]))?;

    // Integral against a Gaussian weight, on the product kernel.
    let k7 = Kernel::product(&gauss, &Kernel::sum(1.0, &inner, 1.0, &Kernel::rank_one("1", |_| 1.0)));
    let v = gaussian_double_integral(&k7, d.min(2), 8)?;
    out.push(SuiteEntry {
        name: "t52.7 integral".into(),
        kernel: k7.provenance.to_string(),
        passed: v >= -1e-8,
        detail: format!("double integral = {v:.6e}"),
    });

    // Principal minors.
    let mut worst_minor = f64::INFINITY;
    for t in 0..trials {
        let mut r = rng::stream(seed, t as u64, Purpose::Trial);
        let pts = sample_points(Domain::Euclidean, d, n, &mut r);
        let g = gram(&gauss, &pts)?;
        let scale = n as f64 * g.amax();
        for (k, m) in leading_minors(&g).into_iter().enumerate() {
            worst_minor = worst_minor.min(m / (1e-9 * scale.powi(k as i32 + 1)));
        }
    }
    out.push(SuiteEntry {
        name: "pdm leading minors".into(),
        kernel: gauss.provenance.to_string(),
        passed: worst_minor >= -1.0,
        detail: format!("min minor / tolerance = {worst_minor:.3e}"),
    });

    let mut nd = |name: &str, k: &Kernel| -> Result<()> {
        let r = test_nd(k, d, n, trials, seed)?;
        out.push(entry_from(name, &r, r.passed_nd()));
        Ok(())
    };
    nd("tpn nd of Phi0", &psi0)?;
    let (pw, lg) = power_and_log(&Kernel::shifted_square(a), alpha)?;
    nd("t54 power", &pw)?;
    nd("t54 log", &lg)?;
    nd("t54 power of x+y", &power_and_log(&Kernel::half_line_sum(), gamma)?.0)?;

    let sch = schoenberg_check(&Kernel::radial_power(theta), &[0.1, 1.0, 10.0], d, n, trials, seed)?;
    out.push(SuiteEntry {
        name: "t53 schoenberg".into(),
        kernel: format!("exp(-t |x-y|^{theta})"),
        passed: sch.failures.is_empty(),
        detail: format!("failing t: {:?}", sch.failures),
    });

    let mut r = rng::stream(seed, 0, Purpose::Sampling);
    let pts = sample_points(Domain::Euclidean, d, n.min(12), &mut r);
    let m = metric_check(&Kernel::radial_power(theta), &pts)?;
    out.push(SuiteEntry {
        name: "t55 metric".into(),
        kernel: format!("sqrt(|x-y|^{theta})"),
        passed: m.pass,
        detail: format!("{} triples, worst violation {:.3e}", m.triples, m.worst_violation),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn randn(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 0, Purpose::Sampling);
        sample_points(Domain::Euclidean, d, n, &mut r)
    }

    #[test]
    fn gram_examples() {
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let g = gram(&Kernel::inner_product(), &basis).unwrap();
        assert_eq!(g, DMatrix::identity(3, 3));

        let g = gram(&Kernel::power_gap(0.5), &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(g[(0, 0)], 0.0);
        assert_eq!(g[(0, 1)], 0.0);
        assert!((g[(1, 1)] - (2.0 - 2f64.sqrt())).abs() < 1e-15);

        let f = |x: &[f64]| x[0] * x[0] - x[1];
        let pts = randn(3, 6, 2);
        let g = gram(&Kernel::rank_one("f", f), &pts).unwrap();
        let fv = DMatrix::from_fn(6, 1, |i, _| f(&pts[i]));
        assert!((g - &fv * fv.transpose()).amax() < 1e-14);
    }

    #[test]
    fn gram_rejects_asymmetric_kernels() {
        let k = Kernel::new("x0", Domain::Euclidean, |x, _| Ok(x[0]));
        let err = gram(&k, &[vec![0.0], vec![1.0]]).unwrap_err();
        assert!(err.to_string().contains("not symmetric"));
    }

    #[test]
    fn gram_propagates_the_offending_pair() {
        let err = gram(&Kernel::power_gap(0.5), &[vec![0.0], vec![-1.0]]).unwrap_err();
        assert!(err.to_string().contains("pair (0, 1)"), "{err}");
    }

    #[test]
    fn helmert_rows_are_orthonormal_and_zero_sum() {
        let q = zero_sum_basis(7);
        assert!((&q * q.transpose() - DMatrix::identity(6, 6)).amax() < 1e-14);
        for row in q.row_iter() {
            assert!(row.sum().abs() < 1e-14);
        }
    }

    #[test]
    fn pd_examples() {
        let inner = Kernel::inner_product();
        assert!(test_pd(&inner.exp(), 3, 30, 20, 1).unwrap().passed_pd());
        let d =
            transform_triangle(&Kernel::from_potential(Potential::power_shifted(1.0, 1.5, 0.8).unwrap()), vec![0.0; 2]);
        assert!(test_pd(&d, 2, 30, 20, 1).unwrap().passed_pd());
        let k = Kernel::product(&Kernel::gaussian(1.0), &inner.exp());
        assert!(test_pd(&k, 3, 30, 20, 1).unwrap().passed_pd());
        // ⟨u,v⟩ in ℝ³ has rank 3 < n.
        assert_eq!(test_pd(&inner, 3, 30, 5, 1).unwrap().verdict, Verdict::Psd);
        assert_eq!(test_pd(&inner.scale(-1.0), 3, 30, 5, 1).unwrap().verdict, Verdict::Indefinite);
    }

    #[test]
    fn nd_examples() {
        assert!(test_nd(&Kernel::shifted_square(0.7), 3, 30, 20, 2).unwrap().passed_nd());
        for theta in [0.3, 1.0, 1.7, 2.0] {
            assert!(test_nd(&Kernel::radial_power(theta), 2, 30, 20, 2).unwrap().passed_nd());
        }
        let phi0 = Kernel::from_potential(Potential::power_shifted(0.5, 1.2, 0.9).unwrap());
        assert!(test_nd(&phi0, 3, 30, 20, 2).unwrap().passed_nd());
        assert!(!test_nd(&Kernel::radial_power(3.0), 3, 30, 20, 2).unwrap().passed_nd());
    }

    #[test]
    fn zero_sum_identity_for_shifted_square() {
        let a = 1.3;
        let k = Kernel::shifted_square(a);
        for s in 0..100 {
            let pts = randn(s, 8, 3);
            let mut r = rng::stream(s, 1, Purpose::Sampling);
            let mut c: Vec<f64> = (0..8).map(|_| r.sample(StandardNormal)).collect();
            let mean = c.iter().sum::<f64>() / 8.0;
            c.iter_mut().for_each(|v| *v -= mean);
            let g = gram(&k, &pts).unwrap();
            let cv = DMatrix::from_column_slice(8, 1, &c);
            let form = (cv.transpose() * g * &cv)[(0, 0)];
            let s_vec: Vec<f64> = (0..3).map(|i| c.iter().zip(&pts).map(|(c, p)| c * p[i]).sum()).collect();
            let want = -2.0 * dot(&s_vec, &s_vec);
            assert!((form - want).abs() < 1e-10, "{form} vs {want}");
        }
    }

    #[test]
    fn transform_expansions() {
        let a = 0.9;
        let tri = transform_triangle(&Kernel::shifted_square(a), vec![0.0; 3]);
        let bx = transform_box(&Kernel::shifted_square(a), vec![0.0; 3]);
        let sq = transform_triangle(&Kernel::radial_power(2.0), vec![0.0; 3]);
        let pts = randn(11, 200, 3);
        for pair in pts.chunks(2) {
            let (u, v) = (&pair[0], &pair[1]);
            assert!((sq.eval(u, v).unwrap() - 2.0 * dot(u, v)).abs() < 1e-12);
            assert!((bx.eval(u, v).unwrap() - 2.0 * dot(u, v)).abs() < 1e-12);
            assert!((tri.eval(u, v).unwrap() - a - 2.0 * dot(u, v)).abs() < 1e-12);
        }
        assert!(test_pd(&tri, 3, 30, 20, 4).unwrap().passed_pd());
    }

    #[test]
    fn schoenberg_examples() {
        let r = schoenberg_check(&Kernel::radial_power(2.0), &[0.1, 1.0, 10.0], 2, 30, 10, 5).unwrap();
        assert!(r.failures.is_empty());
        let r = schoenberg_check(&Kernel::radial_power(1.5), &[1.0], 3, 30, 10, 5).unwrap();
        assert!(r.failures.is_empty());
        let r = schoenberg_check(&Kernel::inner_product().scale(-1.0), &[0.1, 1.0], 3, 20, 10, 5).unwrap();
        assert!(r.failures.is_empty());
        assert!(schoenberg_check(&Kernel::radial_power(2.0), &[0.0], 2, 10, 1, 5).is_err());
    }

    #[test]
    fn power_and_log_examples() {
        let (p, l) = power_and_log(&Kernel::radial_power(2.0), 0.6).unwrap();
        let pts = randn(6, 10, 2);
        for u in &pts {
            for v in &pts {
                assert!((p.eval(u, v).unwrap() - dist(u, v).powf(1.2)).abs() < 1e-12);
            }
        }
        assert!(test_nd(&p, 2, 30, 20, 6).unwrap().passed_nd());
        assert!(test_nd(&l, 2, 30, 20, 6).unwrap().passed_nd());
        let (p, _) = power_and_log(&Kernel::half_line_sum(), 0.4).unwrap();
        assert!(test_nd(&p, 1, 30, 20, 6).unwrap().passed_nd());
        let (neg, _) = power_and_log(&Kernel::inner_product(), 0.5).unwrap();
        assert!(matches!(neg.eval(&[1.0], &[-1.0]), Err(Error::Domain(_))));
        assert!(power_and_log(&Kernel::inner_product(), 1.5).is_err());
    }

    #[test]
    fn gamma_identity_examples() {
        let o = QuadOptions::default();
        assert!((gamma_representation(1.0, 0.5, o).unwrap() - 1.0).abs() < 1e-6);
        assert!((gamma_representation(4.0, 0.5, o).unwrap() - 2.0).abs() < 1e-6);
        assert!((gamma_representation(2.5, 0.7, o).unwrap() - 2.5f64.powf(0.7)).abs() < 1e-6);
        assert!(gamma_representation(0.0, 0.5, o).is_err());
        let tight = QuadOptions { abs_tol: 0.0, rel_tol: 1e-300, max_intervals: 4 };
        assert!(matches!(gamma_representation(2.0, 0.5, tight), Err(Error::Quadrature { .. })));
    }

    #[test]
    fn metric_examples() {
        let pts = randn(8, 10, 3);
        let m = metric_check(&Kernel::radial_power(2.0), &pts).unwrap();
        assert!(m.pass && m.triples == 1000);
        assert!(metric_check(&Kernel::radial_power(1.5), &pts).unwrap().pass);
        let zero = Kernel::radial("zero", |_| 0.0);
        assert!(matches!(metric_check(&zero, &pts), Err(Error::Precondition(_))));
    }

    #[test]
    fn suite_passes_for_a_seed() {
        for e in appendix_suite(3, 30, 5, 9).unwrap() {
            assert!(e.passed, "{} failed: {}", e.name, e.detail);
        }
    }

    #[test]
    fn kernel_spec_parses() {
        let json = r#"{"kind":"triangle","psi":{"kind":"potential","potential":{"family":"power_shifted","a":1.0,"theta":1.5,"gamma":0.8}},"x0":[0.0]}"#;
        let k = serde_json::from_str::<KernelSpec>(json).unwrap().build().unwrap();
        assert!(test_pd(&k, 1, 20, 5, 1).unwrap().passed_pd());
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"gaussian"}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn closure_under_sum_product_exp_pullback(
            c1 in 0.0f64..5.0, c2 in 0.0f64..5.0, l1 in 0.3f64..3.0, l2 in 0.3f64..3.0,
            w in proptest::collection::vec(-2.0f64..2.0, 4), seed in 0u64..1000,
        ) {
            let k1 = Kernel::gaussian(l1);
            let k2 = Kernel::product(&Kernel::gaussian(l2), &Kernel::inner_product().scale(0.3).exp());
            prop_assert!(test_pd(&Kernel::sum(c1, &k1, c2, &k2), 2, 20, 3, seed).unwrap().passed_pd());
            prop_assert!(test_pd(&Kernel::product(&k1, &k2), 2, 20, 3, seed).unwrap().passed_pd());
            prop_assert!(test_pd(&k1.scale(c1).exp(), 2, 20, 3, seed).unwrap().passed_pd());
            let f = move |x: &[f64]| vec![(w[0] * x[0] + w[1] * x[1]).tanh(), w[2] * x[0] * x[1] + w[3]];
            prop_assert!(test_pd(&k2.pullback("f", f), 2, 20, 3, seed).unwrap().passed_pd());
        }

        #[test]
        fn principal_minors_are_nonnegative(l in 0.5f64..2.0, seed in 0u64..1000) {
            let pts = randn(seed, 10, 2);
            let g = gram(&Kernel::gaussian(l), &pts).unwrap();
            let scale = 10.0 * g.amax();
            for (k, m) in leading_minors(&g).into_iter().enumerate() {
                prop_assert!(m >= -1e-9 * scale.powi(k as i32 + 1));
            }
        }

        #[test]
        fn gaussian_integral_of_pd_kernels_is_nonnegative(l in 0.3f64..3.0, c in 0.0f64..2.0) {
            let k = Kernel::sum(1.0, &Kernel::gaussian(l), c, &Kernel::inner_product());
            prop_assert!(gaussian_double_integral(&k, 2, 6).unwrap() >= -1e-8);
        }

        #[test]
        fn gamma_identity_grid(zi in 0usize..5, gi in 0usize..3) {
            let z = [0.1, 0.5, 1.0, 3.0, 10.0][zi];
            let g = [0.3, 0.5, 0.9][gi];
            let v = gamma_representation(z, g, QuadOptions::default()).unwrap();
            prop_assert!((v - z.powf(g)).abs() < 1e-6);
        }

        #[test]
        fn triangle_of_radial_power_is_pd(theta in 0.1f64..2.0, seed in 0u64..1000) {
            let k = transform_triangle(&Kernel::radial_power(theta), vec![0.0, 0.0]);
            prop_assert!(test_pd(&k, 2, 20, 3, seed).unwrap().passed_pd());
        }

        #[test]
        fn power_gap_pullbacks_are_pd(gamma in 0.05f64..0.95, s in 0.1f64..3.0, seed in 0u64..1000) {
            let k = Kernel::power_gap(gamma).pullback("s|x|", move |x| vec![s * dot(x, x).sqrt()]);
            prop_assert!(test_pd(&k, 3, 20, 3, seed).unwrap().passed_pd());
        }
    }
}
