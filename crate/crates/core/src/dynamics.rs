//! Particle dynamics `dX = −∇J_Φ(X) dt + dB` with
//! `J_Φ(X) = (1/2N) Σ_{i,j} Φ(|X_i − X_j|)`, in three coordinate systems:
//!
//! * full space `X ∈ ℝ^{dN}`;
//! * relative coordinates `r = (X₁ − X₂, …, X₁ − X_N)`, which solve the
//!   gradient-type system `dr = −A∇H(r) dt + S dW`;
//! * `Y = S⁻¹ r`, which solves `dY = −Sᵀ∇H(SY) dt + dW`.
//!
//! `A` has `2I_d` diagonal blocks and `I_d` off-diagonal blocks and `S` is
//! its explicit lower-triangular square root. The relative process has
//! invariant density proportional to `exp(−2H(r))`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::potentials::{Potential, PotentialSpec};
use crate::rng::{self, Purpose};

/// The matrices `A` and `S = chol-like root of A` for `N` particles in `ℝ^d`.
#[derive(Clone, Debug)]
pub struct RelativeFrame {
    pub n: usize,
    pub d: usize,
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    /// `(N−1)×(N−1)` scalar pattern of `S`; `S = s_blocks ⊗ I_d`.
    pub s_blocks: DMatrix<f64>,
}

/// Builds the relative frame.
///
/// Block `(i, i)` of `S` (0-based) is `√((i+2)/(i+1))` and block `(i, j)`
/// for `j < i` is `√(1/((j+2)(j+1)))`.
pub fn build_frame(n: usize, d: usize) -> Result<RelativeFrame> {
    if n < 2 || d == 0 {
        return Err(Error::precondition(format!("a relative frame needs N >= 2 and d >= 1, got N={n}, d={d}")));
    }
    let m = n - 1;
    let blocks = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            ((i + 2) as f64 / (i + 1) as f64).sqrt()
        } else if j < i {
            (1.0 / ((j + 2) * (j + 1)) as f64).sqrt()
        } else {
            0.0
        }
    });
    let s = kron_identity(&blocks, d);
    let a = &s * s.transpose();
    let literal = DMatrix::from_fn(m * d, m * d, |i, j| {
        if i % d != j % d {
            0.0
        } else if i / d == j / d {
            2.0
        } else {
            1.0
        }
    });
    let gap = (&a - &literal).amax();
    if gap > 1e-12 {
        return Err(Error::numeric(format!("S Sᵀ deviates from A by {gap:e}")));
    }
    let s_inv = s
        .clone()
        .solve_lower_triangular(&DMatrix::identity(m * d, m * d))
        .ok_or_else(|| Error::numeric("S is singular"))?;
    Ok(RelativeFrame { n, d, a: literal, s, s_inv, s_blocks: blocks })
}

fn kron_identity(b: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(b.nrows() * d, b.ncols() * d, |i, j| if i % d == j % d { b[(i / d, j / d)] } else { 0.0 })
}

impl RelativeFrame {
    /// Dimension `d(N−1)` of the relative coordinates.
    pub fn dim(&self) -> usize {
        (self.n - 1) * self.d
    }

    /// Eigenvalues of `A`, ascending.
    pub fn a_spectrum(&self) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(self.a.clone()).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    /// `r_j = X₁ − X_{j+1}`.
    pub fn full_to_relative(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        (1..self.n).flat_map(|j| (0..d).map(move |k| x[k] - x[j * d + k])).collect()
    }

    /// The representative with `X₁ = 0`.
    pub fn relative_to_full(&self, r: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n * self.d];
        for (k, v) in r.iter().enumerate() {
            x[self.d + k] = -v;
        }
        x
    }

    pub fn relative_to_y(&self, r: &[f64]) -> Vec<f64> {
        mat_vec(&self.s_inv, r)
    }

    pub fn y_to_relative(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.apply_s(y, &mut out);
        out
    }

    /// `out = S·v` using the block pattern.
    fn apply_s(&self, v: &[f64], out: &mut [f64]) {
        let (m, d) = (self.n - 1, self.d);
        for i in 0..m {
            for k in 0..d {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += self.s_blocks[(i, j)] * v[j * d + k];
                }
                out[i * d + k] = acc;
            }
        }
    }

    /// `out = Sᵀ·v`.
    fn apply_s_t(&self, v: &[f64], out: &mut [f64]) {
        let (m, d) = (self.n - 1, self.d);
        for j in 0..m {
            for k in 0..d {
                let mut acc = 0.0;
                for i in j..m {
                    acc += self.s_blocks[(i, j)] * v[i * d + k];
                }
                out[j * d + k] = acc;
            }
        }
    }

    /// `out = A·v`, using `(A v)_i = v_i + Σ_j v_j`.
    fn apply_a(&self, v: &[f64], out: &mut [f64]) {
        let (m, d) = (self.n - 1, self.d);
        for k in 0..d {
            let total: f64 = (0..m).map(|j| v[j * d + k]).sum();
            for i in 0..m {
                out[i * d + k] = v[i * d + k] + total;
            }
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `φ(r)` with the continuous extension of `φ(r)·x` by zero at `r = 0`.
fn pair_weight(p: &Potential, r: f64) -> Result<f64> {
    if r > 0.0 {
        p.eval_phi(r)
    } else {
        p.drift_weight(0.0)?;
        Ok(0.0)
    }
}

/// `H(r) = (1/N)[Σ_j Φ(|r_j|) + Σ_{i<j} Φ(|r_i − r_j|)]`.
pub fn hamiltonian(frame: &RelativeFrame, p: &Potential, r: &[f64]) -> f64 {
    let (m, d) = (frame.n - 1, frame.d);
    let mut h = 0.0;
    let mut diff = vec![0.0; d];
    for i in 0..m {
        h += p.value(norm(&r[i * d..(i + 1) * d]));
        for j in (i + 1)..m {
            for k in 0..d {
                diff[k] = r[i * d + k] - r[j * d + k];
            }
            h += p.value(norm(&diff));
        }
    }
    h / frame.n as f64
}

/// `J_Φ(X) = (1/N) Σ_{i<j} Φ(|X_i − X_j|)`.
pub fn energy_full(p: &Potential, n: usize, d: usize, x: &[f64]) -> f64 {
    let mut e = 0.0;
    let mut diff = vec![0.0; d];
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..d {
                diff[k] = x[i * d + k] - x[j * d + k];
            }
            e += p.value(norm(&diff));
        }
    }
    e / n as f64
}

/// `−∇J_Φ(X)`: component `i` is `(1/N) Σ_{j≠i} φ(|X_j − X_i|)(X_j − X_i)`.
pub fn drift_full(p: &Potential, n: usize, d: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(n, d, x.len(), n * d)?;
    let mut out = vec![0.0; n * d];
    drift_full_into(p, n, d, x, &mut out)?;
    Ok(out)
}

fn drift_full_into(p: &Potential, n: usize, d: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
    out.fill(0.0);
    let inv_n = 1.0 / n as f64;
    let mut diff = [0.0; 3];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                diff[k] = x[j * d + k] - x[i * d + k];
                s += diff[k] * diff[k];
            }
            let w = pair_weight(p, s.sqrt()).map_err(|e| pair_error(e, i, j))? * inv_n;
            for k in 0..d {
                out[i * d + k] += w * diff[k];
                out[j * d + k] -= w * diff[k];
            }
        }
    }
    Ok(())
}

fn check_dims(n: usize, d: usize, len: usize, want: usize) -> Result<()> {
    if !(1..=3).contains(&d) || n < 2 || len != want {
        return Err(Error::precondition(format!("state of length {len} does not fit N={n}, d={d} (d must be 1..=3)")));
    }
    Ok(())
}

fn pair_error(e: Error, i: usize, j: usize) -> Error {
    match e {
        Error::Domain(m) => Error::Numeric(format!("particles {i} and {j} coincide: {m}")),
        other => other,
    }
}

/// `∇H(r)`: `(1/N)[φ(|r_i|) r_i + Σ_{j≠i} φ(|r_i − r_j|)(r_i − r_j)]`.
pub fn grad_hamiltonian(frame: &RelativeFrame, p: &Potential, r: &[f64]) -> Result<Vec<f64>> {
    check_dims(frame.n, frame.d, r.len(), frame.dim())?;
    let mut g = vec![0.0; r.len()];
    grad_h_into(frame, p, r, &mut g)?;
    Ok(g)
}

fn grad_h_into(frame: &RelativeFrame, p: &Potential, r: &[f64], g: &mut [f64]) -> Result<()> {
    let (m, d) = (frame.n - 1, frame.d);
    let inv_n = 1.0 / frame.n as f64;
    g.fill(0.0);
    let mut diff = [0.0; 3];
    for i in 0..m {
        let ri = &r[i * d..(i + 1) * d];
        let w = pair_weight(p, norm(ri)).map_err(|e| pair_error(e, 0, i + 1))? * inv_n;
        for k in 0..d {
            g[i * d + k] += w * ri[k];
        }
        for j in (i + 1)..m {
            let mut s = 0.0;
            for k in 0..d {
                diff[k] = r[i * d + k] - r[j * d + k];
                s += diff[k] * diff[k];
            }
            let w = pair_weight(p, s.sqrt()).map_err(|e| pair_error(e, i + 1, j + 1))? * inv_n;
            for k in 0..d {
                g[i * d + k] += w * diff[k];
                g[j * d + k] -= w * diff[k];
            }
        }
    }
    Ok(())
}

/// `−b(r) = −A∇H(r)`, the drift of the relative process.
pub fn drift_relative(frame: &RelativeFrame, p: &Potential, r: &[f64]) -> Result<Vec<f64>> {
    let g = grad_hamiltonian(frame, p, r)?;
    let mut b = vec![0.0; r.len()];
    frame.apply_a(&g, &mut b);
    b.iter_mut().for_each(|v| *v = -*v);
    Ok(b)
}

/// `−Sᵀ∇H(SY)`, the drift of the `Y` process.
pub fn drift_y(frame: &RelativeFrame, p: &Potential, y: &[f64]) -> Result<Vec<f64>> {
    let r = frame.y_to_relative(y);
    let g = grad_hamiltonian(frame, p, &r)?;
    let mut out = vec![0.0; y.len()];
    frame.apply_s_t(&g, &mut out);
    out.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Full,
    #[default]
    Relative,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coords {
    #[default]
    Full,
    Relative,
}

/// Initial law of the particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initial {
    /// Deterministic start.
    Point {
        x0: Vec<f64>,
        #[serde(default)]
        coords: Coords,
    },
    /// `N(mean, cov)`; `cov` may be omitted for the identity.
    Gaussian {
        mean: Vec<f64>,
        #[serde(default)]
        cov: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        coords: Coords,
    },
    /// Start from a pool of states obtained by running a pilot ensemble of
    /// `pool` relative paths from `N(0, I)` for time `burn_in`; path `i`
    /// starts at pool member `i mod pool`.
    StationaryBootstrap { pool: usize, burn_in: f64 },
}

/// Which steps are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Snapshots {
    /// Every `k`-th step, including step 0 and the last step.
    Every(usize),
    /// The steps nearest to these times.
    Times(Vec<f64>),
}

/// A simulation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    pub d: usize,
    pub potential: PotentialSpec,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    pub initial: Initial,
    pub seed: u64,
    /// The moment order `s` of the initial law; only used for the rate
    /// `κ = (s−2)/(2−θγ)`.
    #[serde(default = "default_moment_s")]
    pub moment_s: f64,
    pub snapshots: Snapshots,
}

fn default_moment_s() -> f64 {
    4.0
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !(1..=3).contains(&self.d) {
            return Err(Error::config(format!("need N >= 2 and d in 1..=3, got N={}, d={}", self.n, self.d)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_end >= self.dt) {
            return Err(Error::config(format!(
                "need dt > 0 and t_end >= dt, got dt={}, t_end={}",
                self.dt, self.t_end
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be at least 1"));
        }
        if !(self.moment_s >= 2.0) {
            return Err(Error::config(format!("moment_s must be >= 2, got {}", self.moment_s)));
        }
        match &self.snapshots {
            Snapshots::Every(0) => return Err(Error::config("snapshot stride must be positive")),
            Snapshots::Times(t)
                if t.is_empty() || t.iter().any(|t| !(*t >= 0.0 && *t <= self.t_end + 0.5 * self.dt)) =>
            {
                return Err(Error::config("snapshot times must be nonempty and lie in [0, t_end]"));
            }
            _ => {}
        }
        if let Initial::StationaryBootstrap { pool, burn_in } = &self.initial {
            if *pool == 0 || !(*burn_in >= 0.0) {
                return Err(Error::config("stationary_bootstrap needs pool >= 1 and burn_in >= 0"));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Sorted, deduplicated step indices of the snapshots.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let last = self.steps();
        let mut steps: Vec<usize> = match &self.snapshots {
            Snapshots::Every(k) => {
                let mut v: Vec<usize> = (0..=last).step_by(*k).collect();
                v.push(last);
                v
            }
            Snapshots::Times(t) => t.iter().map(|t| ((t / self.dt).round() as usize).min(last)).collect(),
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }
}

/// Extra knobs not part of the experiment schema.
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Multiplies the Brownian increments; `0` gives the deterministic
    /// gradient flow.
    #[doc(hidden)]
    pub noise_scale: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { noise_scale: 1.0 }
    }
}

/// Simulated trajectories, `states[path][snapshot][coordinate]` flattened.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub layout: Layout,
    pub n: usize,
    pub d: usize,
    pub dim: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub steps: Vec<usize>,
    pub n_paths: usize,
    pub seed: u64,
    pub states: Vec<f64>,
    /// First step at which each path produced a non-finite state.
    pub diverged: Vec<Option<usize>>,
}

impl Ensemble {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, path: usize, t: usize) -> &[f64] {
        let off = (path * self.n_times() + t) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn divergence_count(&self) -> usize {
        self.diverged.iter().filter(|d| d.is_some()).count()
    }

    pub fn live_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(|p| self.diverged[*p].is_none())
    }

    /// Index of the snapshot closest to time `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// Converts to another layout. Full-space states cannot be recovered
    /// from relative ones.
    #[allow(clippy::redundant_closure)]
    pub fn to_layout(&self, layout: Layout) -> Result<Ensemble> {
        if layout == self.layout {
            return Ok(self.clone());
        }
        let frame = build_frame(self.n, self.d)?;
        let map: Box<dyn Fn(&[f64]) -> Vec<f64> + Sync> = match (self.layout, layout) {
            (Layout::Full, Layout::Relative) => Box::new(|x| frame.full_to_relative(x)),
            (Layout::Full, Layout::Y) => Box::new(|x| frame.relative_to_y(&frame.full_to_relative(x))),
            (Layout::Relative, Layout::Y) => Box::new(|r| frame.relative_to_y(r)),
            (Layout::Y, Layout::Relative) => Box::new(|y| frame.y_to_relative(y)),
            _ => return Err(Error::precondition("the full-space centre is not recoverable from relative coordinates")),
        };
        let dim = frame.dim();
        let states: Vec<f64> = self.states.par_chunks(self.dim).flat_map_iter(|s| map(s)).collect();
        debug_assert_eq!(states.len(), self.n_paths * self.n_times() * dim);
        Ok(Ensemble { layout, dim, states, ..self.clone() })
    }

    /// Samples of `(X₁−X₂, X₁−X₃)` at snapshot `t`, flattened as
    /// `[u(d), v(d)]` per live path. Requires `N ≥ 3`.
    pub fn pair_samples(&self, t: usize) -> Result<Vec<f64>> {
        if self.n < 3 {
            return Err(Error::precondition("pair samples (r12, r13) need N >= 3"));
        }
        let d = self.d;
        let frame = if self.layout == Layout::Relative { None } else { Some(build_frame(self.n, d)?) };
        let mut out = Vec::with_capacity(self.n_paths * 2 * d);
        for p in self.live_paths() {
            let s = self.state(p, t);
            let r = match (self.layout, &frame) {
                (Layout::Relative, _) => s.to_vec(),
                (Layout::Full, Some(f)) => f.full_to_relative(s),
                (Layout::Y, Some(f)) => f.y_to_relative(s),
                _ => unreachable!(),
            };
            out.extend_from_slice(&r[..2 * d]);
        }
        Ok(out)
    }

    /// Writes `<stem>.bin` (little-endian f64 states) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<EnsembleManifest> {
        let bin = format!("{stem}.bin");
        let sha = io::write_f64_le(&dir.join(&bin), &self.states)?;
        let manifest = EnsembleManifest {
            format: "ipslab.ensemble.v1".into(),
            layout: self.layout,
            n: self.n,
            d: self.d,
            dim: self.dim,
            dt: self.dt,
            times: self.times.clone(),
            steps: self.steps.clone(),
            n_paths: self.n_paths,
            seed: self.seed,
            diverged: self.diverged.iter().enumerate().filter_map(|(i, d)| d.map(|s| (i, s))).collect(),
            data: bin,
            sha256: sha,
        };
        io::write_json_atomic(&dir.join(format!("{stem}.json")), &manifest)?;
        Ok(manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Ensemble> {
        let m: EnsembleManifest = io::read_json(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let states = io::read_f64_le(&dir.join(&m.data), Some(&m.sha256))?;
        if states.len() != m.n_paths * m.times.len() * m.dim {
            return Err(Error::config(format!(
                "{} holds {} values, manifest implies {}",
                m.data,
                states.len(),
                m.n_paths * m.times.len() * m.dim
            )));
        }
        let mut diverged = vec![None; m.n_paths];
        for (i, s) in m.diverged {
            diverged[i] = Some(s);
        }
        Ok(Ensemble {
            layout: m.layout,
            n: m.n,
            d: m.d,
            dim: m.dim,
            dt: m.dt,
            times: m.times,
            steps: m.steps,
            n_paths: m.n_paths,
            seed: m.seed,
            states,
            diverged,
        })
    }

    /// `path,t,x0,x1,...` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "path,t")?;
        for k in 0..self.dim {
            write!(w, ",x{k}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (ti, t) in self.times.iter().enumerate() {
                write!(w, "{p},{t}")?;
                for v in self.state(p, ti) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// JSON sidecar of a saved ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub format: String,
    pub layout: Layout,
    pub n: usize,
    pub d: usize,
    pub dim: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub steps: Vec<usize>,
    pub n_paths: usize,
    pub seed: u64,
    pub diverged: Vec<(usize, usize)>,
    pub data: String,
    pub sha256: String,
}

/// Euler–Maruyama simulation of the potential in `spec`.
pub fn simulate(spec: &SystemSpec, layout: Layout) -> Result<Ensemble> {
    let p = Potential::from_spec(&spec.potential)?;
    simulate_with(spec, &p, layout, SimOptions::default())
}

/// As [`simulate`] with an explicit potential (e.g. a composite with a
/// custom `Ψ`) and options.
pub fn simulate_with(spec: &SystemSpec, p: &Potential, layout: Layout, opts: SimOptions) -> Result<Ensemble> {
    spec.validate()?;
    let frame = build_frame(spec.n, spec.d)?;
    let dim = match layout {
        Layout::Full => spec.n * spec.d,
        _ => frame.dim(),
    };
    let steps = spec.snapshot_steps();
    let n_times = steps.len();
    let pool = match &spec.initial {
        Initial::StationaryBootstrap { pool, burn_in } => Some(pilot_pool(spec, &frame, p, *pool, *burn_in, opts)?),
        _ => None,
    };
    let init = InitialSampler::new(spec, &frame, layout)?;

    let mut states = vec![0.0; spec.n_paths * n_times * dim];
    let diverged: Vec<Option<usize>> = states
        .par_chunks_mut(n_times * dim)
        .enumerate()
        .map(|(path, out)| -> Result<Option<usize>> {
            let mut x = match &pool {
                Some(pool) => {
                    let r = &pool[(path % (pool.len() / frame.dim())) * frame.dim()..][..frame.dim()];
                    match layout {
                        Layout::Full => frame.relative_to_full(r),
                        Layout::Relative => r.to_vec(),
                        Layout::Y => frame.relative_to_y(r),
                    }
                }
                None => init.sample(spec.seed, path as u64)?,
            };
            let mut noise = rng::stream(spec.seed, path as u64, Purpose::Noise);
            let mut stepper = Stepper::new(&frame, p, layout, spec.dt, opts.noise_scale);
            let mut diverged = None;
            let mut next = 0;
            let last = *steps.last().expect("at least one snapshot");
            for step in 0..=last {
                if next < n_times && steps[next] == step {
                    out[next * dim..(next + 1) * dim].copy_from_slice(&x);
                    next += 1;
                }
                if step == last {
                    break;
                }
                if diverged.is_some() {
                    continue;
                }
                stepper.step(&mut x, &mut noise)?;
                if !x.iter().all(|v| v.is_finite()) {
                    diverged = Some(step + 1);
                    x.fill(f64::NAN);
                }
            }
            Ok(diverged)
        })
        .collect::<Result<_>>()?;

    Ok(Ensemble {
        layout,
        n: spec.n,
        d: spec.d,
        dim,
        dt: spec.dt,
        times: steps.iter().map(|s| *s as f64 * spec.dt).collect(),
        steps,
        n_paths: spec.n_paths,
        seed: spec.seed,
        states,
        diverged,
    })
}

struct Stepper<'a> {
    frame: &'a RelativeFrame,
    p: &'a Potential,
    layout: Layout,
    dt: f64,
    sqrt_dt: f64,
    drift: Vec<f64>,
    scratch: Vec<f64>,
    xi: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(frame: &'a RelativeFrame, p: &'a Potential, layout: Layout, dt: f64, noise_scale: f64) -> Self {
        let dim = if layout == Layout::Full { frame.n * frame.d } else { frame.dim() };
        Self {
            frame,
            p,
            layout,
            dt,
            sqrt_dt: noise_scale * dt.sqrt(),
            drift: vec![0.0; dim],
            scratch: vec![0.0; dim],
            xi: vec![0.0; dim],
        }
    }

    fn step(&mut self, x: &mut [f64], rng: &mut impl Rng) -> Result<()> {
        for v in self.xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        match self.layout {
            Layout::Full => {
                drift_full_into(self.p, self.frame.n, self.frame.d, x, &mut self.drift)?;
                for k in 0..x.len() {
                    x[k] += self.drift[k] * self.dt + self.sqrt_dt * self.xi[k];
                }
            }
            Layout::Relative => {
                grad_h_into(self.frame, self.p, x, &mut self.scratch)?;
                self.frame.apply_a(&self.scratch, &mut self.drift);
                self.frame.apply_s(&self.xi, &mut self.scratch);
                for k in 0..x.len() {
                    x[k] += -self.drift[k] * self.dt + self.sqrt_dt * self.scratch[k];
                }
            }
            Layout::Y => {
                self.frame.apply_s(x, &mut self.scratch);
                grad_h_into(self.frame, self.p, &self.scratch.clone(), &mut self.drift)?;
                self.frame.apply_s_t(&self.drift, &mut self.scratch);
                for k in 0..x.len() {
                    x[k] += -self.scratch[k] * self.dt + self.sqrt_dt * self.xi[k];
                }
            }
        }
        Ok(())
    }
}

struct InitialSampler {
    mean: Vec<f64>,
    chol: Option<DMatrix<f64>>,
}

impl InitialSampler {
    fn new(spec: &SystemSpec, frame: &RelativeFrame, layout: Layout) -> Result<Self> {
        let full = spec.n * spec.d;
        let rel = frame.dim();
        let (mean, chol, coords) = match &spec.initial {
            Initial::StationaryBootstrap { .. } => return Ok(Self { mean: vec![], chol: None }),
            Initial::Point { x0, coords } => (x0.clone(), None, *coords),
            Initial::Gaussian { mean, cov, coords } => {
                let len = mean.len();
                let c = match cov {
                    None => DMatrix::identity(len, len),
                    Some(rows) => {
                        if rows.len() != len || rows.iter().any(|r| r.len() != len) {
                            return Err(Error::config(format!("gaussian cov must be {len}x{len}")));
                        }
                        DMatrix::from_fn(len, len, |i, j| rows[i][j])
                    }
                };
                let l = c.cholesky().ok_or_else(|| Error::config("gaussian cov is not positive definite"))?.l();
                (mean.clone(), Some(l), *coords)
            }
        };
        let want = if coords == Coords::Full { full } else { rel };
        if mean.len() != want {
            return Err(Error::config(format!(
                "initial state has length {}, expected {want} for {coords:?} coordinates",
                mean.len()
            )));
        }
        let map = coordinate_map(frame, coords, layout);
        let mean = mat_vec(&map, &mean);
        Ok(Self { mean, chol: chol.map(|l| &map * l) })
    }

    fn sample(&self, seed: u64, path: u64) -> Result<Vec<f64>> {
        let mut x = self.mean.clone();
        if let Some(l) = &self.chol {
            let mut rng = rng::stream(seed, path, Purpose::Initial);
            let z: Vec<f64> = (0..l.ncols()).map(|_| rng.sample(StandardNormal)).collect();
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += (0..l.ncols()).map(|j| l[(i, j)] * z[j]).sum::<f64>();
            }
        }
        Ok(x)
    }
}

/// Linear map from initial-state coordinates to the simulation layout.
/// Relative inputs are placed in full space with `X₁ = 0`.
fn coordinate_map(frame: &RelativeFrame, coords: Coords, layout: Layout) -> DMatrix<f64> {
    let (n, d) = (frame.n, frame.d);
    let (full, rel) = (n * d, frame.dim());
    let to_rel = DMatrix::from_fn(rel, full, |i, j| {
        if j % d != i % d {
            0.0
        } else if j / d == 0 {
            1.0
        } else if j / d == i / d + 1 {
            -1.0
        } else {
            0.0
        }
    });
    let from_rel = DMatrix::from_fn(full, rel, |i, j| if i >= d && i - d == j { -1.0 } else { 0.0 });
    match (coords, layout) {
        (Coords::Full, Layout::Full) => DMatrix::identity(full, full),
        (Coords::Full, Layout::Relative) => to_rel,
        (Coords::Full, Layout::Y) => &frame.s_inv * to_rel,
        (Coords::Relative, Layout::Full) => from_rel,
        (Coords::Relative, Layout::Relative) => DMatrix::identity(rel, rel),
        (Coords::Relative, Layout::Y) => frame.s_inv.clone(),
    }
}

fn pilot_pool(
    spec: &SystemSpec,
    frame: &RelativeFrame,
    p: &Potential,
    pool: usize,
    burn_in: f64,
    opts: SimOptions,
) -> Result<Vec<f64>> {
    let dim = frame.dim();
    let steps = (burn_in / spec.dt).round() as usize;
    let mut out = vec![0.0; pool * dim];
    out.par_chunks_mut(dim).enumerate().try_for_each(|(i, x)| -> Result<()> {
        let mut init = rng::stream(spec.seed, i as u64, Purpose::PilotInitial);
        for v in x.iter_mut() {
            *v = init.sample(StandardNormal);
        }
        let mut noise = rng::stream(spec.seed, i as u64, Purpose::PilotNoise);
        let mut stepper = Stepper::new(frame, p, Layout::Relative, spec.dt, opts.noise_scale);
        for _ in 0..steps {
            stepper.step(x, &mut noise)?;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("pilot path {i} diverged during burn-in")));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Runs the same system at `dt`, `dt/2`, … (`levels` values) and returns
/// `(dt, E[f(state at t_end)])` for each, as a weak-error diagnostic.
pub fn step_halving(
    spec: &SystemSpec,
    layout: Layout,
    levels: usize,
    f: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut s = spec.clone();
        s.dt = spec.dt / 2f64.powi(l as i32);
        s.snapshots = Snapshots::Times(vec![spec.t_end]);
        let ens = simulate(&s, layout)?;
        let live: Vec<usize> = ens.live_paths().collect();
        let mean = live.par_iter().map(|p| f(ens.state(*p, 0))).sum::<f64>() / live.len() as f64;
        out.push((s.dt, mean));
    }
    Ok(out)
}
