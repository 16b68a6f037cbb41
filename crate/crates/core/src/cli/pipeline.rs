//! The `run` pipeline: potentials → simulate → density → coercivity → learn.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::coercivity::{self, CoercivityReport, HypothesisSpace, SupRatio};
use crate::density::{self, DensityGrid};
use crate::dynamics::{self, build_frame, Ensemble};
use crate::error::{Error, Result};
use crate::io;
use crate::learn::{self, LearnReport};
use crate::potentials::{AdmissibilityCertificate, Potential};

pub const MANIFEST_FORMAT: &str = "ipslab.run.v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: Status,
    #[serde(default)]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config_sha256: String,
    pub seed: u64,
    pub status: Status,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn artifact(&self, role: &str) -> Option<&Artifact> {
        self.stages.iter().flat_map(|s| &s.artifacts).find(|a| a.role == role)
    }
}

/// Stationary-law comparison at each requested snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct L1Table {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub stationary_deficit: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoercivitySummary {
    pub stationary: CoercivityReport,
    pub time_averaged: Vec<CoercivityReport>,
    /// Generalized eigenvalues of `(G, M)` for the stationary report.
    pub spectrum: Vec<f64>,
    pub s_h: Option<SupRatio>,
    /// The rate `κ`; absent when it is infinite (`θγ = 2`).
    pub kappa: Option<f64>,
    pub c_constant: f64,
    pub t_c: Option<f64>,
    pub t_min: Option<f64>,
    pub notes: Vec<String>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    fn persist(&self) -> Result<()> {
        io::write_json_atomic(&self.path(), &self.manifest)
    }

    fn record(&mut self, name: &str, result: Result<Vec<Artifact>>) -> Result<()> {
        match result {
            Ok(artifacts) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: Status::Ok,
                    error: None,
                    artifacts,
                });
                self.persist()
            }
            Err(e) => {
                let artifacts = list_partial(&self.dir, name);
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: Status::Failed,
                    error: Some(e.to_string()),
                    artifacts,
                });
                self.manifest.status = Status::Failed;
                self.persist()?;
                Err(e)
            }
        }
    }
}

/// Files a failed stage managed to write before stopping.
fn list_partial(dir: &Path, stage: &str) -> Vec<Artifact> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        let mut names: Vec<String> =
            entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for name in names {
            if name.starts_with(stage) {
                if let Ok(a) = artifact(dir, &format!("{stage}.partial"), &name) {
                    out.push(a);
                }
            }
        }
    }
    out
}

fn artifact(dir: &Path, role: &str, name: &str) -> Result<Artifact> {
    let bytes = std::fs::read(dir.join(name))?;
    Ok(Artifact { role: role.into(), path: name.into(), sha256: io::sha256_hex(&bytes) })
}

fn write_json<T: Serialize>(dir: &Path, role: &str, name: &str, value: &T) -> Result<Artifact> {
    io::write_json_atomic(&dir.join(name), value)?;
    artifact(dir, role, name)
}

/// Executes the enabled stages. Artifacts land in `out` (or the config's
/// output directory); the manifest is rewritten after every stage and
/// marked `FAILED` when a stage fails.
pub fn run(cfg: &ExperimentConfig, config_sha: &str, out: Option<&Path>) -> Result<RunManifest> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir)?;
    let mut run = Run {
        dir: dir.clone(),
        manifest: RunManifest {
            format: MANIFEST_FORMAT.into(),
            config_sha256: config_sha.into(),
            seed: cfg.system.seed,
            status: Status::Ok,
            stages: Vec::new(),
        },
    };
    run.persist()?;

    let potential = {
        let res = stage_potentials(cfg, &dir);
        let (p, arts) = match res {
            Ok((p, a)) => (Some(p), Ok(a)),
            Err(e) => (None, Err(e)),
        };
        run.record("potentials", arts)?;
        p.expect("recorded stage succeeded")
    };

    let mut ens: Option<Ensemble> = None;
    if cfg.stages.simulate {
        let res = dynamics::simulate_with(&cfg.system, &potential, cfg.layout, Default::default()).and_then(|e| {
            if e.divergence_count() > 0 {
                eprintln!("warning: {} of {} paths diverged", e.divergence_count(), e.n_paths);
            }
            let m = e.save(&dir, "ensemble")?;
            let arts = vec![artifact(&dir, "ensemble.data", &m.data)?, artifact(&dir, "ensemble", "ensemble.json")?];
            ens = Some(e);
            Ok(arts)
        });
        run.record("simulate", res)?;
    }

    if cfg.stages.density {
        let res = stage_density(cfg, &potential, ens.as_ref(), &dir);
        run.record("density", res)?;
    }

    let mut space: Option<HypothesisSpace> = None;
    let mut c_hat = None;
    if cfg.stages.coercivity {
        let res = need(&ens, "coercivity").and_then(|e| {
            let (arts, hs, c) = stage_coercivity(cfg, &potential, e, &dir)?;
            space = Some(hs);
            c_hat = Some(c);
            Ok(arts)
        });
        run.record("coercivity", res)?;
    }

    if cfg.stages.learn {
        let res = need(&ens, "learn").and_then(|e| stage_learn(cfg, &potential, e, space.as_ref(), c_hat, &dir));
        run.record("learn", res)?;
    }
    Ok(run.manifest)
}

fn need<'a>(ens: &'a Option<Ensemble>, stage: &str) -> Result<&'a Ensemble> {
    ens.as_ref().ok_or_else(|| Error::config(format!("stage {stage} needs the simulate stage")))
}

fn stage_potentials(cfg: &ExperimentConfig, dir: &Path) -> Result<(Potential, Vec<Artifact>)> {
    let p = Potential::from_spec(&cfg.system.potential)?;
    let cert: AdmissibilityCertificate = p.certify();
    let art = write_json(dir, "certificate", "potentials.certificate.json", &cert)?;
    if !cert.pass() {
        let which = match (cert.growth_pass, cert.hessian_pass) {
            (false, false) => "growth and Hessian conditions fail",
            (false, true) => "growth condition fails",
            _ => "Hessian condition fails",
        };
        let at = cert.witness.map(|r| format!(" (witness r = {r})")).unwrap_or_default();
        return Err(Error::precondition(format!("potential is not admissible: {which}{at}")));
    }
    Ok((p, vec![art]))
}

fn stage_density(cfg: &ExperimentConfig, p: &Potential, ens: Option<&Ensemble>, dir: &Path) -> Result<Vec<Artifact>> {
    let frame = build_frame(cfg.system.n, cfg.system.d)?;
    let mc = density::McSpec { seed: cfg.system.seed, ..cfg.density.mc.clone() };
    let p_inf = density::stationary_density(&frame, p, &cfg.density.grid, &mc)?;
    let m = p_inf.save(dir, "density.stationary")?;
    let mut arts = vec![
        artifact(dir, "density.stationary.data", &m.data)?,
        artifact(dir, "density.stationary", "density.stationary.json")?,
    ];
    if let Some(e) = ens {
        let times = match &cfg.density.times {
            Some(t) => t.clone(),
            None => e.times.iter().copied().filter(|t| *t > 0.0).collect(),
        };
        let mut table = L1Table { times: Vec::new(), distances: Vec::new(), stationary_deficit: p_inf.deficit };
        for t in times {
            let k = e.time_index(t);
            let g: DensityGrid = density::empirical_density(e, k, &p_inf.axes, cfg.density.estimator)?;
            table.times.push(e.times[k]);
            table.distances.push(density::l1_distance(&g, &p_inf)?);
        }
        arts.push(write_json(dir, "density.l1", "density.l1.json", &table)?);
    }
    Ok(arts)
}

fn stage_coercivity(
    cfg: &ExperimentConfig,
    p: &Potential,
    e: &Ensemble,
    dir: &Path,
) -> Result<(Vec<Artifact>, HypothesisSpace, f64)> {
    let spec = &cfg.coercivity;
    let t_end = *e.times.last().expect("ensemble has snapshots");
    let from = spec.stationary_from.unwrap_or(0.5 * t_end);
    let samples = coercivity::pooled_samples(e, from, spec.thin)?;
    let d = e.d;
    let hs = HypothesisSpace::from_spec(&cfg.space, Some(&coercivity::pair_distances(&samples, d)))?;
    let stationary = coercivity::estimate_i_infty(&hs, &samples, d, spec.seed)?;
    let mut time_averaged = Vec::new();
    for &t in &spec.horizons {
        time_averaged.push(coercivity::estimate_i_bar_t(&hs, e, t, spec.seed)?);
    }
    let spectrum = pencil_spectrum(&stationary)?;
    let kappa = p.kappa(cfg.system.moment_s);
    let mut notes = Vec::new();
    let (s_h, t_c, t_min) = if stationary.c_hat > 3.0 * stationary.c_hat_stderr {
        let s = coercivity::estimate_s_h(&hs, &stationary, spec.seed)?;
        match coercivity::time_threshold(s.value, spec.c_constant, cfg.system.n, kappa) {
            Ok((a, b)) => (Some(s), Some(a), Some(b)),
            Err(err) => {
                notes.push(format!("no time threshold: {err}"));
                (Some(s), None, None)
            }
        }
    } else {
        notes.push(format!(
            "c_hat = {:.3e} is not resolved from zero (standard error {:.3e}); S_H not estimated",
            stationary.c_hat, stationary.c_hat_stderr
        ));
        (None, None, None)
    };
    let c = stationary.c_hat;
    let summary = CoercivitySummary {
        stationary,
        time_averaged,
        spectrum,
        s_h,
        kappa: kappa.is_finite().then_some(kappa),
        c_constant: spec.c_constant,
        t_c,
        t_min,
        notes,
    };
    Ok((vec![write_json(dir, "coercivity", "coercivity.json", &summary)?], hs, c))
}

/// All generalized eigenvalues of the report's pencil, ascending.
pub fn pencil_spectrum(r: &CoercivityReport) -> Result<Vec<f64>> {
    let (g, m) = (r.g_matrix(), r.m_matrix());
    let l = m.cholesky().ok_or_else(|| Error::numeric("M is not positive definite"))?.l();
    let li = l.try_inverse().ok_or_else(|| Error::numeric("M is singular"))?;
    let c = &li * g * li.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

fn stage_learn(
    cfg: &ExperimentConfig,
    p: &Potential,
    e: &Ensemble,
    space: Option<&HypothesisSpace>,
    c_hat: Option<f64>,
    dir: &Path,
) -> Result<Vec<Artifact>> {
    let t_end = *e.times.last().expect("ensemble has snapshots");
    let window = cfg.learn.window.unwrap_or((0.0, t_end));
    let k = e.n_times() - 1;
    let distances = coercivity::pair_distances(&e.pair_samples(k)?, e.d);
    let built;
    let (hs, c) = match (&cfg.learn.space, space) {
        (Some(spec), _) => {
            built = HypothesisSpace::from_spec(spec, Some(&distances))?;
            (&built, None)
        }
        (None, Some(hs)) => (hs, c_hat),
        (None, None) => {
            built = HypothesisSpace::from_spec(&cfg.space, Some(&distances))?;
            (&built, None)
        }
    };
    let prob = learn::assemble(e, hs, window)?;
    let truth = |r: f64| p.eval_phi(r).unwrap_or(f64::NAN);
    let has_truth = p.eval_phi(1.0).is_ok();
    let report: LearnReport =
        learn::solve_and_report(&prob, hs, cfg.learn.reg, if has_truth { Some(&truth) } else { None }, &distances, c)?;
    Ok(vec![write_json(dir, "learn", "learn.json", &report)?])
}
