//! Flat CSV tables from a run manifest.
//!
//! | file               | columns                          |
//! |--------------------|----------------------------------|
//! | `l1.csv`           | `t,l1_distance`                  |
//! | `coercivity.csv`   | `horizon,c_hat,stderr`           |
//! | `coefficients.csv` | `basis_index,coefficient`        |
//! | `spectra.csv`      | `report,index,eigenvalue`        |
//!
//! The stationary coercivity row has horizon `inf`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::pipeline::{pencil_spectrum, CoercivitySummary, L1Table, RunManifest};
use crate::error::Result;
use crate::io;
use crate::learn::LearnReport;

pub const L1_HEADER: &str = "t,l1_distance";
pub const COERCIVITY_HEADER: &str = "horizon,c_hat,stderr";
pub const COEFFICIENTS_HEADER: &str = "basis_index,coefficient";
pub const SPECTRA_HEADER: &str = "report,index,eigenvalue";

#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub tables: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn load<T: serde::de::DeserializeOwned>(
    dir: &Path,
    m: &RunManifest,
    role: &str,
    warnings: &mut Vec<String>,
) -> Option<T> {
    let art = match m.artifact(role) {
        Some(a) => a,
        None => {
            warnings.push(format!("no {role} artifact in manifest"));
            return None;
        }
    };
    let path = dir.join(&art.path);
    match std::fs::read(&path) {
        Err(e) => {
            warnings.push(format!("missing artifact {}: {e}", art.path));
            None
        }
        Ok(bytes) if io::sha256_hex(&bytes) != art.sha256 => {
            warnings.push(format!("artifact {} does not match its recorded sha256", art.path));
            None
        }
        Ok(bytes) => match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("unreadable artifact {}: {e}", art.path));
                None
            }
        },
    }
}

/// Writes the four tables into `out`; missing artifacts give header-only
/// tables and a warning.
pub fn report(manifest_path: &Path, out: &Path) -> Result<ReportOutcome> {
    let manifest: RunManifest = io::read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut outcome = ReportOutcome::default();
    if manifest.stages.is_empty() {
        outcome.warnings.push("manifest lists no stages".into());
    }
    let w = &mut outcome.warnings;

    let mut l1 = format!("{L1_HEADER}\n");
    if let Some(t) = load::<L1Table>(dir, &manifest, "density.l1", w) {
        for (a, b) in t.times.iter().zip(&t.distances) {
            let _ = writeln!(l1, "{a},{b}");
        }
    }

    let mut coer = format!("{COERCIVITY_HEADER}\n");
    let mut spectra = format!("{SPECTRA_HEADER}\n");
    if let Some(c) = load::<CoercivitySummary>(dir, &manifest, "coercivity", w) {
        let _ = writeln!(coer, "inf,{},{}", c.stationary.c_hat, c.stationary.c_hat_stderr);
        for (k, e) in c.spectrum.iter().enumerate() {
            let _ = writeln!(spectra, "stationary,{k},{e}");
        }
        for r in &c.time_averaged {
            let h = r.horizon.unwrap_or(f64::NAN);
            let _ = writeln!(coer, "{h},{},{}", r.c_hat, r.c_hat_stderr);
            match pencil_spectrum(r) {
                Ok(ev) => {
                    for (k, e) in ev.iter().enumerate() {
                        let _ = writeln!(spectra, "T={h},{k},{e}");
                    }
                }
                Err(e) => w.push(format!("no spectrum for T={h}: {e}")),
            }
        }
    }

    let mut coef = format!("{COEFFICIENTS_HEADER}\n");
    if let Some(l) = load::<LearnReport>(dir, &manifest, "learn", w) {
        for (k, c) in l.coefficients.iter().enumerate() {
            let _ = writeln!(coef, "{k},{c}");
        }
    }

    for (name, body) in [("l1.csv", l1), ("coercivity.csv", coer), ("coefficients.csv", coef), ("spectra.csv", spectra)]
    {
        let path = out.join(name);
        io::write_atomic(&path, body.as_bytes())?;
        outcome.tables.push(path);
    }
    Ok(outcome)
}
