//! The stationary density of `(r₁₂, r₁₃)` for three and five particles,
//! with second moments checked against a long simulation.

use ipslab::density::{stationary_density, GridSpec, McSpec};
use ipslab::dynamics::{build_frame, simulate, Initial, Layout, Snapshots, SystemSpec};
use ipslab::potentials::{Potential, PotentialSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PotentialSpec::PowerShifted { a: 1.0, theta: 1.5, gamma: 0.9 };
    let p = Potential::from_spec(&spec)?;
    for n in [3, 5] {
        let frame = build_frame(n, 1)?;
        let grid = stationary_density(
            &frame,
            &p,
            &GridSpec::default(),
            &McSpec { samples: 20_000, max_rel_se: 0.05, seed: 3 },
        )?;
        let vol = grid.axes.cell_volume();
        let (mut uu, mut uv) = (0.0, 0.0);
        for (k, v) in grid.values.iter().enumerate() {
            let x = grid.axes.cell_center(k);
            uu += x[0] * x[0] * v * vol;
            uv += x[0] * x[1] * v * vol;
        }
        println!(
            "N = {n}: {} cells, mass {:.6}, deficit {:.1e}, E[u²] = {uu:.4}, E[uv] = {uv:.4}",
            grid.values.len(),
            grid.mass(),
            grid.deficit
        );
        if let Some(se) = &grid.std_errors {
            let worst = se.iter().fold(0.0f64, |m, s| m.max(*s));
            println!("        largest Monte Carlo standard error {worst:.2e}");
        }
        let sim = SystemSpec {
            n,
            d: 1,
            potential: spec.clone(),
            dt: 0.01,
            t_end: 20.0,
            n_paths: 20_000,
            initial: Initial::Gaussian { mean: vec![0.0; n], cov: None, coords: Default::default() },
            seed: 9,
            moment_s: 4.0,
            snapshots: Snapshots::Times(vec![20.0]),
        };
        let rows = simulate(&sim, Layout::Relative)?.pair_samples(0)?;
        let m = rows.len() as f64 / 2.0;
        let uu = rows.chunks_exact(2).map(|r| r[0] * r[0]).sum::<f64>() / m;
        let uv = rows.chunks_exact(2).map(|r| r[0] * r[1]).sum::<f64>() / m;
        println!("        simulation at t = 20: E[u²] = {uu:.4}, E[uv] = {uv:.4}");
    }
    Ok(())
}
