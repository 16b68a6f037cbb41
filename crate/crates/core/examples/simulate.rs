//! Simulates the Ornstein–Uhlenbeck case and compares the pair covariance
//! with its stationary value `[[1/2, 1/4], [1/4, 1/2]]`.
//!
//! ```text
//! cargo run --release --example simulate
//! ```

use ipslab::dynamics::{simulate, step_halving, Coords, Initial, Layout, Snapshots, SystemSpec};
use ipslab::potentials::PotentialSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SystemSpec {
        n: 3,
        d: 1,
        potential: PotentialSpec::PurePower { gamma: 2.0 },
        dt: 0.005,
        t_end: 10.0,
        n_paths: 20_000,
        initial: Initial::Point { x0: vec![-1.0, 0.0, 1.0], coords: Coords::Full },
        seed: 1,
        moment_s: 4.0,
        snapshots: Snapshots::Times(vec![0.5, 1.0, 2.0, 10.0]),
    };
    let ens = simulate(&spec, Layout::Relative)?;
    println!("{} paths, {} diverged", ens.n_paths, ens.divergence_count());
    for (k, t) in ens.times.iter().enumerate() {
        let rows = ens.pair_samples(k)?;
        let m = rows.len() as f64 / 2.0;
        let c = |i: usize, j: usize| rows.chunks_exact(2).map(|r| r[i] * r[j]).sum::<f64>() / m;
        println!("t = {t:>5.2}  E[u²] = {:.4}  E[uv] = {:.4}  E[v²] = {:.4}", c(0, 0), c(0, 1), c(1, 1));
    }

    // Weak error of E|r₁₂|² at t = 1 as dt is halved.
    let short = SystemSpec { t_end: 1.0, dt: 0.1, n_paths: 50_000, ..spec };
    for (dt, v) in step_halving(&short, Layout::Relative, 4, |r| r[0] * r[0])? {
        println!("dt = {dt:.4}  E[u²](1) = {v:.5}");
    }
    Ok(())
}
