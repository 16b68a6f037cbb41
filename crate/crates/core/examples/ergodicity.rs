//! L¹ decay of the pair density towards equilibrium.
//!
//! A transient ensemble and a stationary-start ensemble share their Brownian
//! increments, so most of the Monte Carlo noise cancels in the difference of
//! their kernel density estimates.
//!
//! ```text
//! cargo run --release --example ergodicity -- [sigma0] [paths]
//! ```

use ipslab::density::{empirical_density, fit_decay, l1_distance, Axes, Estimator, FitKind};
use ipslab::dynamics::{simulate, Coords, Initial, Layout, Snapshots, SystemSpec};
use ipslab::potentials::{Potential, PotentialSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let sigma0: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6.0);
    let paths: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let times = [2.0, 4.0, 8.0, 16.0, 32.0];

    let potential = PotentialSpec::PowerShifted { a: 1.0, theta: 1.5, gamma: 0.9 };
    let kappa = Potential::from_spec(&potential)?.kappa(4.0);
    let transient = SystemSpec {
        n: 3,
        d: 1,
        potential,
        dt: 0.01,
        t_end: 32.0,
        n_paths: paths,
        initial: Initial::Gaussian {
            mean: vec![0.0; 2],
            cov: Some(vec![vec![sigma0 * sigma0, 0.0], vec![0.0, sigma0 * sigma0]]),
            coords: Coords::Relative,
        },
        seed: 11,
        moment_s: 4.0,
        snapshots: Snapshots::Times(times.to_vec()),
    };
    let stationary =
        SystemSpec { initial: Initial::StationaryBootstrap { pool: paths, burn_in: 40.0 }, ..transient.clone() };

    let a = simulate(&transient, Layout::Relative)?;
    let b = simulate(&stationary, Layout::Relative)?;
    let axes = Axes::cube(1, 12.0, 96);
    let est = Estimator::Kde { bandwidth: 0.25 };
    let mut distances = Vec::new();
    for (k, t) in times.iter().enumerate() {
        let p = empirical_density(&a, k, &axes, est)?;
        let q = empirical_density(&b, k, &axes, est)?;
        let l1 = l1_distance(&p, &q)?;
        println!("t = {t:>4}  L1 = {l1:.4e}");
        distances.push(l1);
    }
    let fit = fit_decay(&times, &distances, FitKind::Polynomial, 0.0)?;
    println!("decay exponent {:.3} (kappa/2 = {:.3})", fit.decay_exponent, kappa / 2.0);
    Ok(())
}
