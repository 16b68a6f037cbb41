//! Learns the interaction kernel of `Φ(r) = (1 + r^1.5)^0.9` from simulated
//! trajectories with a hat basis. The true kernel blows up like `r^(−1/2)`
//! at the origin, where piecewise-linear hats cannot follow it.
//!
//! ```text
//! cargo run --release --example learn
//! ```

use ipslab::coercivity::{pair_distances, HypothesisSpace};
use ipslab::dynamics::{simulate, Initial, Layout, Snapshots, SystemSpec};
use ipslab::learn::{assemble, solve_and_report};
use ipslab::potentials::{Potential, PotentialSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let potential = PotentialSpec::PowerShifted { a: 1.0, theta: 1.5, gamma: 0.9 };
    let truth = Potential::from_spec(&potential)?;
    let spec = SystemSpec {
        n: 3,
        d: 2,
        potential,
        dt: 0.02,
        t_end: 10.0,
        n_paths: 4_000,
        initial: Initial::Gaussian { mean: vec![0.0; 6], cov: None, coords: Default::default() },
        seed: 4,
        moment_s: 4.0,
        snapshots: Snapshots::Every(1),
    };
    let ens = simulate(&spec, Layout::Relative)?;
    let mut distances = Vec::new();
    for k in (0..ens.n_times()).step_by(10) {
        distances.extend(pair_distances(&ens.pair_samples(k)?, ens.d));
    }
    let r_max = distances.iter().fold(0.0f64, |m, v| m.max(*v));
    let hs = HypothesisSpace::hats(10, r_max)?;
    let prob = assemble(&ens, &hs, (0.0, 10.0))?;
    let phi = |r: f64| truth.eval_phi(r).unwrap_or(f64::NAN);
    let report = solve_and_report(&prob, &hs, None, Some(&phi), &distances, None)?;
    println!(
        "{} increments, L²(ρ) error {:.4} against ‖φ‖ = {:.4}",
        report.increments,
        report.l2_rho_error.unwrap(),
        report.l2_rho_truth.unwrap()
    );
    for k in 0..hs.n {
        let r = r_max * (k as f64 + 0.5) / hs.n as f64;
        println!("r = {r:6.3}  φ̂ = {:8.4}  φ = {:8.4}", hs.combine(&report.coefficients, r), phi(r));
    }
    Ok(())
}
