//! Coercivity constants of hat spaces for the quadratic potential, from
//! stationary samples and from the analytic density.

use ipslab::coercivity::{
    estimate_i_infty, estimate_s_h, forms_from_density, norm_star, pencil_min, HypothesisSpace, NormStarOptions,
};
use ipslab::density::{stationary_density, GridSpec, McSpec};
use ipslab::dynamics::build_frame;
use ipslab::potentials::Potential;
use ipslab::rng::{self, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Exact stationary samples: (u, v) is Gaussian with covariance [[1/2, 1/4], [1/4, 1/2]].
    let mut r = rng::stream(5, 0, Purpose::Sampling);
    let mut rows = Vec::new();
    for _ in 0..200_000 {
        let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
        let u = a / 2f64.sqrt();
        rows.extend([u, u / 2.0 + b * (0.375f64).sqrt()]);
    }

    let frame = build_frame(3, 1)?;
    let grid = GridSpec { half_width: Some(6.0), bins: Some(240), cell_order: None };
    let density = stationary_density(&frame, &Potential::quadratic(), &grid, &McSpec::default())?;

    println!("I(1) = {:.4} (exact 1/3)", estimate_i_infty(&HypothesisSpace::constant(), &rows, 1, 1)?.g[0][0]);
    for n in [2, 3, 4, 8] {
        let hs = HypothesisSpace::hats(n, 2.0)?;
        let report = estimate_i_infty(&hs, &rows, 1, 1)?;
        let (g, m) = forms_from_density(&hs, &density)?;
        let (exact, _) = pencil_min(&g, &m)?;
        print!("{n} hats: c_hat = {:+.2e} ± {:.1e}, quadrature {exact:.2e}", report.c_hat, report.c_hat_stderr);
        if report.c_hat > 3.0 * report.c_hat_stderr {
            print!(", S_H ≥ {:.1}", estimate_s_h(&hs, &report, 1)?.value);
        }
        println!();
    }

    let ns = norm_star(&|u: f64| u * (-u * u).exp(), 6.0, 0.0, 0.5, NormStarOptions::default())?;
    println!("‖u e^(-u²)‖_* = {:.6} (π/√2 = {:.6})", ns.value, std::f64::consts::PI / 2f64.sqrt());
    Ok(())
}
