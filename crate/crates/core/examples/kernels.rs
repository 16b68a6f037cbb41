//! Randomized Gram tests of positive and negative definite kernels.

use ipslab::pdkernels::{appendix_suite, test_nd, test_pd, transform_triangle, Kernel};
use ipslab::potentials::Potential;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phi = Kernel::from_potential(Potential::power_shifted(1.0, 1.5, 0.9)?);
    let nd = test_nd(&phi, 3, 30, 20, 1)?;
    println!("Φ(|x-y|) negative definite: {:?} (zero-sum max {:.2e})", nd.verdict, nd.max_zero_sum_eigenvalue);
    let pd = test_pd(&transform_triangle(&phi, vec![0.0; 3]), 3, 30, 20, 1)?;
    println!("triangle transform positive definite: {:?} (min {:.2e})", pd.verdict, pd.min_eigenvalue);
    let bad = test_pd(&Kernel::radial_power(3.0), 2, 30, 20, 1)?;
    println!("|x-y|³ as a positive definite kernel: {:?}", bad.verdict);

    for e in appendix_suite(2, 30, 20, 1)? {
        println!("{:<32} {}  {}", e.name, if e.passed { "pass" } else { "FAIL" }, e.detail);
    }
    Ok(())
}
