//! Wasserstein geometry on quantile functions: distances, the barycenter
//! as a pointwise mean, and empirical quantiles from raw draws.

use distcausal::distspace::{
    barycenter, empirical_quantile_function, frechet_objective, wasserstein2, EmpiricalSample,
    QuantileFunction, QuantileGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as StNormal};

fn main() -> distcausal::Result<()> {
    let grid = QuantileGrid::default();
    let z = StNormal::standard();

    // N(μ, σ²) has quantile function μ + σ Φ⁻¹(t); W2 between two normals
    // is sqrt((μ1 − μ2)² + (σ1 − σ2)²) up to grid truncation.
    let q1 = QuantileFunction::from_fn(grid.clone(), |t| z.inverse_cdf(t))?;
    let q2 = QuantileFunction::from_fn(grid.clone(), |t| 1.0 + 2.0 * z.inverse_cdf(t))?;
    println!(
        "W2(N(0,1), N(1,4)) on the grid = {:.4} (continuum value {:.4})",
        wasserstein2(&q1, &q2)?,
        2f64.sqrt()
    );

    // Outcomes N(λ, 1) with λ ~ U(0, 1): the barycenter is N(1/2, 1), while
    // the mixture density Φ(1 − x) − Φ(−x) is not even Gaussian.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<QuantileFunction> = (0..10_000)
        .map(|_| {
            let lambda: f64 = rng.random();
            QuantileFunction::from_fn(grid.clone(), |t| lambda + z.inverse_cdf(t))
        })
        .collect::<Result<_, _>>()?;
    let bary = barycenter(&samples)?;
    let target = QuantileFunction::from_fn(grid.clone(), |t| 0.5 + z.inverse_cdf(t))?;
    let sup = bary
        .headline_values()
        .iter()
        .zip(target.headline_values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("barycenter vs N(0.5, 1) headline sup error: {sup:.4}");
    println!(
        "Fréchet objective at barycenter {:.4} < at target shifted by 0.1 {:.4}",
        frechet_objective(&bary, &samples)?,
        frechet_objective(&target.map(|v| v + 0.1)?, &samples)?
    );

    // Empirical quantile function from raw observations.
    let draws: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eq = empirical_quantile_function(&EmpiricalSample::new(draws)?, &grid);
    println!(
        "empirical median of 500 N(0,1) draws: {:.3}",
        eq.value_at(0.5).unwrap()
    );
    Ok(())
}
