//! Plug-in bandwidth selection, bias correction and a uniform band for the
//! DML estimate at one treatment level.

use std::sync::Arc;

use distcausal::dataset::Dataset;
use distcausal::estimators::{CrossFit, EstimatorConfig};
use distcausal::inference::{choose_bandwidth, dml_band, BandOptions};
use distcausal::kernels::Kernel;
use distcausal::simlab::{Dgp, DgpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distcausal::Result<()> {
    let dgp = Arc::new(Dgp::new(DgpConfig::default())?);
    let data = dgp.generate_dataset(5000, &mut ChaCha8Rng::seed_from_u64(2))?;
    let nu = dgp.oracle_nuisances(0.0, 1.0);
    let trainer = move |_: &Dataset, _: usize| Ok(nu.clone());
    let cf = CrossFit::train(&data, &trainer, 2, 0)?;
    let config = EstimatorConfig::new(Kernel::Epanechnikov, 1.0)?;

    let choice = choose_bandwidth(&data, &cf, &config, 0.0, 1.0)?;
    println!(
        "h* = {:.4} (closed form {:.4}, grid argmin {:.4})",
        choice.h_star, choice.closed_form, choice.grid_argmin
    );

    let band = dml_band(&data, &cf, &config, 0.0, &BandOptions::default())?;
    let truth = dgp.ground_truth(0.0, 200_000, 0)?;
    println!(
        "q̂ = {:.3}, clipped eigenvalues {}",
        band.q_hat, band.clipped_eigenvalues
    );
    println!(
        "{:>5} {:>8} {:>8} {:>8} {:>8}",
        "t", "lower", "theta", "upper", "truth"
    );
    for i in data.grid().headline_indices() {
        println!(
            "{:>5.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            band.levels[i],
            band.lower[i],
            band.theta[i],
            band.upper[i],
            truth.values()[i]
        );
    }
    Ok(())
}
