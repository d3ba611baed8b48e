//! Loading a real dataset from long-format CSV: one row per unit with its
//! treatment and covariates, and one row per raw outcome observation.

use std::io::Write;

use distcausal::dataset::Dataset;
use distcausal::distspace::QuantileGrid;
use distcausal::estimators::{CrossFit, EstimatorConfig, EstimatorKind, NeuralTrainer};
use distcausal::io::load_dataset;
use distcausal::kernels::Kernel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> distcausal::Result<()> {
    let dir = tempfile_dir()?;
    let (units, obs) = (dir.join("units.csv"), dir.join("observations.csv"));
    {
        // spending per order for 600 customers with a continuous discount rate
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut u = std::fs::File::create(&units)?;
        let mut o = std::fs::File::create(&obs)?;
        writeln!(u, "unit_id,treatment,x1,x2")?;
        writeln!(o, "unit_id,value")?;
        for i in 0..600 {
            let (x1, x2): (f64, f64) = (rng.random(), rng.random());
            let a = 0.5 * x1 + 0.3 * rng.random::<f64>();
            writeln!(u, "c{i},{a},{x1},{x2}")?;
            for _ in 0..rng.random_range(5..60) {
                let spend = (1.0 + a + x2) * (-rng.random::<f64>().ln());
                writeln!(o, "c{i},{spend}")?;
            }
        }
    }
    let data: Dataset = load_dataset(&units, &obs, &QuantileGrid::default())?;
    println!(
        "loaded {} units with {} covariates",
        data.len(),
        data.covariate_dim()
    );

    let mut neural = NeuralTrainer::default();
    neural.nfr_train.max_epochs = 20;
    neural.cnf_train.max_epochs = 10;
    neural.cnf_arch.ode_steps = 6;
    let cf = CrossFit::train(&data, &neural, 2, 0)?;
    let config = EstimatorConfig::new(Kernel::Epanechnikov, 0.1)?;
    for a in [0.2, 0.4] {
        let e = cf.estimate(EstimatorKind::Dml, &config, a)?;
        println!(
            "a = {a}: DML quantiles at 0.1/0.5/0.9 = {:.3?}",
            [
                e.theta.value_at(0.1).unwrap(),
                e.theta.value_at(0.5).unwrap(),
                e.theta.value_at(0.9).unwrap()
            ]
        );
    }
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let d = std::env::temp_dir().join("distcausal_real_data");
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
