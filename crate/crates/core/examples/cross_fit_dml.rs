//! Cross-fitted DR, IPW and DML estimates of the distributional average
//! potential outcome, with closed-form and learned nuisances.

use std::sync::Arc;

use distcausal::estimators::{CrossFit, EstimatorConfig, EstimatorKind, NeuralTrainer};
use distcausal::kernels::Kernel;
use distcausal::simlab::{mae, Dgp, DgpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distcausal::Result<()> {
    let dgp = Arc::new(Dgp::new(DgpConfig::default())?);
    let data = dgp.generate_dataset(4000, &mut ChaCha8Rng::seed_from_u64(11))?;
    let truth = dgp.ground_truth(0.5, 200_000, 0)?;
    let config = EstimatorConfig::new(Kernel::Epanechnikov, 0.2)?;

    let oracle = dgp.oracle_nuisances(0.0, 1.0);
    let trainer = move |_: &distcausal::dataset::Dataset, _: usize| Ok(oracle.clone());
    let cf = CrossFit::train(&data, &trainer, 2, 0)?;
    println!("oracle nuisances, a = 0.5:");
    for (kind, e) in EstimatorKind::ALL
        .iter()
        .zip(cf.estimate_all(&config, 0.5)?)
    {
        println!(
            "  {kind:<4} MAE {:.4}  floor hits {}",
            mae(&e.theta, &truth)?,
            e.floor_hits
        );
    }

    let mut neural = NeuralTrainer::default();
    neural.nfr_train.max_epochs = 30;
    neural.cnf_train.max_epochs = 15;
    neural.cnf_arch.ode_steps = 8;
    let cf = CrossFit::train(&data, &neural, 2, 0)?;
    println!("learned NFR + CNF nuisances, a = 0.5:");
    for (kind, e) in EstimatorKind::ALL
        .iter()
        .zip(cf.estimate_all(&config, 0.5)?)
    {
        println!("  {kind:<4} MAE {:.4}", mae(&e.theta, &truth)?);
    }
    Ok(())
}
