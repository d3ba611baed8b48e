//! Conditional density of a continuous treatment with the normalizing-flow
//! model, checked against the generator's true conditional normal.

use distcausal::cnf::{cnf_fit, density_mass, CnfArch};
use distcausal::nncore::TrainConfig;
use distcausal::simlab::{Dgp, DgpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distcausal::Result<()> {
    let dgp = Dgp::new(DgpConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let units: Vec<_> = (0..3000)
        .map(|i| dgp.generate_unit(i.to_string(), &mut rng))
        .collect::<Result<_, _>>()?;
    let (train, test) = units.split_at(2500);
    let a: Vec<f64> = train.iter().map(|g| g.unit.a).collect();
    let xs: Vec<&[f64]> = train.iter().map(|g| g.unit.x.as_slice()).collect();
    let arch = CnfArch {
        ode_steps: 10,
        ..CnfArch::default()
    };
    let cfg = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let fit = cnf_fit(&a, &xs, &cfg, &arch)?;

    let (mut model_ll, mut true_ll) = (0.0, 0.0);
    for g in test {
        model_ll += fit.model.log_density(g.unit.a, &g.unit.x)?;
        true_ll += dgp.propensity(g.unit.a, &g.unit.x).ln();
    }
    let n = test.len() as f64;
    println!(
        "held-out mean log-likelihood: model {:.4}, true {:.4}",
        model_ll / n,
        true_ll / n
    );

    let x = &test[0].unit.x;
    println!(
        "density mass over [-8, 8]: {:.4}",
        density_mass(&fit.model, x, -8.0, 8.0, 4001)?
    );
    for a in [-1.0, 0.0, 1.0] {
        println!(
            "p({a:+.1} | x) model {:.4}  true {:.4}",
            fit.model.density(a, x)?,
            dgp.propensity(a, x)
        );
    }
    Ok(())
}
