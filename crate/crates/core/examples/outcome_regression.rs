//! Fit the neural functional regression outcome model on synthetic data and
//! compare its predictions with the generator's true quantile functions.

use distcausal::estimators::NeuralTrainer;
use distcausal::nfr::{nfr_fit, NfrModel};
use distcausal::simlab::{mae, Dgp, DgpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> distcausal::Result<()> {
    let dgp = Dgp::new(DgpConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = dgp.generate_dataset(2000, &mut rng)?;
    let mut cfg = NeuralTrainer::default();
    cfg.nfr_train.max_epochs = 40;
    let fit = nfr_fit(&train, &cfg.nfr_train, &cfg.nfr_arch)?;
    let last = fit.history.last().unwrap();
    println!(
        "trained {} epochs, best epoch {}, validation loss {:.5}",
        fit.history.len(),
        fit.best_epoch,
        last.best_validation_loss
    );

    let mut err = 0.0;
    let n = 200;
    for i in 0..n {
        let g = dgp.generate_unit(format!("t{i}"), &mut rng)?;
        let truth = g.truth.map(|v| v - g.eps)?;
        err += mae(&fit.model.predict(g.unit.a, &g.unit.x)?, &truth)?;
    }
    println!(
        "held-out MAE against the noise-free truth: {:.4}",
        err / n as f64
    );

    let doc = serde_json::to_string(&fit.model.to_document())?;
    let back = NfrModel::from_document(&serde_json::from_str(&doc)?)?;
    let x = &train.units()[0].x;
    assert_eq!(back.predict(0.0, x)?, fit.model.predict(0.0, x)?);
    println!(
        "saved model is {} bytes of JSON and reloads exactly",
        doc.len()
    );
    Ok(())
}
