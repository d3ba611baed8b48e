//! Feed-forward networks, a reverse-mode tape, and Adam training shared by
//! the outcome-regression and conditional-density models.

mod mlp;
mod optim;
pub mod tape;

pub use mlp::{Mlp, MlpDocument, MlpVars, MLP_SCHEMA_VERSION};
pub use optim::{
    split_rows, train, Adam, EpochRecord, Objective, PlateauScheduler, TrainConfig, TrainOutcome,
};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

/// Per-column affine map `(v - shift) / scale` applied to network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations (unit scale for constant columns).
    pub fn fit(x: &ndarray::Array2<f64>) -> Self {
        let shift = x
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty batch")
            .to_vec();
        let scale = x
            .std_axis(ndarray::Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &mut ndarray::Array2<f64>) {
        for (mut col, (s, c)) in x
            .columns_mut()
            .into_iter()
            .zip(self.shift.iter().zip(&self.scale))
        {
            col.mapv_inplace(|v| (v - s) / c);
        }
    }
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// every parameter array. Test and diagnostic helper.
pub fn finite_difference<M: Clone>(
    model: &M,
    params_mut: impl Fn(&mut M) -> Vec<&mut ndarray::Array2<f64>>,
    f: impl Fn(&M) -> f64,
    step: f64,
) -> Vec<ndarray::Array2<f64>> {
    let mut probe = model.clone();
    let shapes: Vec<_> = params_mut(&mut probe).iter().map(|p| p.dim()).collect();
    let mut out: Vec<_> = shapes.iter().map(|&s| ndarray::Array2::zeros(s)).collect();
    for (k, &(r, c)) in shapes.iter().enumerate() {
        for i in 0..r {
            for j in 0..c {
                let orig = params_mut(&mut probe)[k][[i, j]];
                params_mut(&mut probe)[k][[i, j]] = orig + step;
                let up = f(&probe);
                params_mut(&mut probe)[k][[i, j]] = orig - step;
                let down = f(&probe);
                params_mut(&mut probe)[k][[i, j]] = orig;
                out[k][[i, j]] = (up - down) / (2.0 * step);
            }
        }
    }
    out
}

/// Largest coordinate-wise relative error, with an absolute floor so that
/// near-zero coordinates do not dominate.
pub fn max_relative_error(
    a: &[ndarray::Array2<f64>],
    b: &[ndarray::Array2<f64>],
    floor: f64,
) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net = Mlp::from_parts(vec![array![[2.0]]], vec![vec![1.0]]).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn one_tanh_unit() {
        let net = Mlp::from_parts(
            vec![array![[1.0]], array![[1.0]]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let y = net.forward(&[0.5]).unwrap();
        assert!((y[0] - 0.462_117).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::zeros(&[2, 1]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(crate::Error::Shape(_))));
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::from_parts(vec![array![[1.0, 2.0]]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::xavier(&[2, 4, 1], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>());
        let (_, grads) = net
            .gradient(&x, |tape, out| {
                let zero = tape.scale(out, 0.0);
                let s = tape.sum_all(zero);
                tape.offset(s, 4.0)
            })
            .unwrap();
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_squared_error_gradient() {
        // f(x) = w x + b, loss (f - y)² → ∂w = 2 r x, ∂b = 2 r
        let net = Mlp::from_parts(vec![array![[1.5]]], vec![vec![0.5]]).unwrap();
        let x = array![[2.0]];
        let (loss, grads) = net
            .gradient(&x, |tape, out| {
                let r = tape.offset(out, -1.0);
                let sq = tape.square(r);
                tape.mean_all(sq)
            })
            .unwrap();
        let resid = 1.5 * 2.0 + 0.5 - 1.0;
        assert!((loss - resid * resid).abs() < 1e-12);
        assert!((grads[0][[0, 0]] - 2.0 * resid * 2.0).abs() < 1e-12);
        assert!((grads[1][[0, 0]] - 2.0 * resid).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::xavier(&[3, 6, 5, 2], &mut rng).unwrap();
            let x = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
            let loss_on_tape = |tape: &mut Tape, out: Var| {
                let target = tape.leaf(y.clone());
                let r = tape.sub(out, target);
                let sq = tape.square(r);
                tape.mean_all(sq)
            };
            let (_, grads) = net.gradient(&x, loss_on_tape).unwrap();
            let fd = finite_difference(
                &net,
                |m| m.params_mut(),
                |m| {
                    let out = m.forward_batch(&x).unwrap();
                    (&out - &y).mapv(|v| v * v).mean().unwrap()
                },
                1e-5,
            );
            let err = max_relative_error(&grads, &fd, 1e-6);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn tangent_matches_input_finite_difference_and_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::xavier(&[3, 5, 4, 1], &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (_, dz) = net.forward_batch_with_tangent(&x, 0).unwrap();
        let eps = 1e-6;
        let mut up = x.clone();
        up.column_mut(0).mapv_inplace(|v| v + eps);
        let mut down = x.clone();
        down.column_mut(0).mapv_inplace(|v| v - eps);
        let fd =
            (net.forward_batch(&up).unwrap() - net.forward_batch(&down).unwrap()) / (2.0 * eps);
        for (a, b) in dz.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-7);
        }

        // second-order: gradient of Σ ∂g/∂x₀ with respect to parameters
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let (_, d) = Mlp::forward_tape_with_tangent(&mut tape, &vars, xv, 0).unwrap();
        assert!((tape.value(d) - &dz).iter().all(|v| v.abs() < 1e-14));
        let s = tape.sum_all(d);
        let grads = vars.collect(&tape.backward(s));
        let fd = finite_difference(
            &net,
            |m| m.params_mut(),
            |m| m.forward_batch_with_tangent(&x, 0).unwrap().1.sum(),
            1e-5,
        );
        assert!(max_relative_error(&grads, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = array![[1.0, -2.0]];
        let mut adam = Adam::new(&[(1, 2)], 0.01, 0.0);
        adam.step(&mut [&mut p], &[Array2::zeros((1, 2))]);
        assert_eq!(p, array![[1.0, -2.0]]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = array![[0.0, 0.0]];
        let mut adam = Adam::new(&[(1, 2)], 0.003, 0.0);
        adam.step(&mut [&mut p], &[array![[0.7, -4.0]]]);
        assert!((p[[0, 0]] + 0.003).abs() < 1e-9);
        assert!((p[[0, 1]] - 0.003).abs() < 1e-9);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut w = array![[1.0]];
        let mut adam = Adam::new(&[(1, 1)], 0.01, 0.0);
        let mut last = 1.0f64;
        for _ in 0..50 {
            let g = &w * 2.0;
            adam.step(&mut [&mut w], &[g]);
            let now = w[[0, 0]].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn plateau_halves_once_per_trigger() {
        let mut s = PlateauScheduler::new(3);
        assert!(!s.observe(1.0));
        let triggers: Vec<bool> = (0..7).map(|_| s.observe(2.0)).collect();
        assert_eq!(
            triggers,
            vec![false, false, true, false, false, true, false]
        );
        assert!(!s.observe(0.5));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::xavier(&[4, 7, 3], &mut rng).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
        for (a, b) in net.params().iter().zip(back.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn json_rejects_unknown_schema() {
        let net = Mlp::zeros(&[1, 1]).unwrap();
        let mut doc = net.to_document();
        doc.schema_version = 99;
        assert!(Mlp::from_document(&doc).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let (t, v) = split_rows(50, 0.1, 4);
        assert_eq!(v.len(), 5);
        let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_rows(50, 0.1, 4), (t, v));
    }
}
