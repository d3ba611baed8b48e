//! Conditional continuous normalizing flow for the generalized propensity
//! `p(a | x)`.
//!
//! A scalar treatment is carried back along `dz/dτ = g(z, x, τ)` from
//! `τ₁` (where `z = a`) to `τ₀`, landing on a conditional Gaussian base
//! `N(μ(x), σ(x)²)`. With one dimension the Jacobian trace is the scalar
//! `∂g/∂z`, so `log p(a | x) = log N(z(τ₀); μ, σ²) + ∫_{τ₁}^{τ₀} ∂g/∂z dτ`
//! exactly, up to the fixed-step RK4 discretization.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    self, Mlp, MlpDocument, MlpVars, Objective, Standardizer, Tape, TrainConfig, Var,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnfArch {
    pub mu_hidden: Vec<usize>,
    pub logsigma_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub ode_steps: usize,
    /// When false the dynamics stay at their initial value (zero) and only
    /// the base distribution is learned.
    pub train_flow: bool,
}

impl Default for CnfArch {
    fn default() -> Self {
        Self {
            mu_hidden: vec![32],
            logsigma_hidden: vec![32],
            g_hidden: vec![16, 16],
            ode_steps: 20,
            train_flow: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnfModel {
    pub mu_net: Mlp,
    pub logsigma_net: Mlp,
    /// Dynamics with inputs `[z, x, τ]`.
    pub g_net: Mlp,
    pub tau0: f64,
    pub tau1: f64,
    pub ode_steps: usize,
    /// Covariate standardization applied before every network.
    pub x_norm: Standardizer,
    /// The flow runs on `(a - a_shift) / a_scale`.
    pub a_shift: f64,
    pub a_scale: f64,
}

fn net(widths_in: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let mut w = vec![widths_in];
    w.extend(hidden);
    w.push(1);
    Mlp::xavier(&w, rng)
}

impl CnfModel {
    /// Networks of matching dimensions with identity normalization.
    pub fn new(mu_net: Mlp, logsigma_net: Mlp, g_net: Mlp, ode_steps: usize) -> Result<Self> {
        let d = mu_net.input_dim();
        if logsigma_net.input_dim() != d || g_net.input_dim() != d + 2 {
            return Err(Error::Shape(format!(
                "density networks disagree on the covariate dimension {d}"
            )));
        }
        if mu_net.output_dim() != 1 || logsigma_net.output_dim() != 1 || g_net.output_dim() != 1 {
            return Err(Error::Shape(
                "density networks must have scalar outputs".into(),
            ));
        }
        if ode_steps == 0 {
            return Err(Error::InvalidInput("ode_steps must be at least 1".into()));
        }
        Ok(Self {
            mu_net,
            logsigma_net,
            g_net,
            tau0: 0.0,
            tau1: 1.0,
            ode_steps,
            x_norm: Standardizer::identity(d),
            a_shift: 0.0,
            a_scale: 1.0,
        })
    }

    /// Xavier networks; the last dynamics layer starts at zero so the
    /// initial flow is the identity.
    pub fn init(d: usize, arch: &CnfArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = net(d, &arch.mu_hidden, &mut rng)?;
        let ls = net(d, &arch.logsigma_hidden, &mut rng)?;
        let mut g = net(d + 2, &arch.g_hidden, &mut rng)?;
        let last = g.layers() - 1;
        g.weight_mut(last).fill(0.0);
        g.bias_mut(last).fill(0.0);
        Self::new(mu, ls, g, arch.ode_steps)
    }

    pub fn covariate_dim(&self) -> usize {
        self.mu_net.input_dim()
    }

    fn covariates(&self, xs: &[&[f64]]) -> Result<Array2<f64>> {
        let d = self.covariate_dim();
        let mut m = Array2::zeros((xs.len(), d));
        for (i, x) in xs.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Shape(format!(
                    "covariate vector of length {} for a model expecting {d}",
                    x.len()
                )));
            }
            m.row_mut(i).assign(&ndarray::ArrayView1::from(*x));
        }
        self.x_norm.apply(&mut m);
        Ok(m)
    }

    fn g_input(z: &Array2<f64>, xt: &Array2<f64>, tau: f64) -> Array2<f64> {
        let tau_col = Array2::from_elem((z.nrows(), 1), tau);
        ndarray::concatenate(Axis(1), &[z.view(), xt.view(), tau_col.view()]).expect("rows agree")
    }

    /// RK4 from `τ₁` back to `τ₀` on standardized inputs; returns `z(τ₀)`
    /// and the accumulated divergence, both as columns.
    fn integrate(&self, z1: Array2<f64>, xt: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let dt = (self.tau0 - self.tau1) / self.ode_steps as f64;
        let mut z = z1;
        let mut div = Array2::zeros(z.dim());
        let f = |z: &Array2<f64>, tau: f64| {
            self.g_net
                .forward_batch_with_tangent(&Self::g_input(z, xt, tau), 0)
        };
        for step in 0..self.ode_steps {
            let tau = self.tau1 + step as f64 * dt;
            let (k1, d1) = f(&z, tau)?;
            let (k2, d2) = f(&(&z + &(&k1 * (dt / 2.0))), tau + dt / 2.0)?;
            let (k3, d3) = f(&(&z + &(&k2 * (dt / 2.0))), tau + dt / 2.0)?;
            let (k4, d4) = f(&(&z + &(&k3 * dt)), tau + dt)?;
            z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            div = div + (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (dt / 6.0);
            if z.iter().chain(div.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite flow state at integration step {}",
                    step + 1
                )));
            }
        }
        Ok((z, div))
    }

    /// `(z(τ₀), ∫_{τ₁}^{τ₀} ∂g/∂z dτ)` for one treatment value, in the
    /// model's standardized treatment coordinate.
    pub fn flow_backward(&self, a: f64, x: &[f64]) -> Result<(f64, f64)> {
        let xt = self.covariates(&[x])?;
        let z1 = Array2::from_elem((1, 1), (a - self.a_shift) / self.a_scale);
        let (z, div) = self.integrate(z1, &xt)?;
        Ok((z[[0, 0]], div[[0, 0]]))
    }

    /// Gaussian base log-density at `z` (standardized coordinate).
    pub fn base_log_density(&self, z: f64, x: &[f64]) -> Result<f64> {
        let xt = self.covariates(&[x])?;
        let mu = self.mu_net.forward_batch(&xt)?[[0, 0]];
        let ls = self.logsigma_net.forward_batch(&xt)?[[0, 0]];
        Ok(gaussian_log_density(z, mu, ls))
    }

    pub fn log_density(&self, a: f64, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_pairs(&[a], &[x])?[0])
    }

    pub fn density(&self, a: f64, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(a, x)?.exp())
    }

    /// `log p(aᵢ | xᵢ)` for paired treatments and covariates.
    pub fn log_density_pairs(&self, a: &[f64], xs: &[&[f64]]) -> Result<Vec<f64>> {
        if a.len() != xs.len() {
            return Err(Error::Shape("one treatment per covariate vector".into()));
        }
        let xt = self.covariates(xs)?;
        let z1 = Array2::from_shape_fn((a.len(), 1), |(i, _)| (a[i] - self.a_shift) / self.a_scale);
        let (z0, div) = self.integrate(z1, &xt)?;
        let mu = self.mu_net.forward_batch(&xt)?;
        let ls = self.logsigma_net.forward_batch(&xt)?;
        let jac = self.a_scale.ln();
        Ok((0..a.len())
            .map(|i| gaussian_log_density(z0[[i, 0]], mu[[i, 0]], ls[[i, 0]]) + div[[i, 0]] - jac)
            .collect())
    }

    /// `p(a | xᵢ)` at one treatment level for many covariate vectors.
    pub fn density_many(&self, a: f64, xs: &[&[f64]]) -> Result<Vec<f64>> {
        let a = vec![a; xs.len()];
        Ok(self
            .log_density_pairs(&a, xs)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Conditional mean and standard deviation of the base distribution in
    /// the original treatment units.
    pub fn base_moments(&self, x: &[f64]) -> Result<(f64, f64)> {
        let xt = self.covariates(&[x])?;
        let mu = self.mu_net.forward_batch(&xt)?[[0, 0]];
        let ls = self.logsigma_net.forward_batch(&xt)?[[0, 0]];
        Ok((self.a_shift + self.a_scale * mu, self.a_scale * ls.exp()))
    }

    /// Parameters `mu_net..., logsigma_net...` followed by `g_net...` when
    /// `with_flow`.
    pub fn params_mut(&mut self, with_flow: bool) -> Vec<&mut Array2<f64>> {
        let mut p = self.mu_net.params_mut();
        p.extend(self.logsigma_net.params_mut());
        if with_flow {
            p.extend(self.g_net.params_mut());
        }
        p
    }

    pub fn to_document(&self) -> CnfDocument {
        CnfDocument {
            schema_version: CNF_SCHEMA_VERSION,
            mu_net: self.mu_net.to_document(),
            logsigma_net: self.logsigma_net.to_document(),
            g_net: self.g_net.to_document(),
            tau0: self.tau0,
            tau1: self.tau1,
            ode_steps: self.ode_steps,
            x_norm: self.x_norm.clone(),
            a_shift: self.a_shift,
            a_scale: self.a_scale,
        }
    }

    pub fn from_document(doc: &CnfDocument) -> Result<Self> {
        if doc.schema_version != CNF_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported density model schema version {}",
                doc.schema_version
            )));
        }
        let mut m = Self::new(
            Mlp::from_document(&doc.mu_net)?,
            Mlp::from_document(&doc.logsigma_net)?,
            Mlp::from_document(&doc.g_net)?,
            doc.ode_steps,
        )?;
        if doc.x_norm.dim() != m.covariate_dim() || !(doc.a_scale > 0.0) {
            return Err(Error::Data(
                "density model normalization is inconsistent".into(),
            ));
        }
        m.tau0 = doc.tau0;
        m.tau1 = doc.tau1;
        m.x_norm = doc.x_norm.clone();
        m.a_shift = doc.a_shift;
        m.a_scale = doc.a_scale;
        Ok(m)
    }
}

fn gaussian_log_density(z: f64, mu: f64, logsigma: f64) -> f64 {
    let r = (z - mu) * (-logsigma).exp();
    -HALF_LN_2PI - logsigma - 0.5 * r * r
}

pub const CNF_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnfDocument {
    pub schema_version: u32,
    pub mu_net: MlpDocument,
    pub logsigma_net: MlpDocument,
    pub g_net: MlpDocument,
    pub tau0: f64,
    pub tau1: f64,
    pub ode_steps: usize,
    pub x_norm: Standardizer,
    pub a_shift: f64,
    pub a_scale: f64,
}

/// Mean negative log-likelihood in standardized treatment units.
pub struct CnfObjective {
    xt: Array2<f64>,
    at: Array2<f64>,
    train_flow: bool,
    /// `z(τ₀)` and divergence per row when the flow is frozen.
    frozen: Option<(Array2<f64>, Array2<f64>)>,
}

impl CnfObjective {
    /// Raw treatments and covariates; `model` normalization must be set.
    pub fn new(model: &CnfModel, a: &[f64], xs: &[&[f64]], train_flow: bool) -> Result<Self> {
        if a.len() != xs.len() {
            return Err(Error::Shape("one treatment per covariate vector".into()));
        }
        let xt = model.covariates(xs)?;
        let at = Array2::from_shape_fn((a.len(), 1), |(i, _)| {
            (a[i] - model.a_shift) / model.a_scale
        });
        let frozen = if train_flow {
            None
        } else {
            Some(model.integrate(at.clone(), &xt)?)
        };
        Ok(Self {
            xt,
            at,
            train_flow,
            frozen,
        })
    }

    fn g_tape(tape: &mut Tape, g: &MlpVars, z: Var, x: Var, tau: f64) -> Result<(Var, Var)> {
        let rows = tape.value(z).nrows();
        let t = tape.leaf(Array2::from_elem((rows, 1), tau));
        let input = tape.concat_cols(&[z, x, t]);
        Mlp::forward_tape_with_tangent(tape, g, input, 0)
    }

    fn integrate_tape(
        model: &CnfModel,
        tape: &mut Tape,
        g: &MlpVars,
        z1: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        let dt = (model.tau0 - model.tau1) / model.ode_steps as f64;
        let mut z = z1;
        let mut div: Option<Var> = None;
        for step in 0..model.ode_steps {
            let tau = model.tau1 + step as f64 * dt;
            let (k1, d1) = Self::g_tape(tape, g, z, x, tau)?;
            let s = tape.scale(k1, dt / 2.0);
            let z2 = tape.add(z, s);
            let (k2, d2) = Self::g_tape(tape, g, z2, x, tau + dt / 2.0)?;
            let s = tape.scale(k2, dt / 2.0);
            let z3 = tape.add(z, s);
            let (k3, d3) = Self::g_tape(tape, g, z3, x, tau + dt / 2.0)?;
            let s = tape.scale(k3, dt);
            let z4 = tape.add(z, s);
            let (k4, d4) = Self::g_tape(tape, g, z4, x, tau + dt)?;
            let combine = |tape: &mut Tape, a: Var, b: Var, c: Var, d: Var| {
                let bc = tape.add(b, c);
                let bc2 = tape.scale(bc, 2.0);
                let ad = tape.add(a, d);
                let sum = tape.add(ad, bc2);
                tape.scale(sum, dt / 6.0)
            };
            let dz = combine(tape, k1, k2, k3, k4);
            z = tape.add(z, dz);
            let dd = combine(tape, d1, d2, d3, d4);
            div = Some(match div {
                Some(prev) => tape.add(prev, dd),
                None => dd,
            });
            if tape.value(z).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite flow state at integration step {}",
                    step + 1
                )));
            }
        }
        Ok((z, div.expect("at least one step")))
    }

    fn rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        m.select(Axis(0), rows)
    }
}

impl Objective for CnfObjective {
    type Model = CnfModel;

    fn len(&self) -> usize {
        self.at.nrows()
    }

    fn params_mut<'a>(&self, model: &'a mut CnfModel) -> Vec<&'a mut Array2<f64>> {
        model.params_mut(self.train_flow)
    }

    fn loss_and_grad(&self, model: &CnfModel, rows: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let mu_v = model.mu_net.register(&mut tape);
        let ls_v = model.logsigma_net.register(&mut tape);
        let x = tape.leaf(Self::rows(&self.xt, rows));
        let (z0, div, g_v) = match &self.frozen {
            Some((z0, div)) => (
                tape.leaf(Self::rows(z0, rows)),
                tape.leaf(Self::rows(div, rows)),
                None,
            ),
            None => {
                let g_v = model.g_net.register(&mut tape);
                let z1 = tape.leaf(Self::rows(&self.at, rows));
                let (z0, div) = Self::integrate_tape(model, &mut tape, &g_v, z1, x)?;
                (z0, div, Some(g_v))
            }
        };
        let mu = Mlp::forward_tape(&mut tape, &mu_v, x)?;
        let ls = Mlp::forward_tape(&mut tape, &ls_v, x)?;
        let neg_ls = tape.scale(ls, -1.0);
        let inv_sigma = tape.exp(neg_ls);
        let centered = tape.sub(z0, mu);
        let r = tape.mul(centered, inv_sigma);
        let r2 = tape.square(r);
        let quad = tape.scale(r2, 0.5);
        // negative log-likelihood per row, without the constant
        let nll = tape.add(quad, ls);
        let nll = tape.sub(nll, div);
        let total = tape.sum_all(nll);
        let mean = tape.scale(total, 1.0 / rows.len() as f64);
        let loss = tape.offset(mean, HALF_LN_2PI);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let mut out = mu_v.collect(&grads);
        out.extend(ls_v.collect(&grads));
        if let Some(g_v) = g_v {
            out.extend(g_v.collect(&grads));
        }
        Ok((value, out))
    }

    fn loss(&self, model: &CnfModel, rows: &[usize]) -> Result<f64> {
        let xt = Self::rows(&self.xt, rows);
        let (z0, div) = match &self.frozen {
            Some((z0, div)) => (Self::rows(z0, rows), Self::rows(div, rows)),
            None => model.integrate(Self::rows(&self.at, rows), &xt)?,
        };
        let mu = model.mu_net.forward_batch(&xt)?;
        let ls = model.logsigma_net.forward_batch(&xt)?;
        let total: f64 = (0..rows.len())
            .map(|i| -(gaussian_log_density(z0[[i, 0]], mu[[i, 0]], ls[[i, 0]]) + div[[i, 0]]))
            .sum();
        Ok(total / rows.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct CnfFit {
    pub model: CnfModel,
    pub history: Vec<nncore::EpochRecord>,
    pub best_epoch: usize,
}

/// Maximum-likelihood fit of `p(a | x)` by differentiating through the RK4
/// steps, keeping the best validation checkpoint.
pub fn cnf_fit(a: &[f64], xs: &[&[f64]], config: &TrainConfig, arch: &CnfArch) -> Result<CnfFit> {
    if a.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    if a.len() != xs.len() {
        return Err(Error::Shape("one treatment per covariate vector".into()));
    }
    let d = xs[0].len();
    let mut model = CnfModel::init(d, arch, config.seed)?;
    let raw = Array2::from_shape_fn((xs.len(), d), |(i, j)| xs[i][j]);
    model.x_norm = Standardizer::fit(&raw);
    let a_col = Array2::from_shape_fn((a.len(), 1), |(i, _)| a[i]);
    let a_norm = Standardizer::fit(&a_col);
    model.a_shift = a_norm.shift[0];
    model.a_scale = a_norm.scale[0];

    let objective = CnfObjective::new(&model, a, xs, arch.train_flow)?;
    let outcome = nncore::train(&objective, model, config)?;
    Ok(CnfFit {
        model: outcome.model,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

/// Trapezoid integral of `p(a | x)` over `[lo, hi]` with `points` nodes.
pub fn density_mass(model: &CnfModel, x: &[f64], lo: f64, hi: f64, points: usize) -> Result<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    let a: Vec<f64> = (0..points).map(|k| lo + k as f64 * step).collect();
    let xs = vec![x; points];
    let p: Vec<f64> = model
        .log_density_pairs(&a, &xs)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let inner: f64 = p[1..points - 1].iter().sum();
    Ok(step * (inner + 0.5 * (p[0] + p[points - 1])))
}

/// `log` of the normal density with standard deviation `sd`.
pub fn normal_log_density(a: f64, mean: f64, sd: f64) -> f64 {
    let r = (a - mean) / sd;
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * r * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{finite_difference, max_relative_error};
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn constant_net(d: usize, value: f64) -> Mlp {
        Mlp::from_parts(vec![Array2::zeros((d, 1))], vec![vec![value]]).unwrap()
    }

    fn with_dynamics(g: Mlp, steps: usize) -> CnfModel {
        CnfModel::new(constant_net(1, 0.0), constant_net(1, 0.0), g, steps).unwrap()
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let m = with_dynamics(constant_net(3, 0.0), 20);
        assert_eq!(m.flow_backward(0.7, &[2.0]).unwrap(), (0.7, 0.0));
        let lp = m.log_density(0.0, &[2.0]).unwrap();
        assert!((lp + 0.918_94).abs() < 1e-5);
    }

    #[test]
    fn constant_dynamics_shift() {
        let m = with_dynamics(constant_net(3, 1.0), 20);
        let (z0, div) = m.flow_backward(0.7, &[2.0]).unwrap();
        assert!((z0 - (0.7 - 1.0)).abs() < 1e-12);
        assert_eq!(div, 0.0);
    }

    #[test]
    fn linear_dynamics_scale() {
        let g = Mlp::from_parts(vec![array![[1.0], [0.0], [0.0]]], vec![vec![0.0]]).unwrap();
        let m = with_dynamics(g, 20);
        let a = 1.3;
        let (z0, div) = m.flow_backward(a, &[0.4]).unwrap();
        assert!((z0 - a * (-1.0f64).exp()).abs() < 1e-6);
        assert!((div + 1.0).abs() < 1e-6);
        let lp = m.log_density(0.0, &[0.4]).unwrap();
        assert!((lp + 1.918_94).abs() < 1e-5);
    }

    #[test]
    fn base_density_examples() {
        let m = CnfModel::new(
            constant_net(1, 1.0),
            constant_net(1, 2f64.ln()),
            constant_net(3, 0.0),
            4,
        )
        .unwrap();
        let lp = m.base_log_density(1.0, &[0.0]).unwrap();
        assert!((lp + (2.0 * (2.0 * PI).sqrt()).ln()).abs() < 1e-12);
        assert!((lp + 1.612_09).abs() < 1e-5);
        let up = m.base_log_density(1.0 + 0.8, &[0.0]).unwrap();
        let down = m.base_log_density(1.0 - 0.8, &[0.0]).unwrap();
        assert!((up - down).abs() < 1e-15);
    }

    fn random_model(seed: u64, d: usize, steps: usize) -> CnfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CnfModel::new(
            net(d, &[5], &mut rng).unwrap(),
            net(d, &[5], &mut rng).unwrap(),
            net(d + 2, &[6, 4], &mut rng).unwrap(),
            steps,
        )
        .unwrap();
        m.logsigma_net.bias_mut(1).fill(-0.3);
        m
    }

    #[test]
    fn normalizes_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..10 {
            let m = random_model(seed, 2, 20);
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let (mu, sd) = m.base_moments(&x).unwrap();
            let mass =
                density_mass(&m, &x, mu - 8.0 * sd - 3.0, mu + 8.0 * sd + 3.0, 4001).unwrap();
            assert!((mass - 1.0).abs() < 0.02, "seed {seed}: mass {mass}");
        }
    }

    #[test]
    fn rk4_converges_in_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5 {
            let coarse = random_model(seed, 2, 20);
            let mut fine = coarse.clone();
            fine.ode_steps = 40;
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = rng.random_range(-2.0..2.0);
            let diff = coarse.log_density(a, &x).unwrap() - fine.log_density(a, &x).unwrap();
            assert!(diff.abs() < 1e-4);
        }
    }

    #[test]
    fn density_is_positive() {
        let m = random_model(3, 2, 10);
        for k in -40..=40 {
            assert!(m.density(k as f64 * 0.5, &[0.3, -0.2]).unwrap() > 0.0);
        }
    }

    #[test]
    fn likelihood_gradient_through_solver() {
        for seed in 0..5 {
            let mut m = random_model(100 + seed, 2, 6);
            m.a_shift = 0.2;
            m.a_scale = 1.5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xs: Vec<[f64; 2]> = (0..5).map(|_| [rng.random(), rng.random()]).collect();
            let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
            let rows: Vec<usize> = (0..5).collect();
            for train_flow in [true, false] {
                let obj = CnfObjective::new(&m, &a, &xr, train_flow).unwrap();
                let (value, grads) = obj.loss_and_grad(&m, &rows).unwrap();
                let direct = -m.log_density_pairs(&a, &xr).unwrap().iter().sum::<f64>() / 5.0
                    - m.a_scale.ln();
                assert!((value - direct).abs() < 1e-10);
                let fd = finite_difference(
                    &m,
                    |m| m.params_mut(train_flow),
                    |m| -m.log_density_pairs(&a, &xr).unwrap().iter().sum::<f64>() / 5.0,
                    1e-5,
                );
                let err = max_relative_error(&grads, &fd, 1e-6);
                assert!(err < 1e-3, "seed {seed}: {err}");
            }
        }
    }

    fn softplus(v: f64) -> f64 {
        if v > 30.0 {
            v
        } else {
            v.exp().ln_1p()
        }
    }

    struct Sample {
        a: Vec<f64>,
        x: Vec<Vec<f64>>,
        truth: Vec<f64>,
    }

    fn conditional_normal(n: usize, seed: u64) -> Sample {
        let gamma = [0.5, -0.3, 0.2];
        let xi = [0.4, 0.2, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut s = Sample {
            a: vec![],
            x: vec![],
            truth: vec![],
        };
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| std.sample(&mut rng)).collect();
            let mean: f64 = gamma.iter().zip(&x).map(|(g, v)| g * v).sum();
            let sd = softplus(xi.iter().zip(&x).map(|(g, v)| g * v).sum());
            let a = mean + sd * std.sample(&mut rng);
            s.truth.push(normal_log_density(a, mean, sd));
            s.a.push(a);
            s.x.push(x);
        }
        s
    }

    fn held_out(m: &CnfModel, s: &Sample) -> f64 {
        let xr: Vec<&[f64]> = s.x.iter().map(|x| x.as_slice()).collect();
        m.log_density_pairs(&s.a, &xr).unwrap().iter().sum::<f64>() / s.a.len() as f64
    }

    #[test]
    fn fits_a_conditional_normal() {
        let train = conditional_normal(3000, 1);
        let test = conditional_normal(2000, 2);
        let xr: Vec<&[f64]> = train.x.iter().map(|x| x.as_slice()).collect();
        let config = TrainConfig {
            max_epochs: 60,
            seed: 4,
            ..TrainConfig::default()
        };
        let frozen = CnfArch {
            train_flow: false,
            ..CnfArch::default()
        };
        let fit = cnf_fit(&train.a, &xr, &config, &frozen).unwrap();
        let truth = test.truth.iter().sum::<f64>() / test.truth.len() as f64;
        let ll_frozen = held_out(&fit.model, &test);
        assert!(
            (ll_frozen - truth).abs() < 0.05,
            "frozen {ll_frozen} vs true {truth}"
        );

        let flowing = CnfArch {
            ode_steps: 8,
            ..CnfArch::default()
        };
        let fit2 = cnf_fit(
            &train.a,
            &xr,
            &TrainConfig {
                max_epochs: 30,
                ..config.clone()
            },
            &flowing,
        )
        .unwrap();
        let ll_flow = held_out(&fit2.model, &test);
        assert!(
            ll_flow >= ll_frozen - 0.01,
            "flow {ll_flow} vs frozen {ll_frozen}"
        );

        let again = cnf_fit(&train.a, &xr, &config, &frozen).unwrap();
        assert_eq!(again.model, fit.model);
    }

    #[test]
    fn document_round_trip() {
        let mut m = random_model(9, 2, 7);
        m.a_shift = -0.5;
        m.a_scale = 2.5;
        m.x_norm.shift = vec![0.1, 0.2];
        let json = serde_json::to_string(&m.to_document()).unwrap();
        let back = CnfModel::from_document(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
