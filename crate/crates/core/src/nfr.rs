//! Neural functional regression for the outcome nuisance `m(a; x)`.
//!
//! A network maps `(a, x)` to a representation `F ∈ R^u`; a coefficient
//! matrix `α (u × v)` and a fixed basis `φ₁..φ_v` on [0, 1] turn it into a
//! quantile function `Σᵢ Fᵢ Σⱼ αᵢⱼ φⱼ(t)`. Training minimizes the
//! trapezoid-integrated pointwise loss against each unit's estimated
//! quantile function.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distspace::{QuantileFunction, QuantileGrid};
use crate::error::{Error, Result};
use crate::nncore::{self, Mlp, MlpDocument, Objective, Standardizer, Tape, TrainConfig};

/// Clamped B-spline basis on [0, 1] with uniform interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    v: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(v: usize, degree: usize) -> Result<Self> {
        if v < degree + 1 {
            return Err(Error::InvalidInput(format!(
                "{v} basis functions cannot carry degree {degree}"
            )));
        }
        let interior = v - degree - 1;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { v, degree, knots })
    }

    pub fn len(&self) -> usize {
        self.v
    }

    pub fn is_empty(&self) -> bool {
        self.v == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn find_span(&self, t: f64) -> usize {
        let (p, n) = (self.degree, self.v - 1);
        if t >= self.knots[n + 1] {
            return n;
        }
        let (mut lo, mut hi) = (p, n + 1);
        // knots[lo] <= t < knots[hi]
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// All `v` basis values at `t` (Cox–de Boor triangular recursion).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!(
                "basis argument {t} outside [0, 1]"
            )));
        }
        let p = self.degree;
        let span = self.find_span(t);
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; self.v];
        out[span - p..=span].copy_from_slice(&n);
        Ok(out)
    }
}

/// Basis family for the continuous layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    BSpline(BSplineBasis),
    /// Raw monomials `1, t, …, t^(v-1)`.
    Polynomial {
        v: usize,
    },
}

impl Basis {
    pub fn len(&self) -> usize {
        match self {
            Basis::BSpline(b) => b.len(),
            Basis::Polynomial { v } => *v,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        match self {
            Basis::BSpline(b) => b.eval(t),
            Basis::Polynomial { v } => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::InvalidInput(format!(
                        "basis argument {t} outside [0, 1]"
                    )));
                }
                Ok((0..*v).map(|j| t.powi(j as i32)).collect())
            }
        }
    }

    /// `v × G` matrix of basis values at the grid levels.
    pub fn matrix(&self, grid: &QuantileGrid) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((self.len(), grid.len()));
        for (g, &t) in grid.levels().iter().enumerate() {
            for (j, phi) in self.eval(t)?.into_iter().enumerate() {
                m[[j, g]] = phi;
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointwiseLoss {
    #[default]
    Squared,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    #[default]
    Bspline,
    Polynomial,
}

/// Architecture of a functional regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NfrArch {
    /// Representation width.
    pub u: usize,
    /// Number of basis functions.
    pub v: usize,
    pub degree: usize,
    pub hidden: Vec<usize>,
    pub basis: BasisKind,
    pub loss: PointwiseLoss,
}

impl Default for NfrArch {
    fn default() -> Self {
        Self {
            u: 8,
            v: 8,
            degree: 3,
            hidden: vec![64, 64],
            basis: BasisKind::Bspline,
            loss: PointwiseLoss::Squared,
        }
    }
}

impl NfrArch {
    pub fn basis(&self) -> Result<Basis> {
        match self.basis {
            BasisKind::Bspline => Ok(Basis::BSpline(BSplineBasis::new(self.v, self.degree)?)),
            BasisKind::Polynomial => Ok(Basis::Polynomial { v: self.v }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfrModel {
    pub rep_net: Mlp,
    /// `u × v` coefficients of the continuous layer.
    pub coeffs: Array2<f64>,
    pub basis: Basis,
    pub grid: QuantileGrid,
    /// Standardization of the `(a, x)` input.
    pub input: Standardizer,
    /// Predictions are `output_shift + output_scale · Σᵢ Fᵢ Σⱼ αᵢⱼ φⱼ(t)`.
    pub output_shift: f64,
    pub output_scale: f64,
    basis_matrix: Array2<f64>,
}

impl NfrModel {
    /// Model with identity input and output scaling.
    pub fn new(
        rep_net: Mlp,
        coeffs: Array2<f64>,
        basis: Basis,
        grid: QuantileGrid,
    ) -> Result<Self> {
        if coeffs.nrows() != rep_net.output_dim() || coeffs.ncols() != basis.len() {
            return Err(Error::Shape(format!(
                "coefficients {:?} do not join a {}-wide representation to {} basis functions",
                coeffs.dim(),
                rep_net.output_dim(),
                basis.len()
            )));
        }
        if rep_net.input_dim() < 1 {
            return Err(Error::Shape(
                "representation network needs the treatment input".into(),
            ));
        }
        let basis_matrix = basis.matrix(&grid)?;
        let dim = rep_net.input_dim();
        Ok(Self {
            rep_net,
            coeffs,
            basis,
            grid,
            input: Standardizer::identity(dim),
            output_shift: 0.0,
            output_scale: 1.0,
            basis_matrix,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        d: usize,
        arch: &NfrArch,
        grid: QuantileGrid,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![1 + d];
        widths.extend(&arch.hidden);
        widths.push(arch.u);
        let rep_net = Mlp::xavier(&widths, rng)?;
        let limit = (6.0 / (arch.u + arch.v) as f64).sqrt();
        let coeffs = Array2::from_shape_fn((arch.u, arch.v), |_| rng.random_range(-limit..=limit));
        Self::new(rep_net, coeffs, arch.basis()?, grid)
    }

    pub fn covariate_dim(&self) -> usize {
        self.rep_net.input_dim() - 1
    }

    fn inputs(&self, a: f64, xs: &[&[f64]]) -> Result<Array2<f64>> {
        let d = self.covariate_dim();
        let mut m = Array2::zeros((xs.len(), d + 1));
        for (i, x) in xs.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Shape(format!(
                    "covariate vector of length {} for a model expecting {d}",
                    x.len()
                )));
            }
            m[[i, 0]] = a;
            for (j, &v) in x.iter().enumerate() {
                m[[i, j + 1]] = v;
            }
        }
        self.input.apply(&mut m);
        Ok(m)
    }

    /// Predicted quantile values, one row per covariate vector.
    pub fn predict_batch(&self, a: f64, xs: &[&[f64]]) -> Result<Array2<f64>> {
        let f = self.rep_net.forward_batch(&self.inputs(a, xs)?)?;
        let mut out = f.dot(&self.coeffs).dot(&self.basis_matrix);
        out.mapv_inplace(|v| self.output_shift + self.output_scale * v);
        Ok(out)
    }

    pub fn predict(&self, a: f64, x: &[f64]) -> Result<QuantileFunction> {
        let row = self.predict_batch(a, &[x])?;
        QuantileFunction::new(self.grid.clone(), row.into_raw_vec_and_offset().0)
    }

    /// Parameters in the order `rep_net..., coeffs`.
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.rep_net.params_mut();
        p.push(&mut self.coeffs);
        p
    }

    pub fn to_document(&self) -> NfrDocument {
        let (basis, degree, knots) = match &self.basis {
            Basis::BSpline(b) => (BasisKind::Bspline, b.degree(), b.knots().to_vec()),
            Basis::Polynomial { .. } => (BasisKind::Polynomial, 0, Vec::new()),
        };
        NfrDocument {
            schema_version: NFR_SCHEMA_VERSION,
            rep_net: self.rep_net.to_document(),
            u: self.coeffs.nrows(),
            v: self.coeffs.ncols(),
            coeffs: self.coeffs.iter().copied().collect(),
            basis,
            degree,
            knots,
            grid: self.grid.levels().to_vec(),
            input: self.input.clone(),
            output_shift: self.output_shift,
            output_scale: self.output_scale,
        }
    }

    pub fn from_document(doc: &NfrDocument) -> Result<Self> {
        if doc.schema_version != NFR_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported regression model schema version {}",
                doc.schema_version
            )));
        }
        let basis = match doc.basis {
            BasisKind::Bspline => {
                let b = BSplineBasis::new(doc.v, doc.degree)?;
                if b.knots() != doc.knots.as_slice() {
                    return Err(Error::Data(
                        "stored knots are not uniform clamped knots".into(),
                    ));
                }
                Basis::BSpline(b)
            }
            BasisKind::Polynomial => Basis::Polynomial { v: doc.v },
        };
        let coeffs = Array2::from_shape_vec((doc.u, doc.v), doc.coeffs.clone())
            .map_err(|_| Error::Data("coefficient matrix has the wrong size".into()))?;
        let mut model = Self::new(
            Mlp::from_document(&doc.rep_net)?,
            coeffs,
            basis,
            QuantileGrid::new(doc.grid.clone())?,
        )?;
        model.input = doc.input.clone();
        model.output_shift = doc.output_shift;
        model.output_scale = doc.output_scale;
        Ok(model)
    }
}

pub const NFR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfrDocument {
    pub schema_version: u32,
    pub rep_net: MlpDocument,
    pub u: usize,
    pub v: usize,
    /// Row-major `u × v`.
    pub coeffs: Vec<f64>,
    pub basis: BasisKind,
    pub degree: usize,
    pub knots: Vec<f64>,
    pub grid: Vec<f64>,
    pub input: Standardizer,
    pub output_shift: f64,
    pub output_scale: f64,
}

/// One training example: treatment, covariates and target quantile values.
#[derive(Debug, Clone, Copy)]
pub struct NfrExample<'a> {
    pub a: f64,
    pub x: &'a [f64],
    pub target: &'a QuantileFunction,
}

/// Mean over the batch of the trapezoid-integrated pointwise loss between
/// prediction and target over the grid span.
pub fn nfr_loss(model: &NfrModel, batch: &[NfrExample<'_>], loss: PointwiseLoss) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let w = model.grid.span_weights();
    let mut total = 0.0;
    for ex in batch {
        if !ex.target.grid().same_as(&model.grid) {
            return Err(Error::GridMismatch);
        }
        let pred = model.predict_batch(ex.a, &[ex.x])?;
        total += pred
            .iter()
            .zip(ex.target.values())
            .zip(&w)
            .map(|((p, y), w)| {
                let r = p - y;
                w * match loss {
                    PointwiseLoss::Squared => r * r,
                    PointwiseLoss::Absolute => r.abs(),
                }
            })
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Training problem in standardized units; the loss equals [`nfr_loss`]
/// divided by `output_scale²` (squared loss) or `output_scale` (absolute).
pub struct NfrObjective {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    weights: Vec<f64>,
    loss: PointwiseLoss,
}

impl NfrObjective {
    /// Builds the problem for `model`, whose standardizers must already be set.
    pub fn new(model: &NfrModel, examples: &[NfrExample<'_>], loss: PointwiseLoss) -> Result<Self> {
        let xs: Vec<&[f64]> = examples.iter().map(|e| e.x).collect();
        let g = model.grid.len();
        let mut inputs = Array2::zeros((examples.len(), model.covariate_dim() + 1));
        let mut targets = Array2::zeros((examples.len(), g));
        for (i, ex) in examples.iter().enumerate() {
            if !ex.target.grid().same_as(&model.grid) {
                return Err(Error::GridMismatch);
            }
            let row = model.inputs(ex.a, &xs[i..i + 1])?;
            inputs.row_mut(i).assign(&row.row(0));
            for (t, &y) in targets.row_mut(i).iter_mut().zip(ex.target.values()) {
                *t = (y - model.output_shift) / model.output_scale;
            }
        }
        Ok(Self {
            inputs,
            targets,
            weights: model.grid.span_weights(),
            loss,
        })
    }

    fn rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        m.select(ndarray::Axis(0), rows)
    }
}

impl Objective for NfrObjective {
    type Model = NfrModel;

    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn params_mut<'a>(&self, model: &'a mut NfrModel) -> Vec<&'a mut Array2<f64>> {
        model.params_mut()
    }

    fn loss_and_grad(&self, model: &NfrModel, rows: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let rep = model.rep_net.register(&mut tape);
        let coeffs = tape.leaf(model.coeffs.clone());
        let x = tape.leaf(Self::rows(&self.inputs, rows));
        let y = tape.leaf(Self::rows(&self.targets, rows));
        let f = Mlp::forward_tape(&mut tape, &rep, x)?;
        let fa = tape.matmul(f, coeffs);
        let pred = tape.matmul_const(fa, &model.basis_matrix);
        let r = tape.sub(pred, y);
        let pointwise = match self.loss {
            PointwiseLoss::Squared => tape.square(r),
            PointwiseLoss::Absolute => tape.abs(r),
        };
        let weighted = tape.weight_cols(pointwise, &self.weights);
        let total = tape.sum_all(weighted);
        let loss = tape.scale(total, 1.0 / rows.len() as f64);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let mut out = rep.collect(&grads);
        out.push(grads.wrt(coeffs));
        Ok((value, out))
    }

    fn loss(&self, model: &NfrModel, rows: &[usize]) -> Result<f64> {
        let x = Self::rows(&self.inputs, rows);
        let pred = model
            .rep_net
            .forward_batch(&x)?
            .dot(&model.coeffs)
            .dot(&model.basis_matrix);
        let mut total = 0.0;
        for (p_row, &r) in pred.rows().into_iter().zip(rows) {
            for ((p, y), w) in p_row.iter().zip(self.targets.row(r)).zip(&self.weights) {
                let e = p - y;
                total += w * match self.loss {
                    PointwiseLoss::Squared => e * e,
                    PointwiseLoss::Absolute => e.abs(),
                };
            }
        }
        Ok(total / rows.len() as f64)
    }
}

/// A fitted regression model with its training history.
#[derive(Debug, Clone)]
pub struct NfrFit {
    pub model: NfrModel,
    pub history: Vec<nncore::EpochRecord>,
    pub best_epoch: usize,
}

/// Fits the regression on every unit of `dataset`, keeping the parameters
/// with the best validation loss.
pub fn nfr_fit(dataset: &Dataset, config: &TrainConfig, arch: &NfrArch) -> Result<NfrFit> {
    let examples: Vec<NfrExample<'_>> = dataset
        .units()
        .iter()
        .map(|u| NfrExample {
            a: u.a,
            x: &u.x,
            target: &u.yq,
        })
        .collect();
    nfr_fit_examples(&examples, dataset.grid().clone(), config, arch)
}

pub fn nfr_fit_examples(
    examples: &[NfrExample<'_>],
    grid: QuantileGrid,
    config: &TrainConfig,
    arch: &NfrArch,
) -> Result<NfrFit> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidInput("no training examples".into()))?;
    let d = first.x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NfrModel::init(d, arch, grid, &mut rng)?;

    let raw = Array2::from_shape_fn((examples.len(), d + 1), |(i, j)| {
        if j == 0 {
            examples[i].a
        } else {
            examples[i].x[j - 1]
        }
    });
    model.input = Standardizer::fit(&raw);
    let all: Vec<f64> = examples
        .iter()
        .flat_map(|e| e.target.values().iter().copied())
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let sd = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64).sqrt();
    model.output_shift = mean;
    model.output_scale = if sd > 1e-12 { sd } else { 1.0 };

    let objective = NfrObjective::new(&model, examples, arch.loss)?;
    let outcome = nncore::train(&objective, model, config)?;
    Ok(NfrFit {
        model: outcome.model,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;
    use crate::nncore::{finite_difference, max_relative_error};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct recursive definition, independent of the triangular scheme.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, last: usize) -> f64 {
        if p == 0 {
            let inside = knots[i] <= t && t < knots[i + 1];
            // right end of the domain belongs to the last non-empty span
            let at_end = t == 1.0 && knots[i] < knots[i + 1] && i == last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut out = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            out += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            out += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, last);
        }
        out
    }

    #[test]
    fn cubic_single_span_is_bernstein() {
        let b = BSplineBasis::new(4, 3).unwrap();
        let v = b.eval(0.5).unwrap();
        let expect = [0.125, 0.375, 0.375, 0.125];
        for (a, e) in v.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn clamped_endpoints() {
        let b = BSplineBasis::new(8, 3).unwrap();
        let v0 = b.eval(0.0).unwrap();
        assert_eq!(v0[0], 1.0);
        assert!(v0[1..].iter().all(|&x| x == 0.0));
        let v1 = b.eval(1.0).unwrap();
        assert_eq!(v1[7], 1.0);
        assert!(b.eval(1.01).is_err());
        assert!(b.eval(-0.1).is_err());
        assert!(BSplineBasis::new(3, 3).is_err());
    }

    #[test]
    fn matches_recursive_definition() {
        for (v, p) in [(8, 3), (6, 2), (5, 1), (1, 0), (10, 3)] {
            let b = BSplineBasis::new(v, p).unwrap();
            let last = b.knots().len() - p - 2;
            for k in 0..=200 {
                let t = k as f64 / 200.0;
                let fast = b.eval(t).unwrap();
                for (j, f) in fast.iter().enumerate() {
                    let slow = cox_de_boor(b.knots(), j, p, t, last);
                    assert!((f - slow).abs() < 1e-12, "v={v} p={p} t={t} j={j}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 0.0f64..=1.0, v in 4usize..14, p in 0usize..4) {
            let b = BSplineBasis::new(v, p).unwrap();
            let vals = b.eval(t).unwrap();
            prop_assert!(vals.iter().all(|&x| x >= 0.0));
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn small_model(seed: u64) -> NfrModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = NfrArch {
            u: 3,
            v: 5,
            hidden: vec![4],
            ..NfrArch::default()
        };
        NfrModel::init(2, &arch, QuantileGrid::headline(), &mut rng).unwrap()
    }

    #[test]
    fn zero_coefficients_predict_zero() {
        let mut m = small_model(1);
        m.coeffs.fill(0.0);
        let q = m.predict(0.3, &[1.0, -1.0]).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_representation_substitution() {
        // u = v = 1, φ ≡ 1, F(A, X) = A, α = 2 → 2a at every level
        let net = Mlp::from_parts(vec![array![[1.0], [0.0]]], vec![vec![0.0]]).unwrap();
        let basis = Basis::BSpline(BSplineBasis::new(1, 0).unwrap());
        let m = NfrModel::new(net, array![[2.0]], basis, QuantileGrid::default()).unwrap();
        let q = m.predict(1.25, &[7.0]).unwrap();
        assert!(q.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn prediction_matches_scalar_double_sum() {
        let m = small_model(2);
        let x = [0.4, -1.3];
        let a = 0.7;
        let q = m.predict(a, &x).unwrap();
        let f = m.rep_net.forward(&[a, x[0], x[1]]).unwrap();
        for (g, &t) in m.grid.levels().iter().enumerate() {
            let phi = m.basis.eval(t).unwrap();
            let mut s = 0.0;
            for (i, fi) in f.iter().enumerate() {
                for (j, pj) in phi.iter().enumerate() {
                    s += fi * m.coeffs[[i, j]] * pj;
                }
            }
            assert!((q.values()[g] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_linear_in_coefficients() {
        let m = small_model(3);
        let mut m1 = m.clone();
        let mut m2 = m.clone();
        let mut m12 = m.clone();
        m1.coeffs.mapv_inplace(|v| v * 0.3);
        m2.coeffs.mapv_inplace(|v| v.sin());
        m12.coeffs = &m1.coeffs + &m2.coeffs;
        let x = [0.1, 0.2];
        let p1 = m1.predict(0.5, &x).unwrap();
        let p2 = m2.predict(0.5, &x).unwrap();
        let p12 = m12.predict(0.5, &x).unwrap();
        for ((a, b), c) in p1.values().iter().zip(p2.values()).zip(p12.values()) {
            assert!((a + b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let g = QuantileGrid::default();
        let mut m = small_model(4);
        m = NfrModel::new(
            m.rep_net.clone(),
            m.coeffs.clone(),
            m.basis.clone(),
            g.clone(),
        )
        .unwrap();
        m.coeffs.fill(0.0);
        let one = QuantileFunction::constant(g.clone(), 1.0).unwrap();
        let zero = QuantileFunction::constant(g, 0.0).unwrap();
        let x = [0.0, 0.0];
        let ex = |t| NfrExample {
            a: 0.0,
            x: &x,
            target: t,
        };
        let l = nfr_loss(&m, &[ex(&one)], PointwiseLoss::Squared).unwrap();
        assert!((l - 0.98).abs() < 1e-12);
        assert_eq!(
            nfr_loss(&m, &[ex(&zero)], PointwiseLoss::Squared).unwrap(),
            0.0
        );

        let x2 = [1.0, 2.0];
        let batch = [
            ex(&one),
            NfrExample {
                a: 0.5,
                x: &x2,
                target: &zero,
            },
        ];
        let mut rev = batch;
        rev.reverse();
        let m = small_model(5);
        let m = NfrModel::new(m.rep_net, m.coeffs, m.basis, QuantileGrid::default()).unwrap();
        assert!(
            (nfr_loss(&m, &batch, PointwiseLoss::Squared).unwrap()
                - nfr_loss(&m, &rev, PointwiseLoss::Squared).unwrap())
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = small_model(10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<[f64; 2]> = (0..6).map(|_| [rng.random(), rng.random()]).collect();
            let targets: Vec<QuantileFunction> = (0..6)
                .map(|_| {
                    let shift: f64 = rng.random();
                    QuantileFunction::from_fn(m.grid.clone(), |t| shift + t * t).unwrap()
                })
                .collect();
            let examples: Vec<_> = (0..6)
                .map(|i| NfrExample {
                    a: i as f64 * 0.2,
                    x: &xs[i],
                    target: &targets[i],
                })
                .collect();
            for loss in [PointwiseLoss::Squared, PointwiseLoss::Absolute] {
                let obj = NfrObjective::new(&m, &examples, loss).unwrap();
                let rows: Vec<usize> = (0..6).collect();
                let (value, grads) = obj.loss_and_grad(&m, &rows).unwrap();
                let direct = nfr_loss(&m, &examples, loss).unwrap();
                assert!((value - direct).abs() < 1e-12);
                let fd = finite_difference(
                    &m,
                    |m| m.params_mut(),
                    |m| obj.loss(m, &rows).unwrap(),
                    1e-6,
                );
                let err = max_relative_error(&grads, &fd, 1e-6);
                assert!(err < 1e-4, "seed {seed} {loss:?}: {err}");
            }
        }
    }

    fn constant_in_t_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = QuantileGrid::default();
        let units = (0..n)
            .map(|i| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let x = vec![rng.random_range(-1.0..1.0)];
                Unit::new(
                    format!("u{i}"),
                    a,
                    x,
                    QuantileFunction::constant(g.clone(), a).unwrap(),
                )
                .unwrap()
            })
            .collect();
        Dataset::new(units).unwrap()
    }

    #[test]
    fn learns_a_linearly_representable_target() {
        let train = constant_in_t_dataset(600, 1);
        let test = constant_in_t_dataset(100, 2);
        let arch = NfrArch {
            u: 1,
            v: 1,
            degree: 0,
            hidden: vec![8],
            ..NfrArch::default()
        };
        let config = TrainConfig {
            max_epochs: 150,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::default()
        };
        let fit = nfr_fit(&train, &config, &arch).unwrap();
        let examples: Vec<_> = test
            .units()
            .iter()
            .map(|u| NfrExample {
                a: u.a,
                x: &u.x,
                target: &u.yq,
            })
            .collect();
        // integrated MSE over [0, 1]
        let mse = nfr_loss(&fit.model, &examples, PointwiseLoss::Squared).unwrap() / 0.98;
        assert!(mse < 1e-3, "held-out integrated MSE {mse}");

        let best: Vec<f64> = fit.history.iter().map(|r| r.best_validation_loss).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));

        let again = nfr_fit(&train, &config, &arch).unwrap();
        assert_eq!(again.model, fit.model);
    }

    #[test]
    fn document_round_trip() {
        let mut m = small_model(6);
        m.output_shift = 0.25;
        m.output_scale = 3.5;
        m.input.shift = vec![0.1, 0.2, 0.3];
        let json = serde_json::to_string(&m.to_document()).unwrap();
        let back = NfrModel::from_document(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
