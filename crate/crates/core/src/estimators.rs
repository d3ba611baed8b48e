//! Kernel-smoothed estimators of the distributional average potential
//! outcome `Θ(a)` and K-fold cross-fitting.
//!
//! All three estimators act level by level on quantile values:
//!
//! * DR: `(1/N) Σ m(a; xᵢ)`
//! * IPW: `(1/N) Σ K_h(Aᵢ − a) / p(a | xᵢ) · Ŷᵢ⁻¹`
//! * DML: `(1/N) Σ [m(a; xᵢ) + K_h(Aᵢ − a) / p(a | xᵢ) · (Ŷᵢ⁻¹ − m(a; xᵢ))]`
//!
//! Densities below the propensity floor are clipped and counted.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnf::{cnf_fit, CnfArch, CnfModel};
use crate::dataset::Dataset;
use crate::distspace::{ensure_same_grid, QuantileFunction, QuantileGrid};
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, Kernel};
use crate::nfr::{nfr_fit, NfrArch, NfrModel};
use crate::nncore::TrainConfig;

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 1e-3;

/// Outcome regression `m(a; x)`, a quantile function per covariate vector.
pub trait OutcomeModel: Send + Sync {
    fn predict(&self, a: f64, x: &[f64]) -> Result<QuantileFunction>;

    /// Predictions for many covariate vectors as rows of a matrix.
    fn predict_many(&self, a: f64, xs: &[&[f64]]) -> Result<Array2<f64>> {
        let rows = xs
            .iter()
            .map(|x| self.predict(a, x))
            .collect::<Result<Vec<_>>>()?;
        let g = rows.first().map_or(0, |q| q.grid().len());
        Ok(Array2::from_shape_fn((rows.len(), g), |(i, j)| {
            rows[i].values()[j]
        }))
    }
}

/// Generalized propensity `p(a | x)`.
pub trait PropensityModel: Send + Sync {
    fn density(&self, a: f64, x: &[f64]) -> Result<f64>;

    fn density_many(&self, a: f64, xs: &[&[f64]]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.density(a, x)).collect()
    }
}

impl OutcomeModel for NfrModel {
    fn predict(&self, a: f64, x: &[f64]) -> Result<QuantileFunction> {
        NfrModel::predict(self, a, x)
    }

    fn predict_many(&self, a: f64, xs: &[&[f64]]) -> Result<Array2<f64>> {
        self.predict_batch(a, xs)
    }
}

impl PropensityModel for CnfModel {
    fn density(&self, a: f64, x: &[f64]) -> Result<f64> {
        CnfModel::density(self, a, x)
    }

    fn density_many(&self, a: f64, xs: &[&[f64]]) -> Result<Vec<f64>> {
        CnfModel::density_many(self, a, xs)
    }
}

/// Outcome regression given by a closure.
pub struct FnOutcome<F>(pub F);

impl<F> OutcomeModel for FnOutcome<F>
where
    F: Fn(f64, &[f64]) -> Result<QuantileFunction> + Send + Sync,
{
    fn predict(&self, a: f64, x: &[f64]) -> Result<QuantileFunction> {
        (self.0)(a, x)
    }
}

/// Propensity given by a closure.
pub struct FnPropensity<F>(pub F);

impl<F> PropensityModel for FnPropensity<F>
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn density(&self, a: f64, x: &[f64]) -> Result<f64> {
        Ok((self.0)(a, x))
    }
}

#[derive(Clone)]
pub struct NuisancePair {
    pub m: Arc<dyn OutcomeModel>,
    pub p: Arc<dyn PropensityModel>,
}

impl NuisancePair {
    pub fn new(m: impl OutcomeModel + 'static, p: impl PropensityModel + 'static) -> Self {
        Self {
            m: Arc::new(m),
            p: Arc::new(p),
        }
    }
}

impl fmt::Debug for NuisancePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NuisancePair")
    }
}

/// Produces nuisances from the training complement `D₋ₖ` of fold `k`.
pub trait NuisanceTrainer: Sync {
    fn train(&self, data: &Dataset, fold: usize) -> Result<NuisancePair>;
}

impl<F> NuisanceTrainer for F
where
    F: Fn(&Dataset, usize) -> Result<NuisancePair> + Sync,
{
    fn train(&self, data: &Dataset, fold: usize) -> Result<NuisancePair> {
        self(data, fold)
    }
}

/// Trains the functional regression and the conditional flow on each
/// training complement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralTrainer {
    pub nfr_train: TrainConfig,
    pub nfr_arch: NfrArch,
    pub cnf_train: TrainConfig,
    pub cnf_arch: CnfArch,
}

impl NeuralTrainer {
    /// The same trainer with every seed offset by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut t = self.clone();
        t.nfr_train.seed = self.nfr_train.seed.wrapping_add(seed);
        t.cnf_train.seed = self.cnf_train.seed.wrapping_add(seed);
        t
    }

    pub fn fit(&self, data: &Dataset, fold: usize) -> Result<(NfrModel, CnfModel)> {
        let offset = 1_000 * fold as u64;
        let nfr_cfg = TrainConfig {
            seed: self.nfr_train.seed.wrapping_add(offset),
            ..self.nfr_train.clone()
        };
        let cnf_cfg = TrainConfig {
            seed: self.cnf_train.seed.wrapping_add(offset),
            ..self.cnf_train.clone()
        };
        let m = nfr_fit(data, &nfr_cfg, &self.nfr_arch)?.model;
        let a = data.treatments();
        let xs: Vec<&[f64]> = data.units().iter().map(|u| u.x.as_slice()).collect();
        let p = cnf_fit(&a, &xs, &cnf_cfg, &self.cnf_arch)?.model;
        Ok((m, p))
    }
}

impl NuisanceTrainer for NeuralTrainer {
    fn train(&self, data: &Dataset, fold: usize) -> Result<NuisancePair> {
        let (m, p) = self.fit(data, fold)?;
        Ok(NuisancePair::new(m, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dr,
    Ipw,
    Dml,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Dr, EstimatorKind::Ipw, EstimatorKind::Dml];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Dr => "dr",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Dml => "dml",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dr" => Ok(EstimatorKind::Dr),
            "ipw" => Ok(EstimatorKind::Ipw),
            "dml" => Ok(EstimatorKind::Dml),
            other => Err(Error::Usage(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kernel: Kernel,
    pub h: Bandwidth,
    pub propensity_floor: f64,
    pub folds: usize,
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn new(kernel: Kernel, h: f64) -> Result<Self> {
        Ok(Self {
            kernel,
            h: Bandwidth::new(h)?,
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            folds: 2,
            seed: 0,
        })
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        Ok(Self {
            h: Bandwidth::new(h)?,
            ..*self
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.propensity_floor > 0.0) {
            return Err(Error::InvalidInput(
                "propensity floor must be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::TooFewFolds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub theta: QuantileFunction,
    /// Units whose propensity was raised to the floor.
    pub floor_hits: usize,
}

/// Per-unit ingredients of the estimators at one treatment level.
#[derive(Debug, Clone)]
pub struct UnitTerms {
    /// `m(a; xᵢ)` as rows (empty for IPW).
    pub m: Array2<f64>,
    /// Observed `Ŷᵢ⁻¹` as rows.
    pub y: Array2<f64>,
    /// `K_h(Aᵢ − a) / max(p(a | xᵢ), floor)` (empty for DR).
    pub weight: Vec<f64>,
    pub floor_hits: usize,
    pub grid: QuantileGrid,
}

impl UnitTerms {
    pub fn compute(
        data: &Dataset,
        nuisances: &NuisancePair,
        kernel: Kernel,
        h: Bandwidth,
        floor: f64,
        a: f64,
        kind: EstimatorKind,
    ) -> Result<Self> {
        let n = data.len();
        let grid = data.grid().clone();
        let xs: Vec<&[f64]> = data.units().iter().map(|u| u.x.as_slice()).collect();
        let y = Array2::from_shape_fn((n, grid.len()), |(i, j)| data.units()[i].yq.values()[j]);
        let m = if kind == EstimatorKind::Ipw {
            Array2::zeros((0, grid.len()))
        } else {
            let m = nuisances.m.predict_many(a, &xs)?;
            if m.dim() != y.dim() {
                return Err(Error::GridMismatch);
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(
                    "outcome regression returned a non-finite value".into(),
                ));
            }
            m
        };
        let mut floor_hits = 0;
        let weight = if kind == EstimatorKind::Dr {
            Vec::new()
        } else {
            let p = nuisances.p.density_many(a, &xs)?;
            p.iter()
                .zip(data.units())
                .map(|(&p, u)| {
                    if !(p >= 0.0) || !p.is_finite() {
                        return Err(Error::Numerical(format!(
                            "propensity model returned {p} for unit {}",
                            u.id
                        )));
                    }
                    if p < floor {
                        floor_hits += 1;
                    }
                    Ok(kernel.scaled_eval(h, u.a - a) / p.max(floor))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            m,
            y,
            weight,
            floor_hits,
            grid,
        })
    }

    /// Per-unit summands of the chosen estimator as rows.
    pub fn summands(&self, kind: EstimatorKind) -> Array2<f64> {
        match kind {
            EstimatorKind::Dr => self.m.clone(),
            EstimatorKind::Ipw => {
                let mut out = self.y.clone();
                for (mut row, &w) in out.rows_mut().into_iter().zip(&self.weight) {
                    row.mapv_inplace(|v| w * v);
                }
                out
            }
            EstimatorKind::Dml => {
                let mut out = self.m.clone();
                for ((mut row, y), &w) in out
                    .rows_mut()
                    .into_iter()
                    .zip(self.y.rows())
                    .zip(&self.weight)
                {
                    for (o, &yv) in row.iter_mut().zip(y) {
                        *o += w * (yv - *o);
                    }
                }
                out
            }
        }
    }

    pub fn estimate(&self, kind: EstimatorKind) -> Result<Estimate> {
        let s = self.summands(kind);
        let n = s.nrows() as f64;
        let values = s.columns().into_iter().map(|c| c.sum() / n).collect();
        Ok(Estimate {
            theta: QuantileFunction::new(self.grid.clone(), values)?,
            floor_hits: if kind == EstimatorKind::Dr {
                0
            } else {
                self.floor_hits
            },
        })
    }
}

fn non_empty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyObservations)
    } else {
        Ok(())
    }
}

/// Unused nuisance slot for single-nuisance estimators.
struct Absent;

impl OutcomeModel for Absent {
    fn predict(&self, _: f64, _: &[f64]) -> Result<QuantileFunction> {
        unreachable!("outcome regression not needed")
    }
}

impl PropensityModel for Absent {
    fn density(&self, _: f64, _: &[f64]) -> Result<f64> {
        unreachable!("propensity not needed")
    }
}

pub fn dist_dr(data: &Dataset, m: Arc<dyn OutcomeModel>, a: f64) -> Result<QuantileFunction> {
    non_empty(data)?;
    let pair = NuisancePair {
        m,
        p: Arc::new(Absent),
    };
    let h = Bandwidth::new(1.0)?;
    Ok(
        UnitTerms::compute(data, &pair, Kernel::default(), h, 1.0, a, EstimatorKind::Dr)?
            .estimate(EstimatorKind::Dr)?
            .theta,
    )
}

pub fn dist_ipw(
    data: &Dataset,
    p: Arc<dyn PropensityModel>,
    kernel: Kernel,
    h: Bandwidth,
    floor: f64,
    a: f64,
) -> Result<Estimate> {
    non_empty(data)?;
    let pair = NuisancePair {
        m: Arc::new(Absent),
        p,
    };
    UnitTerms::compute(data, &pair, kernel, h, floor, a, EstimatorKind::Ipw)?
        .estimate(EstimatorKind::Ipw)
}

pub fn dist_dml(
    data: &Dataset,
    nuisances: &NuisancePair,
    kernel: Kernel,
    h: Bandwidth,
    floor: f64,
    a: f64,
) -> Result<Estimate> {
    non_empty(data)?;
    UnitTerms::compute(data, nuisances, kernel, h, floor, a, EstimatorKind::Dml)?
        .estimate(EstimatorKind::Dml)
}

/// Any of the three estimators on the whole dataset with fixed nuisances.
pub fn estimate(
    kind: EstimatorKind,
    data: &Dataset,
    nuisances: &NuisancePair,
    config: &EstimatorConfig,
    a: f64,
) -> Result<Estimate> {
    non_empty(data)?;
    UnitTerms::compute(
        data,
        nuisances,
        config.kernel,
        config.h,
        config.propensity_floor,
        a,
        kind,
    )?
    .estimate(kind)
}

/// `Θ(a) − Θ(a′)` level by level.
pub fn dist_ate(
    theta_a: &QuantileFunction,
    theta_a2: &QuantileFunction,
) -> Result<QuantileFunction> {
    ensure_same_grid(theta_a.grid(), theta_a2.grid())?;
    theta_a.zip_with(theta_a2, |x, y| x - y)
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::TooFewFolds);
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "{k} folds requested for {n} units"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Nuisances trained on each `D₋ₖ`, ready to evaluate estimators on the
/// matching `Dₖ` at any treatment level.
#[derive(Debug, Clone)]
pub struct CrossFit {
    folds: Vec<Vec<usize>>,
    fold_data: Vec<Dataset>,
    nuisances: Vec<NuisancePair>,
    n: usize,
}

impl CrossFit {
    /// Partitions `data` and trains one nuisance pair per fold. Fold jobs run
    /// on the rayon pool; results do not depend on scheduling.
    pub fn train(
        data: &Dataset,
        trainer: &dyn NuisanceTrainer,
        folds: usize,
        seed: u64,
    ) -> Result<Self> {
        let parts = fold_partition(data.len(), folds, seed)?;
        let jobs: Vec<(Dataset, Dataset)> = parts
            .iter()
            .enumerate()
            .map(|(k, fold)| {
                let rest: Vec<usize> = parts
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                Ok((data.subset(fold)?, data.subset(&rest)?))
            })
            .collect::<Result<_>>()?;
        let nuisances = jobs
            .par_iter()
            .enumerate()
            .map(|(k, (_, rest))| trainer.train(rest, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            folds: parts,
            fold_data: jobs.into_iter().map(|(f, _)| f).collect(),
            nuisances,
            n: data.len(),
        })
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn fold_data(&self) -> &[Dataset] {
        &self.fold_data
    }

    pub fn nuisances(&self) -> &[NuisancePair] {
        &self.nuisances
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Per-fold estimator ingredients at `a`.
    pub fn terms(
        &self,
        config: &EstimatorConfig,
        a: f64,
        kind: EstimatorKind,
    ) -> Result<Vec<UnitTerms>> {
        self.fold_data
            .iter()
            .zip(&self.nuisances)
            .map(|(d, nu)| {
                UnitTerms::compute(
                    d,
                    nu,
                    config.kernel,
                    config.h,
                    config.propensity_floor,
                    a,
                    kind,
                )
            })
            .collect()
    }

    /// `Σₖ (Nₖ / N) Θ̂ᵏ(a)`.
    pub fn estimate(
        &self,
        kind: EstimatorKind,
        config: &EstimatorConfig,
        a: f64,
    ) -> Result<Estimate> {
        let terms = self.terms(config, a, kind)?;
        let ests = terms
            .iter()
            .map(|t| t.estimate(kind))
            .collect::<Result<Vec<_>>>()?;
        combine_folds(&ests, &self.folds, self.n)
    }

    /// All three estimators from one pass over the nuisances.
    pub fn estimate_all(&self, config: &EstimatorConfig, a: f64) -> Result<[Estimate; 3]> {
        let terms = self.terms(config, a, EstimatorKind::Dml)?;
        let mut out = Vec::with_capacity(3);
        for kind in EstimatorKind::ALL {
            let ests = terms
                .iter()
                .map(|t| t.estimate(kind))
                .collect::<Result<Vec<_>>>()?;
            out.push(combine_folds(&ests, &self.folds, self.n)?);
        }
        Ok(out.try_into().expect("three estimators"))
    }
}

fn combine_folds(ests: &[Estimate], folds: &[Vec<usize>], n: usize) -> Result<Estimate> {
    let grid = ests[0].theta.grid().clone();
    let mut values = vec![0.0; grid.len()];
    for (e, f) in ests.iter().zip(folds) {
        let w = f.len() as f64 / n as f64;
        for (v, t) in values.iter_mut().zip(e.theta.values()) {
            *v += w * t;
        }
    }
    Ok(Estimate {
        theta: QuantileFunction::new(grid, values)?,
        floor_hits: ests.iter().map(|e| e.floor_hits).sum(),
    })
}

/// Cross-fitted estimate of `Θ(a)`.
pub fn cross_fit(
    data: &Dataset,
    trainer: &dyn NuisanceTrainer,
    kind: EstimatorKind,
    config: &EstimatorConfig,
    a: f64,
) -> Result<Estimate> {
    config.validate()?;
    CrossFit::train(data, trainer, config.folds, config.seed)?.estimate(kind, config, a)
}
