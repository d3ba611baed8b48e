//! Synthetic benchmark: data generation, Monte Carlo ground truth, MAE
//! scoring and sensitivity sweeps.
//!
//! Each unit draws covariates `X` pairwise from unit-variance normals, a
//! treatment `A ~ N(γᵀX, softplus(ξᵀX))` (the second argument is the
//! variance) and an outcome distribution with quantile function
//!
//! `Y⁻¹(t) = c + (1 − c)(E[γᵀX] + e^A) Σⱼ wⱼ B⁻¹(t; αⱼ, βⱼ) + ε`
//!
//! where `w = softmax(X₁X₂, X₃X₄, …)` and `ε ~ N(0, noise_sd²)` is one
//! shift per unit. The observed outcome is the empirical quantile function
//! of `obs_per_unit` inverse-transform draws.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;

use crate::dataset::{Dataset, Unit};
use crate::distspace::{
    empirical_quantile_function, ensure_same_grid, EmpiricalSample, QuantileFunction, QuantileGrid,
};
use crate::error::{Error, Result};
use crate::estimators::{
    CrossFit, EstimatorConfig, EstimatorKind, NeuralTrainer, NuisancePair, NuisanceTrainer,
    OutcomeModel, PropensityModel, DEFAULT_PROPENSITY_FLOOR,
};
use crate::inference::{choose_bandwidth, BandwidthMode};
use crate::kernels::Kernel;

const TABLE_CELLS: usize = 8192;
const EXACT_TAIL_CELLS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Number of covariates (even).
    pub n: usize,
    /// Mean of each covariate pair; length `n / 2`.
    pub pair_means: Vec<f64>,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
    pub c: f64,
    /// Beta shapes `(α, β)` per pair.
    pub beta_shapes: Vec<(f64, f64)>,
    pub obs_per_unit: usize,
    pub noise_sd: f64,
    /// Quantile levels `k / (grid_points + 1)`.
    pub grid_points: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 10,
            pair_means: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            gamma: vec![0.05; 10],
            xi: vec![0.02; 10],
            c: 0.2,
            beta_shapes: vec![(2.0, 5.0), (5.0, 2.0), (2.0, 2.0), (1.0, 3.0), (3.0, 2.0)],
            obs_per_unit: 100,
            noise_sd: 0.05,
            grid_points: 99,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n == 0 || !self.n.is_multiple_of(2) {
            return bad("covariate count must be even and positive");
        }
        let pairs = self.n / 2;
        if self.pair_means.len() != pairs || self.beta_shapes.len() != pairs {
            return bad("pair means and Beta shapes need one entry per covariate pair");
        }
        if self.gamma.len() != self.n || self.xi.len() != self.n {
            return bad("gamma and xi need one entry per covariate");
        }
        if !(0.0..=1.0).contains(&self.c) {
            return bad("c must lie in [0, 1]");
        }
        if self.beta_shapes.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) {
            return bad("Beta shapes must be positive");
        }
        if self.obs_per_unit == 0 {
            return bad("obs_per_unit must be at least 1");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative");
        }
        Ok(())
    }
}

/// A validated data-generating process with its precomputed Beta quantiles.
#[derive(Debug, Clone)]
pub struct Dgp {
    config: DgpConfig,
    grid: QuantileGrid,
    /// `B⁻¹(t; αⱼ, βⱼ)` on the grid, one vector per component.
    grid_quantiles: Vec<Vec<f64>>,
    /// Dense tables for inverse-transform sampling.
    tables: Vec<Vec<f64>>,
    mean_gamma_x: f64,
}

/// A unit together with the quantities used to generate it.
#[derive(Debug, Clone)]
pub struct GeneratedUnit {
    pub unit: Unit,
    pub weights: Vec<f64>,
    pub eps: f64,
    pub truth: QuantileFunction,
    /// The raw draws behind `unit.yq`.
    pub observations: Vec<f64>,
}

impl Dgp {
    pub fn new(config: DgpConfig) -> Result<Self> {
        config.validate()?;
        let grid = QuantileGrid::uniform(config.grid_points)?;
        let grid_quantiles = config
            .beta_shapes
            .iter()
            .map(|&(a, b)| {
                grid.levels()
                    .iter()
                    .map(|&t| inv_beta_reg(a, b, t))
                    .collect()
            })
            .collect();
        let tables = config
            .beta_shapes
            .iter()
            .map(|&(a, b)| {
                (0..=TABLE_CELLS)
                    .map(|k| inv_beta_reg(a, b, k as f64 / TABLE_CELLS as f64))
                    .collect()
            })
            .collect();
        let mean_gamma_x = config
            .gamma
            .iter()
            .enumerate()
            .map(|(i, g)| g * config.pair_means[i / 2])
            .sum();
        Ok(Self {
            config,
            grid,
            grid_quantiles,
            tables,
            mean_gamma_x,
        })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    /// `E[γᵀX]` from the configured means.
    pub fn mean_gamma_x(&self) -> f64 {
        self.mean_gamma_x
    }

    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.config.n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                self.config.pair_means[i / 2] + z
            })
            .collect()
    }

    /// Softmax of the pair products.
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = x.chunks(2).map(|p| p[0] * p[1]).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    pub fn treatment_mean(&self, x: &[f64]) -> f64 {
        self.config.gamma.iter().zip(x).map(|(g, v)| g * v).sum()
    }

    /// Conditional standard deviation, `√softplus(ξᵀx)`.
    pub fn treatment_sd(&self, x: &[f64]) -> f64 {
        let s: f64 = self.config.xi.iter().zip(x).map(|(g, v)| g * v).sum();
        softplus(s).sqrt()
    }

    pub fn propensity(&self, a: f64, x: &[f64]) -> f64 {
        let (m, s) = (self.treatment_mean(x), self.treatment_sd(x));
        let r = (a - m) / s;
        (-0.5 * r * r).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn scale(&self, a: f64) -> f64 {
        (1.0 - self.config.c) * (self.mean_gamma_x + a.exp())
    }

    /// Quantile values on the grid for mixture weights `w`, without noise.
    pub fn quantile_values(&self, a: f64, w: &[f64]) -> Vec<f64> {
        let s = self.scale(a);
        (0..self.grid.len())
            .map(|g| {
                let mix: f64 = w
                    .iter()
                    .zip(&self.grid_quantiles)
                    .map(|(w, q)| w * q[g])
                    .sum();
                self.config.c + s * mix
            })
            .collect()
    }

    fn beta_quantile(&self, j: usize, u: f64) -> f64 {
        let pos = u * TABLE_CELLS as f64;
        let k = (pos as usize).min(TABLE_CELLS - 1);
        if !(EXACT_TAIL_CELLS..TABLE_CELLS - EXACT_TAIL_CELLS).contains(&k) {
            let (a, b) = self.config.beta_shapes[j];
            return inv_beta_reg(a, b, u);
        }
        let t = &self.tables[j];
        t[k] + (pos - k as f64) * (t[k + 1] - t[k])
    }

    pub fn generate_unit<R: Rng + ?Sized>(
        &self,
        id: impl Into<String>,
        rng: &mut R,
    ) -> Result<GeneratedUnit> {
        let x = self.draw_covariates(rng);
        let z: f64 = StandardNormal.sample(rng);
        let a = self.treatment_mean(&x) + self.treatment_sd(&x) * z;
        let w = self.weights(&x);
        let eps = if self.config.noise_sd > 0.0 {
            Normal::new(0.0, self.config.noise_sd)
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        let truth: Vec<f64> = self
            .quantile_values(a, &w)
            .into_iter()
            .map(|v| v + eps)
            .collect();
        let s = self.scale(a);
        let obs: Vec<f64> = (0..self.config.obs_per_unit)
            .map(|_| {
                let u: f64 = rng.random();
                let mix: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * self.beta_quantile(j, u))
                    .sum();
                self.config.c + s * mix + eps
            })
            .collect();
        let yq = empirical_quantile_function(&EmpiricalSample::new(obs.clone())?, &self.grid);
        Ok(GeneratedUnit {
            unit: Unit::new(id, a, x, yq)?,
            weights: w,
            eps,
            truth: QuantileFunction::new(self.grid.clone(), truth)?,
            observations: obs,
        })
    }

    pub fn generate_dataset<R: Rng + ?Sized>(
        &self,
        n_units: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        let units = (0..n_units)
            .map(|i| Ok(self.generate_unit(format!("u{i}"), rng)?.unit))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(units)
    }

    /// Monte Carlo `E[w(X)]` over `mc_units` covariate draws.
    pub fn mean_weights(&self, mc_units: usize, seed: u64) -> Result<Vec<f64>> {
        if mc_units < 1000 {
            return Err(Error::InvalidInput(
                "ground truth needs at least 1000 Monte Carlo units".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; self.config.n / 2];
        for _ in 0..mc_units {
            let x = self.draw_covariates(&mut rng);
            for (a, w) in acc.iter_mut().zip(self.weights(&x)) {
                *a += w;
            }
        }
        Ok(acc.into_iter().map(|v| v / mc_units as f64).collect())
    }

    /// `Θ(a) = E_X[Y⁻¹ | A = a, X]` from pre-averaged weights; the quantile
    /// function is linear in the weights so averaging them first is exact.
    pub fn truth_from_weights(&self, a: f64, mean_weights: &[f64]) -> Result<QuantileFunction> {
        QuantileFunction::new(self.grid.clone(), self.quantile_values(a, mean_weights))
    }

    pub fn ground_truth(&self, a: f64, mc_units: usize, seed: u64) -> Result<QuantileFunction> {
        self.truth_from_weights(a, &self.mean_weights(mc_units, seed)?)
    }

    /// Closed-form nuisances; `m_shift` is added to every quantile of
    /// `m(a; x)` and `p_scale` multiplies `p(a | x)`.
    pub fn oracle_nuisances(self: &Arc<Self>, m_shift: f64, p_scale: f64) -> NuisancePair {
        NuisancePair {
            m: Arc::new(OracleOutcome {
                dgp: Arc::clone(self),
                shift: m_shift,
            }),
            p: Arc::new(OraclePropensity {
                dgp: Arc::clone(self),
                scale: p_scale,
            }),
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

pub struct OracleOutcome {
    dgp: Arc<Dgp>,
    shift: f64,
}

impl OutcomeModel for OracleOutcome {
    fn predict(&self, a: f64, x: &[f64]) -> Result<QuantileFunction> {
        if x.len() != self.dgp.config.n {
            return Err(Error::Shape(
                "covariate length does not match the generator".into(),
            ));
        }
        let w = self.dgp.weights(x);
        let v = self
            .dgp
            .quantile_values(a, &w)
            .into_iter()
            .map(|v| v + self.shift)
            .collect();
        QuantileFunction::new(self.dgp.grid.clone(), v)
    }
}

pub struct OraclePropensity {
    dgp: Arc<Dgp>,
    scale: f64,
}

impl PropensityModel for OraclePropensity {
    fn density(&self, a: f64, x: &[f64]) -> Result<f64> {
        if x.len() != self.dgp.config.n {
            return Err(Error::Shape(
                "covariate length does not match the generator".into(),
            ));
        }
        Ok(self.scale * self.dgp.propensity(a, x))
    }
}

/// Mean absolute error over the headline levels.
pub fn mae(estimate: &QuantileFunction, truth: &QuantileFunction) -> Result<f64> {
    ensure_same_grid(estimate.grid(), truth.grid())?;
    let idx = estimate.grid().headline_indices();
    if idx.len() != crate::distspace::HEADLINE_LEVELS.len() {
        return Err(Error::GridMismatch);
    }
    Ok(idx
        .iter()
        .map(|&i| (estimate.values()[i] - truth.values()[i]).abs())
        .sum::<f64>()
        / idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NuisanceChoice {
    Oracle(OracleSpec),
    NfrCnf(Box<NeuralTrainer>),
}

/// Deliberate misspecification of the oracle nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    pub m_shift: f64,
    pub p_scale: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            m_shift: 0.0,
            p_scale: 1.0,
        }
    }
}

impl NuisanceChoice {
    pub fn oracle() -> Self {
        NuisanceChoice::Oracle(OracleSpec::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            NuisanceChoice::Oracle(_) => "oracle",
            NuisanceChoice::NfrCnf(_) => "nfr-cnf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub dgp: DgpConfig,
    pub n_units: usize,
    pub replications: usize,
    pub treatment_levels: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub kernel: Kernel,
    pub bandwidth: BandwidthMode,
    pub pilot_c: f64,
    pub folds: usize,
    pub propensity_floor: f64,
    pub mc_units: usize,
    pub nuisance: NuisanceChoice,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            n_units: 10_000,
            replications: 20,
            treatment_levels: vec![-0.5, 0.0, 0.5],
            estimators: EstimatorKind::ALL.to_vec(),
            kernel: Kernel::Epanechnikov,
            bandwidth: BandwidthMode::Auto,
            pilot_c: 1.0,
            folds: 2,
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            mc_units: 200_000,
            nuisance: NuisanceChoice::oracle(),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidInput(
                "replications must be at least 1".into(),
            ));
        }
        if self.treatment_levels.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one treatment level and estimator".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::TooFewFolds);
        }
        if self.n_units < self.folds {
            return Err(Error::InvalidInput("fewer units than folds".into()));
        }
        Ok(())
    }

    fn estimator_config(&self, h: f64, seed: u64) -> Result<EstimatorConfig> {
        let mut c = EstimatorConfig::new(self.kernel, h)?;
        c.propensity_floor = self.propensity_floor;
        c.folds = self.folds;
        c.seed = seed;
        Ok(c)
    }
}

/// One estimator at one treatment level in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: EstimatorKind,
    pub a: f64,
    pub h: f64,
    pub mae: f64,
    pub floor_hits: usize,
    /// Estimates at the headline levels.
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub estimator: EstimatorKind,
    pub a: f64,
    pub level: f64,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    /// Mean over replications of `|estimate − truth|`.
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeSummary {
    pub estimator: EstimatorKind,
    pub a: f64,
    pub mean_mae: f64,
    pub sd_mae: f64,
    pub mean_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub replications: usize,
    /// How the outcome noise enters the generator.
    pub noise_model: String,
    pub levels: Vec<f64>,
    pub truth: Vec<TruthRow>,
    pub mae: Vec<MaeSummary>,
    pub per_level: Vec<LevelSummary>,
    pub records: Vec<ReplicationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub a: f64,
    pub values: Vec<f64>,
}

impl BenchmarkReport {
    pub fn mae_for(&self, estimator: EstimatorKind, a: f64) -> Option<&MaeSummary> {
        self.mae
            .iter()
            .find(|m| m.estimator == estimator && m.a == a)
    }

    /// One row per estimator, treatment level, quantile level and replication.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "replication",
            "estimator",
            "a",
            "level",
            "estimate",
            "truth",
            "abs_error",
            "h",
        ])
        .map_err(csv_err)?;
        for r in &self.records {
            let truth = &self
                .truth
                .iter()
                .find(|t| t.a == r.a)
                .expect("truth for every level")
                .values;
            for (k, (&e, &t)) in r.estimates.iter().zip(truth).enumerate() {
                w.write_record([
                    r.replication.to_string(),
                    r.estimator.to_string(),
                    r.a.to_string(),
                    self.levels[k].to_string(),
                    e.to_string(),
                    t.to_string(),
                    (e - t).abs().to_string(),
                    r.h.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64 + 1);
    rng
}

fn truth_seed(seed: u64) -> u64 {
    seed ^ 0x7275_7468_5f6d_6378
}

fn train_cross_fit(
    cfg: &BenchmarkConfig,
    dgp: &Arc<Dgp>,
    data: &Dataset,
    fold_seed: u64,
    replication: usize,
) -> Result<CrossFit> {
    match &cfg.nuisance {
        NuisanceChoice::Oracle(o) => {
            let pair = dgp.oracle_nuisances(o.m_shift, o.p_scale);
            let trainer = move |_: &Dataset, _: usize| Ok(pair.clone());
            CrossFit::train(data, &trainer, cfg.folds, fold_seed)
        }
        NuisanceChoice::NfrCnf(t) => {
            let t = t.reseeded(cfg.seed.wrapping_add(10_007 * replication as u64));
            CrossFit::train(data, &t as &dyn NuisanceTrainer, cfg.folds, fold_seed)
        }
    }
}

/// Dataset and trained cross-fit for one replication.
fn replicate(
    cfg: &BenchmarkConfig,
    dgp: &Arc<Dgp>,
    n_units: usize,
    r: usize,
) -> Result<(Dataset, CrossFit)> {
    let mut rng = replication_rng(cfg.seed, r);
    let data = dgp.generate_dataset(n_units, &mut rng)?;
    let fold_seed: u64 = rng.random();
    let cf = train_cross_fit(cfg, dgp, &data, fold_seed, r)?;
    Ok((data, cf))
}

fn bandwidth_for(
    cfg: &BenchmarkConfig,
    data: &Dataset,
    cf: &CrossFit,
    a: f64,
    mode: BandwidthMode,
) -> Result<f64> {
    match mode {
        BandwidthMode::Fixed(h) => Ok(h),
        BandwidthMode::Auto => {
            let base = cfg.estimator_config(1.0, 0)?;
            Ok(choose_bandwidth(data, cf, &base, a, cfg.pilot_c)?.h_star)
        }
    }
}

fn score(
    cfg: &BenchmarkConfig,
    cf: &CrossFit,
    r: usize,
    a: f64,
    h: f64,
    truth: &QuantileFunction,
) -> Result<Vec<ReplicationRecord>> {
    let ec = cfg.estimator_config(h, 0)?;
    let all = cf.estimate_all(&ec, a)?;
    let idx = truth.grid().headline_indices();
    cfg.estimators
        .iter()
        .map(|&kind| {
            let e = &all[EstimatorKind::ALL
                .iter()
                .position(|&k| k == kind)
                .expect("known kind")];
            Ok(ReplicationRecord {
                replication: r,
                estimator: kind,
                a,
                h,
                mae: mae(&e.theta, truth)?,
                floor_hits: e.floor_hits,
                estimates: idx.iter().map(|&i| e.theta.values()[i]).collect(),
            })
        })
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn truths(dgp: &Dgp, cfg: &BenchmarkConfig) -> Result<Vec<QuantileFunction>> {
    let w = dgp.mean_weights(cfg.mc_units, truth_seed(cfg.seed))?;
    cfg.treatment_levels
        .iter()
        .map(|&a| dgp.truth_from_weights(a, &w))
        .collect()
}

fn summarize(
    cfg: &BenchmarkConfig,
    truth: &[QuantileFunction],
    records: Vec<ReplicationRecord>,
) -> BenchmarkReport {
    let grid = &truth[0];
    let idx = grid.grid().headline_indices();
    let levels: Vec<f64> = idx.iter().map(|&i| grid.grid().levels()[i]).collect();
    let mut mae_rows = Vec::new();
    let mut per_level = Vec::new();
    for (ai, &a) in cfg.treatment_levels.iter().enumerate() {
        let tv: Vec<f64> = idx.iter().map(|&i| truth[ai].values()[i]).collect();
        for &kind in &cfg.estimators {
            let recs: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.estimator == kind && r.a == a)
                .collect();
            let maes: Vec<f64> = recs.iter().map(|r| r.mae).collect();
            let (mean_mae, sd_mae) = mean_sd(&maes);
            let hs: Vec<f64> = recs.iter().map(|r| r.h).collect();
            mae_rows.push(MaeSummary {
                estimator: kind,
                a,
                mean_mae,
                sd_mae,
                mean_h: mean_sd(&hs).0,
            });
            for (k, &level) in levels.iter().enumerate() {
                let est: Vec<f64> = recs.iter().map(|r| r.estimates[k]).collect();
                let (mean, sd) = mean_sd(&est);
                let abs: Vec<f64> = est.iter().map(|e| (e - tv[k]).abs()).collect();
                per_level.push(LevelSummary {
                    estimator: kind,
                    a,
                    level,
                    truth: tv[k],
                    mean,
                    sd,
                    mae: mean_sd(&abs).0,
                });
            }
        }
    }
    BenchmarkReport {
        config: cfg.clone(),
        replications: cfg.replications,
        noise_model: format!(
            "per-unit constant shift, standard deviation {}",
            cfg.dgp.noise_sd
        ),
        levels,
        truth: cfg
            .treatment_levels
            .iter()
            .zip(truth)
            .map(|(&a, t)| TruthRow {
                a,
                values: idx.iter().map(|&i| t.values()[i]).collect(),
            })
            .collect(),
        mae: mae_rows,
        per_level,
        records,
    }
}

fn run(
    cfg: &BenchmarkConfig,
    dgp: &Arc<Dgp>,
    truth: &[QuantileFunction],
    n_units: usize,
    bandwidths: &[BandwidthMode],
) -> Result<Vec<ReplicationRecord>> {
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let (data, cf) = replicate(cfg, dgp, n_units, r)?;
            let mut out = Vec::new();
            for ((&a, t), &mode) in cfg.treatment_levels.iter().zip(truth).zip(bandwidths) {
                let h = bandwidth_for(cfg, &data, &cf, a, mode)?;
                out.extend(score(cfg, &cf, r, a, h, t)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

/// Replicated two-fold cross-fit comparison of the estimators against the
/// Monte Carlo ground truth.
pub fn benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let dgp = Arc::new(Dgp::new(cfg.dgp.clone())?);
    let truth = truths(&dgp, cfg)?;
    let modes = vec![cfg.bandwidth; cfg.treatment_levels.len()];
    let records = run(cfg, &dgp, &truth, cfg.n_units, &modes)?;
    Ok(summarize(cfg, &truth, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Sample size or bandwidth multiple.
    pub value: f64,
    pub estimator: EstimatorKind,
    pub a: f64,
    pub h: f64,
    pub mean_mae: f64,
    pub sd_mae: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub config: BenchmarkConfig,
    /// `"n_units"` or `"bandwidth_multiple"`.
    pub parameter: String,
    /// Selected `h*` per treatment level (bandwidth sweeps only).
    pub h_star: Vec<TruthRowH>,
    pub rows: Vec<CurveRow>,
    pub records: Vec<CurveRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRowH {
    pub value: f64,
    pub a: f64,
    pub h_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub value: f64,
    #[serde(flatten)]
    pub record: ReplicationRecord,
}

impl CurveReport {
    pub fn row(&self, value: f64, estimator: EstimatorKind, a: f64) -> Option<&CurveRow> {
        self.rows
            .iter()
            .find(|r| r.value == value && r.estimator == estimator && r.a == a)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            &self.parameter,
            "estimator",
            "a",
            "h",
            "mean_mae",
            "sd_mae",
            "replications",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.value.to_string(),
                r.estimator.to_string(),
                r.a.to_string(),
                r.h.to_string(),
                r.mean_mae.to_string(),
                r.sd_mae.to_string(),
                r.replications.to_string(),
            ])
            .map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))
    }
}

/// `h*` per treatment level chosen once on a pilot dataset of `n_units`
/// drawn from a stream no replication uses.
pub fn pilot_h_star(cfg: &BenchmarkConfig, dgp: &Arc<Dgp>, n_units: usize) -> Result<Vec<f64>> {
    let (data, cf) = replicate(cfg, dgp, n_units, usize::MAX - 1)?;
    cfg.treatment_levels
        .iter()
        .map(|&a| bandwidth_for(cfg, &data, &cf, a, BandwidthMode::Auto))
        .collect()
}

fn curve_rows(cfg: &BenchmarkConfig, value: f64, records: &[ReplicationRecord]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for &a in &cfg.treatment_levels {
        for &kind in &cfg.estimators {
            let recs: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.estimator == kind && r.a == a)
                .collect();
            let (mean_mae, sd_mae) = mean_sd(&recs.iter().map(|r| r.mae).collect::<Vec<_>>());
            rows.push(CurveRow {
                value,
                estimator: kind,
                a,
                h: recs[0].h,
                mean_mae,
                sd_mae,
                replications: recs.len(),
            });
        }
    }
    rows
}

/// MAE curve over sample sizes; `h*` is fixed per size from a pilot draw
/// (or taken from `cfg.bandwidth` when fixed).
pub fn sensitivity_sample_size(cfg: &BenchmarkConfig, sizes: &[usize]) -> Result<CurveReport> {
    cfg.validate()?;
    let dgp = Arc::new(Dgp::new(cfg.dgp.clone())?);
    let truth = truths(&dgp, cfg)?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    let mut h_rows = Vec::new();
    for &n in sizes {
        let hs = match cfg.bandwidth {
            BandwidthMode::Fixed(h) => vec![h; cfg.treatment_levels.len()],
            BandwidthMode::Auto => pilot_h_star(cfg, &dgp, n)?,
        };
        for (&a, &h) in cfg.treatment_levels.iter().zip(&hs) {
            h_rows.push(TruthRowH {
                value: n as f64,
                a,
                h_star: h,
            });
        }
        let modes: Vec<BandwidthMode> = hs.iter().map(|&h| BandwidthMode::Fixed(h)).collect();
        let records = run(cfg, &dgp, &truth, n, &modes)?;
        rows.extend(curve_rows(cfg, n as f64, &records));
        all.extend(records.into_iter().map(|record| CurveRecord {
            value: n as f64,
            record,
        }));
    }
    Ok(CurveReport {
        config: cfg.clone(),
        parameter: "n_units".into(),
        h_star: h_rows,
        rows,
        records: all,
    })
}

/// MAE curve over multiples of `h*` at fixed N. Each replication's dataset
/// and nuisances are shared by all multiples.
pub fn sensitivity_bandwidth(cfg: &BenchmarkConfig, multiples: &[f64]) -> Result<CurveReport> {
    cfg.validate()?;
    let dgp = Arc::new(Dgp::new(cfg.dgp.clone())?);
    let truth = truths(&dgp, cfg)?;
    let hs = match cfg.bandwidth {
        BandwidthMode::Fixed(h) => vec![h; cfg.treatment_levels.len()],
        BandwidthMode::Auto => pilot_h_star(cfg, &dgp, cfg.n_units)?,
    };
    let per_rep: Vec<Vec<(f64, ReplicationRecord)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let (_, cf) = replicate(cfg, &dgp, cfg.n_units, r)?;
            let mut out = Vec::new();
            for &m in multiples {
                for ((&a, t), &h) in cfg.treatment_levels.iter().zip(&truth).zip(&hs) {
                    out.extend(
                        score(cfg, &cf, r, a, m * h, t)?
                            .into_iter()
                            .map(|rec| (m, rec)),
                    );
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<(f64, ReplicationRecord)> = per_rep.into_iter().flatten().collect();
    let mut rows = Vec::new();
    for &m in multiples {
        let recs: Vec<ReplicationRecord> = flat
            .iter()
            .filter(|(v, _)| *v == m)
            .map(|(_, r)| r.clone())
            .collect();
        rows.extend(curve_rows(cfg, m, &recs));
    }
    Ok(CurveReport {
        config: cfg.clone(),
        parameter: "bandwidth_multiple".into(),
        h_star: cfg
            .treatment_levels
            .iter()
            .zip(&hs)
            .map(|(&a, &h)| TruthRowH {
                value: 1.0,
                a,
                h_star: h,
            })
            .collect(),
        rows,
        records: flat
            .into_iter()
            .map(|(value, record)| CurveRecord { value, record })
            .collect(),
    })
}
