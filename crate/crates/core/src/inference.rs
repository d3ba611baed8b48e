//! Bias and covariance diagnostics, plug-in bandwidth selection, Gaussian
//! process simulation and uniform confidence bands for `Θ(a)`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distspace::{sorted_quantiles, QuantileFunction, QuantileMethod};
use crate::error::{Error, Result};
use crate::estimators::{CrossFit, EstimatorConfig, EstimatorKind};
use crate::kernels::Bandwidth;

pub const DEFAULT_PATHS: usize = 10_000;
pub const MIN_PATHS: usize = 1_000;
pub const SEARCH_POINTS: usize = 15;

/// `c · σ_A · N^(-1/5)` with the sample standard deviation of treatments.
pub fn pilot_bandwidth(data: &Dataset, c: f64) -> Result<Bandwidth> {
    let a = data.treatments();
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "pilot bandwidth needs at least two units".into(),
        ));
    }
    let mean = a.iter().sum::<f64>() / n as f64;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidInput("treatments have zero variance".into()));
    }
    Bandwidth::new(c * sd * (n as f64).powf(-0.2))
}

/// `(Θ̂^{2h} − Θ̂^{h}) / (3h²)`: the two-bandwidth extrapolation with
/// `β = 2h`, `η = 1/2`.
pub fn bias_estimate<F>(mut theta_at: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64) -> Result<QuantileFunction>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bandwidth {h} must be positive"
        )));
    }
    let (beta, eta) = (2.0 * h, 0.5);
    let wide = theta_at(beta)?;
    let narrow = theta_at(eta * beta)?;
    let denom = beta * beta * (1.0 - eta * eta);
    Ok(wide
        .values()
        .iter()
        .zip(narrow.values())
        .map(|(w, n)| (w - n) / denom)
        .collect())
}

/// Bias of the cross-fitted DML estimator at `config.h`.
pub fn dml_bias(cf: &CrossFit, config: &EstimatorConfig, a: f64) -> Result<Vec<f64>> {
    bias_estimate(
        |h| {
            Ok(cf
                .estimate(EstimatorKind::Dml, &config.with_h(h)?, a)?
                .theta)
        },
        config.h.get(),
    )
}

/// Per-fold influence values `φ̂ᵢ` (rows) of the DML estimator.
pub fn influence_values(
    cf: &CrossFit,
    config: &EstimatorConfig,
    a: f64,
) -> Result<Vec<Array2<f64>>> {
    Ok(cf
        .terms(config, a, EstimatorKind::Dml)?
        .iter()
        .map(|t| t.summands(EstimatorKind::Dml))
        .collect())
}

/// `Ĉ(s, t) = (h/K) Σₖ [Ψ̂ₖ(s, t) − Ψ̂ₖ(s) Ψ̂ₖ(t)]` from per-fold influence rows.
pub fn fold_covariance(phis: &[Array2<f64>], h: f64) -> Result<Array2<f64>> {
    let g = check_blocks(phis)?;
    let mut c = Array2::zeros((g, g));
    for phi in phis {
        let n = phi.nrows() as f64;
        let second = phi.t().dot(phi) / n;
        let mean = phi.mean_axis(ndarray::Axis(0)).expect("non-empty fold");
        for s in 0..g {
            for t in 0..g {
                c[[s, t]] += second[[s, t]] - mean[s] * mean[t];
            }
        }
    }
    c *= h / phis.len() as f64;
    symmetrize(&mut c);
    Ok(c)
}

/// `(h/N) Σᵢ (Vᵢ − V̄)(Vᵢ − V̄)ᵀ` over all rows pooled.
pub fn centered_covariance(phis: &[Array2<f64>], h: f64) -> Result<Array2<f64>> {
    check_blocks(phis)?;
    let views: Vec<_> = phis.iter().map(|p| p.view()).collect();
    let v = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let n = v.nrows() as f64;
    let mean = v.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &v - &mean;
    let mut c = centered.t().dot(&centered) * (h / n);
    symmetrize(&mut c);
    Ok(c)
}

fn check_blocks(phis: &[Array2<f64>]) -> Result<usize> {
    let first = phis
        .first()
        .ok_or_else(|| Error::InvalidInput("no influence values".into()))?;
    let g = first.ncols();
    if phis.iter().any(|p| p.ncols() != g || p.nrows() == 0) {
        return Err(Error::Shape(
            "influence blocks must be non-empty and equally wide".into(),
        ));
    }
    if phis.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite influence value".into()));
    }
    Ok(g)
}

fn symmetrize(c: &mut Array2<f64>) {
    let g = c.nrows();
    for s in 0..g {
        for t in s + 1..g {
            let avg = 0.5 * (c[[s, t]] + c[[t, s]]);
            c[[s, t]] = avg;
            c[[t, s]] = avg;
        }
    }
}

/// `SEARCH_POINTS` log-spaced bandwidths over `[pilot/8, 8·pilot]`.
pub fn search_grid(pilot: f64) -> Vec<f64> {
    let (lo, hi) = ((pilot / 8.0).ln(), (pilot * 8.0).ln());
    (0..SEARCH_POINTS)
        .map(|k| (lo + (hi - lo) * k as f64 / (SEARCH_POINTS - 1) as f64).exp())
        .collect()
}

/// `Σₛ [h⁴ B(s)² + C(s, s) / (N h)]`.
pub fn bandwidth_objective(h: f64, bias: &[f64], cov_diag: &[f64], n: usize) -> f64 {
    let b2: f64 = bias.iter().map(|b| b * b).sum();
    let c: f64 = cov_diag.iter().sum();
    h.powi(4) * b2 + c / (n as f64 * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    /// Closed form clamped to the search range.
    pub h_star: f64,
    /// Closed form before clamping (infinite when the bias vanishes).
    pub closed_form: f64,
    pub grid: Vec<f64>,
    pub grid_argmin: f64,
    pub warning: Option<String>,
}

/// Minimizer of [`bandwidth_objective`]:
/// `h* = (Σ C(s, s) / (4 N Σ B(s)²))^(1/5)`, clamped to the search grid.
pub fn select_bandwidth(
    bias: &[f64],
    cov_diag: &[f64],
    n: usize,
    pilot: f64,
) -> Result<BandwidthChoice> {
    if bias.len() != cov_diag.len() || bias.is_empty() {
        return Err(Error::Shape(
            "bias and variance need one value per level".into(),
        ));
    }
    if n == 0 || !(pilot > 0.0) {
        return Err(Error::InvalidInput(
            "bandwidth selection needs N ≥ 1 and a positive pilot".into(),
        ));
    }
    let grid = search_grid(pilot);
    let (lo, hi) = (grid[0], grid[SEARCH_POINTS - 1]);
    let grid_argmin = grid
        .iter()
        .copied()
        .min_by(|&x, &y| {
            bandwidth_objective(x, bias, cov_diag, n)
                .total_cmp(&bandwidth_objective(y, bias, cov_diag, n))
        })
        .expect("non-empty grid");
    let b2: f64 = bias.iter().map(|b| b * b).sum();
    let c: f64 = cov_diag.iter().map(|c| c.max(0.0)).sum();
    if b2 == 0.0 {
        return Ok(BandwidthChoice {
            h_star: hi,
            closed_form: f64::INFINITY,
            grid,
            grid_argmin,
            warning: Some(
                "estimated bias is zero; objective decreases in h, using the largest grid value"
                    .into(),
            ),
        });
    }
    let closed_form = (c / (4.0 * n as f64 * b2)).powf(0.2);
    Ok(BandwidthChoice {
        h_star: closed_form.clamp(lo, hi),
        closed_form,
        grid,
        grid_argmin,
        warning: None,
    })
}

/// Simulated centred Gaussian paths with a given covariance.
#[derive(Debug, Clone)]
pub struct GpPaths {
    /// One path per row.
    pub paths: Array2<f64>,
    /// Negative eigenvalues set to zero by the fallback factorization.
    pub clipped_eigenvalues: usize,
}

/// Factor `cov = L Lᵀ` (Cholesky, or eigendecomposition with negative
/// eigenvalues clipped to zero) and return `count` draws of `L Z`.
pub fn simulate_gaussian_process(cov: &Array2<f64>, count: usize, seed: u64) -> Result<GpPaths> {
    let g = cov.nrows();
    if cov.ncols() != g {
        return Err(Error::Shape("covariance must be square".into()));
    }
    let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for s in 0..g {
        for t in 0..s {
            if (cov[[s, t]] - cov[[t, s]]).abs() > 1e-10 * scale {
                return Err(Error::InvalidInput(
                    "covariance matrix is not symmetric".into(),
                ));
            }
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite covariance".into()));
    }
    let m = DMatrix::from_fn(g, g, |i, j| cov[[i, j]]);
    let (l, clipped) = match m.clone().cholesky() {
        Some(ch) => (ch.l(), 0),
        None => {
            let eig = SymmetricEigen::new(m);
            let clipped = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
            let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            (&eig.eigenvectors * DMatrix::from_diagonal(&root), clipped)
        }
    };
    let l = Array2::from_shape_fn((g, g), |(i, j)| l[(i, j)]);
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let z: Vec<f64> = (0..g).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..g)
                .map(|i| (0..g).map(|j| l[[i, j]] * z[j]).sum())
                .collect()
        })
        .collect();
    let paths = Array2::from_shape_fn((count, g), |(k, i)| rows[k][i]);
    Ok(GpPaths {
        paths,
        clipped_eigenvalues: clipped,
    })
}

/// Empirical `(1 − α/2)` quantile of per-path `supₜ |G(t)|`.
pub fn sup_quantile(paths: &Array2<f64>, alpha: f64) -> Result<f64> {
    if paths.nrows() < MIN_PATHS {
        return Err(Error::InvalidInput(format!(
            "at least {MIN_PATHS} simulated paths are required, got {}",
            paths.nrows()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut sups: Vec<f64> = paths
        .rows()
        .into_iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    sups.sort_by(f64::total_cmp);
    Ok(sorted_quantiles(&sups, &[1.0 - alpha / 2.0], QuantileMethod::InverseEcdf)[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub levels: Vec<f64>,
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
    pub h_star: f64,
    pub q_hat: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub clipped_eigenvalues: usize,
    pub floor_hits: usize,
    #[serde(skip)]
    pub covariance: Option<Array2<f64>>,
}

/// Band `Θ̂ − B̂h² ± q̂ / √(N h)` around the bias-corrected estimate.
pub fn confidence_band(
    theta: &QuantileFunction,
    bias: &[f64],
    h: f64,
    n: usize,
    q_hat: f64,
    alpha: f64,
) -> Result<BandReport> {
    if bias.len() != theta.values().len() {
        return Err(Error::Shape("one bias value per quantile level".into()));
    }
    if !(h > 0.0) || n == 0 {
        return Err(Error::InvalidInput("band needs h > 0 and N ≥ 1".into()));
    }
    let half = q_hat / (n as f64 * h).sqrt();
    let center: Vec<f64> = theta
        .values()
        .iter()
        .zip(bias)
        .map(|(t, b)| t - b * h * h)
        .collect();
    Ok(BandReport {
        levels: theta.grid().levels().to_vec(),
        theta: theta.values().to_vec(),
        bias: bias.to_vec(),
        h_star: h,
        q_hat,
        lower: center.iter().map(|c| c - half).collect(),
        upper: center.iter().map(|c| c + half).collect(),
        alpha,
        clipped_eigenvalues: 0,
        floor_hits: 0,
        covariance: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum BandwidthMode {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandOptions {
    pub alpha: f64,
    pub paths: usize,
    pub seed: u64,
    pub bandwidth: BandwidthMode,
    /// Multiplier in the pilot rule.
    pub pilot_c: f64,
}

impl Default for BandOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            paths: DEFAULT_PATHS,
            seed: 0,
            bandwidth: BandwidthMode::Auto,
            pilot_c: 1.0,
        }
    }
}

/// Bandwidth choice at the pilot from the DML bias and centered covariance
/// restricted to the headline levels.
pub fn choose_bandwidth(
    data: &Dataset,
    cf: &CrossFit,
    config: &EstimatorConfig,
    a: f64,
    pilot_c: f64,
) -> Result<BandwidthChoice> {
    let pilot = pilot_bandwidth(data, pilot_c)?.get();
    let at_pilot = config.with_h(pilot)?;
    let bias = dml_bias(cf, &at_pilot, a)?;
    let cov = centered_covariance(&influence_values(cf, &at_pilot, a)?, pilot)?;
    let idx = data.grid().headline_indices();
    let idx: Vec<usize> = if idx.is_empty() {
        (0..bias.len()).collect()
    } else {
        idx
    };
    let b: Vec<f64> = idx.iter().map(|&i| bias[i]).collect();
    let c: Vec<f64> = idx.iter().map(|&i| cov[[i, i]]).collect();
    select_bandwidth(&b, &c, data.len(), pilot)
}

/// Full band at `a`: bandwidth (fixed or selected), cross-fitted DML,
/// bias, fold covariance, simulated sup-quantile.
pub fn dml_band(
    data: &Dataset,
    cf: &CrossFit,
    config: &EstimatorConfig,
    a: f64,
    options: &BandOptions,
) -> Result<BandReport> {
    let h = match options.bandwidth {
        BandwidthMode::Fixed(h) => h,
        BandwidthMode::Auto => choose_bandwidth(data, cf, config, a, options.pilot_c)?.h_star,
    };
    let cfg = config.with_h(h)?;
    let est = cf.estimate(EstimatorKind::Dml, &cfg, a)?;
    let bias = dml_bias(cf, &cfg, a)?;
    let cov = fold_covariance(&influence_values(cf, &cfg, a)?, h)?;
    let gp = simulate_gaussian_process(&cov, options.paths, options.seed)?;
    let q = sup_quantile(&gp.paths, options.alpha)?;
    let mut report = confidence_band(&est.theta, &bias, h, data.len(), q, options.alpha)?;
    report.clipped_eigenvalues = gp.clipped_eigenvalues;
    report.floor_hits = est.floor_hits;
    report.covariance = Some(cov);
    Ok(report)
}
