//! Distributions represented by their quantile functions on a shared grid.
//!
//! For one-dimensional distributions the Wasserstein-2 distance is the L2
//! distance between quantile functions, and the Wasserstein barycenter is
//! the pointwise mean of quantile functions. Everything downstream acts
//! level by level on [`QuantileFunction`] values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The nine quantile levels used for headline metrics.
pub const HEADLINE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const LEVEL_MATCH_TOL: f64 = 1e-12;

/// Strictly increasing quantile levels inside the open unit interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Arc<[f64]>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("quantile grid has no levels".into()));
        }
        for &t in &levels {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "quantile level {t} is outside (0, 1)"
                )));
            }
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "quantile levels must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            levels: levels.into(),
        })
    }

    /// `points` equally spaced levels `k / (points + 1)`; 99 points gives 0.01..0.99.
    pub fn uniform(points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::InvalidInput("grid needs at least one point".into()));
        }
        let denom = (points + 1) as f64;
        Self::new((1..=points).map(|k| k as f64 / denom).collect())
    }

    /// The nine headline levels on their own.
    pub fn headline() -> Self {
        Self::new(HEADLINE_LEVELS.to_vec()).expect("headline levels are valid")
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Indices of the headline levels that are present on this grid.
    pub fn headline_indices(&self) -> Vec<usize> {
        HEADLINE_LEVELS
            .iter()
            .filter_map(|&h| self.index_of(h))
            .collect()
    }

    pub fn index_of(&self, level: f64) -> Option<usize> {
        self.levels
            .iter()
            .position(|&t| (t - level).abs() <= LEVEL_MATCH_TOL)
    }

    /// Trapezoid weights for integrals over [0, 1]. Values beyond the first
    /// and last level are clipped to the nearest level, so the weights sum to 1.
    pub fn unit_interval_weights(&self) -> Vec<f64> {
        let mut w = self.span_weights();
        let n = self.levels.len();
        w[0] += self.levels[0];
        w[n - 1] += 1.0 - self.levels[n - 1];
        w
    }

    /// Plain trapezoid weights over [first level, last level].
    pub fn span_weights(&self) -> Vec<f64> {
        let t = &self.levels;
        let n = t.len();
        let mut w = vec![0.0; n];
        for i in 0..n.saturating_sub(1) {
            let half = 0.5 * (t[i + 1] - t[i]);
            w[i] += half;
            w[i + 1] += half;
        }
        w
    }

    pub fn same_as(&self, other: &QuantileGrid) -> bool {
        Arc::ptr_eq(&self.levels, &other.levels) || self.levels[..] == other.levels[..]
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        Self::uniform(99).expect("default grid is valid")
    }
}

impl PartialEq for QuantileGrid {
    fn eq(&self, other: &Self) -> bool {
        self.same_as(other)
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.levels.to_vec()
    }
}

/// Quantile values of one distribution, one per grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFunction {
    grid: QuantileGrid,
    values: Vec<f64>,
}

impl QuantileFunction {
    pub fn new(grid: QuantileGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} quantile values for a grid of {} levels",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite quantile value at level {}",
                grid.levels()[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: QuantileGrid, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    /// Tabulates `f(t)` at every grid level.
    pub fn from_fn(grid: QuantileGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.levels().iter().map(|&t| f(t)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value_at(&self, level: f64) -> Option<f64> {
        self.grid.index_of(level).map(|i| self.values[i])
    }

    /// Values at the headline levels present on the grid.
    pub fn headline_values(&self) -> Vec<f64> {
        self.grid
            .headline_indices()
            .into_iter()
            .map(|i| self.values[i])
            .collect()
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }

    /// Pointwise arithmetic with another function on the same grid.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_grid(&self.grid, &other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.grid.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Least-squares projection onto non-decreasing sequences (pool adjacent
    /// violators). Used for reporting model predictions only.
    pub fn isotonic(&self) -> Self {
        let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            blocks.push((v, 1));
            while blocks.len() > 1 {
                let (m2, n2) = blocks[blocks.len() - 1];
                let (m1, n1) = blocks[blocks.len() - 2];
                if m1 <= m2 {
                    break;
                }
                blocks.truncate(blocks.len() - 2);
                let n = n1 + n2;
                blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n));
            }
        }
        let values = blocks
            .into_iter()
            .flat_map(|(m, n)| std::iter::repeat_n(m, n))
            .collect();
        Self {
            grid: self.grid.clone(),
            values,
        }
    }
}

pub(crate) fn ensure_same_grid(a: &QuantileGrid, b: &QuantileGrid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Raw observed outcome values for one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample {
    observations: Vec<f64>,
}

impl EmpiricalSample {
    pub fn new(observations: Vec<f64>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyObservations);
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite observation".into()));
        }
        Ok(Self { observations })
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }
}

/// How empirical quantiles are read off the sorted sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMethod {
    /// Left-continuous generalized inverse of the empirical CDF.
    #[default]
    InverseEcdf,
    /// Linear interpolation between order statistics at position (n - 1) t.
    Linear,
}

pub fn empirical_quantile_function(
    sample: &EmpiricalSample,
    grid: &QuantileGrid,
) -> QuantileFunction {
    empirical_quantile_function_with(sample, grid, QuantileMethod::InverseEcdf)
}

pub fn empirical_quantile_function_with(
    sample: &EmpiricalSample,
    grid: &QuantileGrid,
    method: QuantileMethod,
) -> QuantileFunction {
    let mut sorted = sample.observations.clone();
    sorted.sort_by(f64::total_cmp);
    let values = sorted_quantiles(&sorted, grid.levels(), method);
    QuantileFunction {
        grid: grid.clone(),
        values,
    }
}

/// Quantiles of an already sorted, non-empty slice.
pub(crate) fn sorted_quantiles(sorted: &[f64], levels: &[f64], method: QuantileMethod) -> Vec<f64> {
    let n = sorted.len();
    let nf = n as f64;
    levels
        .iter()
        .map(|&t| match method {
            QuantileMethod::InverseEcdf => {
                // smallest k with k / n >= t; the slack absorbs rounding in n * t
                let k = (nf * t - 1e-9).ceil().clamp(1.0, nf) as usize;
                sorted[k - 1]
            }
            QuantileMethod::Linear => {
                let pos = (nf - 1.0) * t;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            }
        })
        .collect()
}

/// Wasserstein-2 distance between two distributions on the same grid.
pub fn wasserstein2(q1: &QuantileFunction, q2: &QuantileFunction) -> Result<f64> {
    ensure_same_grid(&q1.grid, &q2.grid)?;
    let w = q1.grid.unit_interval_weights();
    let sq: f64 = q1
        .values
        .iter()
        .zip(&q2.values)
        .zip(&w)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum();
    Ok(sq.max(0.0).sqrt())
}

/// Wasserstein barycenter: the pointwise mean of the quantile functions.
pub fn barycenter(samples: &[QuantileFunction]) -> Result<QuantileFunction> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("barycenter of an empty list".into()))?;
    let mut acc = vec![0.0; first.grid.len()];
    for q in samples {
        ensure_same_grid(&first.grid, &q.grid)?;
        for (a, v) in acc.iter_mut().zip(&q.values) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    QuantileFunction::new(first.grid.clone(), acc)
}

/// Mean squared Wasserstein-2 distance from `candidate` to each sample.
pub fn frechet_objective(
    candidate: &QuantileFunction,
    samples: &[QuantileFunction],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "Fréchet objective of an empty list".into(),
        ));
    }
    let mut total = 0.0;
    for q in samples {
        let d = wasserstein2(candidate, q)?;
        total += d * d;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use statrs::function::erf::erfc_inv;

    fn normal_quantile(t: f64) -> f64 {
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * t)
    }

    #[test]
    fn default_grid_shape() {
        let g = QuantileGrid::default();
        assert_eq!(g.len(), 99);
        assert!((g.levels()[0] - 0.01).abs() < 1e-15);
        assert!((g.levels()[98] - 0.99).abs() < 1e-15);
        assert_eq!(g.headline_indices().len(), 9);
        let total: f64 = g.unit_interval_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let span: f64 = g.span_weights().iter().sum();
        assert!((span - 0.98).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_levels() {
        assert!(QuantileGrid::new(vec![]).is_err());
        assert!(QuantileGrid::new(vec![0.0, 0.5]).is_err());
        assert!(QuantileGrid::new(vec![0.5, 1.0]).is_err());
        assert!(QuantileGrid::new(vec![0.5, 0.4]).is_err());
        assert!(QuantileGrid::new(vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn point_mass_quantiles() {
        let s = EmpiricalSample::new(vec![5.0]).unwrap();
        let q = empirical_quantile_function(&s, &QuantileGrid::default());
        assert!(q.values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn inverse_ecdf_by_hand() {
        let s = EmpiricalSample::new(vec![4.0, 2.0, 3.0, 1.0]).unwrap();
        let g = QuantileGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
        let q = empirical_quantile_function(&s, &g);
        assert_eq!(q.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn inverse_ecdf_hits_exact_order_statistics() {
        // 100 observations: level k/100 must pick the k-th order statistic
        let s = EmpiricalSample::new((1..=100).map(f64::from).collect()).unwrap();
        let q = empirical_quantile_function(&s, &QuantileGrid::default());
        for (i, v) in q.values().iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64);
        }
    }

    #[test]
    fn linear_method_interpolates() {
        let s = EmpiricalSample::new(vec![0.0, 10.0]).unwrap();
        let g = QuantileGrid::new(vec![0.25, 0.5]).unwrap();
        let q = empirical_quantile_function_with(&s, &g, QuantileMethod::Linear);
        assert_eq!(q.values(), &[2.5, 5.0]);
    }

    #[test]
    fn empty_sample_is_rejected() {
        let err = EmpiricalSample::new(vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty observation set");
    }

    #[test]
    fn monte_carlo_normal_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let s = EmpiricalSample::new(obs).unwrap();
        let q = empirical_quantile_function(&s, &QuantileGrid::headline());
        assert!(q.value_at(0.5).unwrap().abs() < 0.02);
    }

    #[test]
    fn w2_identity_and_gaussian_shift() {
        let g = QuantileGrid::default();
        let n0 = QuantileFunction::from_fn(g.clone(), normal_quantile).unwrap();
        let n1 = QuantileFunction::from_fn(g.clone(), |t| 1.0 + normal_quantile(t)).unwrap();
        assert_eq!(wasserstein2(&n0, &n0).unwrap(), 0.0);
        assert!((wasserstein2(&n0, &n1).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn w2_uniform_scaling() {
        let g = QuantileGrid::default();
        let u1 = QuantileFunction::from_fn(g.clone(), |t| t).unwrap();
        let u2 = QuantileFunction::from_fn(g, |t| 2.0 * t).unwrap();
        let d = wasserstein2(&u1, &u2).unwrap();
        assert!((d - (1.0f64 / 3.0).sqrt()).abs() < 0.005, "{d}");
    }

    #[test]
    fn w2_grid_mismatch() {
        let a = QuantileFunction::constant(QuantileGrid::default(), 0.0).unwrap();
        let b = QuantileFunction::constant(QuantileGrid::headline(), 0.0).unwrap();
        assert!(matches!(wasserstein2(&a, &b), Err(Error::GridMismatch)));
        assert!(matches!(barycenter(&[a, b]), Err(Error::GridMismatch)));
    }

    #[test]
    fn barycenter_basics() {
        let g = QuantileGrid::headline();
        let q = QuantileFunction::from_fn(g.clone(), |t| t * t).unwrap();
        assert_eq!(barycenter(std::slice::from_ref(&q)).unwrap(), q);
        assert!(barycenter(&[]).is_err());
    }

    #[test]
    fn gaussian_barycenter_oracle() {
        let g = QuantileGrid::headline();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<_> = (0..10_000)
            .map(|_| {
                let u: f64 = rng.random();
                QuantileFunction::from_fn(g.clone(), |t| u + normal_quantile(t)).unwrap()
            })
            .collect();
        let bar = barycenter(&samples).unwrap();
        let target = QuantileFunction::from_fn(g, |t| 0.5 + normal_quantile(t)).unwrap();
        let sup = bar
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(sup <= 0.02, "{sup}");
    }

    #[test]
    fn exponential_barycenter_oracle() {
        let g = QuantileGrid::headline();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples: Vec<_> = (0..10_000)
            .map(|_| {
                let rate = 1.0 + rng.random::<f64>();
                QuantileFunction::from_fn(g.clone(), |t| -(1.0 - t).ln() / rate).unwrap()
            })
            .collect();
        let bar = barycenter(&samples).unwrap();
        let mu = 1.0 / std::f64::consts::LN_2;
        let target = QuantileFunction::from_fn(g, |t| -(1.0 - t).ln() / mu).unwrap();
        let sup = bar
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(sup <= 0.03, "{sup}");
    }

    #[test]
    fn frechet_by_hand() {
        let g = QuantileGrid::headline();
        let zero = QuantileFunction::constant(g.clone(), 0.0).unwrap();
        let two = QuantileFunction::constant(g.clone(), 2.0).unwrap();
        let one = QuantileFunction::constant(g, 1.0).unwrap();
        let obj = frechet_objective(&one, &[zero, two.clone()]).unwrap();
        assert!((obj - 1.0).abs() < 1e-12);
        assert_eq!(
            frechet_objective(&two, std::slice::from_ref(&two)).unwrap(),
            0.0
        );
    }

    #[test]
    fn isotonic_projection() {
        let g = QuantileGrid::new(vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let q = QuantileFunction::new(g, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(q.isotonic().values(), &[1.0, 2.5, 2.5, 4.0]);
    }

    fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn w2_metric_axioms(a in arb_values(9), b in arb_values(9), c in arb_values(9)) {
            let g = QuantileGrid::headline();
            let qa = QuantileFunction::new(g.clone(), a).unwrap();
            let qb = QuantileFunction::new(g.clone(), b).unwrap();
            let qc = QuantileFunction::new(g, c).unwrap();
            let ab = wasserstein2(&qa, &qb).unwrap();
            prop_assert_eq!(ab, wasserstein2(&qb, &qa).unwrap());
            prop_assert!(ab <= wasserstein2(&qa, &qc).unwrap() + wasserstein2(&qc, &qb).unwrap() + 1e-9);
            prop_assert_eq!(ab == 0.0, qa == qb);
        }

        #[test]
        fn barycenter_is_frechet_mean(
            samples in prop::collection::vec(arb_values(9), 1..8),
            perturb in arb_values(9),
        ) {
            let g = QuantileGrid::headline();
            let qs: Vec<_> = samples.into_iter().map(|v| QuantileFunction::new(g.clone(), v).unwrap()).collect();
            let bar = barycenter(&qs).unwrap();
            let other = QuantileFunction::new(g, perturb).unwrap();
            let moved = bar.zip_with(&other, |a, b| a + b).unwrap();
            let at_bar = frechet_objective(&bar, &qs).unwrap();
            prop_assert!(at_bar <= frechet_objective(&other, &qs).unwrap() + 1e-9);
            prop_assert!(at_bar <= frechet_objective(&moved, &qs).unwrap() + 1e-9);
        }

        #[test]
        fn empirical_quantiles_monotone(obs in prop::collection::vec(-1e3f64..1e3, 1..60), linear in any::<bool>()) {
            let s = EmpiricalSample::new(obs).unwrap();
            let method = if linear { QuantileMethod::Linear } else { QuantileMethod::InverseEcdf };
            let q = empirical_quantile_function_with(&s, &QuantileGrid::default(), method);
            prop_assert!(q.is_non_decreasing());
        }

        #[test]
        fn barycenter_preserves_monotonicity(samples in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 9), 1..6)) {
            let g = QuantileGrid::headline();
            let qs: Vec<_> = samples.into_iter().map(|mut v| {
                v.sort_by(f64::total_cmp);
                QuantileFunction::new(g.clone(), v).unwrap()
            }).collect();
            prop_assert!(barycenter(&qs).unwrap().is_non_decreasing());
        }
    }
}
