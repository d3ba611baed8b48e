//! Command-line front end: configuration merging, data sourcing and report
//! emission for the `distcausal` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnf::cnf_fit;
use crate::dataset::Dataset;
use crate::distspace::QuantileGrid;
use crate::error::{Error, Result};
use crate::estimators::{
    CrossFit, EstimatorConfig, EstimatorKind, NeuralTrainer, NuisanceTrainer,
    DEFAULT_PROPENSITY_FLOOR,
};
use crate::inference::{
    choose_bandwidth, dml_band, BandOptions, BandReport, BandwidthChoice, BandwidthMode,
    DEFAULT_PATHS,
};
use crate::io;
use crate::kernels::Kernel;
use crate::nfr::nfr_fit;
use crate::nncore::EpochRecord;
use crate::simlab::{
    benchmark, csv_err, sensitivity_bandwidth, sensitivity_sample_size, BenchmarkConfig,
    BenchmarkReport, CurveReport, Dgp, DgpConfig, GeneratedUnit, NuisanceChoice, TruthRow,
};

pub const THREADS_ENV: &str = "DISTCAUSAL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceArg {
    NfrCnf,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    SampleSize,
    Bandwidth,
}

/// Fully resolved parameters of one command; defaults, then the config
/// file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub kernel: Kernel,
    #[serde(with = "bandwidth_repr")]
    pub bandwidth: BandwidthMode,
    pub treatment_levels: Vec<f64>,
    pub folds: usize,
    pub nuisance: NuisanceArg,
    pub alpha: f64,
    pub out: PathBuf,
    /// Real data; both or neither. Without them data are simulated.
    pub units: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub n_units: usize,
    pub propensity_floor: f64,
    pub pilot_c: f64,
    pub paths: usize,
    pub replications: usize,
    pub mc_units: usize,
    pub sweep: Sweep,
    pub sizes: Vec<usize>,
    pub multiples: Vec<f64>,
    pub dgp: DgpConfig,
    pub neural: NeuralTrainer,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kernel: Kernel::Epanechnikov,
            bandwidth: BandwidthMode::Auto,
            treatment_levels: vec![-0.5, 0.0, 0.5],
            folds: 2,
            nuisance: NuisanceArg::NfrCnf,
            alpha: 0.05,
            out: PathBuf::from("out"),
            units: None,
            observations: None,
            n_units: 2000,
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            pilot_c: 1.0,
            paths: DEFAULT_PATHS,
            replications: 20,
            mc_units: 200_000,
            sweep: Sweep::SampleSize,
            sizes: vec![1000, 2500, 5000, 10_000, 25_000],
            multiples: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            dgp: DgpConfig::default(),
            neural: NeuralTrainer::default(),
        }
    }
}

mod bandwidth_repr {
    use super::BandwidthMode;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BandwidthMode, s: S) -> Result<S::Ok, S::Error> {
        match m {
            BandwidthMode::Auto => s.serialize_str("auto"),
            BandwidthMode::Fixed(h) => s.serialize_f64(*h),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BandwidthMode, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(h) => Ok(BandwidthMode::Fixed(h)),
            Repr::Str(s) => super::parse_bandwidth(&s).map_err(D::Error::custom),
        }
    }
}

fn parse_bandwidth(s: &str) -> std::result::Result<BandwidthMode, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(BandwidthMode::Auto);
    }
    match s.parse::<f64>() {
        Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthMode::Fixed(h)),
        _ => Err(format!(
            "bandwidth must be a positive number or \"auto\", got {s:?}"
        )),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units.is_some() != self.observations.is_some() {
            return Err(Error::Usage(
                "--units and --observations go together".into(),
            ));
        }
        for p in [&self.units, &self.observations].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Usage(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        if self.treatment_levels.is_empty() || self.treatment_levels.iter().any(|a| !a.is_finite())
        {
            return Err(Error::Usage(
                "need at least one finite treatment level".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::TooFewFolds);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Usage("alpha must lie in (0, 1)".into()));
        }
        if self.n_units == 0 {
            return Err(Error::Usage("n_units must be positive".into()));
        }
        self.dgp.validate()
    }

    fn estimator_config(&self, h: f64) -> Result<EstimatorConfig> {
        let mut c = EstimatorConfig::new(self.kernel, h)?;
        c.propensity_floor = self.propensity_floor;
        c.folds = self.folds;
        c.seed = self.seed;
        Ok(c)
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            dgp: self.dgp.clone(),
            n_units: self.n_units,
            replications: self.replications,
            treatment_levels: self.treatment_levels.clone(),
            estimators: EstimatorKind::ALL.to_vec(),
            kernel: self.kernel,
            bandwidth: self.bandwidth,
            pilot_c: self.pilot_c,
            folds: self.folds,
            propensity_floor: self.propensity_floor,
            mc_units: self.mc_units,
            nuisance: match self.nuisance {
                NuisanceArg::Oracle => NuisanceChoice::oracle(),
                NuisanceArg::NfrCnf => NuisanceChoice::NfrCnf(Box::new(self.neural.clone())),
            },
            seed: self.seed,
        }
    }

    /// Parse a TOML or JSON config; a JSON report's embedded `config` is
    /// accepted so that any output can be replayed.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            serde_json::from_value(v).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "distcausal",
    version,
    about = "Distributional causal effects of continuous treatments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset and write units/observations CSVs.
    Simulate(Flags),
    /// Train NFR and CNF nuisances on the full data and save their weights.
    Fit(Flags),
    /// Cross-fitted DR, IPW and DML estimates.
    Estimate(Flags),
    /// DML estimate with bias correction and a uniform confidence band.
    Band(Flags),
    /// Replicated estimator comparison on the synthetic generator.
    Benchmark(Flags),
    /// MAE curve over sample sizes or bandwidth multiples.
    Sensitivity(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Estimate(_) => "estimate",
            Command::Band(_) => "band",
            Command::Benchmark(_) => "benchmark",
            Command::Sensitivity(_) => "sensitivity",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Simulate(f)
            | Command::Fit(f)
            | Command::Estimate(f)
            | Command::Band(f)
            | Command::Benchmark(f)
            | Command::Sensitivity(f) => f,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML config, or a JSON report whose `config` is replayed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kernel: Option<Kernel>,
    /// FLOAT or `auto`.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<BandwidthMode>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub treatment_levels: Option<Vec<f64>>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum)]
    pub nuisance: Option<NuisanceArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub units: Option<PathBuf>,
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long)]
    pub n_units: Option<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, value_enum)]
    pub sweep: Option<Sweep>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub multiples: Option<Vec<f64>>,
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { c.$f = v.clone(); } )*};
        }
        set!(
            seed,
            kernel,
            bandwidth,
            treatment_levels,
            folds,
            nuisance,
            alpha,
            out,
            n_units,
            replications,
            paths,
            sweep,
            sizes,
            multiples
        );
        if self.units.is_some() {
            c.units = self.units.clone();
        }
        if self.observations.is_some() {
            c.observations = self.observations.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Every output file embeds the command and its resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output<T> {
    pub command: String,
    pub config: RunConfig,
    pub result: T,
}

/// Files produced by a command, as `(file name, contents)`.
pub type Files = Vec<(String, String)>;

fn json<T: Serialize>(command: &str, cfg: &RunConfig, result: &T) -> Result<String> {
    let out = Output {
        command: command.to_string(),
        config: cfg.clone(),
        result,
    };
    Ok(serde_json::to_string_pretty(&out)? + "\n")
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
        .map_err(|e| Error::Data(e.to_string()))
}

/// The synthetic units `simulate` writes, drawn from the config seed.
pub fn simulate_units(cfg: &RunConfig) -> Result<Vec<GeneratedUnit>> {
    let dgp = Dgp::new(cfg.dgp.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_units)
        .map(|i| dgp.generate_unit(format!("u{i}"), &mut rng))
        .collect()
}

/// Real data when paths are given, else the simulated dataset.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let grid = QuantileGrid::uniform(cfg.dgp.grid_points)?;
    match (&cfg.units, &cfg.observations) {
        (Some(u), Some(o)) => io::load_dataset(u, o, &grid),
        _ => Dataset::new(simulate_units(cfg)?.into_iter().map(|g| g.unit).collect()),
    }
}

/// Per-fold nuisance training as configured.
pub fn trainer(cfg: &RunConfig, data: &Dataset) -> Result<Box<dyn NuisanceTrainer>> {
    match cfg.nuisance {
        NuisanceArg::NfrCnf => Ok(Box::new(cfg.neural.reseeded(cfg.seed))),
        NuisanceArg::Oracle => {
            if data.covariate_dim() != cfg.dgp.n {
                return Err(Error::Usage(format!(
                    "oracle nuisances need {} covariates, data have {}",
                    cfg.dgp.n,
                    data.covariate_dim()
                )));
            }
            let pair = Arc::new(Dgp::new(cfg.dgp.clone())?).oracle_nuisances(0.0, 1.0);
            Ok(Box::new(move |_: &Dataset, _: usize| Ok(pair.clone())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub n_units: usize,
    pub units_file: String,
    pub observations_file: String,
    pub noise_model: String,
    /// Monte Carlo ground truth on the full grid.
    pub levels: Vec<f64>,
    pub truth: Vec<TruthRow>,
}

pub fn run_simulate(cfg: &RunConfig) -> Result<(SimulateReport, Files)> {
    let gen = simulate_units(cfg)?;
    let (mut ub, mut ob) = (Vec::new(), Vec::new());
    let units: Vec<(&str, f64, &[f64])> = gen
        .iter()
        .map(|g| (g.unit.id.as_str(), g.unit.a, g.unit.x.as_slice()))
        .collect();
    io::write_units(&mut ub, &units)?;
    let obs: Vec<(&str, &[f64])> = gen
        .iter()
        .map(|g| (g.unit.id.as_str(), g.observations.as_slice()))
        .collect();
    io::write_observations(&mut ob, &obs)?;
    let dgp = Dgp::new(cfg.dgp.clone())?;
    let w = dgp.mean_weights(cfg.mc_units, cfg.seed)?;
    let truth = cfg
        .treatment_levels
        .iter()
        .map(|&a| {
            Ok(TruthRow {
                a,
                values: dgp.truth_from_weights(a, &w)?.into_values(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SimulateReport {
        n_units: gen.len(),
        units_file: "units.csv".into(),
        observations_file: "observations.csv".into(),
        noise_model: format!(
            "per-unit constant shift, standard deviation {}",
            cfg.dgp.noise_sd
        ),
        levels: dgp.grid().levels().to_vec(),
        truth,
    };
    let to_s = |b: Vec<u8>| String::from_utf8(b).map_err(|e| Error::Data(e.to_string()));
    let files = vec![
        ("units.csv".into(), to_s(ub)?),
        ("observations.csv".into(), to_s(ob)?),
    ];
    Ok((report, files))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_units: usize,
    pub nfr_file: String,
    pub cnf_file: String,
    pub nfr: TrainingSummary,
    pub cnf: TrainingSummary,
}

pub fn run_fit(cfg: &RunConfig) -> Result<(FitReport, Files)> {
    let data = load_data(cfg)?;
    let t = cfg.neural.reseeded(cfg.seed);
    let nfr = nfr_fit(&data, &t.nfr_train, &t.nfr_arch)?;
    let a = data.treatments();
    let xs: Vec<&[f64]> = data.units().iter().map(|u| u.x.as_slice()).collect();
    let cnf = cnf_fit(&a, &xs, &t.cnf_train, &t.cnf_arch)?;
    let files = vec![
        (
            "nfr.json".into(),
            serde_json::to_string_pretty(&nfr.model.to_document())? + "\n",
        ),
        (
            "cnf.json".into(),
            serde_json::to_string_pretty(&cnf.model.to_document())? + "\n",
        ),
    ];
    let report = FitReport {
        n_units: data.len(),
        nfr_file: "nfr.json".into(),
        cnf_file: "cnf.json".into(),
        nfr: TrainingSummary {
            best_epoch: nfr.best_epoch,
            history: nfr.history,
        },
        cnf: TrainingSummary {
            best_epoch: cnf.best_epoch,
            history: cnf.history,
        },
    };
    Ok((report, files))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub a: f64,
    pub h: f64,
    /// Present when the bandwidth was selected automatically.
    pub selection: Option<BandwidthChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: EstimatorKind,
    pub a: f64,
    pub h: f64,
    pub floor_hits: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub n_units: usize,
    pub levels: Vec<f64>,
    pub bandwidths: Vec<BandwidthRow>,
    pub estimates: Vec<EstimateRow>,
}

fn cross_fit(cfg: &RunConfig, data: &Dataset) -> Result<CrossFit> {
    let t = trainer(cfg, data)?;
    CrossFit::train(data, t.as_ref(), cfg.folds, cfg.seed)
}

pub fn run_estimate(cfg: &RunConfig) -> Result<EstimateReport> {
    let data = load_data(cfg)?;
    let cf = cross_fit(cfg, &data)?;
    let mut bandwidths = Vec::new();
    let mut estimates = Vec::new();
    for &a in &cfg.treatment_levels {
        let (h, selection) = match cfg.bandwidth {
            BandwidthMode::Fixed(h) => (h, None),
            BandwidthMode::Auto => {
                let c = choose_bandwidth(&data, &cf, &cfg.estimator_config(1.0)?, a, cfg.pilot_c)?;
                (c.h_star, Some(c))
            }
        };
        bandwidths.push(BandwidthRow { a, h, selection });
        let all = cf.estimate_all(&cfg.estimator_config(h)?, a)?;
        for (kind, e) in EstimatorKind::ALL.into_iter().zip(all) {
            estimates.push(EstimateRow {
                estimator: kind,
                a,
                h,
                floor_hits: e.floor_hits,
                theta: e.theta.into_values(),
            });
        }
    }
    Ok(EstimateReport {
        n_units: data.len(),
        levels: data.grid().levels().to_vec(),
        bandwidths,
        estimates,
    })
}

impl EstimateReport {
    pub fn to_csv(&self) -> Result<String> {
        let rows = self.estimates.iter().flat_map(|e| {
            self.levels.iter().zip(&e.theta).map(move |(l, t)| {
                vec![
                    e.estimator.to_string(),
                    e.a.to_string(),
                    e.h.to_string(),
                    l.to_string(),
                    t.to_string(),
                ]
            })
        });
        csv_string(&["estimator", "a", "h", "level", "theta"], rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub a: f64,
    #[serde(flatten)]
    pub band: BandReport,
}

pub fn run_band(cfg: &RunConfig) -> Result<Vec<BandRow>> {
    let data = load_data(cfg)?;
    let cf = cross_fit(cfg, &data)?;
    let options = BandOptions {
        alpha: cfg.alpha,
        paths: cfg.paths,
        seed: cfg.seed,
        bandwidth: cfg.bandwidth,
        pilot_c: cfg.pilot_c,
    };
    let base = cfg.estimator_config(1.0)?;
    cfg.treatment_levels
        .iter()
        .map(|&a| {
            Ok(BandRow {
                a,
                band: dml_band(&data, &cf, &base, a, &options)?,
            })
        })
        .collect()
}

fn band_csv(rows: &[BandRow]) -> Result<String> {
    let lines = rows.iter().flat_map(|r| {
        let b = &r.band;
        (0..b.levels.len()).map(move |i| {
            vec![
                r.a.to_string(),
                b.levels[i].to_string(),
                b.theta[i].to_string(),
                b.bias[i].to_string(),
                b.lower[i].to_string(),
                b.upper[i].to_string(),
                b.h_star.to_string(),
                b.q_hat.to_string(),
            ]
        })
    });
    csv_string(
        &[
            "a", "level", "theta", "bias", "lower", "upper", "h", "q_hat",
        ],
        lines,
    )
}

pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    benchmark(&cfg.benchmark_config())
}

pub fn run_sensitivity(cfg: &RunConfig) -> Result<CurveReport> {
    let b = cfg.benchmark_config();
    match cfg.sweep {
        Sweep::SampleSize => sensitivity_sample_size(&b, &cfg.sizes),
        Sweep::Bandwidth => sensitivity_bandwidth(&b, &cfg.multiples),
    }
}

/// Run a parsed command and return the files it produces.
pub fn execute(command: &Command) -> Result<Files> {
    let cfg = command.flags().resolve()?;
    let name = command.name();
    let mut files: Files = match command {
        Command::Simulate(_) => {
            let (r, f) = run_simulate(&cfg)?;
            let mut out = vec![(format!("{name}.json"), json(name, &cfg, &r)?)];
            out.extend(f);
            out
        }
        Command::Fit(_) => {
            let (r, f) = run_fit(&cfg)?;
            let hist = |m: &'static str, s: &TrainingSummary| {
                s.history
                    .iter()
                    .map(|e| {
                        vec![
                            m.to_string(),
                            e.epoch.to_string(),
                            e.train_loss.to_string(),
                            e.validation_loss.to_string(),
                            e.learning_rate.to_string(),
                        ]
                    })
                    .collect::<Vec<_>>()
            };
            let rows = hist("nfr", &r.nfr).into_iter().chain(hist("cnf", &r.cnf));
            let csv = csv_string(
                &[
                    "model",
                    "epoch",
                    "train_loss",
                    "validation_loss",
                    "learning_rate",
                ],
                rows,
            )?;
            let mut out = vec![
                (format!("{name}.json"), json(name, &cfg, &r)?),
                (format!("{name}.csv"), csv),
            ];
            out.extend(f);
            out
        }
        Command::Estimate(_) => {
            let r = run_estimate(&cfg)?;
            vec![
                (format!("{name}.json"), json(name, &cfg, &r)?),
                (format!("{name}.csv"), r.to_csv()?),
            ]
        }
        Command::Band(_) => {
            let r = run_band(&cfg)?;
            vec![
                (format!("{name}.json"), json(name, &cfg, &r)?),
                (format!("{name}.csv"), band_csv(&r)?),
            ]
        }
        Command::Benchmark(_) => {
            let r = run_benchmark(&cfg)?;
            vec![
                (format!("{name}.json"), json(name, &cfg, &r)?),
                (format!("{name}.csv"), r.to_csv()?),
            ]
        }
        Command::Sensitivity(_) => {
            let r = run_sensitivity(&cfg)?;
            vec![
                (format!("{name}.json"), json(name, &cfg, &r)?),
                (format!("{name}.csv"), r.to_csv()?),
            ]
        }
    };
    fs::create_dir_all(&cfg.out)?;
    for (file, body) in &mut files {
        let path = cfg.out.join(&*file);
        fs::write(&path, body.as_bytes())?;
        *file = path.display().to_string();
    }
    Ok(files)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| execute(&cli.command));
    match result {
        Ok(files) => {
            for (path, _) in files {
                println!("{path}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("distcausal").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(
            &p,
            "seed = 7\nfolds = 3\nbandwidth = 0.3\nkernel = \"gaussian\"\n[dgp]\nc = 0.5\n",
        )
        .unwrap();
        let cli = parse(&[
            "estimate",
            "--config",
            p.to_str().unwrap(),
            "--seed",
            "9",
            "--treatment-levels",
            "-0.5,1",
        ]);
        let c = cli.command.flags().resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.folds, 3);
        assert_eq!(c.bandwidth, BandwidthMode::Fixed(0.3));
        assert_eq!(c.kernel, Kernel::Gaussian);
        assert_eq!(c.dgp.c, 0.5);
        assert_eq!(c.treatment_levels, vec![-0.5, 1.0]);
    }

    #[test]
    fn bandwidth_flag_parsing() {
        assert_eq!(parse_bandwidth("auto"), Ok(BandwidthMode::Auto));
        assert_eq!(parse_bandwidth("0.25"), Ok(BandwidthMode::Fixed(0.25)));
        assert!(parse_bandwidth("-1").is_err());
        assert!(parse_bandwidth("wide").is_err());
        assert!(Cli::try_parse_from(["distcausal", "band", "--bandwidth", "x"]).is_err());
    }

    #[test]
    fn config_round_trips_through_json_and_toml() {
        let c = RunConfig {
            bandwidth: BandwidthMode::Fixed(0.125),
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("r.json");
        fs::write(&j, json("estimate", &c, &0).unwrap()).unwrap();
        assert_eq!(RunConfig::from_file(&j).unwrap(), c);
        let t = dir.path().join("r.toml");
        fs::write(&t, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::from_file(&t).unwrap(), c);
    }

    #[test]
    fn usage_errors() {
        let bad = |args: &[&str]| {
            parse(args)
                .command
                .flags()
                .resolve()
                .unwrap_err()
                .exit_code()
        };
        assert_eq!(bad(&["estimate", "--folds", "1"]), 1);
        assert_eq!(bad(&["estimate", "--alpha", "2"]), 1);
        assert_eq!(
            bad(&[
                "estimate",
                "--units",
                "/nonexistent/u.csv",
                "--observations",
                "/nonexistent/o.csv"
            ]),
            1
        );
        assert_eq!(bad(&["estimate", "--units", "/nonexistent/u.csv"]), 1);
        assert_eq!(main_with_args(["distcausal", "frobnicate"]), 1);
    }

    #[test]
    fn oracle_needs_matching_covariates() {
        let c = RunConfig {
            nuisance: NuisanceArg::Oracle,
            dgp: DgpConfig {
                n: 2,
                pair_means: vec![0.0],
                gamma: vec![0.1; 2],
                xi: vec![0.0; 2],
                beta_shapes: vec![(2.0, 2.0)],
                ..DgpConfig::default()
            },
            ..RunConfig::default()
        };
        let data = Dataset::new(
            simulate_units(&RunConfig {
                n_units: 5,
                ..RunConfig::default()
            })
            .unwrap()
            .into_iter()
            .map(|g| g.unit)
            .collect(),
        )
        .unwrap();
        assert!(trainer(&c, &data).is_err());
    }

    #[test]
    fn simulate_files_reload_to_the_same_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            n_units: 30,
            mc_units: 2000,
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let (_, files) = run_simulate(&cfg).unwrap();
        for (name, body) in &files {
            fs::write(dir.path().join(name), body).unwrap();
        }
        let loaded = load_data(&RunConfig {
            units: Some(dir.path().join("units.csv")),
            observations: Some(dir.path().join("observations.csv")),
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(loaded, load_data(&cfg).unwrap());
    }
}
