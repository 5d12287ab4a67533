//! Seeded Monte Carlo harness: per-method error statistics, leakage theory
//! against simulation, root-swap probabilities and the stochastic CRB.
//!
//! Trial `t` at SNR index `i` draws its snapshots from
//! `derive_seed(base_seed, [i, t])`, so every method sees the same data and
//! results do not depend on method order, scheduling or thread count.

use std::fmt;
use std::str::FromStr;

use crate::array_model::{generate_snapshots, true_covariance, true_subspace_model, ArrayGeometry, SourceScenario, TrueModel};
use crate::error::{DoaError, Result};
use crate::estimator::{DoaEstimator, EstimationContext, RootMusicEstimator};
use crate::leakage::{empirical_leakage, expected_leakage_step1, expected_leakage_step2};
use crate::linalg::{c64, CMatrix, ColumnSpace, RMatrix};
use crate::parallel::{derive_seed, ordered_map, Execution};
use crate::resampling::{PseudoNoiseResampler, ResamplingConfig};
use crate::root_music::root_music;
use crate::root_swap::{root_events, root_swap_probability, select_combination, CombinationPlan};
use crate::subspace::{eigendecompose_matrix, sample_covariance};
use crate::two_step::{cross_term, modified_covariance, TwoStepConfig, TwoStepEstimator};

/// Resolution threshold: every DOA within one degree.
pub const RESOLUTION_THRESHOLD: f64 = std::f64::consts::PI / 180.0;

/// Array and source layout shared by every SNR point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTemplate {
    pub num_sensors: usize,
    pub spacing_ratio: f64,
    pub doas_deg: Vec<f64>,
    /// Pairwise source correlation coefficient.
    pub correlation: f64,
    pub num_snapshots: usize,
}

impl ScenarioTemplate {
    /// Ten half-wavelength sensors, sources at 35 and 37 degrees, ten
    /// snapshots.
    pub fn paper(correlation: f64) -> Self {
        Self {
            num_sensors: 10,
            spacing_ratio: 0.5,
            doas_deg: vec![35.0, 37.0],
            correlation,
            num_snapshots: 10,
        }
    }

    pub fn num_sources(&self) -> usize {
        self.doas_deg.len()
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.num_sensors, self.spacing_ratio)
    }

    pub fn doas(&self) -> Vec<f64> {
        let mut doas: Vec<f64> = self.doas_deg.iter().map(|d| d.to_radians()).collect();
        doas.sort_by(f64::total_cmp);
        doas
    }

    /// Unit noise power and equal source powers at `snr_db`.
    pub fn scenario(&self, snr_db: f64) -> Result<SourceScenario> {
        SourceScenario::equicorrelated(self.geometry()?, self.doas(), snr_db, self.correlation, self.num_snapshots)
    }

    /// The same sources without sensor noise.
    pub fn noiseless_scenario(&self, snr_db: f64) -> Result<SourceScenario> {
        let s = self.scenario(snr_db)?;
        SourceScenario::new(s.geometry, s.doas().to_vec(), s.source_covariance().clone(), 0.0, self.num_snapshots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaseMethod {
    /// Root-MUSIC on the sample covariance.
    Rm,
    /// Unitary root-MUSIC (forward-backward averaged covariance).
    Urm,
}

/// Method descriptor such as `urm`, `rsrm`, `urm+2step` or `rsurm+2step+pnr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodSpec {
    pub base: BaseMethod,
    pub root_swap: bool,
    pub two_step: bool,
    pub resampling: bool,
}

impl MethodSpec {
    pub fn plain(base: BaseMethod) -> Self {
        Self {
            base,
            root_swap: false,
            two_step: false,
            resampling: false,
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.root_swap {
            f.write_str("rs")?;
        }
        f.write_str(match self.base {
            BaseMethod::Rm => "rm",
            BaseMethod::Urm => "urm",
        })?;
        if self.two_step {
            f.write_str("+2step")?;
        }
        if self.resampling {
            f.write_str("+pnr")?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = DoaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DoaError::InvalidConfig(format!("unknown method '{s}'"));
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default();
        let (root_swap, base) = match head.strip_prefix("rs") {
            Some(rest) => (true, rest),
            None => (false, head),
        };
        let base = match base {
            "rm" => BaseMethod::Rm,
            "urm" => BaseMethod::Urm,
            _ => return Err(bad()),
        };
        let mut spec = Self {
            base,
            root_swap,
            two_step: false,
            resampling: false,
        };
        for option in parts {
            let flag = match option {
                "2step" => &mut spec.two_step,
                "pnr" => &mut spec.resampling,
                _ => return Err(bad()),
            };
            if *flag {
                return Err(bad());
            }
            *flag = true;
        }
        Ok(spec)
    }
}

/// Parameters shared by every method of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodParams {
    pub two_step: TwoStepConfig,
    pub swap_p: usize,
    pub swap_q: usize,
    pub pnr_iterations: usize,
    pub pnr_scale: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            two_step: TwoStepConfig::default(),
            swap_p: 1,
            swap_q: 0,
            pnr_iterations: 50,
            pnr_scale: 1.0,
        }
    }
}

/// The root-MUSIC stage of a method.
pub fn base_estimator(spec: MethodSpec, params: &MethodParams) -> RootMusicEstimator {
    let base = match spec.base {
        BaseMethod::Rm => RootMusicEstimator::conventional(),
        BaseMethod::Urm => RootMusicEstimator::unitary(),
    };
    if spec.root_swap {
        base.with_root_swap(params.swap_p, params.swap_q)
    } else {
        base
    }
}

/// Resampling wraps the two-step stage, which wraps the root-MUSIC base.
pub fn build_estimator(spec: MethodSpec, params: &MethodParams) -> Result<Box<dyn DoaEstimator>> {
    let base = base_estimator(spec, params);
    let staged: Box<dyn DoaEstimator> = if spec.two_step {
        Box::new(TwoStepEstimator {
            base,
            config: params.two_step.clone(),
        })
    } else {
        Box::new(base)
    };
    if spec.resampling {
        let config = ResamplingConfig::new(params.pnr_iterations, params.pnr_scale, 0)?;
        Ok(Box::new(PseudoNoiseResampler::new(staged, &config)))
    } else {
        Ok(staged)
    }
}

/// Reliability factor used by the leakage experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeakageGamma {
    Fixed(f64),
    /// Chosen per trial by the SML criterion over the gamma grid.
    Sml,
}

impl fmt::Display for LeakageGamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LeakageGamma::Fixed(g) => write!(f, "fixed:{g}"),
            LeakageGamma::Sml => f.write_str("sml"),
        }
    }
}

impl FromStr for LeakageGamma {
    type Err = DoaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "sml" {
            return Ok(LeakageGamma::Sml);
        }
        let value = s
            .strip_prefix("fixed:")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| DoaError::InvalidConfig(format!("leakage_gamma must be 'sml' or 'fixed:<g>', got '{s}'")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(DoaError::GammaOutOfRange(value));
        }
        Ok(LeakageGamma::Fixed(value))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioTemplate,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<MethodSpec>,
    pub base_seed: u64,
    pub params: MethodParams,
    pub leakage_gamma: LeakageGamma,
}

impl ExperimentConfig {
    /// The paper's protocol at a given trial count.
    pub fn paper(correlation: f64, snr_grid_db: Vec<f64>, trials: usize) -> Self {
        Self {
            scenario: ScenarioTemplate::paper(correlation),
            snr_grid_db,
            trials,
            methods: vec![MethodSpec::plain(BaseMethod::Rm)],
            base_seed: 42,
            params: MethodParams::default(),
            leakage_gamma: LeakageGamma::Fixed(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(DoaError::InvalidConfig(msg));
        if self.trials == 0 {
            return invalid("trials must be at least 1".into());
        }
        if self.snr_grid_db.is_empty() {
            return invalid("SNR grid is empty".into());
        }
        if let Some(s) = self.snr_grid_db.iter().find(|s| !s.is_finite()) {
            return invalid(format!("SNR {s} is not finite"));
        }
        if self.methods.is_empty() {
            return invalid("no methods given".into());
        }
        let mut names: Vec<String> = self.methods.iter().map(|m| m.to_string()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return invalid("methods are listed more than once".into());
        }
        if self.scenario.num_sources() == 0 {
            return invalid("no source DOAs given".into());
        }
        self.scenario.scenario(self.snr_grid_db[0])?;
        if self.methods.iter().any(|m| m.root_swap) {
            CombinationPlan::new(
                self.scenario.num_sensors,
                self.scenario.num_sources(),
                self.params.swap_p,
                self.params.swap_q,
            )?;
        }
        ResamplingConfig::new(self.params.pnr_iterations, self.params.pnr_scale, 0)?;
        Ok(())
    }

    fn trial_seed(&self, snr_index: usize, trial: usize) -> u64 {
        derive_seed(self.base_seed, &[snr_index as u64, trial as u64])
    }
}

/// `true` iff every DOA is strictly within one degree of its true value
/// after pairing both ascending-sorted lists.
pub fn resolution_event(estimated: &[f64], truth: &[f64]) -> bool {
    estimated.len() == truth.len()
        && sorted(estimated)
            .iter()
            .zip(sorted(truth))
            .all(|(a, b)| (a - b).abs() < RESOLUTION_THRESHOLD)
}

/// `sum_k (theta_hat_k - theta_k)^2` over ascending-sorted lists.
pub fn squared_error(estimated: &[f64], truth: &[f64]) -> f64 {
    sorted(estimated)
        .iter()
        .zip(sorted(truth))
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One method on one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub sq_error: f64,
    pub resolved: bool,
    pub root_swap: bool,
    pub ml_failure: bool,
    pub leakage_step1: f64,
    /// Only for two-step methods.
    pub leakage_step2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub snr_db: f64,
    pub mse: f64,
    /// MSE over resolved trials; NaN when none resolved.
    pub cmse: f64,
    pub resolution_prob: f64,
    pub rootswap_prob: f64,
    pub mlfail_prob: f64,
    pub leakage_step1: f64,
    pub leakage_step2: f64,
    pub crb_trace: f64,
    /// Trials where the estimator succeeded.
    pub trials_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    /// Sorts rows by method name, then SNR.
    pub fn new(mut rows: Vec<MetricsRow>) -> Self {
        rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.snr_db.total_cmp(&b.snr_db)));
        Self { rows }
    }

    pub fn row(&self, method: &str, snr_db: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.snr_db == snr_db)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn frequency(records: &[TrialRecord], event: impl Fn(&TrialRecord) -> bool) -> f64 {
    mean(records.iter().map(|r| if event(r) { 1.0 } else { 0.0 }))
}

/// Aggregates the successful trials of one (method, SNR) cell; failed
/// trials (`None`) only lower `trials_used`.
pub fn compute_metrics(method: &str, snr_db: f64, records: &[Option<TrialRecord>], crb_trace: f64) -> MetricsRow {
    let ok: Vec<TrialRecord> = records.iter().flatten().copied().collect();
    MetricsRow {
        method: method.to_string(),
        snr_db,
        mse: mean(ok.iter().map(|r| r.sq_error)),
        cmse: mean(ok.iter().filter(|r| r.resolved).map(|r| r.sq_error)),
        resolution_prob: frequency(&ok, |r| r.resolved),
        rootswap_prob: frequency(&ok, |r| r.root_swap),
        mlfail_prob: frequency(&ok, |r| r.ml_failure),
        leakage_step1: mean(ok.iter().map(|r| r.leakage_step1)),
        leakage_step2: mean(ok.iter().filter_map(|r| r.leakage_step2)),
        crb_trace,
        trials_used: ok.len(),
    }
}

/// Stochastic (unconditional Gaussian) CRB on the DOAs in radians:
/// `sigma^2 / (2N) * Re{ (D^H P_perp D) o (S A^H R^-1 A S)^T }^-1`, with
/// `D` the derivative of the steering matrix with respect to each angle.
pub fn stochastic_crb(scenario: &SourceScenario) -> Result<RMatrix> {
    // Without sensor noise the covariance is rank K and the bound degenerates.
    if scenario.noise_power() <= 0.0 {
        return Err(DoaError::SingularInformation);
    }
    let g = &scenario.geometry;
    let k = scenario.num_sources();
    let a = scenario.steering_matrix();
    let s = scenario.source_covariance();
    let r = true_covariance(scenario);
    let r_inv = r.clone().cholesky().ok_or(DoaError::SingularInformation)?.inverse();
    let projector = ColumnSpace::new(&a)?.projector;
    let m = g.num_sensors();
    let noise_projector = CMatrix::identity(m, m) - projector;

    let mut d = CMatrix::zeros(m, k);
    for (col, &theta) in scenario.doas().iter().enumerate() {
        let chain = 2.0 * std::f64::consts::PI * g.spacing_ratio() * theta.cos();
        d.set_column(col, &(g.steering_derivative(theta)? * c64(0.0, chain)));
    }
    let h = d.adjoint() * noise_projector * &d;
    let w = s * a.adjoint() * r_inv * &a * s;
    let fim = RMatrix::from_fn(k, k, |i, j| (h[(i, j)] * w[(j, i)]).re);
    let fim = (&fim + fim.transpose()) * 0.5;
    let inverse = fim.cholesky().ok_or(DoaError::SingularInformation)?.inverse();
    let crb = inverse * (scenario.noise_power() / (2.0 * scenario.num_snapshots() as f64));
    Ok((&crb + crb.transpose()) * 0.5)
}

struct SnrPoint {
    snr_db: f64,
    scenario: SourceScenario,
    model: TrueModel,
}

fn snr_points(config: &ExperimentConfig) -> Result<Vec<SnrPoint>> {
    config
        .snr_grid_db
        .iter()
        .map(|&snr_db| {
            let scenario = config.scenario.scenario(snr_db)?;
            let model = true_subspace_model(&scenario)?;
            Ok(SnrPoint { snr_db, scenario, model })
        })
        .collect()
}

/// Calls `f(snr_index, trial)` for every cell, in parallel when requested,
/// and returns the results grouped by SNR in trial order.
fn map_trials<T, F>(config: &ExperimentConfig, execution: Execution, f: F) -> Vec<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let trials = config.trials;
    let mut flat = ordered_map(config.snr_grid_db.len() * trials, execution, |cell| f(cell / trials, cell % trials))
        .into_iter();
    (0..config.snr_grid_db.len())
        .map(|_| flat.by_ref().take(trials).collect())
        .collect()
}

fn run_method(
    estimator: &dyn DoaEstimator,
    spec: MethodSpec,
    ctx: &EstimationContext<'_>,
    point: &SnrPoint,
) -> Result<TrialRecord> {
    let est = estimator.estimate(ctx.sample_covariance, ctx)?;
    let truth = point.scenario.doas();
    let k = point.scenario.num_sources();
    let events = root_events(&est.roots, &est.selected, &point.model.omegas);
    let truth_projector = &point.model.signal_projector;
    Ok(TrialRecord {
        sq_error: squared_error(est.doa.thetas(), truth),
        resolved: resolution_event(est.doa.thetas(), truth),
        root_swap: events.root_swap,
        ml_failure: events.ml_failure,
        leakage_step1: empirical_leakage(&est.first_stage_projector, truth_projector, k)?,
        leakage_step2: if spec.two_step {
            Some(empirical_leakage(&est.signal_projector, truth_projector, k)?)
        } else {
            None
        },
    })
}

/// Per-trial records indexed `[snr][trial][method]`; `None` marks a trial
/// where the method failed.
pub type TrialGrid = Vec<Vec<Vec<Option<TrialRecord>>>>;

/// Runs every method on the shared trials of every SNR point and keeps the
/// individual records.
pub fn run_trials(config: &ExperimentConfig, execution: Execution) -> Result<TrialGrid> {
    config.validate()?;
    let points = snr_points(config)?;
    let estimators = config
        .methods
        .iter()
        .map(|&spec| build_estimator(spec, &config.params))
        .collect::<Result<Vec<_>>>()?;
    let k = config.scenario.num_sources();

    Ok(map_trials(config, execution, |i, t| {
        let point = &points[i];
        let seed = config.trial_seed(i, t);
        let trial = generate_snapshots(&point.scenario, seed).and_then(|x| {
            let r = sample_covariance(&x)?;
            Ok((x, r))
        });
        let Ok((x, r)) = trial else {
            return vec![None; estimators.len()];
        };
        let ctx = EstimationContext {
            sample_covariance: r.matrix(),
            snapshots: &x,
            num_sources: k,
            geometry: point.scenario.geometry,
            seed: derive_seed(seed, &[1]),
        };
        estimators
            .iter()
            .zip(&config.methods)
            .map(|(e, &spec)| run_method(e.as_ref(), spec, &ctx, point).ok())
            .collect()
    }))
}

/// Aggregated metrics for every (method, SNR) cell.
pub fn run_monte_carlo(config: &ExperimentConfig, execution: Execution) -> Result<MetricsTable> {
    let cells = run_trials(config, execution)?;
    let mut rows = Vec::with_capacity(cells.len() * config.methods.len());
    for (&snr_db, trials) in config.snr_grid_db.iter().zip(&cells) {
        let scenario = config.scenario.scenario(snr_db)?;
        let crb_trace = stochastic_crb(&scenario).map(|c| c.trace()).unwrap_or(f64::NAN);
        for (j, spec) in config.methods.iter().enumerate() {
            let records: Vec<Option<TrialRecord>> = trials.iter().map(|t| t[j]).collect();
            rows.push(compute_metrics(&spec.to_string(), snr_db, &records, crb_trace));
        }
    }
    Ok(MetricsTable::new(rows))
}

/// Closed-form and simulated leakage at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageRow {
    pub snr_db: f64,
    /// Fixed reliability factor, or the mean SML-chosen one.
    pub gamma: f64,
    pub empirical_step1: f64,
    pub theory_step1: f64,
    pub empirical_step2: f64,
    /// Closed form at `gamma`.
    pub theory_step2: f64,
    pub trials_used: usize,
}

/// Step-1 and step-2 leakage for one trial of root-MUSIC; steps that cannot
/// form the cross term keep the step-1 subspace.
fn leakage_trial(
    config: &ExperimentConfig,
    point: &SnrPoint,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let k = point.scenario.num_sources();
    let geometry = point.scenario.geometry;
    let x = generate_snapshots(&point.scenario, seed)?;
    let r = sample_covariance(&x)?;
    let truth = &point.model.signal_projector;
    let step1 = eigendecompose_matrix(r.matrix(), k)?;
    let rho1 = empirical_leakage(&step1.signal_projector, truth, k)?;
    match config.leakage_gamma {
        LeakageGamma::Fixed(gamma) => {
            let (doa, _) = root_music(r.matrix(), k, &geometry)?;
            let cross = if doa.has_duplicates() {
                None
            } else {
                match cross_term(r.matrix(), &geometry.steering_matrix(doa.thetas())?) {
                    Ok(t) => Some(t),
                    Err(DoaError::IllConditioned { .. }) => None,
                    Err(e) => return Err(e),
                }
            };
            let rho2 = match cross {
                Some(t) => {
                    let r2 = modified_covariance(r.matrix(), &t, gamma)?;
                    let step2 = eigendecompose_matrix(r2.matrix(), k)?;
                    empirical_leakage(&step2.signal_projector, truth, k)?
                }
                None => rho1,
            };
            Ok((rho1, rho2, gamma))
        }
        LeakageGamma::Sml => {
            let estimator = TwoStepEstimator {
                base: RootMusicEstimator::conventional(),
                config: config.params.two_step.clone(),
            };
            let ctx = EstimationContext {
                sample_covariance: r.matrix(),
                snapshots: &x,
                num_sources: k,
                geometry,
                seed,
            };
            let est = estimator.estimate(r.matrix(), &ctx)?;
            let rho2 = empirical_leakage(&est.signal_projector, truth, k)?;
            Ok((rho1, rho2, est.gamma.unwrap_or(0.0)))
        }
    }
}

/// Leakage of conventional root-MUSIC and its two-step modification against
/// the closed-form predictions.
pub fn run_leakage(config: &ExperimentConfig, execution: Execution) -> Result<Vec<LeakageRow>> {
    config.validate()?;
    let points = snr_points(config)?;
    let cells = map_trials(config, execution, |i, t| {
        leakage_trial(config, &points[i], config.trial_seed(i, t)).ok()
    });
    let k = config.scenario.num_sources();
    let n = config.scenario.num_snapshots;
    points
        .iter()
        .zip(&cells)
        .map(|(point, trials)| {
            let ok: Vec<(f64, f64, f64)> = trials.iter().flatten().copied().collect();
            let gamma = match config.leakage_gamma {
                LeakageGamma::Fixed(g) => g,
                LeakageGamma::Sml => mean(ok.iter().map(|v| v.2)),
            };
            let theory_step2 = if gamma.is_finite() {
                expected_leakage_step2(&point.model, n, k, gamma)?
            } else {
                f64::NAN
            };
            Ok(LeakageRow {
                snr_db: point.snr_db,
                gamma,
                empirical_step1: mean(ok.iter().map(|v| v.0)),
                theory_step1: expected_leakage_step1(&point.model, n, k)?,
                empirical_step2: mean(ok.iter().map(|v| v.1)),
                theory_step2,
                trials_used: ok.len(),
            })
        })
        .collect()
}

/// Normal-approximation root-swap probability against simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RootSwapRow {
    pub snr_db: f64,
    pub approx_probability: f64,
    /// Root-swap frequency of conventional root-MUSIC.
    pub empirical_rootswap: f64,
    /// Frequency with which the SML-selected combination includes a noise
    /// root.
    pub empirical_mlfail: f64,
    /// Set when `M - K < 4`, where the approximation is coarse.
    pub low_quality: bool,
    pub trials_used: usize,
}

pub fn run_rootswap_probability(config: &ExperimentConfig, execution: Execution) -> Result<Vec<RootSwapRow>> {
    config.validate()?;
    let points = snr_points(config)?;
    let k = config.scenario.num_sources();
    let plan = CombinationPlan::new(config.scenario.num_sensors, k, config.params.swap_p, config.params.swap_q)?;
    let cells = map_trials(config, execution, |i, t| {
        let point = &points[i];
        let geometry = point.scenario.geometry;
        let outcome = generate_snapshots(&point.scenario, config.trial_seed(i, t)).and_then(|x| {
            let r = sample_covariance(&x)?;
            let (_, roots) = root_music(r.matrix(), k, &geometry)?;
            let (selected, _) = select_combination(r.matrix(), &roots, k, &geometry, &plan)?;
            Ok(root_events(&roots, &selected, &point.model.omegas))
        });
        outcome.ok()
    });
    points
        .iter()
        .zip(&cells)
        .map(|(point, trials)| {
            let report = root_swap_probability(&point.model, &point.scenario)?;
            let ok: Vec<_> = trials.iter().flatten().collect();
            let rate = |hit: fn(&&crate::root_swap::RootEvents) -> bool| {
                mean(ok.iter().map(|e| if hit(e) { 1.0 } else { 0.0 }))
            };
            Ok(RootSwapRow {
                snr_db: point.snr_db,
                approx_probability: report.approx_probability,
                empirical_rootswap: rate(|e| e.root_swap),
                empirical_mlfail: rate(|e| e.ml_failure),
                low_quality: report.low_quality,
                trials_used: ok.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in ["rm", "urm", "rsrm", "rsurm", "urm+2step", "rsurm+pnr", "rm+2step+pnr", "rsurm+2step+pnr"] {
            assert_eq!(name.parse::<MethodSpec>().unwrap().to_string(), name);
        }
        assert_eq!("urm+pnr+2step".parse::<MethodSpec>().unwrap().to_string(), "urm+2step+pnr");
        for bad in ["", "music", "rsrs", "urm+2step+2step", "rm+fb", "RM"] {
            assert!(bad.parse::<MethodSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn leakage_gamma_parsing() {
        assert_eq!("sml".parse::<LeakageGamma>().unwrap(), LeakageGamma::Sml);
        assert_eq!("fixed:0.5".parse::<LeakageGamma>().unwrap(), LeakageGamma::Fixed(0.5));
        assert!("fixed:1.5".parse::<LeakageGamma>().is_err());
        assert!("0.5".parse::<LeakageGamma>().is_err());
    }

    #[test]
    fn resolution_boundaries() {
        let truth = [35f64.to_radians(), 37f64.to_radians()];
        assert!(resolution_event(&truth, &truth));
        assert!(!resolution_event(&[truth[0] + 2f64.to_radians(), truth[1]], &truth));
        let near = 0.99f64.to_radians();
        assert!(resolution_event(&[truth[1] + near, truth[0] - near], &truth));
        assert!(!resolution_event(&[truth[0] + RESOLUTION_THRESHOLD, truth[1]], &truth));
    }

    fn record(sq_error: f64, resolved: bool) -> TrialRecord {
        TrialRecord {
            sq_error,
            resolved,
            root_swap: !resolved,
            ml_failure: false,
            leakage_step1: sq_error / 10.0,
            leakage_step2: None,
        }
    }

    #[test]
    fn metrics_by_hand() {
        let records = vec![
            Some(record(1.0, true)),
            Some(record(4.0, false)),
            None,
            Some(record(2.0, true)),
            Some(record(9.0, false)),
            Some(record(0.5, true)),
        ];
        let row = compute_metrics("rm", 3.0, &records, 0.25);
        assert_eq!(row.trials_used, 5);
        assert!((row.mse - 16.5 / 5.0).abs() < 1e-15);
        assert!((row.cmse - 3.5 / 3.0).abs() < 1e-15);
        assert!((row.resolution_prob - 0.6).abs() < 1e-15);
        assert!((row.rootswap_prob - 0.4).abs() < 1e-15);
        assert_eq!(row.mlfail_prob, 0.0);
        assert!((row.leakage_step1 - 1.65 / 5.0).abs() < 1e-15);
        assert!(row.leakage_step2.is_nan());

        let all: Vec<_> = (1..4).map(|v| Some(record(v as f64, true))).collect();
        let row = compute_metrics("rm", 0.0, &all, 0.0);
        assert_eq!(row.cmse, row.mse);

        let none: Vec<_> = (1..4).map(|v| Some(record(v as f64, false))).collect();
        let row = compute_metrics("rm", 0.0, &none, 0.0);
        assert!(row.cmse.is_nan());
        assert_eq!(row.resolution_prob, 0.0);
    }

    /// Full Gaussian Fisher information over (angles, real source-covariance
    /// parameters, noise power) with finite-difference angle derivatives;
    /// the angle block of its inverse is the bound.
    fn crb_oracle(s: &SourceScenario) -> RMatrix {
        let k = s.num_sources();
        let m = s.geometry.num_sensors();
        let n = s.num_snapshots() as f64;
        let base = true_covariance(s);
        let r_inv = base.clone().try_inverse().unwrap();
        let mut derivatives: Vec<CMatrix> = Vec::new();
        for i in 0..k {
            let h = 1e-6;
            let shifted = |delta: f64| {
                let mut doas = s.doas().to_vec();
                doas[i] += delta;
                let a = s.geometry.steering_matrix(&doas).unwrap();
                &a * s.source_covariance() * a.adjoint()
            };
            derivatives.push((shifted(h) - shifted(-h)) / c64(2.0 * h, 0.0));
        }
        let a = s.steering_matrix();
        for i in 0..k {
            for j in i..k {
                let mut e = CMatrix::zeros(k, k);
                e[(i, j)] = c64(1.0, 0.0);
                e[(j, i)] = c64(1.0, 0.0);
                derivatives.push(&a * &e * a.adjoint());
                if i != j {
                    let mut e = CMatrix::zeros(k, k);
                    e[(i, j)] = c64(0.0, 1.0);
                    e[(j, i)] = c64(0.0, -1.0);
                    derivatives.push(&a * &e * a.adjoint());
                }
            }
        }
        derivatives.push(CMatrix::identity(m, m));
        let count = derivatives.len();
        let fim = RMatrix::from_fn(count, count, |i, j| {
            n * (&r_inv * &derivatives[i] * &r_inv * &derivatives[j]).trace().re
        });
        fim.try_inverse().unwrap().view((0, 0), (k, k)).into_owned()
    }

    #[test]
    fn crb_matches_full_fisher_information() {
        for (snr, r) in [(10.0, 0.0), (0.0, 0.9), (-3.0, 0.5)] {
            let s = ScenarioTemplate::paper(r).scenario(snr).unwrap();
            let crb = stochastic_crb(&s).unwrap();
            let oracle = crb_oracle(&s);
            let scale = oracle.norm();
            assert!((&crb - &oracle).norm() <= 1e-5 * scale, "{crb} vs {oracle}");
            assert!(crb.clone().cholesky().is_some());
        }
    }

    #[test]
    fn crb_scales_as_inverse_snapshots() {
        let s = ScenarioTemplate::paper(0.0).scenario(10.0).unwrap();
        let a = stochastic_crb(&s).unwrap().trace();
        let b = stochastic_crb(&s.with_snapshots(40).unwrap()).unwrap().trace();
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_scenario_has_singular_information() {
        let s = ScenarioTemplate::paper(0.0).noiseless_scenario(10.0).unwrap();
        assert_eq!(stochastic_crb(&s), Err(DoaError::SingularInformation));
    }

    #[test]
    fn near_noiseless_trial_is_exact() {
        let mut config = ExperimentConfig::paper(0.0, vec![60.0], 1);
        config.base_seed = 3;
        let table = run_monte_carlo(&config, Execution::Sequential).unwrap();
        let row = table.row("rm", 60.0).unwrap();
        assert!(row.mse <= 1e-8, "{}", row.mse);
        assert_eq!(row.trials_used, 1);
    }

    #[test]
    fn method_order_does_not_change_results() {
        let mut config = ExperimentConfig::paper(0.0, vec![0.0, 5.0], 20);
        config.params.pnr_iterations = 3;
        config.methods = ["rm", "urm+2step", "rsurm+pnr"].iter().map(|m| m.parse().unwrap()).collect();
        let a = run_monte_carlo(&config, Execution::Sequential).unwrap();
        config.methods.reverse();
        let b = run_monte_carlo(&config, Execution::Parallel).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a.rows[0].method, "rm");
        for row in &a.rows {
            for p in [row.resolution_prob, row.rootswap_prob, row.mlfail_prob] {
                assert!((0.0..=1.0).contains(&p));
            }
            assert!(row.mse >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let good = ExperimentConfig::paper(0.0, vec![0.0], 10);
        assert!(good.validate().is_ok());
        let mut c = good.clone();
        c.trials = 0;
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.snr_grid_db.clear();
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.methods = vec![MethodSpec::plain(BaseMethod::Rm); 2];
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.methods = vec!["rsrm".parse().unwrap()];
        c.params.swap_p = 3;
        assert!(c.validate().is_err());
        let mut c = good;
        c.scenario.doas_deg = vec![35.0, 35.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn noiseless_root_events_are_clean() {
        let s = ScenarioTemplate::paper(0.0).noiseless_scenario(10.0).unwrap();
        let model = true_subspace_model(&s).unwrap();
        let x = generate_snapshots(&s, 9).unwrap();
        let r = sample_covariance(&x).unwrap();
        let (_, roots) = root_music(r.matrix(), 2, &s.geometry).unwrap();
        let plan = CombinationPlan::new(10, 2, 1, 0).unwrap();
        let (selected, _) = select_combination(r.matrix(), &roots, 2, &s.geometry, &plan).unwrap();
        let events = root_events(&roots, &selected, &model.omegas);
        assert!(!events.root_swap && !events.ml_failure);
    }

    #[test]
    fn leakage_sweep_rows_are_consistent() {
        let mut config = ExperimentConfig::paper(0.0, vec![5.0, 10.0], 30);
        let rows = run_leakage(&config, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.gamma, 0.5);
            assert_eq!(row.trials_used, 30);
            assert!(row.empirical_step2 < row.empirical_step1);
        }
        config.leakage_gamma = LeakageGamma::Fixed(0.0);
        for row in run_leakage(&config, Execution::Parallel).unwrap() {
            assert_eq!(row.empirical_step1, row.empirical_step2);
            assert!((row.theory_step1 - row.theory_step2).abs() <= 1e-15 * row.theory_step1);
        }
        config.leakage_gamma = LeakageGamma::Sml;
        for row in run_leakage(&config, Execution::Sequential).unwrap() {
            assert!((0.0..=1.0).contains(&row.gamma));
        }
    }

    #[test]
    fn rootswap_rows_are_probabilities() {
        let config = ExperimentConfig::paper(0.0, vec![-5.0, 10.0], 30);
        let rows = run_rootswap_probability(&config, Execution::Sequential).unwrap();
        for row in &rows {
            for p in [row.approx_probability, row.empirical_rootswap, row.empirical_mlfail] {
                assert!((0.0..=1.0).contains(&p));
            }
            assert!(!row.low_quality);
        }
        assert!(rows[0].approx_probability >= rows[1].approx_probability);
    }
}
