//! Monte-Carlo harness for the crossover GEE estimator.
//!
//! Generates balanced crossover data whose subject-level correlation is a
//! Kronecker product Ψ ⊗ R₁(α₁) and runs three studies: QIC selection-rate
//! curves across candidate working correlations, empirical coverage of
//! robust Wald intervals, and the Frobenius consistency of Ψ̂ ⊗ R̂₁.
//! Everything is a pure function of (scenario, master seed): replicate RNG
//! streams are split by a counter hash, so reruns are bit-identical
//! regardless of worker count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::correlation::{kronecker, CorrMatrix, WithinSpec};
use crate::design::{Dataset, ModelFormula, Obs};
use crate::engine::{fit, FitOptions, Structure};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::selection::compare_structures;

/// Rejection budget for the Ψ sampler.
const PSI_ATTEMPT_BUDGET: usize = 10_000;
/// Wald half-width multiplier for 95% intervals.
const Z95: f64 = 1.96;

/// The four candidate structures fitted in the study.
pub const STUDY_STRUCTURES: [Structure; 4] = [
    Structure::Independence,
    Structure::WithinAr1,
    Structure::WithinExchangeable,
    Structure::KroneckerAr1,
];

/// Scenario configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimScenario {
    /// Periods per subject.
    pub periods: usize,
    /// Occasions per period.
    pub occasions: usize,
    /// Number of sequences.
    pub sequences: usize,
    /// Replicates-per-sequence grid (each entry yields `sequences * n`
    /// subjects).
    pub n_grid: Vec<usize>,
    /// Monte-Carlo runs per grid point.
    pub reps: usize,
    /// Response variance σ².
    pub sigma2: f64,
    /// Grand intercept α of the mean model.
    pub intercept: f64,
    /// Master seed.
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            periods: 3,
            occasions: 5,
            sequences: 2,
            n_grid: vec![2, 5, 10, 25, 50, 100],
            reps: 100,
            sigma2: 1.0,
            intercept: 0.0,
            seed: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.periods == 0 || self.occasions == 0 || self.sequences == 0 {
            return Err(Error::Config(
                "periods, occasions, and sequences must all be positive".into(),
            ));
        }
        if self.n_grid.is_empty() {
            return Err(Error::Config("n_grid must not be empty".into()));
        }
        if self.n_grid.contains(&0) {
            return Err(Error::Config("n_grid entries must be positive".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be strictly ascending".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(Error::Config(format!(
                "sigma2 must be finite and nonnegative, got {}",
                self.sigma2
            )));
        }
        if !self.intercept.is_finite() {
            return Err(Error::Config("intercept must be finite".into()));
        }
        Ok(())
    }

    /// The mean model used throughout the study.
    pub fn formula(&self) -> ModelFormula {
        let mut terms = vec!["intercept".to_string()];
        if self.periods > 1 {
            terms.push("period".into());
        }
        if self.occasions > 1 {
            terms.push("occasion".into());
        }
        if self.sequences > 1 {
            terms.push("sequence".into());
            if self.periods > 1 {
                terms.push("sequence:period".into());
            }
        }
        ModelFormula::parse(&terms).expect("study formula is well formed")
    }
}

/// One replicate's drawn truth.
#[derive(Debug, Clone)]
pub struct ScenarioParams {
    /// Grand intercept α.
    pub intercept: f64,
    /// Period effects, one per period.
    pub period_effects: DVector<f64>,
    /// Occasion effects, one per occasion.
    pub occasion_effects: DVector<f64>,
    /// Sequence-by-period effects, sequences × periods.
    pub seq_period_effects: DMatrix<f64>,
    /// Within-period AR(1) parameter.
    pub alpha1: f64,
    /// Between-period correlation.
    pub psi: CorrMatrix,
    /// Rejection attempts the Ψ sampler used (for acceptance-rate
    /// accounting).
    pub psi_attempts: usize,
}

/// RNG stream for one (n, replicate) cell, split from the master seed by a
/// SplitMix-style counter hash so streams never depend on scheduling.
pub fn replicate_rng(master: u64, n: usize, rep: usize) -> ChaCha12Rng {
    fn splitmix(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut state = master
        ^ (n as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (rep as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Draw one replicate's parameters: effects are standard normal, Ψ is
/// rejection-sampled from uniform off-diagonals until positive
/// semidefinite, and α₁ is uniform on (−1, 1).
pub fn draw_scenario_parameters(
    scenario: &SimScenario,
    rng: &mut impl Rng,
) -> Result<ScenarioParams> {
    scenario.validate()?;
    let p = scenario.periods;
    let period_effects =
        DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let occasion_effects = DVector::from_iterator(
        scenario.occasions,
        (0..scenario.occasions).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let seq_period_effects = DMatrix::from_fn(scenario.sequences, p, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });

    let (psi, psi_attempts) = draw_psi(p, rng)?;

    let mut alpha1: f64 = rng.random_range(-1.0..1.0);
    // the AR(1) block is positive definite for |α₁| < 1; nudge draws off
    // the open-interval boundary
    while alpha1.abs() >= 1.0 - 1e-9 {
        alpha1 = rng.random_range(-1.0..1.0);
    }

    Ok(ScenarioParams {
        intercept: scenario.intercept,
        period_effects,
        occasion_effects,
        seq_period_effects,
        alpha1,
        psi,
        psi_attempts,
    })
}

/// Rejection-sample a P×P correlation matrix with U(−1, 1) off-diagonals,
/// keeping the first positive-semidefinite draw.
fn draw_psi(p: usize, rng: &mut impl Rng) -> Result<(CorrMatrix, usize)> {
    for attempt in 1..=PSI_ATTEMPT_BUDGET {
        let mut m = DMatrix::identity(p, p);
        for a in 0..p {
            for b in (a + 1)..p {
                let v = rng.random_range(-1.0..1.0);
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        let min_eig = nalgebra::SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig >= 0.0 {
            return Ok((CorrMatrix::from_matrix(m)?, attempt));
        }
    }
    Err(Error::Rejection {
        attempts: PSI_ATTEMPT_BUDGET,
    })
}

/// Symmetric PSD square root via eigendecomposition, clamping eigenvalue
/// noise at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Sequence label for arm `l` (0-based): treatments A/B cycled with offset
/// `l`, e.g. `s01_ABA`, `s02_BAB` for three periods.
fn sequence_label(l: usize, periods: usize) -> String {
    let pattern: String = (0..periods)
        .map(|j| if (l + j).is_multiple_of(2) { 'A' } else { 'B' })
        .collect();
    format!("s{:02}_{pattern}", l + 1)
}

fn treatment_of(l: usize, j: usize) -> &'static str {
    if (l + j).is_multiple_of(2) {
        "A"
    } else {
        "B"
    }
}

/// Generate one balanced dataset with `n` subjects per sequence: responses
/// are Gaussian with mean α + γ_j + τ_k + S_(l,j) and covariance
/// σ²·(Ψ ⊗ R₁), drawn through a symmetric square root so σ² = 0 reproduces
/// the means exactly.
pub fn generate_dataset(
    scenario: &SimScenario,
    params: &ScenarioParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    scenario.validate()?;
    if n == 0 {
        return Err(Error::Config(
            "need at least one subject per sequence".into(),
        ));
    }
    let p = scenario.periods;
    let l_occ = scenario.occasions;
    if params.period_effects.len() != p
        || params.occasion_effects.len() != l_occ
        || params.seq_period_effects.shape() != (scenario.sequences, p)
        || params.psi.dim() != p
    {
        return Err(Error::Param(
            "scenario parameters do not match the scenario dimensions".into(),
        ));
    }
    let r1 = WithinSpec::ar1(params.alpha1).build(l_occ)?;
    let corr = kronecker(&params.psi, &r1);
    if corr.min_eigenvalue() < -1e-8 {
        return Err(Error::Psd {
            module: "simulation",
            min_eig: corr.min_eigenvalue(),
        });
    }
    let cov = scenario.sigma2 * corr.as_matrix();
    let root = sqrt_psd(&cov);
    let dim = p * l_occ;

    let mut obs = Vec::with_capacity(scenario.sequences * n * dim);
    for l in 0..scenario.sequences {
        let seq = sequence_label(l, p);
        for s in 0..n {
            let subject = format!("{seq}_r{:04}", s + 1);
            let z =
                DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let noise = &root * z;
            for j in 0..p {
                for k in 0..l_occ {
                    let mean = params.intercept
                        + params.period_effects[j]
                        + params.occasion_effects[k]
                        + params.seq_period_effects[(l, j)];
                    obs.push(Obs {
                        subject: subject.clone(),
                        period: j as i64 + 1,
                        occasion: k as i64 + 1,
                        treatment: treatment_of(l, j).into(),
                        sequence: seq.clone(),
                        response: mean + noise[j * l_occ + k],
                        time: None,
                        baseline: None,
                    });
                }
            }
        }
    }
    Dataset::new(obs)
}

/// True coefficient values of the study formula under the drawn
/// parameters, keyed by design-matrix label. Reference levels are the
/// first period, first occasion, and first sequence.
pub fn true_coefficients(scenario: &SimScenario, params: &ScenarioParams) -> Vec<(String, f64)> {
    let g = &params.period_effects;
    let t = &params.occasion_effects;
    let s = &params.seq_period_effects;
    let mut out = vec![(
        "intercept".to_string(),
        params.intercept + g[0] + t[0] + s[(0, 0)],
    )];
    for j in 1..scenario.periods {
        out.push((
            format!("period_{}", j + 1),
            (g[j] - g[0]) + (s[(0, j)] - s[(0, 0)]),
        ));
    }
    for k in 1..scenario.occasions {
        out.push((format!("occ_{}", k + 1), t[k] - t[0]));
    }
    for l in 1..scenario.sequences {
        let label = sequence_label(l, scenario.periods);
        out.push((format!("seq_{label}"), s[(l, 0)] - s[(0, 0)]));
    }
    for l in 1..scenario.sequences {
        let label = sequence_label(l, scenario.periods);
        for j in 1..scenario.periods {
            out.push((
                format!("seq_{label}:period_{}", j + 1),
                s[(l, j)] - s[(l, 0)] - s[(0, j)] + s[(0, 0)],
            ));
        }
    }
    out
}

/// One long-format result row.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimRow {
    pub n: usize,
    pub structure: String,
    pub metric: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Study output: long-format rows suitable for CSV export and plotting.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
}

impl SimResult {
    /// Look up one (n, structure, metric) cell.
    pub fn value(&self, n: usize, structure: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.structure == structure && r.metric == metric)
            .map(|r| r.value)
    }

    /// All rows of one metric.
    pub fn metric_rows(&self, metric: &str) -> Vec<&SimRow> {
        self.rows.iter().filter(|r| r.metric == metric).collect()
    }

    /// Check the range invariants: proportions and coverages in [0, 1],
    /// and selection rates summing to one at each n (when any rep
    /// succeeded).
    pub fn validate(&self) -> Result<()> {
        let mut sums: std::collections::BTreeMap<usize, f64> = Default::default();
        for row in &self.rows {
            let ranged = row.metric == "selection_rate"
                || row.metric.starts_with("coverage:")
                || row.metric.starts_with("naive_coverage:");
            if ranged {
                if !(0.0..=1.0).contains(&row.value) {
                    return Err(Error::Param(format!(
                        "{} for {} at n={} is {}, outside [0, 1]",
                        row.metric, row.structure, row.n, row.value
                    )));
                }
                if row.metric == "selection_rate" {
                    *sums.entry(row.n).or_insert(0.0) += row.value;
                }
            }
        }
        for (n, sum) in sums {
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Param(format!(
                    "selection rates at n={n} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Normal-approximation 95% binomial interval, clipped to [0, 1].
fn binomial_ci(successes: usize, trials: usize) -> (f64, f64, f64) {
    if trials == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let p = successes as f64 / trials as f64;
    let half = Z95 * (p * (1.0 - p) / trials as f64).sqrt();
    (p, (p - half).max(0.0), (p + half).min(1.0))
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Nearest-rank empirical quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// QIC selection-rate study over the default four candidate structures.
pub fn run_selection_study(scenario: &SimScenario) -> Result<SimResult> {
    run_selection_study_with(scenario, &STUDY_STRUCTURES)
}

/// QIC selection-rate study over a chosen candidate set: for every grid
/// point and replicate, draw parameters, generate data, fit all candidates,
/// and record the QIC winner. Failed replicates are counted, never fatal.
pub fn run_selection_study_with(
    scenario: &SimScenario,
    structures: &[Structure],
) -> Result<SimResult> {
    scenario.validate()?;
    if structures.is_empty() {
        return Err(Error::Config("no candidate structures given".into()));
    }
    let formula = scenario.formula();
    let options = FitOptions::default();
    let mut rows = Vec::new();
    for &n in &scenario.n_grid {
        let winners: Vec<Option<Structure>> = (0..scenario.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = replicate_rng(scenario.seed, n, rep);
                let params = draw_scenario_parameters(scenario, &mut rng).ok()?;
                let ds = generate_dataset(scenario, &params, n, &mut rng).ok()?;
                compare_structures(&ds, &formula, Family::Gaussian, structures, &options)
                    .ok()
                    .map(|report| report.winner)
            })
            .collect();
        let successes = winners.iter().flatten().count();
        let failures = scenario.reps - successes;
        for &s in structures {
            let wins = winners.iter().flatten().filter(|&&w| w == s).count();
            let (p, lo, hi) = binomial_ci(wins, successes);
            rows.push(SimRow {
                n,
                structure: s.name().into(),
                metric: "selection_rate".into(),
                value: p,
                lo,
                hi,
            });
        }
        rows.push(SimRow {
            n,
            structure: "all".into(),
            metric: "failed_reps".into(),
            value: failures as f64,
            lo: failures as f64,
            hi: failures as f64,
        });
    }
    Ok(SimResult { rows })
}

/// Per-replicate coverage bookkeeping for one structure.
#[derive(Clone, Default)]
struct CoverageCell {
    robust_covered: Vec<usize>,
    naive_covered: Vec<usize>,
    trials: usize,
    degenerate: usize,
    failures: usize,
}

/// Containment flags of one fit under one standard-error flavor.
fn interval_flags(
    beta: &DVector<f64>,
    se: &[f64],
    truth: &[(String, f64)],
    any_degenerate: &mut bool,
) -> Vec<bool> {
    truth
        .iter()
        .enumerate()
        .map(|(i, (_, true_value))| {
            if !se[i].is_finite() || se[i] <= 0.0 {
                // infinite-width interval: covered by fiat
                *any_degenerate = true;
                true
            } else {
                (beta[i] - true_value).abs() <= Z95 * se[i]
            }
        })
        .collect()
}

/// Empirical coverage of 95% Wald intervals at one grid point: per
/// structure and coefficient, the share of replicates whose interval
/// β̂ ± 1.96·SE contains the true value. The headline `coverage:` metric
/// uses robust sandwich standard errors; a companion `naive_coverage:`
/// metric uses model-based standard errors, which — unlike the
/// asymptotically structure-agnostic robust intervals — expose the cost of
/// a misspecified working correlation. Degenerate intervals (non-finite or
/// non-positive SE) count as covered and are flagged separately.
pub fn run_coverage_study(scenario: &SimScenario, n: usize, reps: usize) -> Result<SimResult> {
    scenario.validate()?;
    if n == 0 || reps == 0 {
        return Err(Error::Config(
            "coverage study needs n ≥ 1 and reps ≥ 1".into(),
        ));
    }
    let formula = scenario.formula();
    let options = FitOptions::default();
    let n_coef = true_coefficients(scenario, &draw_template(scenario)).len();

    type RepOutcome = Vec<Option<(Vec<bool>, Vec<bool>, bool)>>;
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(scenario.seed, n, rep);
            let Ok(params) = draw_scenario_parameters(scenario, &mut rng) else {
                return vec![None; STUDY_STRUCTURES.len()];
            };
            let Ok(ds) = generate_dataset(scenario, &params, n, &mut rng) else {
                return vec![None; STUDY_STRUCTURES.len()];
            };
            let truth = true_coefficients(scenario, &params);
            STUDY_STRUCTURES
                .iter()
                .map(|&s| {
                    let f = fit(&ds, &formula, Family::Gaussian, s, &options).ok()?;
                    debug_assert_eq!(
                        f.labels,
                        truth.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>()
                    );
                    let naive_se: Vec<f64> = (0..f.beta.len())
                        .map(|i| {
                            let v = f.model_cov[(i, i)];
                            if v > 0.0 {
                                v.sqrt()
                            } else {
                                f64::NAN
                            }
                        })
                        .collect();
                    let mut any_degenerate = false;
                    let robust =
                        interval_flags(&f.beta, &f.robust_se(), &truth, &mut any_degenerate);
                    let naive = interval_flags(&f.beta, &naive_se, &truth, &mut any_degenerate);
                    Some((robust, naive, any_degenerate))
                })
                .collect()
        })
        .collect();

    let mut cells: Vec<CoverageCell> = vec![
        CoverageCell {
            robust_covered: vec![0; n_coef],
            naive_covered: vec![0; n_coef],
            ..Default::default()
        };
        STUDY_STRUCTURES.len()
    ];
    for rep_outcome in &outcomes {
        for (si, outcome) in rep_outcome.iter().enumerate() {
            match outcome {
                Some((robust, naive, degenerate)) => {
                    cells[si].trials += 1;
                    if *degenerate {
                        cells[si].degenerate += 1;
                    }
                    for (ci, &hit) in robust.iter().enumerate() {
                        if hit {
                            cells[si].robust_covered[ci] += 1;
                        }
                    }
                    for (ci, &hit) in naive.iter().enumerate() {
                        if hit {
                            cells[si].naive_covered[ci] += 1;
                        }
                    }
                }
                None => cells[si].failures += 1,
            }
        }
    }

    let labels: Vec<String> = true_coefficients(scenario, &draw_template(scenario))
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    let mut rows = Vec::new();
    for (si, s) in STUDY_STRUCTURES.iter().enumerate() {
        let cell = &cells[si];
        for (ci, label) in labels.iter().enumerate() {
            let (p, lo, hi) = binomial_ci(cell.robust_covered[ci], cell.trials);
            rows.push(SimRow {
                n,
                structure: s.name().into(),
                metric: format!("coverage:{label}"),
                value: p,
                lo,
                hi,
            });
        }
        for (ci, label) in labels.iter().enumerate() {
            let (p, lo, hi) = binomial_ci(cell.naive_covered[ci], cell.trials);
            rows.push(SimRow {
                n,
                structure: s.name().into(),
                metric: format!("naive_coverage:{label}"),
                value: p,
                lo,
                hi,
            });
        }
        rows.push(SimRow {
            n,
            structure: s.name().into(),
            metric: "degenerate_intervals".into(),
            value: cell.degenerate as f64,
            lo: cell.degenerate as f64,
            hi: cell.degenerate as f64,
        });
        rows.push(SimRow {
            n,
            structure: s.name().into(),
            metric: "failed_reps".into(),
            value: cell.failures as f64,
            lo: cell.failures as f64,
            hi: cell.failures as f64,
        });
    }
    Ok(SimResult { rows })
}

/// Placeholder parameters used only to enumerate coefficient labels.
fn draw_template(scenario: &SimScenario) -> ScenarioParams {
    ScenarioParams {
        intercept: scenario.intercept,
        period_effects: DVector::zeros(scenario.periods),
        occasion_effects: DVector::zeros(scenario.occasions),
        seq_period_effects: DMatrix::zeros(scenario.sequences, scenario.periods),
        alpha1: 0.0,
        psi: CorrMatrix::identity(scenario.periods),
        psi_attempts: 0,
    }
}

/// Frobenius consistency of the separable correlation estimate: per grid
/// point, the median of ‖Ψ̂ ⊗ R̂₁(α̂₁) − Ψ ⊗ R₁(α₁)‖_F over replicates
/// fitted with the Kronecker AR(1) structure; `lo`/`hi` report the 2.5%
/// and 97.5% empirical quantiles.
pub fn run_consistency_study(
    scenario: &SimScenario,
    n_grid: &[usize],
    reps: usize,
) -> Result<SimResult> {
    scenario.validate()?;
    if n_grid.is_empty() || reps == 0 {
        return Err(Error::Config(
            "consistency study needs a grid and reps ≥ 1".into(),
        ));
    }
    let formula = scenario.formula();
    let options = FitOptions::default();
    let mut rows = Vec::new();
    for &n in n_grid {
        let errors: Vec<Option<f64>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = replicate_rng(scenario.seed, n, rep);
                let params = draw_scenario_parameters(scenario, &mut rng).ok()?;
                let ds = generate_dataset(scenario, &params, n, &mut rng).ok()?;
                let f = fit(
                    &ds,
                    &formula,
                    Family::Gaussian,
                    Structure::KroneckerAr1,
                    &options,
                )
                .ok()?;
                let r1_true = WithinSpec::ar1(params.alpha1)
                    .build(scenario.occasions)
                    .ok()?;
                let r1_hat = WithinSpec::ar1(f.alpha1?).build(scenario.occasions).ok()?;
                let truth = kronecker(&params.psi, &r1_true);
                let estimate = kronecker(f.psi.as_ref()?, &r1_hat);
                Some((estimate.as_matrix() - truth.as_matrix()).norm())
            })
            .collect();
        let mut ok: Vec<f64> = errors.iter().flatten().copied().collect();
        let failures = reps - ok.len();
        ok.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(SimRow {
            n,
            structure: Structure::KroneckerAr1.name().into(),
            metric: "frobenius_median".into(),
            value: median(&ok),
            lo: quantile(&ok, 0.025),
            hi: quantile(&ok, 0.975),
        });
        rows.push(SimRow {
            n,
            structure: "all".into(),
            metric: "failed_reps".into(),
            value: failures as f64,
            lo: failures as f64,
            hi: failures as f64,
        });
    }
    Ok(SimResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_design_matrix;
    use approx::assert_abs_diff_eq;

    fn small_scenario() -> SimScenario {
        SimScenario {
            periods: 2,
            occasions: 3,
            sequences: 2,
            n_grid: vec![5],
            reps: 4,
            sigma2: 1.0,
            intercept: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn defaults_match_the_study_setup() {
        let s = SimScenario::default();
        assert_eq!(s.periods, 3);
        assert_eq!(s.occasions, 5);
        assert_eq!(s.sequences, 2);
        assert_eq!(s.n_grid, vec![2, 5, 10, 25, 50, 100]);
        assert_eq!(s.reps, 100);
        assert_eq!(s.sigma2, 1.0);
        assert_eq!(s.intercept, 0.0);
        s.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        for broken in [
            SimScenario {
                periods: 0,
                ..Default::default()
            },
            SimScenario {
                n_grid: vec![],
                ..Default::default()
            },
            SimScenario {
                n_grid: vec![5, 5],
                ..Default::default()
            },
            SimScenario {
                n_grid: vec![10, 5],
                ..Default::default()
            },
            SimScenario {
                reps: 0,
                ..Default::default()
            },
            SimScenario {
                sigma2: -1.0,
                ..Default::default()
            },
            SimScenario {
                sigma2: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn fixed_seed_reproduces_parameters_and_streams() {
        let scenario = SimScenario::default();
        let mut r1 = replicate_rng(7, 10, 3);
        let mut r2 = replicate_rng(7, 10, 3);
        let p1 = draw_scenario_parameters(&scenario, &mut r1).unwrap();
        let p2 = draw_scenario_parameters(&scenario, &mut r2).unwrap();
        assert_eq!(p1.alpha1, p2.alpha1);
        assert_eq!(p1.period_effects, p2.period_effects);
        assert_eq!(p1.occasion_effects, p2.occasion_effects);
        assert_eq!(p1.seq_period_effects, p2.seq_period_effects);
        assert_eq!(p1.psi.as_matrix(), p2.psi.as_matrix());

        // a different replicate index yields a different stream
        let mut r3 = replicate_rng(7, 10, 4);
        let p3 = draw_scenario_parameters(&scenario, &mut r3).unwrap();
        assert_ne!(p1.alpha1, p3.alpha1);
    }

    #[test]
    fn single_period_psi_is_always_the_identity() {
        let scenario = SimScenario {
            periods: 1,
            ..small_scenario()
        };
        for seed in 0..5 {
            let mut rng = replicate_rng(seed, 1, 0);
            let params = draw_scenario_parameters(&scenario, &mut rng).unwrap();
            assert_eq!(params.psi.dim(), 1);
            assert_eq!(params.psi.as_matrix()[(0, 0)], 1.0);
            assert_eq!(params.psi_attempts, 1);
        }
    }

    /// The acceptance probability of a uniform 3×3 correlation draw is the
    /// elliptope-to-cube volume ratio π²/16 ≈ 0.617; the empirical rate
    /// must sit near it and be stable across seeds.
    #[test]
    fn psi_acceptance_rate_is_stable_across_seeds() {
        let draws = 4000;
        let mut rates = Vec::new();
        for seed in [11u64, 22, 33] {
            let mut rng = replicate_rng(seed, 0, 0);
            let mut attempts = 0usize;
            for _ in 0..draws {
                let (_, a) = draw_psi(3, &mut rng).unwrap();
                attempts += a;
            }
            rates.push(draws as f64 / attempts as f64);
        }
        let expected = std::f64::consts::PI.powi(2) / 16.0;
        for &rate in &rates {
            assert!(
                (rate - expected).abs() < 0.05,
                "rate {rate} vs expected {expected}"
            );
        }
        let spread = rates.iter().cloned().fold(f64::MIN, f64::max)
            - rates.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            spread < 0.05 * expected,
            "acceptance rates {rates:?} vary more than 5%"
        );
    }

    #[test]
    fn zero_variance_reproduces_means_and_the_coefficient_mapping() {
        let scenario = SimScenario {
            sigma2: 0.0,
            ..SimScenario::default()
        };
        let mut rng = replicate_rng(3, 4, 0);
        let params = draw_scenario_parameters(&scenario, &mut rng).unwrap();
        let ds = generate_dataset(&scenario, &params, 3, &mut rng).unwrap();
        assert_eq!(ds.n_subjects(), 6);
        assert!(ds.balanced());

        // responses equal the cell means exactly
        for o in ds.rows() {
            let l = if o.sequence.starts_with("s01") { 0 } else { 1 };
            let j = (o.period - 1) as usize;
            let k = (o.occasion - 1) as usize;
            let mean = params.intercept
                + params.period_effects[j]
                + params.occasion_effects[k]
                + params.seq_period_effects[(l, j)];
            assert_eq!(o.response, mean);
        }

        // the design matrix at the true coefficients reproduces y exactly
        let formula = scenario.formula();
        let dm = build_design_matrix(&ds, &formula).unwrap();
        let truth = true_coefficients(&scenario, &params);
        let truth_labels: Vec<&String> = truth.iter().map(|(l, _)| l).collect();
        assert_eq!(dm.labels.iter().collect::<Vec<_>>(), truth_labels);
        let beta = DVector::from_iterator(truth.len(), truth.iter().map(|(_, v)| *v));
        let fitted = &dm.x * beta;
        let y = ds.responses();
        for i in 0..y.len() {
            assert_abs_diff_eq!(y[i], fitted[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn subjects_draw_independent_noise() {
        let scenario = small_scenario();
        let mut rng = replicate_rng(9, 2, 0);
        let params = draw_scenario_parameters(&scenario, &mut rng).unwrap();
        let ds = generate_dataset(&scenario, &params, 2, &mut rng).unwrap();
        let r0: Vec<f64> = ds.rows()[ds.subject_range(0)]
            .iter()
            .map(|o| o.response)
            .collect();
        let r1: Vec<f64> = ds.rows()[ds.subject_range(1)]
            .iter()
            .map(|o| o.response)
            .collect();
        assert_ne!(r0, r1);
    }

    /// Sample moments of generated data converge to the target mean and
    /// Kronecker correlation.
    #[test]
    fn sample_moments_converge() {
        let scenario = SimScenario {
            periods: 2,
            occasions: 2,
            sequences: 2,
            n_grid: vec![1000],
            reps: 1,
            sigma2: 1.0,
            intercept: 0.0,
            seed: 0,
        };
        let psi =
            CorrMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0])).unwrap();
        let params = ScenarioParams {
            intercept: 0.0,
            period_effects: DVector::from_row_slice(&[0.3, -0.2]),
            occasion_effects: DVector::from_row_slice(&[0.1, 0.5]),
            seq_period_effects: DMatrix::from_row_slice(2, 2, &[0.0, 0.6, -0.4, 0.2]),
            alpha1: 0.5,
            psi,
            psi_attempts: 1,
        };
        let n = 1000;
        let mut rng = replicate_rng(1, n, 0);
        let ds = generate_dataset(&scenario, &params, n, &mut rng).unwrap();
        let dim = 4;
        let subjects = ds.n_subjects();
        assert_eq!(subjects, 2 * n);

        // per-cell means within 3σ/√n of the target
        let y = ds.responses();
        for l in 0..2 {
            for cell in 0..dim {
                let mut sum = 0.0;
                for s in 0..n {
                    let idx = ds.subject_range(l * n + s).start + cell;
                    sum += y[idx];
                }
                let j = cell / 2;
                let k = cell % 2;
                let target = params.period_effects[j]
                    + params.occasion_effects[k]
                    + params.seq_period_effects[(l, j)];
                assert!(
                    (sum / n as f64 - target).abs() < 3.0 / (n as f64).sqrt(),
                    "cell mean off at l={l}, cell={cell}"
                );
            }
        }

        // sample correlation close to Ψ ⊗ R₁ in max-abs norm
        let mut data = DMatrix::zeros(subjects, dim);
        for s in 0..subjects {
            let range = ds.subject_range(s);
            for (c, idx) in range.enumerate() {
                data[(s, c)] = y[idx];
            }
        }
        let means: Vec<f64> = (0..dim).map(|c| data.column(c).mean()).collect();
        let mut cov = DMatrix::zeros(dim, dim);
        for s in 0..subjects {
            for a in 0..dim {
                for b in 0..dim {
                    cov[(a, b)] += (data[(s, a)] - means[a]) * (data[(s, b)] - means[b]);
                }
            }
        }
        cov /= (subjects - 1) as f64;
        let r1 = WithinSpec::ar1(params.alpha1).build(2).unwrap();
        let truth = kronecker(&params.psi, &r1);
        for a in 0..dim {
            for b in 0..dim {
                let r = cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
                assert!(
                    (r - truth.as_matrix()[(a, b)]).abs() < 0.1,
                    "sample correlation off at ({a}, {b}): {r}"
                );
            }
        }
    }

    /// Uncorrelated generation: off-diagonal sample correlations stay small.
    #[test]
    fn independent_generation_has_small_sample_correlation() {
        let scenario = SimScenario {
            n_grid: vec![1000],
            reps: 1,
            seed: 5,
            ..SimScenario::default()
        };
        let params = ScenarioParams {
            alpha1: 0.0,
            psi: CorrMatrix::identity(3),
            ..draw_template(&scenario)
        };
        let n = 1000;
        let mut rng = replicate_rng(5, n, 0);
        let ds = generate_dataset(&scenario, &params, n, &mut rng).unwrap();
        let y = ds.responses();
        let dim = 15;
        let subjects = ds.n_subjects();
        let mut data = DMatrix::zeros(subjects, dim);
        for s in 0..subjects {
            for (c, idx) in ds.subject_range(s).enumerate() {
                data[(s, c)] = y[idx];
            }
        }
        let means: Vec<f64> = (0..dim).map(|c| data.column(c).mean()).collect();
        for a in 0..dim {
            for b in (a + 1)..dim {
                let mut num = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for s in 0..subjects {
                    let da = data[(s, a)] - means[a];
                    let db = data[(s, b)] - means[b];
                    num += da * db;
                    va += da * da;
                    vb += db * db;
                }
                let r = num / (va * vb).sqrt();
                assert!(r.abs() < 0.1, "off-diagonal correlation {r} at ({a}, {b})");
            }
        }
    }

    /// Residuals manufactured from the true square root recover the
    /// separable correlation at machine precision.
    #[test]
    fn constructed_residual_oracle() {
        let p = 3;
        let l = 5;
        let mut rng = replicate_rng(77, 0, 0);
        let (psi, _) = draw_psi(p, &mut rng).unwrap();
        let alpha1 = 0.55;
        let r1 = WithinSpec::ar1(alpha1).build(l).unwrap();
        let truth = kronecker(&psi, &r1);
        let root = sqrt_psd(truth.as_matrix());
        let dim = p * l;

        // ± scaled columns of the square root: the empirical second-moment
        // matrix is exactly Ψ ⊗ R₁ and the mean is exactly zero
        let mut residuals = Vec::new();
        let scale = (dim as f64).sqrt();
        for c in 0..dim {
            for sign in [1.0, -1.0] {
                let col = root.column(c) * (sign * scale);
                let values = DMatrix::from_fn(p, l, |j, k| col[j * l + k]);
                residuals.push(crate::engine::ResidualMatrix {
                    subject: format!("v{c}_{}", if sign > 0.0 { "p" } else { "m" }),
                    values,
                });
            }
        }

        let alpha_hat =
            crate::engine::estimate_alpha1(&residuals, crate::correlation::WithinKind::Ar1)
                .unwrap();
        assert_abs_diff_eq!(alpha_hat, alpha1, epsilon = 1e-10);
        let r1_hat = WithinSpec::ar1(alpha_hat).build(l).unwrap();
        let psi_hat = crate::engine::estimate_psi(&residuals, &r1_hat).unwrap();
        let estimate = kronecker(&psi_hat, &r1_hat);
        let err = (estimate.as_matrix() - truth.as_matrix()).norm();
        assert!(err < 0.05, "constructed-residual error {err}");
        assert!(err < 1e-8, "expected machine-precision recovery, got {err}");
    }

    #[test]
    fn single_candidate_selection_is_certain() {
        let scenario = SimScenario {
            reps: 2,
            ..small_scenario()
        };
        let result = run_selection_study_with(&scenario, &[Structure::Independence]).unwrap();
        result.validate().unwrap();
        assert_eq!(result.value(5, "independence", "selection_rate"), Some(1.0));
        assert_eq!(result.value(5, "all", "failed_reps"), Some(0.0));
    }

    #[test]
    fn selection_rates_partition_unity() {
        let scenario = small_scenario();
        let result = run_selection_study(&scenario).unwrap();
        result.validate().unwrap();
        let sum: f64 = result
            .metric_rows("selection_rate")
            .iter()
            .map(|r| r.value)
            .sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        for row in result.metric_rows("selection_rate") {
            assert!((0.0..=1.0).contains(&row.value));
            assert!(row.lo <= row.value && row.value <= row.hi);
        }
    }

    #[test]
    fn coverage_rows_have_full_shape() {
        let scenario = small_scenario();
        let result = run_coverage_study(&scenario, 6, 4).unwrap();
        result.validate().unwrap();
        // labels: intercept, period_2, occ_2, occ_3, seq, seq:period → 6
        let labels = 6;
        for s in STUDY_STRUCTURES {
            for prefix in ["coverage:", "naive_coverage:"] {
                let rows: Vec<_> = result
                    .rows
                    .iter()
                    .filter(|r| r.structure == s.name() && r.metric.starts_with(prefix))
                    .collect();
                assert_eq!(rows.len(), labels, "structure {s}, metric {prefix}");
                for row in rows {
                    assert!((0.0..=1.0).contains(&row.value));
                }
            }
            assert!(result.value(6, s.name(), "degenerate_intervals").is_some());
            assert!(result.value(6, s.name(), "failed_reps").is_some());
        }
    }

    #[test]
    fn consistency_errors_shrink_with_n() {
        let scenario = SimScenario {
            periods: 2,
            occasions: 3,
            sequences: 2,
            n_grid: vec![4, 32],
            reps: 6,
            sigma2: 1.0,
            intercept: 0.0,
            seed: 2024,
        };
        let result = run_consistency_study(&scenario, &[4, 32], 6).unwrap();
        let small = result.value(4, "kron_ar1", "frobenius_median").unwrap();
        let large = result.value(32, "kron_ar1", "frobenius_median").unwrap();
        assert!(small > 0.0);
        assert!(
            large < small,
            "median error did not shrink: {small} → {large}"
        );
    }

    #[test]
    fn studies_are_reproducible() {
        let scenario = small_scenario();
        let a = run_selection_study(&scenario).unwrap();
        let b = run_selection_study(&scenario).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.n, rb.n);
            assert_eq!(ra.structure, rb.structure);
            assert_eq!(ra.metric, rb.metric);
            assert!(ra.value == rb.value || (ra.value.is_nan() && rb.value.is_nan()));
        }
    }
}
