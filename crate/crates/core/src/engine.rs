//! The GEE fitting loop.
//!
//! One outer iteration updates β by Fisher scoring given the current working
//! correlation, then refreshes the dispersion, the within-period parameter
//! α₁, and (for separable structures) the between-period matrix Ψ̂ from the
//! newest Pearson residuals. Convergence is declared on the relative
//! max-norm change of β once every parameter has been refreshed at least
//! once. Coefficient covariance comes in two flavors: the model-based
//! φ̂·B⁻¹ and the robust sandwich B⁻¹MB⁻¹.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::{
    factored_inverse, kronecker, CorrMatrix, WithinKind, WithinSpec, WorkingCorrelation,
};
use crate::design::{build_design_matrix, Dataset, ModelFormula};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::selection;

/// The correlation structures the engine can estimate, under the vocabulary
/// used by the CLI: plain names are within-period blocks (independent
/// between periods), `_full` variants span the whole PL vector, and `kron_`
/// variants estimate a between-period matrix Ψ̂ on top of the within block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Structure {
    #[serde(rename = "independence")]
    Independence,
    #[serde(rename = "ar1")]
    WithinAr1,
    #[serde(rename = "exchangeable")]
    WithinExchangeable,
    #[serde(rename = "ar1_full")]
    FullAr1,
    #[serde(rename = "exch_full")]
    FullExchangeable,
    #[serde(rename = "kron_ar1")]
    KroneckerAr1,
    #[serde(rename = "kron_exch")]
    KroneckerExchangeable,
}

impl Structure {
    pub const ALL: [Structure; 7] = [
        Structure::Independence,
        Structure::WithinAr1,
        Structure::WithinExchangeable,
        Structure::FullAr1,
        Structure::FullExchangeable,
        Structure::KroneckerAr1,
        Structure::KroneckerExchangeable,
    ];

    pub fn parse(name: &str) -> Result<Structure> {
        match name.trim().to_ascii_lowercase().as_str() {
            "independence" => Ok(Structure::Independence),
            "ar1" => Ok(Structure::WithinAr1),
            "exchangeable" => Ok(Structure::WithinExchangeable),
            "ar1_full" => Ok(Structure::FullAr1),
            "exch_full" => Ok(Structure::FullExchangeable),
            "kron_ar1" => Ok(Structure::KroneckerAr1),
            "kron_exch" => Ok(Structure::KroneckerExchangeable),
            other => Err(Error::Config(format!(
                "unknown correlation structure {other:?}; expected one of independence, ar1, \
                 exchangeable, ar1_full, exch_full, kron_ar1, kron_exch"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Structure::Independence => "independence",
            Structure::WithinAr1 => "ar1",
            Structure::WithinExchangeable => "exchangeable",
            Structure::FullAr1 => "ar1_full",
            Structure::FullExchangeable => "exch_full",
            Structure::KroneckerAr1 => "kron_ar1",
            Structure::KroneckerExchangeable => "kron_exch",
        }
    }

    /// Number of estimated correlation parameters for a design with
    /// `periods` periods.
    pub fn n_corr_params(&self, periods: usize) -> usize {
        match self {
            Structure::Independence => 0,
            Structure::WithinAr1
            | Structure::WithinExchangeable
            | Structure::FullAr1
            | Structure::FullExchangeable => 1,
            Structure::KroneckerAr1 | Structure::KroneckerExchangeable => {
                1 + periods * (periods - 1) / 2
            }
        }
    }

    /// Structures whose correlation blocks presume a common number of
    /// occasions per period.
    pub fn needs_balance(&self) -> bool {
        matches!(
            self,
            Structure::WithinAr1
                | Structure::WithinExchangeable
                | Structure::KroneckerAr1
                | Structure::KroneckerExchangeable
        )
    }

    fn is_kronecker(&self) -> bool {
        matches!(
            self,
            Structure::KroneckerAr1 | Structure::KroneckerExchangeable
        )
    }

    fn within_kind(&self) -> Option<WithinKind> {
        match self {
            Structure::WithinAr1 | Structure::KroneckerAr1 => Some(WithinKind::Ar1),
            Structure::WithinExchangeable | Structure::KroneckerExchangeable => {
                Some(WithinKind::Exchangeable)
            }
            _ => None,
        }
    }

    fn full_kind(&self) -> Option<WithinKind> {
        match self {
            Structure::FullAr1 => Some(WithinKind::Ar1),
            Structure::FullExchangeable => Some(WithinKind::Exchangeable),
            _ => None,
        }
    }

    fn has_corr_params(&self) -> bool {
        !matches!(self, Structure::Independence)
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Options controlling the scoring loop.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on max |Δβ_m| / (|β_m| + 1).
    pub tol: f64,
    /// Outer-iteration budget.
    pub max_iter: usize,
    /// Scale Pearson residuals by φ̂·√V(μ̂) instead of the standard
    /// √(φ̂·V(μ̂)); kept as a sensitivity switch.
    pub literal_residual_scale: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 200,
            literal_residual_scale: false,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::Config(format!(
                "convergence tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pearson residuals of one subject arranged as a P×L matrix: row j holds
/// the residuals of period rank j+1 in occasion order.
#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub subject: String,
    pub values: DMatrix<f64>,
}

/// A fitted marginal model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GeeFit {
    pub structure: Structure,
    pub family: Family,
    pub labels: Vec<String>,
    pub beta: DVector<f64>,
    pub dispersion: f64,
    /// Within-period correlation parameter, absent for independence.
    pub alpha1: Option<f64>,
    /// Estimated between-period matrix, present for Kronecker structures.
    pub psi: Option<CorrMatrix>,
    pub model_cov: DMatrix<f64>,
    pub robust_cov: DMatrix<f64>,
    pub qic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration relative β change.
    pub trace: Vec<f64>,
    pub fitted: DVector<f64>,
    pub responses: DVector<f64>,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub periods: usize,
    pub occasions: usize,
    pub balanced: bool,
}

impl GeeFit {
    /// Robust standard errors from the sandwich diagonal; NaN where the
    /// diagonal is not positive.
    pub fn robust_se(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|i| {
                let v = self.robust_cov[(i, i)];
                if v > 0.0 {
                    v.sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect()
    }

    /// Materialize the fitted PL×PL working correlation for balanced data.
    pub fn working_correlation(&self) -> Option<CorrMatrix> {
        if !self.balanced {
            return None;
        }
        working_block(
            self.structure,
            self.alpha1.unwrap_or(0.0),
            self.psi.as_ref(),
            self.periods,
            self.occasions,
            self.periods * self.occasions,
        )
        .ok()
    }
}

/// One row of the coefficient report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WaldRow {
    pub label: String,
    pub estimate: f64,
    pub robust_se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Coefficient table with robust z statistics and two-sided normal p-values.
pub fn wald_table(fit: &GeeFit) -> Vec<WaldRow> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let se = fit.robust_se();
    fit.labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let estimate = fit.beta[i];
            let s = se[i];
            let (z, p_value) = if s.is_finite() && s > 0.0 {
                let z = estimate / s;
                (z, 2.0 * (1.0 - normal.cdf(z.abs())))
            } else {
                (f64::NAN, f64::NAN)
            };
            WaldRow {
                label: label.clone(),
                estimate,
                robust_se: s,
                z,
                p_value,
            }
        })
        .collect()
}

/// Dispersion estimate φ̂ = Σ (y−μ̂)²/V(μ̂) / (N − p).
///
/// Returns 0 for a perfect fit; downstream consumers that need to divide by
/// φ̂ are expected to reject that case.
pub fn estimate_dispersion(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    family: Family,
    p: usize,
) -> Result<f64> {
    let n = y.len();
    if n <= p {
        return Err(Error::DegreesOfFreedom {
            n_obs: n,
            n_params: p,
        });
    }
    let mut sum = 0.0;
    for i in 0..n {
        let v = family.variance_function(mu[i])?;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::DegenerateVariance {
                module: "engine",
                what: format!("variance function is {v} at fitted mean {}", mu[i]),
            });
        }
        let r = y[i] - mu[i];
        sum += r * r / v;
    }
    Ok(sum / (n - p) as f64)
}

/// Pearson residuals r = (y − μ̂)/√(φ̂·V(μ̂)) arranged per subject as P×L
/// matrices. The data must be balanced so the layout is well defined.
pub fn pearson_residuals(
    dataset: &Dataset,
    mu: &DVector<f64>,
    phi: f64,
    family: Family,
) -> Result<Vec<ResidualMatrix>> {
    pearson_residuals_with(dataset, mu, phi, family, false)
}

/// [`pearson_residuals`] with the alternative φ̂·√V(μ̂) scaling available.
pub fn pearson_residuals_with(
    dataset: &Dataset,
    mu: &DVector<f64>,
    phi: f64,
    family: Family,
    literal_scale: bool,
) -> Result<Vec<ResidualMatrix>> {
    if !dataset.balanced() {
        return Err(Error::Balance {
            structure: "residual matrices".into(),
            detail: "the P×L residual layout needs every subject-period cell filled equally".into(),
        });
    }
    let flat = pearson_vector(
        dataset.responses().as_slice(),
        mu.as_slice(),
        phi,
        family,
        literal_scale,
    )?;
    let p = dataset.n_periods();
    let l = dataset.occasions();
    let mut out = Vec::with_capacity(dataset.n_subjects());
    for (i, subject) in dataset.subjects().iter().enumerate() {
        let range = dataset.subject_range(i);
        let block = &flat[range];
        // canonical order is period-major, occasions ascending
        let values = DMatrix::from_fn(p, l, |j, k| block[j * l + k]);
        out.push(ResidualMatrix {
            subject: subject.clone(),
            values,
        });
    }
    Ok(out)
}

/// Flat Pearson residuals in canonical row order.
fn pearson_vector(
    y: &[f64],
    mu: &[f64],
    phi: f64,
    family: Family,
    literal_scale: bool,
) -> Result<Vec<f64>> {
    if !phi.is_finite() || phi <= 0.0 {
        return Err(Error::DegenerateVariance {
            module: "engine",
            what: format!("dispersion {phi} cannot scale residuals"),
        });
    }
    y.iter()
        .zip(mu)
        .map(|(&yi, &mi)| {
            let v = family.variance_function(mi)?;
            let denom = if literal_scale {
                phi * v.sqrt()
            } else {
                (phi * v).sqrt()
            };
            if !denom.is_finite() || denom <= 0.0 {
                return Err(Error::DegenerateVariance {
                    module: "engine",
                    what: format!("residual scale is {denom} at fitted mean {mi}"),
                });
            }
            Ok((yi - mi) / denom)
        })
        .collect()
}

/// Moment estimate of the within-period correlation parameter from pooled
/// residual products: lag-1 products for AR(1), all pairs for exchangeable,
/// clipped into the valid parameter range.
pub fn estimate_alpha1(residuals: &[ResidualMatrix], kind: WithinKind) -> Result<f64> {
    if kind == WithinKind::Independence {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut l_max = 0usize;
    for rm in residuals {
        let (p, l) = rm.values.shape();
        l_max = l_max.max(l);
        for j in 0..p {
            match kind {
                WithinKind::Ar1 => {
                    for k in 0..l.saturating_sub(1) {
                        sum += rm.values[(j, k)] * rm.values[(j, k + 1)];
                        count += 1;
                    }
                }
                WithinKind::Exchangeable => {
                    for k in 0..l {
                        for k2 in (k + 1)..l {
                            sum += rm.values[(j, k)] * rm.values[(j, k2)];
                            count += 1;
                        }
                    }
                }
                WithinKind::Independence => unreachable!(),
            }
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData(
            "no within-period residual pairs; at least two occasions per period are needed".into(),
        ));
    }
    Ok(clip_alpha(sum / count as f64, kind, l_max))
}

fn clip_alpha(raw: f64, kind: WithinKind, block_dim: usize) -> f64 {
    match kind {
        WithinKind::Ar1 => raw.clamp(-0.99, 0.99),
        WithinKind::Exchangeable => {
            let lower = if block_dim > 1 {
                -1.0 / (block_dim as f64 - 1.0) + 0.01
            } else {
                -0.99
            };
            raw.clamp(lower, 0.99)
        }
        WithinKind::Independence => 0.0,
    }
}

/// The raw between-period moment matrix: entry (j, j′) averages
/// (r_(j′)i − r̄_(j′))ᵀ R₁ (r_(j)i − r̄_(j)) over subjects, where r_(j)i is
/// period row j of subject i's residual matrix.
pub fn raw_between_moments(residuals: &[ResidualMatrix], r1: &CorrMatrix) -> Result<DMatrix<f64>> {
    if residuals.len() < 2 {
        return Err(Error::InsufficientData(
            "between-period moments need at least two subjects".into(),
        ));
    }
    let (p, l) = residuals[0].values.shape();
    if r1.dim() != l {
        return Err(Error::Param(format!(
            "within-period factor is {}x{} but residual matrices have {l} occasions",
            r1.dim(),
            r1.dim()
        )));
    }
    for rm in residuals {
        if rm.values.shape() != (p, l) {
            return Err(Error::InsufficientData(format!(
                "residual matrix for subject {:?} is {}x{}, expected {p}x{l}",
                rm.subject,
                rm.values.nrows(),
                rm.values.ncols()
            )));
        }
    }
    let n = residuals.len() as f64;
    // per-period mean residual vectors r̄_(j)
    let mut mean = DMatrix::zeros(p, l);
    for rm in residuals {
        mean += &rm.values;
    }
    mean /= n;

    let r1m = r1.as_matrix();
    let mut raw = DMatrix::zeros(p, p);
    for rm in residuals {
        let c = &rm.values - &mean;
        // gram[j, j'] = c_j R₁ c_{j'}ᵀ over period rows
        let gram = &c * r1m * c.transpose();
        raw += gram;
    }
    raw /= n;
    Ok(raw)
}

/// Between-period correlation estimate: the raw moment matrix normalized to
/// unit diagonal and projected to the PSD cone.
pub fn estimate_psi(residuals: &[ResidualMatrix], r1: &CorrMatrix) -> Result<CorrMatrix> {
    let raw = raw_between_moments(residuals, r1)?;
    let p = raw.nrows();
    let mut scale = Vec::with_capacity(p);
    for j in 0..p {
        let d = raw[(j, j)];
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::DegenerateVariance {
                module: "engine",
                what: format!("between-period moment for period {} is {d}", j + 1),
            });
        }
        scale.push(d.sqrt());
    }
    let mut normalized = DMatrix::from_fn(p, p, |j, j2| raw[(j, j2)] / (scale[j] * scale[j2]));
    for j in 0..p {
        normalized[(j, j)] = 1.0;
    }
    crate::correlation::project_to_psd(&normalized)
}

/// Bread and meat of the sandwich: B = Σ DᵀV⁻¹D and
/// M = Σ DᵀV⁻¹eeᵀV⁻¹D over subjects.
pub(crate) fn bread_and_meat(
    d: &[DMatrix<f64>],
    v: &[DMatrix<f64>],
    e: &[DVector<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if d.len() != v.len() || d.len() != e.len() || d.is_empty() {
        return Err(Error::Config(
            "sandwich inputs must be nonempty lists of equal length".into(),
        ));
    }
    let p = d[0].ncols();
    let mut bread = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..d.len() {
        let ni = d[i].nrows();
        if v[i].shape() != (ni, ni) || e[i].len() != ni || d[i].ncols() != p {
            return Err(Error::Config(format!(
                "sandwich input shapes disagree for subject index {i}"
            )));
        }
        let chol = v[i].clone().cholesky().ok_or_else(|| Error::Singular {
            module: "engine",
            what: format!("working covariance of subject index {i}"),
        })?;
        let vinv_d = chol.solve(&d[i]);
        let vinv_e = chol.solve(&e[i]);
        bread += d[i].transpose() * &vinv_d;
        let g = d[i].transpose() * &vinv_e;
        meat += &g * g.transpose();
    }
    Ok((bread, meat))
}

/// Robust sandwich covariance B⁻¹MB⁻¹ from per-subject design blocks D_i,
/// working covariances V_i, and residual vectors e_i = y_i − μ̂_i.
pub fn sandwich_covariance(
    d: &[DMatrix<f64>],
    v: &[DMatrix<f64>],
    e: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let (bread, meat) = bread_and_meat(d, v, e)?;
    let binv = bread
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular {
            module: "engine",
            what: "bread matrix B".into(),
        })?;
    let mut robust = &binv * meat * &binv;
    symmetrize(&mut robust);
    Ok(robust)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Immutable per-fit context shared by the scoring loop.
struct Ctx<'a> {
    dataset: &'a Dataset,
    x: DMatrix<f64>,
    labels: Vec<String>,
    y: DVector<f64>,
    family: Family,
    subject_ranges: Vec<std::ops::Range<usize>>,
    periods: usize,
    occasions: usize,
    p: usize,
}

/// Correlation-parameter state carried across outer iterations.
#[derive(Clone)]
struct CorrState {
    alpha1: f64,
    psi: CorrMatrix,
}

/// Converged state of one scoring loop.
struct Solved {
    beta: DVector<f64>,
    mu: DVector<f64>,
    dmu: DVector<f64>,
    varf: DVector<f64>,
    phi: f64,
    corr: CorrState,
    iterations: usize,
    trace: Vec<f64>,
}

enum Rinv {
    Identity,
    Shared(DMatrix<f64>),
    PerSize(BTreeMap<usize, DMatrix<f64>>),
}

impl Rinv {
    fn for_size(&self, size: usize) -> Option<&DMatrix<f64>> {
        match self {
            Rinv::Identity => None,
            Rinv::Shared(m) => Some(m),
            Rinv::PerSize(map) => map.get(&size),
        }
    }
}

/// Fit a marginal model.
///
/// The scoring loop starts from a link-transformed least-squares β, with
/// α₁ = 0 and Ψ = I; an independence fit is always run first, both to
/// initialize β and to provide the reference covariance Ω̂_I for QIC.
pub fn fit(
    dataset: &Dataset,
    formula: &ModelFormula,
    family: Family,
    structure: Structure,
    options: &FitOptions,
) -> Result<GeeFit> {
    options.validate()?;
    let dm = build_design_matrix(dataset, formula)?;
    let y = dataset.responses();
    let p = dm.x.ncols();
    if y.len() <= p {
        return Err(Error::DegreesOfFreedom {
            n_obs: y.len(),
            n_params: p,
        });
    }
    for v in y.iter() {
        family.check_response(*v)?;
    }
    if structure.needs_balance() && !dataset.balanced() {
        return Err(Error::Balance {
            structure: structure.name().into(),
            detail: "every subject needs every period with a common occasion count".into(),
        });
    }
    if structure.within_kind().is_some() && !structure.is_kronecker() && dataset.occasions() < 2 {
        return Err(Error::InsufficientData(format!(
            "structure {} needs at least two occasions per period to estimate its \
             within-period correlation",
            structure.name()
        )));
    }

    let ctx = Ctx {
        dataset,
        subject_ranges: (0..dataset.n_subjects())
            .map(|i| dataset.subject_range(i))
            .collect(),
        labels: dm.labels,
        x: dm.x,
        y,
        family,
        periods: dataset.n_periods(),
        occasions: dataset.occasions(),
        p,
    };

    let indep = scoring_loop(&ctx, Structure::Independence, options, None)?;
    let (indep_model_cov, indep_robust_cov) = covariances(&ctx, Structure::Independence, &indep)?;

    let (solved, model_cov, robust_cov) = if structure == Structure::Independence {
        (indep, indep_model_cov.clone(), indep_robust_cov)
    } else {
        let solved = scoring_loop(&ctx, structure, options, Some(indep.beta.clone()))?;
        let (model_cov, robust_cov) = covariances(&ctx, structure, &solved)?;
        (solved, model_cov, robust_cov)
    };

    let qic = selection::qic_from_parts(
        &ctx.y,
        &solved.mu,
        family,
        solved.phi,
        &indep_model_cov,
        &robust_cov,
    )?;

    Ok(GeeFit {
        structure,
        family,
        labels: ctx.labels,
        beta: solved.beta,
        dispersion: solved.phi,
        alpha1: structure.has_corr_params().then_some(solved.corr.alpha1),
        psi: structure.is_kronecker().then_some(solved.corr.psi),
        model_cov,
        robust_cov,
        qic,
        iterations: solved.iterations,
        converged: true,
        trace: solved.trace,
        fitted: solved.mu,
        responses: ctx.y,
        n_subjects: dataset.n_subjects(),
        n_obs: dataset.n_obs(),
        periods: ctx.periods,
        occasions: ctx.occasions,
        balanced: dataset.balanced(),
    })
}

/// Initial β: least squares of the link-transformed (domain-adjusted)
/// response on X.
fn initial_beta(ctx: &Ctx) -> Result<DVector<f64>> {
    let z = DVector::from_iterator(
        ctx.y.len(),
        ctx.y.iter().map(|&y| {
            let adjusted = match ctx.family {
                Family::Gaussian => y,
                Family::Poisson => y.max(0.1),
                Family::Binomial => (y + 0.5) / 2.0,
                Family::Gamma => y.max(1e-3),
            };
            ctx.family
                .link(adjusted)
                .expect("adjusted response in domain")
        }),
    );
    let xtx = ctx.x.transpose() * &ctx.x;
    let xtz = ctx.x.transpose() * z;
    xtx.cholesky()
        .map(|c| c.solve(&xtz))
        .ok_or_else(|| Error::Singular {
            module: "engine",
            what: "normal equations of the initialization step".into(),
        })
}

fn mean_quantities(
    ctx: &Ctx,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let eta = &ctx.x * beta;
    let n = eta.len();
    let mut mu = DVector::zeros(n);
    let mut dmu = DVector::zeros(n);
    let mut varf = DVector::zeros(n);
    for i in 0..n {
        mu[i] = ctx.family.inverse_link(eta[i])?;
        dmu[i] = ctx.family.mean_derivative(eta[i])?;
        let v = ctx.family.variance_function(mu[i])?;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::DegenerateVariance {
                module: "engine",
                what: format!("variance function is {v} at working mean {}", mu[i]),
            });
        }
        varf[i] = v;
    }
    Ok((mu, dmu, varf))
}

/// One full alternating loop for the given structure.
fn scoring_loop(
    ctx: &Ctx,
    structure: Structure,
    options: &FitOptions,
    init: Option<DVector<f64>>,
) -> Result<Solved> {
    let mut beta = match init {
        Some(b) => b,
        None => initial_beta(ctx)?,
    };
    let mut corr = CorrState {
        alpha1: 0.0,
        psi: CorrMatrix::identity(ctx.periods),
    };
    let max_block = ctx
        .subject_ranges
        .iter()
        .map(|r| r.len())
        .max()
        .unwrap_or(0);
    // all parameters must refresh at least once before convergence counts
    let min_iter = if structure.has_corr_params() { 2 } else { 1 };
    let mut trace = Vec::new();

    for iter in 1..=options.max_iter {
        let rinv = materialize_rinv(ctx, structure, &corr)?;
        let (mu0, dmu0, varf0) = mean_quantities(ctx, &beta)?;

        // Fisher scoring step: δ = B⁻¹ s with
        // B = Σ Dᵀ V⁻¹ D, s = Σ Dᵀ V⁻¹ (y − μ), V = A^{1/2} R A^{1/2}.
        let mut bmat = DMatrix::zeros(ctx.p, ctx.p);
        let mut svec = DVector::zeros(ctx.p);
        for range in &ctx.subject_ranges {
            let ni = range.len();
            let mut w = DMatrix::zeros(ctx.p, ni); // Dᵀ A^{-1/2}
            let mut etil = DVector::zeros(ni); // A^{-1/2} (y − μ)
            for (t, row) in range.clone().enumerate() {
                let u = dmu0[row] / varf0[row].sqrt();
                for m in 0..ctx.p {
                    w[(m, t)] = ctx.x[(row, m)] * u;
                }
                etil[t] = (ctx.y[row] - mu0[row]) / varf0[row].sqrt();
            }
            match rinv.for_size(ni) {
                None => {
                    bmat += &w * w.transpose();
                    svec += &w * &etil;
                }
                Some(r) => {
                    let wr = &w * r;
                    bmat += &wr * w.transpose();
                    svec += &wr * &etil;
                }
            }
        }
        let delta = bmat
            .cholesky()
            .map(|c| c.solve(&svec))
            .ok_or_else(|| Error::Singular {
                module: "engine",
                what: "scoring matrix".into(),
            })?;
        beta += &delta;
        let rel = delta
            .iter()
            .zip(beta.iter())
            .map(|(d, b)| d.abs() / (b.abs() + 1.0))
            .fold(0.0f64, f64::max);
        trace.push(rel);

        // refresh dispersion and correlation parameters at the new β
        let (mu, _dmu, _varf) = mean_quantities(ctx, &beta)?;
        let phi = estimate_dispersion(&ctx.y, &mu, ctx.family, ctx.p)?;

        if structure.has_corr_params() {
            if phi <= 0.0 {
                return Err(Error::DegenerateVariance {
                    module: "engine",
                    what: "dispersion collapsed to zero; correlation parameters cannot be \
                           estimated from exactly fitted data"
                        .into(),
                });
            }
            if let Some(kind) = structure.within_kind() {
                let resid = pearson_residuals_with(
                    ctx.dataset,
                    &mu,
                    phi,
                    ctx.family,
                    options.literal_residual_scale,
                )?;
                if ctx.occasions >= 2 {
                    corr.alpha1 = estimate_alpha1(&resid, kind)?;
                }
                if structure.is_kronecker() {
                    let r1 = WithinSpec {
                        kind,
                        alpha: corr.alpha1,
                    }
                    .build(ctx.occasions)?;
                    corr.psi = estimate_psi(&resid, &r1)?;
                }
            } else if let Some(kind) = structure.full_kind() {
                let flat = pearson_vector(
                    ctx.y.as_slice(),
                    mu.as_slice(),
                    phi,
                    ctx.family,
                    options.literal_residual_scale,
                )?;
                corr.alpha1 = full_block_alpha(&flat, &ctx.subject_ranges, kind, max_block)?;
            }
        }

        if iter >= min_iter && rel < options.tol {
            let (mu, dmu, varf) = mean_quantities(ctx, &beta)?;
            return Ok(Solved {
                beta,
                mu,
                dmu,
                varf,
                phi,
                corr,
                iterations: iter,
                trace,
            });
        }
    }

    let last = trace.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence {
        iterations: options.max_iter,
        last,
        trace,
    })
}

/// Moment estimate over full stacked subject vectors (lag-1 or all pairs).
fn full_block_alpha(
    flat: &[f64],
    ranges: &[std::ops::Range<usize>],
    kind: WithinKind,
    max_block: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for range in ranges {
        let r = &flat[range.clone()];
        match kind {
            WithinKind::Ar1 => {
                for t in 0..r.len().saturating_sub(1) {
                    sum += r[t] * r[t + 1];
                    count += 1;
                }
            }
            WithinKind::Exchangeable => {
                for a in 0..r.len() {
                    for b in (a + 1)..r.len() {
                        sum += r[a] * r[b];
                        count += 1;
                    }
                }
            }
            WithinKind::Independence => {}
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData(
            "no residual pairs for the full-block correlation estimate".into(),
        ));
    }
    Ok(clip_alpha(sum / count as f64, kind, max_block))
}

/// Materialize R⁻¹ for the current correlation state.
fn materialize_rinv(ctx: &Ctx, structure: Structure, corr: &CorrState) -> Result<Rinv> {
    match structure {
        Structure::Independence => Ok(Rinv::Identity),
        Structure::WithinAr1 | Structure::WithinExchangeable => {
            let kind = structure.within_kind().unwrap();
            let r1 = WithinSpec {
                kind,
                alpha: corr.alpha1,
            }
            .build(ctx.occasions)?;
            let identity = CorrMatrix::identity(ctx.periods);
            Ok(Rinv::Shared(factored_inverse(&identity, &r1)?))
        }
        Structure::KroneckerAr1 | Structure::KroneckerExchangeable => {
            let kind = structure.within_kind().unwrap();
            let r1 = WithinSpec {
                kind,
                alpha: corr.alpha1,
            }
            .build(ctx.occasions)?;
            Ok(Rinv::Shared(factored_inverse(&corr.psi, &r1)?))
        }
        Structure::FullAr1 | Structure::FullExchangeable => {
            let kind = structure.full_kind().unwrap();
            let mut map = BTreeMap::new();
            for range in &ctx.subject_ranges {
                let d = range.len();
                if map.contains_key(&d) {
                    continue;
                }
                let block = full_block(kind, corr.alpha1, d)?;
                let inv = block
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| Error::Singular {
                        module: "engine",
                        what: format!("full working correlation block of size {d}"),
                    })?;
                map.insert(d, inv);
            }
            Ok(Rinv::PerSize(map))
        }
    }
}

fn full_block(kind: WithinKind, alpha: f64, d: usize) -> Result<DMatrix<f64>> {
    Ok(WithinSpec { kind, alpha }.build(d)?.into_inner())
}

/// Dense working correlation block for one subject under the final state.
fn working_block(
    structure: Structure,
    alpha1: f64,
    psi: Option<&CorrMatrix>,
    periods: usize,
    occasions: usize,
    size: usize,
) -> Result<CorrMatrix> {
    match structure {
        Structure::Independence => Ok(CorrMatrix::identity(size)),
        Structure::WithinAr1 | Structure::WithinExchangeable => {
            let kind = match structure {
                Structure::WithinAr1 => WithinKind::Ar1,
                _ => WithinKind::Exchangeable,
            };
            let r1 = WithinSpec {
                kind,
                alpha: alpha1,
            }
            .build(occasions)?;
            Ok(kronecker(&CorrMatrix::identity(periods), &r1))
        }
        Structure::KroneckerAr1 | Structure::KroneckerExchangeable => {
            let kind = match structure {
                Structure::KroneckerAr1 => WithinKind::Ar1,
                _ => WithinKind::Exchangeable,
            };
            let r1 = WithinSpec {
                kind,
                alpha: alpha1,
            }
            .build(occasions)?;
            let psi = psi.expect("kronecker structures carry a between-period matrix");
            Ok(kronecker(psi, &r1))
        }
        Structure::FullAr1 => WorkingCorrelation::Ar1(alpha1).build(size, 1),
        Structure::FullExchangeable => WorkingCorrelation::Exchangeable(alpha1).build(size, 1),
    }
}

/// Model-based and robust covariance at the solved state.
fn covariances(
    ctx: &Ctx,
    structure: Structure,
    solved: &Solved,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut dmats = Vec::with_capacity(ctx.subject_ranges.len());
    let mut vmats = Vec::with_capacity(ctx.subject_ranges.len());
    let mut evecs = Vec::with_capacity(ctx.subject_ranges.len());
    for range in &ctx.subject_ranges {
        let ni = range.len();
        let r = working_block(
            structure,
            solved.corr.alpha1,
            if structure.is_kronecker() {
                Some(&solved.corr.psi)
            } else {
                None
            },
            ctx.periods,
            ctx.occasions,
            ni,
        )?;
        let mut d = DMatrix::zeros(ni, ctx.p);
        let mut v = DMatrix::zeros(ni, ni);
        let mut e = DVector::zeros(ni);
        for (a, row_a) in range.clone().enumerate() {
            for m in 0..ctx.p {
                d[(a, m)] = solved.dmu[row_a] * ctx.x[(row_a, m)];
            }
            e[a] = ctx.y[row_a] - solved.mu[row_a];
            for (b, row_b) in range.clone().enumerate() {
                v[(a, b)] =
                    (solved.varf[row_a] * solved.varf[row_b]).sqrt() * r.as_matrix()[(a, b)];
            }
        }
        dmats.push(d);
        vmats.push(v);
        evecs.push(e);
    }
    let (bread, meat) = bread_and_meat(&dmats, &vmats, &evecs)?;
    let binv = bread
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular {
            module: "engine",
            what: "bread matrix B".into(),
        })?;
    let mut model = solved.phi * &binv;
    let mut robust = &binv * meat * &binv;
    symmetrize(&mut model);
    symmetrize(&mut robust);
    Ok((model, robust))
}
