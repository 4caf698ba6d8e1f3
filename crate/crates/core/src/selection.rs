//! Working-correlation selection by QIC.
//!
//! QIC = −2·QL(μ̂; I) + 2·tr(Ω̂_I⁻¹ V̂_R), where QL is the quasi-likelihood
//! under the independence working model evaluated at the candidate's fitted
//! means, Ω̂_I is the model-based coefficient covariance of the independence
//! fit on the same data, and V̂_R is the candidate's robust covariance. Lower
//! is better; the goodness-of-fit term rewards mean models that track the
//! data and the trace term penalizes working correlations whose model-based
//! precision disagrees with the empirical one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::design::{Dataset, ModelFormula};
use crate::engine::{fit, FitOptions, GeeFit, Structure};
use crate::error::{Error, Result};
use crate::expfam::Family;

/// QIC from raw ingredients. `omega_independence` must be the model-based
/// covariance of an independence fit of the same mean model on the same
/// data; `robust` is the candidate fit's sandwich covariance.
pub fn qic_from_parts(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    family: Family,
    phi: f64,
    omega_independence: &DMatrix<f64>,
    robust: &DMatrix<f64>,
) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(Error::Param(format!(
            "response ({}) and fitted means ({}) disagree in length",
            y.len(),
            mu.len()
        )));
    }
    if !phi.is_finite() || phi <= 0.0 {
        return Err(Error::DegenerateVariance {
            module: "selection",
            what: format!("dispersion {phi} cannot enter the quasi-likelihood"),
        });
    }
    let p = omega_independence.nrows();
    if omega_independence.shape() != (p, p) || robust.shape() != (p, p) {
        return Err(Error::Param(
            "covariance inputs must be square matrices of equal size".into(),
        ));
    }
    let mut ql = 0.0;
    for i in 0..y.len() {
        ql += family.quasi_likelihood(y[i], mu[i], phi)?;
    }
    let chol = omega_independence
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular {
            module: "selection",
            what: "independence model covariance".into(),
        })?;
    let penalty = chol.solve(robust).trace();
    Ok(-2.0 * ql + 2.0 * penalty)
}

/// QIC of a fitted model given its companion independence fit.
///
/// Both fits must describe the same data and mean model; the independence
/// fit supplies Ω̂_I.
pub fn qic(fit: &GeeFit, independence: &GeeFit) -> Result<f64> {
    if independence.structure != Structure::Independence {
        return Err(Error::Param(format!(
            "reference fit must use the independence structure, got {}",
            independence.structure
        )));
    }
    if fit.labels != independence.labels || fit.family != independence.family {
        return Err(Error::Param(
            "candidate and reference fits describe different mean models".into(),
        ));
    }
    if fit.responses != independence.responses {
        return Err(Error::Param(
            "candidate and reference fits were estimated on different data".into(),
        ));
    }
    qic_from_parts(
        &fit.responses,
        &fit.fitted,
        fit.family,
        fit.dispersion,
        &independence.model_cov,
        &fit.robust_cov,
    )
}

/// One candidate's outcome in a comparison.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ComparisonRow {
    pub structure: Structure,
    /// QIC, absent when the fit failed.
    pub qic: Option<f64>,
    /// QIC difference to the winner, absent when the fit failed.
    pub delta: Option<f64>,
    pub corr_params: usize,
    pub converged: bool,
    /// Error description when the fit failed.
    pub error: Option<String>,
}

/// Result of fitting several working correlations to the same data.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// One row per requested structure, in request order.
    pub rows: Vec<ComparisonRow>,
    pub winner: Structure,
    pub winner_fit: GeeFit,
}

/// Fit every candidate structure and rank by QIC. Candidates run in
/// parallel; rows keep the request order. Ties prefer fewer correlation
/// parameters, then earlier request order. Fit failures become rows with an
/// error note, and [`Error::AllFailed`] is raised only when no candidate
/// survives.
pub fn compare_structures(
    dataset: &Dataset,
    formula: &ModelFormula,
    family: Family,
    structures: &[Structure],
    options: &FitOptions,
) -> Result<ComparisonReport> {
    if structures.is_empty() {
        return Err(Error::Config("no candidate structures given".into()));
    }
    let mut seen = Vec::new();
    for s in structures {
        if seen.contains(s) {
            return Err(Error::Config(format!("duplicate candidate structure {s}")));
        }
        seen.push(*s);
    }

    let outcomes: Vec<(Structure, std::result::Result<GeeFit, Error>)> = structures
        .par_iter()
        .map(|&s| (s, fit(dataset, formula, family, s, options)))
        .collect();

    let periods = dataset.n_periods();
    let mut fits: Vec<Option<GeeFit>> = Vec::with_capacity(outcomes.len());
    let mut rows: Vec<ComparisonRow> = Vec::with_capacity(outcomes.len());
    for (s, outcome) in outcomes {
        match outcome {
            Ok(f) => {
                rows.push(ComparisonRow {
                    structure: s,
                    qic: Some(f.qic),
                    delta: None,
                    corr_params: s.n_corr_params(periods),
                    converged: f.converged,
                    error: None,
                });
                fits.push(Some(f));
            }
            Err(e) => {
                rows.push(ComparisonRow {
                    structure: s,
                    qic: None,
                    delta: None,
                    corr_params: s.n_corr_params(periods),
                    converged: false,
                    error: Some(e.to_string()),
                });
                fits.push(None);
            }
        }
    }

    let winner_idx = pick_winner(&rows).ok_or(Error::AllFailed)?;
    let best_qic = rows[winner_idx].qic.expect("winner has a QIC");
    for row in &mut rows {
        row.delta = row.qic.map(|q| q - best_qic);
    }
    let winner_fit = fits[winner_idx].take().expect("winner was fitted");
    Ok(ComparisonReport {
        rows,
        winner: winner_fit.structure,
        winner_fit,
    })
}

/// Index of the winning row: smallest QIC, ties broken by fewer correlation
/// parameters, then earlier position.
fn pick_winner(rows: &[ComparisonRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let Some(q) = row.qic else { continue };
        match best {
            None => best = Some(i),
            Some(b) => {
                let bq = rows[b].qic.unwrap();
                if q < bq || (q == bq && row.corr_params < rows[b].corr_params) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Obs;
    use approx::assert_abs_diff_eq;

    // three occasions per period so ar1 and exchangeable genuinely differ
    // (in a 2x2 block they coincide and tie exactly in QIC)
    fn toy_dataset() -> Dataset {
        let mut obs = Vec::new();
        for s in 0..6 {
            let seq = if s % 2 == 0 { "AB" } else { "BA" };
            for j in 1..=2i64 {
                for k in 1..=3i64 {
                    let t = if (j == 1) == (seq == "AB") { "A" } else { "B" };
                    obs.push(Obs {
                        subject: format!("s{s}"),
                        period: j,
                        occasion: k,
                        treatment: t.into(),
                        sequence: seq.into(),
                        response: (s as f64) * 0.31
                            + (j as f64) * 0.7
                            + (k as f64) * 0.11
                            + ((s * 7 + j as usize * 3 + k as usize) % 5) as f64 * 0.17,
                        time: None,
                        baseline: None,
                    });
                }
            }
        }
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn equal_covariances_reduce_penalty_to_two_p() {
        // tr(Ω⁻¹V) = p when V = Ω, so QIC = −2QL + 2p for any PD Ω
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mu = DVector::from_row_slice(&[1.5, 1.5, 3.5, 3.5]);
        let omega = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let phi = 2.0;
        let q = qic_from_parts(&y, &mu, Family::Gaussian, phi, &omega, &omega).unwrap();
        let ql: f64 = y
            .iter()
            .zip(mu.iter())
            .map(|(&yi, &mi)| -(yi - mi) * (yi - mi) / (2.0 * phi))
            .sum();
        assert_abs_diff_eq!(q, -2.0 * ql + 6.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_gaussian_fit_scores_exactly_the_penalty() {
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let omega = DMatrix::identity(2, 2);
        let q = qic_from_parts(&y, &y, Family::Gaussian, 1.0, &omega, &omega).unwrap();
        assert_eq!(q, 4.0);
    }

    #[test]
    fn qic_rejects_degenerate_dispersion_and_shape_mismatch() {
        let y = DVector::from_row_slice(&[1.0, 2.0]);
        let omega = DMatrix::identity(2, 2);
        assert!(matches!(
            qic_from_parts(&y, &y, Family::Gaussian, 0.0, &omega, &omega),
            Err(Error::DegenerateVariance { .. })
        ));
        let wrong = DMatrix::identity(3, 3);
        assert!(matches!(
            qic_from_parts(&y, &y, Family::Gaussian, 1.0, &omega, &wrong),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn qic_wrapper_validates_the_reference_fit() {
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept", "period"]).unwrap();
        let options = FitOptions::default();
        let indep = fit(&ds, &f, Family::Gaussian, Structure::Independence, &options).unwrap();
        let cand = fit(&ds, &f, Family::Gaussian, Structure::WithinAr1, &options).unwrap();

        let q = qic(&cand, &indep).unwrap();
        assert_abs_diff_eq!(q, cand.qic, epsilon = 1e-9);

        // wrong reference structure
        assert!(matches!(qic(&cand, &cand), Err(Error::Param(_))));

        // different mean model
        let f2 = ModelFormula::parse(&["intercept", "treatment"]).unwrap();
        let other = fit(
            &ds,
            &f2,
            Family::Gaussian,
            Structure::Independence,
            &options,
        )
        .unwrap();
        assert!(matches!(qic(&cand, &other), Err(Error::Param(_))));
    }

    #[test]
    fn qic_is_invariant_to_row_permutation() {
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept", "period", "treatment"]).unwrap();
        let options = FitOptions::default();
        let baseline = fit(&ds, &f, Family::Gaussian, Structure::KroneckerAr1, &options)
            .unwrap()
            .qic;

        let mut obs = ds.rows().to_vec();
        let m = obs.len();
        for i in 0..m {
            obs.swap(i, (i * 13 + 7) % m);
        }
        let permuted = Dataset::new(obs).unwrap();
        let shuffled = fit(
            &permuted,
            &f,
            Family::Gaussian,
            Structure::KroneckerAr1,
            &options,
        )
        .unwrap()
        .qic;
        assert_abs_diff_eq!(baseline, shuffled, epsilon = 1e-9);
    }

    #[test]
    fn quasi_likelihood_term_recomputes_from_serialized_mu() {
        // the QL term depends on the fit only through μ̂ and φ̂: rebuilding
        // the QIC from a JSON round trip of the fitted values reproduces it
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept", "period"]).unwrap();
        let options = FitOptions::default();
        let indep = fit(&ds, &f, Family::Gaussian, Structure::Independence, &options).unwrap();
        let cand = fit(
            &ds,
            &f,
            Family::Gaussian,
            Structure::WithinExchangeable,
            &options,
        )
        .unwrap();

        let json = serde_json::to_string(&cand.fitted).unwrap();
        let mu: DVector<f64> = serde_json::from_str(&json).unwrap();
        let rebuilt = qic_from_parts(
            &cand.responses,
            &mu,
            cand.family,
            cand.dispersion,
            &indep.model_cov,
            &cand.robust_cov,
        )
        .unwrap();
        assert_abs_diff_eq!(rebuilt, cand.qic, epsilon = 1e-9);
    }

    #[test]
    fn comparison_ranks_all_seven_structures() {
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept", "period", "treatment"]).unwrap();
        let report = compare_structures(
            &ds,
            &f,
            Family::Gaussian,
            &Structure::ALL,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 7);
        let min_q = report
            .rows
            .iter()
            .filter_map(|r| r.qic)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(report.winner_fit.qic, min_q, epsilon = 1e-12);
        assert_eq!(report.winner, report.winner_fit.structure);
        for row in &report.rows {
            if let Some(d) = row.delta {
                assert!(d >= 0.0);
            }
            // request order is preserved
        }
        for (row, s) in report.rows.iter().zip(Structure::ALL) {
            assert_eq!(row.structure, s);
        }
        let winner_row = report
            .rows
            .iter()
            .find(|r| r.structure == report.winner)
            .unwrap();
        assert_eq!(winner_row.delta, Some(0.0));
    }

    #[test]
    fn comparison_is_invariant_to_request_order() {
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept", "period"]).unwrap();
        let forward = compare_structures(
            &ds,
            &f,
            Family::Gaussian,
            &Structure::ALL,
            &FitOptions::default(),
        )
        .unwrap();
        let mut reversed_order = Structure::ALL.to_vec();
        reversed_order.reverse();
        let reversed = compare_structures(
            &ds,
            &f,
            Family::Gaussian,
            &reversed_order,
            &FitOptions::default(),
        )
        .unwrap();
        for row in &forward.rows {
            let twin = reversed
                .rows
                .iter()
                .find(|r| r.structure == row.structure)
                .unwrap();
            assert_abs_diff_eq!(row.qic.unwrap(), twin.qic.unwrap(), epsilon = 1e-9);
        }
        // equal-QIC ties resolve by parameter count before request order, so
        // the winner can only differ if two structures tie exactly with the
        // same parameter count; on this data the winner must agree
        assert_eq!(forward.winner, reversed.winner);
    }

    #[test]
    fn tie_breaking_prefers_fewer_parameters_then_order() {
        let row = |s: Structure, q: Option<f64>, c: usize| ComparisonRow {
            structure: s,
            qic: q,
            delta: None,
            corr_params: c,
            converged: true,
            error: None,
        };
        // exact tie: fewer correlation parameters wins
        let rows = vec![
            row(Structure::KroneckerAr1, Some(10.0), 4),
            row(Structure::WithinAr1, Some(10.0), 1),
        ];
        assert_eq!(pick_winner(&rows), Some(1));
        // exact tie with equal parameters: earlier request wins
        let rows = vec![
            row(Structure::WithinAr1, Some(10.0), 1),
            row(Structure::WithinExchangeable, Some(10.0), 1),
        ];
        assert_eq!(pick_winner(&rows), Some(0));
        // failed rows never win
        let rows = vec![
            row(Structure::WithinAr1, None, 1),
            row(Structure::Independence, Some(11.0), 0),
        ];
        assert_eq!(pick_winner(&rows), Some(1));
        assert_eq!(pick_winner(&[row(Structure::WithinAr1, None, 1)]), None);
    }

    #[test]
    fn failures_are_recorded_and_all_failed_raises() {
        let ds = toy_dataset();
        // single-occasion slice: AR1 within periods has no residual pairs
        let thin: Vec<Obs> = ds
            .rows()
            .iter()
            .filter(|o| o.occasion == 1)
            .cloned()
            .collect();
        let thin_ds = Dataset::new(thin).unwrap();
        let f = ModelFormula::parse(&["intercept", "period"]).unwrap();
        let report = compare_structures(
            &thin_ds,
            &f,
            Family::Gaussian,
            &[Structure::Independence, Structure::WithinAr1],
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(report.winner, Structure::Independence);
        let failed = &report.rows[1];
        assert!(failed.qic.is_none());
        assert!(failed.error.is_some());

        // every candidate fails on an overparameterized model
        assert!(matches!(
            compare_structures(
                &thin_ds,
                &f,
                Family::Gaussian,
                &[Structure::WithinAr1, Structure::WithinExchangeable],
                &FitOptions::default(),
            ),
            Err(Error::AllFailed)
        ));
    }

    #[test]
    fn duplicate_candidates_are_rejected() {
        let ds = toy_dataset();
        let f = ModelFormula::parse(&["intercept"]).unwrap();
        assert!(matches!(
            compare_structures(
                &ds,
                &f,
                Family::Gaussian,
                &[Structure::Independence, Structure::Independence],
                &FitOptions::default(),
            ),
            Err(Error::Config(_))
        ));
    }
}
