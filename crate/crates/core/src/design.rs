//! Crossover data handling: dataset validation, layout inference, carryover
//! expansion, and design-matrix construction.
//!
//! Observations are stored in canonical order (subject, then period, then
//! occasion), so each subject occupies one contiguous block whose rows are
//! period-major — the ordering the Kronecker working correlation assumes.
//! Dummy coding uses first-level references throughout: first period, first
//! treatment, first sequence, first occasion in sorted order.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One observation of a crossover trial in long format.
///
/// `period` and `occasion` are arbitrary integer codes; their sorted order
/// defines period ranks and within-period positions. `time` is the recorded
/// measurement time used by polynomial time terms, `baseline` a per-subject
/// covariate repeated on each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Obs {
    pub subject: String,
    pub period: i64,
    pub occasion: i64,
    pub treatment: String,
    pub sequence: String,
    pub response: f64,
    pub time: Option<f64>,
    pub baseline: Option<f64>,
}

/// A validated crossover dataset in canonical order.
#[derive(Debug, Clone)]
pub struct Dataset {
    obs: Vec<Obs>,
    subjects: Vec<String>,
    subject_bounds: Vec<(usize, usize)>,
    period_codes: Vec<i64>,
    occasion_codes: Vec<i64>,
    period_ranks: Vec<usize>,
    balanced: bool,
    occasions: usize,
}

impl Dataset {
    /// Validate rows and store them in canonical order.
    ///
    /// Rejects empty input, non-finite responses, duplicate
    /// (subject, period, occasion) cells, subjects assigned to more than one
    /// sequence, and sequences whose period→treatment map is inconsistent
    /// across subjects.
    pub fn new(mut obs: Vec<Obs>) -> Result<Dataset> {
        if obs.is_empty() {
            return Err(Error::Schema("dataset has no observations".into()));
        }
        for o in &obs {
            if !o.response.is_finite() {
                return Err(Error::Schema(format!(
                    "non-finite response for subject {:?}, period {}, occasion {}",
                    o.subject, o.period, o.occasion
                )));
            }
            if o.subject.is_empty() || o.treatment.is_empty() || o.sequence.is_empty() {
                return Err(Error::Schema(format!(
                    "empty subject, treatment, or sequence label on period {}, occasion {}",
                    o.period, o.occasion
                )));
            }
        }
        obs.sort_by(|a, b| {
            (&a.subject, a.period, a.occasion).cmp(&(&b.subject, b.period, b.occasion))
        });
        for w in obs.windows(2) {
            if w[0].subject == w[1].subject
                && w[0].period == w[1].period
                && w[0].occasion == w[1].occasion
            {
                return Err(Error::Duplicate {
                    subject: w[1].subject.clone(),
                    period: w[1].period as usize,
                    occasion: w[1].occasion as usize,
                });
            }
        }

        let mut subject_sequence: BTreeMap<&str, &str> = BTreeMap::new();
        let mut cell_treatment: BTreeMap<(&str, i64), &str> = BTreeMap::new();
        for o in &obs {
            match subject_sequence.get(o.subject.as_str()) {
                None => {
                    subject_sequence.insert(&o.subject, &o.sequence);
                }
                Some(seq) if *seq != o.sequence => {
                    return Err(Error::Schema(format!(
                        "subject {:?} appears in sequences {:?} and {:?}",
                        o.subject, seq, o.sequence
                    )));
                }
                _ => {}
            }
            match cell_treatment.get(&(o.sequence.as_str(), o.period)) {
                None => {
                    cell_treatment.insert((&o.sequence, o.period), &o.treatment);
                }
                Some(t) if *t != o.treatment => {
                    return Err(Error::Schema(format!(
                        "sequence {:?}, period {} maps to treatments {:?} and {:?}",
                        o.sequence, o.period, t, o.treatment
                    )));
                }
                _ => {}
            }
        }

        let subjects: Vec<String> = {
            let mut s: Vec<String> = obs.iter().map(|o| o.subject.clone()).collect();
            s.dedup();
            s
        };
        let mut subject_bounds = Vec::with_capacity(subjects.len());
        let mut start = 0;
        for s in &subjects {
            let end = start + obs[start..].iter().take_while(|o| &o.subject == s).count();
            subject_bounds.push((start, end));
            start = end;
        }

        let period_codes: Vec<i64> = obs
            .iter()
            .map(|o| o.period)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let occasion_codes: Vec<i64> = obs
            .iter()
            .map(|o| o.occasion)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let period_ranks: Vec<usize> = obs
            .iter()
            .map(|o| period_codes.binary_search(&o.period).unwrap() + 1)
            .collect();

        // Balanced means every subject has every period and all
        // subject-period cells hold the same number of occasions.
        let mut cell_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (i, (s, e)) in subject_bounds.iter().enumerate() {
            for o in &obs[*s..*e] {
                let rank = period_codes.binary_search(&o.period).unwrap() + 1;
                *cell_counts.entry((i, rank)).or_insert(0) += 1;
            }
        }
        let first_count = *cell_counts.values().next().unwrap();
        let counts_equal = cell_counts.values().all(|&c| c == first_count);
        let all_periods = (0..subjects.len())
            .all(|i| (1..=period_codes.len()).all(|j| cell_counts.contains_key(&(i, j))));
        let balanced = counts_equal && all_periods;
        let occasions = if balanced {
            first_count
        } else {
            *cell_counts.values().max().unwrap()
        };

        Ok(Dataset {
            obs,
            subjects,
            subject_bounds,
            period_codes,
            occasion_codes,
            period_ranks,
            balanced,
            occasions,
        })
    }

    pub fn rows(&self) -> &[Obs] {
        &self.obs
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_codes.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// Half-open row range of subject `i` in canonical order.
    pub fn subject_range(&self, i: usize) -> std::ops::Range<usize> {
        let (s, e) = self.subject_bounds[i];
        s..e
    }

    /// 1-based period rank of row `idx`.
    pub fn period_rank(&self, idx: usize) -> usize {
        self.period_ranks[idx]
    }

    pub fn period_codes(&self) -> &[i64] {
        &self.period_codes
    }

    pub fn occasion_codes(&self) -> &[i64] {
        &self.occasion_codes
    }

    /// True when every subject holds every period with a common number of
    /// occasions per period.
    pub fn balanced(&self) -> bool {
        self.balanced
    }

    /// Common occasions per period for balanced data; the maximum cell size
    /// otherwise.
    pub fn occasions(&self) -> usize {
        self.occasions
    }

    pub fn responses(&self) -> DVector<f64> {
        DVector::from_iterator(self.obs.len(), self.obs.iter().map(|o| o.response))
    }

    /// Infer the crossover layout: one arm per sequence label (sorted), with
    /// its per-period treatments and subject count.
    pub fn layout(&self) -> Result<CrossoverLayout> {
        let p = self.n_periods();
        let mut arms: BTreeMap<&str, (Vec<Option<&str>>, usize)> = BTreeMap::new();
        for (i, (s, _e)) in self.subject_bounds.iter().enumerate() {
            let seq = self.obs[*s].sequence.as_str();
            let entry = arms.entry(seq).or_insert_with(|| (vec![None; p], 0));
            entry.1 += 1;
            for idx in self.subject_range(i) {
                let rank = self.period_ranks[idx];
                entry.0[rank - 1] = Some(self.obs[idx].treatment.as_str());
            }
        }
        let mut sequences = Vec::with_capacity(arms.len());
        for (label, (slots, n)) in arms {
            let mut treatments = Vec::with_capacity(p);
            for (j, slot) in slots.iter().enumerate() {
                match slot {
                    Some(t) => treatments.push((*t).to_string()),
                    None => {
                        return Err(Error::Schema(format!(
                            "sequence {:?} has no observation in period rank {}",
                            label,
                            j + 1
                        )))
                    }
                }
            }
            sequences.push(SequenceArm {
                label: label.to_string(),
                treatments,
                n_subjects: n,
            });
        }
        CrossoverLayout::new(sequences, self.occasions)
    }
}

/// One arm of the trial: a sequence label, its treatment per period, and how
/// many subjects follow it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SequenceArm {
    pub label: String,
    pub treatments: Vec<String>,
    pub n_subjects: usize,
}

/// The treatment-sequence design of a crossover trial.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossoverLayout {
    pub sequences: Vec<SequenceArm>,
    pub n_periods: usize,
    pub occasions: usize,
    pub treatments: Vec<String>,
}

impl CrossoverLayout {
    pub fn new(sequences: Vec<SequenceArm>, occasions: usize) -> Result<CrossoverLayout> {
        if sequences.is_empty() {
            return Err(Error::Schema("layout needs at least one sequence".into()));
        }
        if occasions == 0 {
            return Err(Error::Schema("layout needs at least one occasion".into()));
        }
        let p = sequences[0].treatments.len();
        if p == 0 {
            return Err(Error::Schema("layout needs at least one period".into()));
        }
        for arm in &sequences {
            if arm.treatments.len() != p {
                return Err(Error::Schema(format!(
                    "sequence {:?} has {} periods, expected {}",
                    arm.label,
                    arm.treatments.len(),
                    p
                )));
            }
        }
        let treatments: Vec<String> = sequences
            .iter()
            .flat_map(|a| a.treatments.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(CrossoverLayout {
            sequences,
            n_periods: p,
            occasions,
            treatments,
        })
    }
}

/// Carried treatments by sequence, period, and carryover order.
///
/// `per_sequence[s][j][u-1]` is the treatment administered `u` periods before
/// period rank `j+1` in sequence `s`, or `None` for the washout-free early
/// periods where nothing was carried.
#[derive(Debug, Clone, PartialEq)]
pub struct CarryoverMap {
    pub per_sequence: Vec<Vec<Vec<Option<String>>>>,
}

/// Expand the carryover labels implied by a layout up to the given order.
///
/// Carryover of order `u` in period `j` refers to the treatment of period
/// `j − u`; periods `j ≤ u` carry nothing. The order must stay in
/// `1..=P−1`.
pub fn expand_carryover(layout: &CrossoverLayout, order: usize) -> Result<CarryoverMap> {
    let p = layout.n_periods;
    if order == 0 || order >= p {
        return Err(Error::Config(format!(
            "carryover order {order} outside 1..={} for {p} periods",
            p.saturating_sub(1)
        )));
    }
    let per_sequence = layout
        .sequences
        .iter()
        .map(|arm| {
            (1..=p)
                .map(|j| {
                    (1..=order)
                        .map(|u| {
                            if j > u {
                                Some(arm.treatments[j - u - 1].clone())
                            } else {
                                None
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(CarryoverMap { per_sequence })
}

/// One term of the marginal-model formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Period,
    Treatment,
    Sequence,
    Occasion,
    SequencePeriod,
    Baseline,
    /// Centered time polynomial of the given degree.
    Time {
        degree: usize,
    },
    /// Carryover dummies up to the given order.
    Carryover {
        order: usize,
    },
    /// Carryover dummies crossed with centered time powers.
    CarryoverTime {
        order: usize,
        degree: usize,
    },
}

impl Term {
    /// Parse one term descriptor, e.g. `"period"`, `"time(2)"`,
    /// `"carryover(1):time(1)"`.
    pub fn parse(s: &str) -> Result<Term> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let lower = compact.to_ascii_lowercase();
        let parse_arg = |text: &str, head: &str| -> Result<usize> {
            let inner = text
                .strip_prefix(head)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("malformed term {s:?}")))?;
            let v: usize = inner
                .parse()
                .map_err(|_| Error::Config(format!("malformed term {s:?}")))?;
            if v == 0 {
                return Err(Error::Config(format!(
                    "term {s:?} needs a positive argument"
                )));
            }
            Ok(v)
        };
        match lower.as_str() {
            "intercept" | "1" => Ok(Term::Intercept),
            "period" => Ok(Term::Period),
            "treatment" => Ok(Term::Treatment),
            "sequence" => Ok(Term::Sequence),
            "occasion" => Ok(Term::Occasion),
            "sequence:period" => Ok(Term::SequencePeriod),
            "baseline" => Ok(Term::Baseline),
            "time" => Ok(Term::Time { degree: 1 }),
            "carryover" => Ok(Term::Carryover { order: 1 }),
            "carryover:time" => Ok(Term::CarryoverTime {
                order: 1,
                degree: 1,
            }),
            _ => {
                if let Some((left, right)) = lower.split_once(':') {
                    let order = if left == "carryover" {
                        1
                    } else {
                        parse_arg(left, "carryover")?
                    };
                    let degree = if right == "time" {
                        1
                    } else {
                        parse_arg(right, "time")?
                    };
                    Ok(Term::CarryoverTime { order, degree })
                } else if lower.starts_with("time") {
                    Ok(Term::Time {
                        degree: parse_arg(&lower, "time")?,
                    })
                } else if lower.starts_with("carryover") {
                    Ok(Term::Carryover {
                        order: parse_arg(&lower, "carryover")?,
                    })
                } else {
                    Err(Error::Config(format!(
                        "unknown formula term {s:?}; expected one of intercept, period, \
                         treatment, sequence, occasion, sequence:period, baseline, time(d), \
                         carryover(u), carryover(u):time(d)"
                    )))
                }
            }
        }
    }

    /// Canonical descriptor string for configs and reports.
    pub fn descriptor(&self) -> String {
        match self {
            Term::Intercept => "intercept".into(),
            Term::Period => "period".into(),
            Term::Treatment => "treatment".into(),
            Term::Sequence => "sequence".into(),
            Term::Occasion => "occasion".into(),
            Term::SequencePeriod => "sequence:period".into(),
            Term::Baseline => "baseline".into(),
            Term::Time { degree } => format!("time({degree})"),
            Term::Carryover { order } => format!("carryover({order})"),
            Term::CarryoverTime { order, degree } => format!("carryover({order}):time({degree})"),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Term::Intercept => "intercept",
            Term::Period => "period",
            Term::Treatment => "treatment",
            Term::Sequence => "sequence",
            Term::Occasion => "occasion",
            Term::SequencePeriod => "sequence:period",
            Term::Baseline => "baseline",
            Term::Time { .. } => "time",
            Term::Carryover { .. } => "carryover",
            Term::CarryoverTime { .. } => "carryover:time",
        }
    }
}

/// Ordered list of model terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    terms: Vec<Term>,
}

impl ModelFormula {
    pub fn new(terms: Vec<Term>) -> Result<ModelFormula> {
        if terms.is_empty() {
            return Err(Error::Config("formula has no terms".into()));
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].iter().any(|u| u.kind() == t.kind()) {
                return Err(Error::Config(format!(
                    "duplicate formula term {:?}",
                    t.descriptor()
                )));
            }
        }
        Ok(ModelFormula { terms })
    }

    /// Parse an ordered list of term descriptors.
    pub fn parse<S: AsRef<str>>(descriptors: &[S]) -> Result<ModelFormula> {
        let terms = descriptors
            .iter()
            .map(|d| Term::parse(d.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        ModelFormula::new(terms)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn descriptors(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.descriptor()).collect()
    }
}

/// A dense design matrix with one label per column.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub labels: Vec<String>,
}

/// Relative tolerance for declaring a column linearly dependent.
const RANK_TOL: f64 = 1e-8;

/// Build the design matrix for `formula` over `dataset` in canonical row
/// order, then verify full column rank.
///
/// Dummy coding drops the first sorted level of each factor. Carryover
/// columns code the carried treatment with the same reference as the
/// treatment factor, so no-carryover periods and carried reference
/// treatments both map to all-zero rows; order-u columns are identically
/// zero through period u by construction. Time enters centered at its
/// within-period mean. Rank deficiency reports the offending columns in
/// formula order rather than silently dropping them.
/// Optional reference-level overrides for the categorical terms. A `None`
/// entry keeps the default reference, the first level in sorted order.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceLevels {
    pub period: Option<i64>,
    pub occasion: Option<i64>,
    pub treatment: Option<String>,
    pub sequence: Option<String>,
}

/// Move the requested reference level to the front of a sorted level list.
fn promote_reference<T: PartialEq + std::fmt::Display>(
    levels: &mut Vec<T>,
    reference: Option<&T>,
    what: &str,
) -> Result<()> {
    if let Some(r) = reference {
        let pos = levels.iter().position(|l| l == r).ok_or_else(|| {
            Error::Config(format!(
                "design: {what} reference level {r} does not occur in the data"
            ))
        })?;
        let item = levels.remove(pos);
        levels.insert(0, item);
    }
    Ok(())
}

pub fn build_design_matrix(dataset: &Dataset, formula: &ModelFormula) -> Result<DesignMatrix> {
    build_design_matrix_with(dataset, formula, &ReferenceLevels::default())
}

/// [`build_design_matrix`] with explicit reference levels.
pub fn build_design_matrix_with(
    dataset: &Dataset,
    formula: &ModelFormula,
    references: &ReferenceLevels,
) -> Result<DesignMatrix> {
    let n = dataset.n_obs();
    let rows = dataset.rows();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();

    // Sorted factor levels; the first is the reference.
    let mut treatments: Vec<&str> = rows
        .iter()
        .map(|o| o.treatment.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut sequences: Vec<&str> = rows
        .iter()
        .map(|o| o.sequence.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut period_codes = dataset.period_codes().to_vec();
    let mut occasion_codes = dataset.occasion_codes().to_vec();
    promote_reference(
        &mut treatments,
        references.treatment.as_deref().as_ref(),
        "treatment",
    )?;
    promote_reference(
        &mut sequences,
        references.sequence.as_deref().as_ref(),
        "sequence",
    )?;
    promote_reference(&mut period_codes, references.period.as_ref(), "period")?;
    promote_reference(
        &mut occasion_codes,
        references.occasion.as_ref(),
        "occasion",
    )?;

    let centered_time = |degree_needed: &str| -> Result<Vec<f64>> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (idx, o) in rows.iter().enumerate() {
            let t = o.time.ok_or_else(|| {
                Error::Config(format!(
                    "{degree_needed} requires a time value on every row; subject {:?}, \
                     period {}, occasion {} has none",
                    o.subject, o.period, o.occasion
                ))
            })?;
            let e = sums.entry(dataset.period_rank(idx)).or_insert((0.0, 0));
            e.0 += t;
            e.1 += 1;
        }
        Ok(rows
            .iter()
            .enumerate()
            .map(|(idx, o)| {
                let (s, c) = sums[&dataset.period_rank(idx)];
                o.time.unwrap() - s / c as f64
            })
            .collect())
    };

    let carryover_values = |order: usize| -> Result<Vec<Vec<Option<String>>>> {
        let layout = dataset.layout()?;
        let map = expand_carryover(&layout, order)?;
        let seq_index: BTreeMap<&str, usize> = layout
            .sequences
            .iter()
            .enumerate()
            .map(|(i, a)| (a.label.as_str(), i))
            .collect();
        Ok(rows
            .iter()
            .enumerate()
            .map(|(idx, o)| {
                let s = seq_index[o.sequence.as_str()];
                map.per_sequence[s][dataset.period_rank(idx) - 1].clone()
            })
            .collect())
    };

    for term in formula.terms() {
        match term {
            Term::Intercept => {
                columns.push(("intercept".into(), vec![1.0; n]));
            }
            Term::Period => {
                for code in period_codes.iter().skip(1) {
                    let col = rows
                        .iter()
                        .map(|o| (o.period == *code) as u8 as f64)
                        .collect();
                    columns.push((format!("period_{code}"), col));
                }
            }
            Term::Treatment => {
                for t in treatments.iter().skip(1) {
                    let col = rows
                        .iter()
                        .map(|o| (o.treatment == *t) as u8 as f64)
                        .collect();
                    columns.push((format!("treatment_{t}"), col));
                }
            }
            Term::Sequence => {
                for s in sequences.iter().skip(1) {
                    let col = rows
                        .iter()
                        .map(|o| (o.sequence == *s) as u8 as f64)
                        .collect();
                    columns.push((format!("seq_{s}"), col));
                }
            }
            Term::Occasion => {
                for code in occasion_codes.iter().skip(1) {
                    let col = rows
                        .iter()
                        .map(|o| (o.occasion == *code) as u8 as f64)
                        .collect();
                    columns.push((format!("occ_{code}"), col));
                }
            }
            Term::SequencePeriod => {
                for s in sequences.iter().skip(1) {
                    for code in period_codes.iter().skip(1) {
                        let col = rows
                            .iter()
                            .map(|o| (o.sequence == *s && o.period == *code) as u8 as f64)
                            .collect();
                        columns.push((format!("seq_{s}:period_{code}"), col));
                    }
                }
            }
            Term::Baseline => {
                let col = rows
                    .iter()
                    .map(|o| {
                        o.baseline.ok_or_else(|| {
                            Error::Config(format!(
                                "baseline term requires a baseline value on every row; \
                                 subject {:?}, period {}, occasion {} has none",
                                o.subject, o.period, o.occasion
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                columns.push(("baseline".into(), col));
            }
            Term::Time { degree } => {
                let t = centered_time("a time term")?;
                for d in 1..=*degree {
                    let label = if d == 1 {
                        "time".into()
                    } else {
                        format!("time{d}")
                    };
                    columns.push((label, t.iter().map(|v| v.powi(d as i32)).collect()));
                }
            }
            Term::Carryover { order } => {
                let carried = carryover_values(*order)?;
                for u in 1..=*order {
                    for trt in treatments.iter().skip(1) {
                        let col = carried
                            .iter()
                            .map(|per_order| {
                                (per_order[u - 1].as_deref() == Some(*trt)) as u8 as f64
                            })
                            .collect();
                        let label = if u == 1 {
                            format!("carry_{trt}")
                        } else {
                            format!("carry{u}_{trt}")
                        };
                        columns.push((label, col));
                    }
                }
            }
            Term::CarryoverTime { order, degree } => {
                let carried = carryover_values(*order)?;
                let t = centered_time("a carryover:time term")?;
                for u in 1..=*order {
                    for trt in treatments.iter().skip(1) {
                        for d in 1..=*degree {
                            let col = carried
                                .iter()
                                .zip(&t)
                                .map(|(per_order, tv)| {
                                    if per_order[u - 1].as_deref() == Some(*trt) {
                                        tv.powi(d as i32)
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            let stem = if u == 1 {
                                format!("carry_{trt}")
                            } else {
                                format!("carry{u}_{trt}")
                            };
                            let label = if d == 1 {
                                format!("{stem}:time")
                            } else {
                                format!("{stem}:time{d}")
                            };
                            columns.push((label, col));
                        }
                    }
                }
            }
        }
    }

    let p = columns.len();
    let labels: Vec<String> = columns.iter().map(|(l, _)| l.clone()).collect();
    let x = DMatrix::from_fn(n, p, |i, j| columns[j].1[i]);
    check_full_rank(&x, &labels)?;
    Ok(DesignMatrix { x, labels })
}

/// Sequential Gram-Schmidt rank check that names every column falling inside
/// the span of the columns before it.
fn check_full_rank(x: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut aliased = Vec::new();
    for (j, label) in labels.iter().enumerate() {
        let col = x.column(j).into_owned();
        let orig_norm = col.norm();
        if orig_norm == 0.0 {
            aliased.push(label.clone());
            continue;
        }
        let mut v = col;
        // two orthogonalization passes keep the residual trustworthy
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        if v.norm() <= RANK_TOL * orig_norm {
            aliased.push(label.clone());
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    if aliased.is_empty() {
        Ok(())
    } else {
        Err(Error::Rank { aliased })
    }
}
