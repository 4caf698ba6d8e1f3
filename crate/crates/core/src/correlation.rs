//! Working correlation structures for repeated measures nested in periods.
//!
//! Observations on one subject are ordered period-major: the L occasions of
//! period 1, then the L occasions of period 2, and so on. Under that ordering
//! a separable working correlation is the Kronecker product Ψ ⊗ R₁ of a P×P
//! between-period matrix Ψ and an L×L within-period matrix R₁, and its
//! inverse factors as Ψ⁻¹ ⊗ R₁⁻¹, which is what [`factored_inverse`]
//! exploits: two small eigendecompositions instead of one of size PL.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetry / unit-diagonal tolerance accepted by [`CorrMatrix::from_matrix`].
const VALIDATE_TOL: f64 = 1e-12;
/// Eigenvalues above this floor count as positive when inverting factors.
const INVERT_FLOOR: f64 = 1e-10;
/// Smallest eigenvalue tolerated before projection declares a matrix non-PSD.
const PSD_TOL: f64 = -1e-8;
/// Floor applied to eigenvalues by [`project_to_psd`].
const CLIP_FLOOR: f64 = 1e-8;

/// A validated correlation matrix: square, symmetric, unit diagonal, all
/// entries in [−1, 1].
///
/// Construction goes through [`CorrMatrix::from_matrix`], which symmetrizes
/// and pins the diagonal exactly after checking the input is within
/// tolerance, so downstream code can rely on the invariants bit-for-bit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorrMatrix {
    m: DMatrix<f64>,
}

impl CorrMatrix {
    /// Validate and wrap a candidate correlation matrix.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<CorrMatrix> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Param(format!(
                "correlation matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in 0..d {
                let v = m[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Param(format!("non-finite entry at ({i}, {j})")));
                }
                if v.abs() > 1.0 + VALIDATE_TOL {
                    return Err(Error::Param(format!(
                        "entry {v} at ({i}, {j}) outside [-1, 1]"
                    )));
                }
                if (m[(i, j)] - m[(j, i)]).abs() > VALIDATE_TOL {
                    return Err(Error::Param(format!(
                        "asymmetry at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
            if (m[(i, i)] - 1.0).abs() > VALIDATE_TOL {
                return Err(Error::Param(format!(
                    "diagonal entry {} at ({i}, {i}) is not 1",
                    m[(i, i)]
                )));
            }
        }
        Ok(Self::from_valid(m))
    }

    /// Wrap a matrix already known to satisfy the invariants up to roundoff,
    /// making symmetry and the unit diagonal exact.
    fn from_valid(mut m: DMatrix<f64>) -> CorrMatrix {
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let v = (0.5 * (m[(i, j)] + m[(j, i)])).clamp(-1.0, 1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            m[(i, i)] = 1.0;
        }
        CorrMatrix { m }
    }

    /// Identity correlation of dimension `d`.
    pub fn identity(d: usize) -> CorrMatrix {
        CorrMatrix {
            m: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    /// Smallest eigenvalue, used by PSD checks and diagnostics.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.m.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// The within-period correlation families a Kronecker structure can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WithinKind {
    Independence,
    Exchangeable,
    Ar1,
}

/// A within-period factor: kind plus its single correlation parameter
/// (ignored for independence).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WithinSpec {
    pub kind: WithinKind,
    pub alpha: f64,
}

impl WithinSpec {
    pub fn independence() -> WithinSpec {
        WithinSpec {
            kind: WithinKind::Independence,
            alpha: 0.0,
        }
    }

    pub fn exchangeable(alpha: f64) -> WithinSpec {
        WithinSpec {
            kind: WithinKind::Exchangeable,
            alpha,
        }
    }

    pub fn ar1(alpha: f64) -> WithinSpec {
        WithinSpec {
            kind: WithinKind::Ar1,
            alpha,
        }
    }

    /// Materialize the L×L factor.
    pub fn build(&self, occasions: usize) -> Result<CorrMatrix> {
        if occasions == 0 {
            return Err(Error::Param(
                "within-period dimension must be positive".into(),
            ));
        }
        match self.kind {
            WithinKind::Independence => Ok(CorrMatrix::identity(occasions)),
            WithinKind::Exchangeable => exchangeable_block(self.alpha, occasions),
            WithinKind::Ar1 => ar1_block(self.alpha, occasions),
        }
    }
}

fn ar1_block(alpha: f64, d: usize) -> Result<CorrMatrix> {
    if !alpha.is_finite() || alpha.abs() >= 1.0 {
        return Err(Error::Param(format!(
            "AR(1) parameter {alpha} outside (-1, 1)"
        )));
    }
    let m = DMatrix::from_fn(d, d, |i, j| alpha.powi((i as i32 - j as i32).abs()));
    Ok(CorrMatrix::from_valid(m))
}

fn exchangeable_block(alpha: f64, d: usize) -> Result<CorrMatrix> {
    let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
    if !alpha.is_finite() || alpha <= lower || alpha >= 1.0 {
        return Err(Error::Param(format!(
            "exchangeable parameter {alpha} outside ({lower}, 1) for dimension {d}"
        )));
    }
    let m = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { alpha });
    Ok(CorrMatrix::from_valid(m))
}

/// A working correlation structure over the PL observations of one subject.
///
/// `Exchangeable`, `Ar1`, and `Unstructured` apply to the full PL block;
/// `Kronecker` separates between-period and within-period correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable(f64),
    Ar1(f64),
    /// Strictly-lower-triangle entries in row-major order,
    /// (1,0), (2,0), (2,1), (3,0), ...
    Unstructured(Vec<f64>),
    Kronecker {
        between: CorrMatrix,
        within: WithinSpec,
    },
}

impl WorkingCorrelation {
    /// Materialize the PL×PL working correlation for `periods` periods with
    /// `occasions` repeated measures each.
    pub fn build(&self, periods: usize, occasions: usize) -> Result<CorrMatrix> {
        if periods == 0 || occasions == 0 {
            return Err(Error::Param(format!(
                "dimensions must be positive, got P={periods}, L={occasions}"
            )));
        }
        let d = periods * occasions;
        match self {
            WorkingCorrelation::Independence => Ok(CorrMatrix::identity(d)),
            WorkingCorrelation::Exchangeable(alpha) => exchangeable_block(*alpha, d),
            WorkingCorrelation::Ar1(alpha) => ar1_block(*alpha, d),
            WorkingCorrelation::Unstructured(params) => unstructured_block(params, d),
            WorkingCorrelation::Kronecker { between, within } => {
                if between.dim() != periods {
                    return Err(Error::Param(format!(
                        "between-period factor is {}x{} but the design has {periods} periods",
                        between.dim(),
                        between.dim()
                    )));
                }
                let min_eig = between.min_eigenvalue();
                if min_eig < PSD_TOL {
                    return Err(Error::Psd {
                        module: "correlation",
                        min_eig,
                    });
                }
                let r1 = within.build(occasions)?;
                Ok(kronecker(between, &r1))
            }
        }
    }
}

fn unstructured_block(params: &[f64], d: usize) -> Result<CorrMatrix> {
    let expected = d * (d - 1) / 2;
    if params.len() != expected {
        return Err(Error::Param(format!(
            "unstructured correlation of dimension {d} needs {expected} parameters, got {}",
            params.len()
        )));
    }
    for (k, &v) in params.iter().enumerate() {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(Error::Param(format!(
                "unstructured parameter {v} at position {k} outside [-1, 1]"
            )));
        }
    }
    let mut m = DMatrix::identity(d, d);
    let mut k = 0;
    for i in 1..d {
        for j in 0..i {
            m[(i, j)] = params[k];
            m[(j, i)] = params[k];
            k += 1;
        }
    }
    let built = CorrMatrix::from_valid(m);
    let min_eig = built.min_eigenvalue();
    if min_eig < PSD_TOL {
        return Err(Error::Psd {
            module: "correlation",
            min_eig,
        });
    }
    Ok(built)
}

/// Kronecker product of two correlation matrices.
///
/// The result is again a valid correlation matrix: entries are products of
/// entries bounded by one, and the diagonal is exactly 1·1.
pub fn kronecker(a: &CorrMatrix, b: &CorrMatrix) -> CorrMatrix {
    CorrMatrix {
        m: a.as_matrix().kronecker(b.as_matrix()),
    }
}

/// Inverse of Ψ ⊗ R₁ computed factor-wise as Ψ⁻¹ ⊗ R₁⁻¹.
///
/// Each factor is eigendecomposed; a factor whose smallest eigenvalue is at
/// or below 1e-10 is reported as singular rather than inverted.
pub fn factored_inverse(between: &CorrMatrix, within: &CorrMatrix) -> Result<DMatrix<f64>> {
    let inv_b = invert_spd(between, "between-period factor")?;
    let inv_w = invert_spd(within, "within-period factor")?;
    Ok(inv_b.kronecker(&inv_w))
}

fn invert_spd(c: &CorrMatrix, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c.as_matrix().clone());
    let min_eig = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= INVERT_FLOOR {
        return Err(Error::Singular {
            module: "correlation",
            what: format!("{what} (min eigenvalue {min_eig:.3e})"),
        });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let mut inv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    // The reconstruction is symmetric up to roundoff; make it exact so the
    // Kronecker product of inverses is too.
    let d = inv.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    Ok(inv)
}

/// Project a symmetric matrix to the nearest-in-spirit valid correlation
/// matrix: symmetrize, clip eigenvalues at 1e-8, rescale to unit diagonal.
///
/// Matrices that are already PSD with unit diagonal pass through unchanged
/// up to roundoff; the congruence rescaling preserves positive
/// semidefiniteness, so the result is always a valid [`CorrMatrix`].
pub fn project_to_psd(m: &DMatrix<f64>) -> Result<CorrMatrix> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Param(format!(
            "projection input must be square and nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Param(
            "projection input has non-finite entries".into(),
        ));
    }
    let sym = 0.5 * (m + m.transpose());
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < CLIP_FLOOR {
            *v = CLIP_FLOOR;
        }
    }
    let a =
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues) * eig.eigenvectors.transpose();
    let d = a.nrows();
    let scale: Vec<f64> = (0..d).map(|i| a[(i, i)].sqrt()).collect();
    let rescaled = DMatrix::from_fn(d, d, |i, j| a[(i, j)] / (scale[i] * scale[j]));
    Ok(CorrMatrix::from_valid(rescaled))
}
