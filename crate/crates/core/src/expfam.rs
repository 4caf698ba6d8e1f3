//! Exponential-family variance functions, canonical links, and
//! quasi-likelihood kernels.
//!
//! The engine only needs four ingredients per family: the link g, its
//! inverse, the derivative dμ/dη, and the variance function V(μ). The
//! quasi-likelihood Q(y; μ, φ) with ∂Q/∂μ = (y − μ)/(φ V(μ)) is used by the
//! QIC structure-selection criterion. Linear predictors are clamped to
//! |η| ≤ 30 before exponentiation so extreme working values cannot overflow.

use crate::error::{Error, Result};

/// Clamp bound applied to η before `exp` in the log and logit inverses.
pub const ETA_CLAMP: f64 = 30.0;

/// Response family with its canonical link.
///
/// Binomial is implemented for Bernoulli responses (y ∈ {0, 1}).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Binomial,
    Gamma,
}

impl Family {
    /// Parse a family name as it appears in CLI configs.
    pub fn parse(name: &str) -> Result<Family> {
        match name.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "binomial" | "bernoulli" => Ok(Family::Binomial),
            "gamma" => Ok(Family::Gamma),
            other => Err(Error::Config(format!(
                "unknown family {other:?}; expected one of gaussian, poisson, binomial, gamma"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
            Family::Gamma => "gamma",
        }
    }

    /// Name of the canonical link attached to this family.
    pub fn link_name(&self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Poisson => "log",
            Family::Binomial => "logit",
            Family::Gamma => "inverse",
        }
    }

    fn domain_err(&self, what: &str, value: f64) -> Error {
        Error::Domain {
            context: self.name().to_string(),
            what: what.to_string(),
            value,
        }
    }

    /// Check that μ lies in the open mean domain of the family.
    fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => mu.is_finite(),
            Family::Poisson | Family::Gamma => mu.is_finite() && mu > 0.0,
            Family::Binomial => mu.is_finite() && mu > 0.0 && mu < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(self.domain_err("mean", mu))
        }
    }

    /// Check that y lies in the response domain of the family.
    pub(crate) fn check_response(&self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0,
            Family::Binomial => y == 0.0 || y == 1.0,
            Family::Gamma => y.is_finite() && y > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(self.domain_err("response", y))
        }
    }

    /// Canonical link η = g(μ).
    pub fn link(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Binomial => (mu / (1.0 - mu)).ln(),
            Family::Gamma => 1.0 / mu,
        })
    }

    /// Inverse link μ = g⁻¹(η) with overflow protection.
    pub fn inverse_link(&self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(self.domain_err("linear predictor", eta));
        }
        match self {
            Family::Gaussian => Ok(eta),
            Family::Poisson => Ok(eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()),
            Family::Binomial => {
                let e = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
                Ok(1.0 / (1.0 + (-e).exp()))
            }
            Family::Gamma => {
                if eta == 0.0 {
                    Err(self.domain_err("linear predictor", eta))
                } else {
                    Ok(1.0 / eta)
                }
            }
        }
    }

    /// Derivative dμ/dη evaluated at η, with the same clamping as
    /// [`Family::inverse_link`].
    pub fn mean_derivative(&self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(self.domain_err("linear predictor", eta));
        }
        match self {
            Family::Gaussian => Ok(1.0),
            Family::Poisson => Ok(eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()),
            Family::Binomial => {
                let p = self.inverse_link(eta)?;
                Ok(p * (1.0 - p))
            }
            Family::Gamma => {
                if eta == 0.0 {
                    Err(self.domain_err("linear predictor", eta))
                } else {
                    Ok(-1.0 / (eta * eta))
                }
            }
        }
    }

    /// Variance function V(μ).
    pub fn variance_function(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Binomial => mu * (1.0 - mu),
            Family::Gamma => mu * mu,
        })
    }

    /// Quasi-likelihood kernel Q(y; μ, φ) satisfying ∂Q/∂μ = (y − μ)/(φ V(μ)).
    ///
    /// Additive constants in y are dropped; the Poisson kernel uses the
    /// convention y·ln μ = 0 when y = 0.
    pub fn quasi_likelihood(&self, y: f64, mu: f64, phi: f64) -> Result<f64> {
        if !phi.is_finite() || phi <= 0.0 {
            return Err(self.domain_err("dispersion", phi));
        }
        self.check_response(y)?;
        self.check_mean(mu)?;
        Ok(match self {
            Family::Gaussian => -(y - mu).powi(2) / (2.0 * phi),
            Family::Poisson => {
                let ylogmu = if y == 0.0 { 0.0 } else { y * mu.ln() };
                (ylogmu - mu) / phi
            }
            Family::Binomial => (y * (mu / (1.0 - mu)).ln() + (1.0 - mu).ln()) / phi,
            Family::Gamma => (-y / mu - mu.ln()) / phi,
        })
    }
}
