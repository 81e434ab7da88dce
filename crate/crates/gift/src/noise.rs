//! Seeded measurement noise for simulated sinograms.

use std::fmt;
use std::str::FromStr;

use gift_core::Sinogram;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

/// Attenuation-to-exponent factor used by the transmission model when none is
/// given. Sinogram values are line integrals in grid units, so a 128 px path
/// through unit intensity becomes `exp(-2.56)`.
pub const DEFAULT_POISSON_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    None,
    /// Additive white noise with standard deviation `sigma`.
    Gaussian { sigma: f64 },
    /// Photon counting: `I0 * exp(-scale * p)` incident counts, re-logged.
    Poisson { incident: f64, scale: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("gaussian sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("poisson incident count must be finite and > 0, got {0}")]
    BadIncident(f64),
    #[error("poisson scale must be finite and > 0, got {0}")]
    BadScale(f64),
    #[error("unrecognized noise spec `{0}` (expected none, gaussian:SIGMA or poisson:I0[:SCALE])")]
    BadSpec(String),
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), NoiseError> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian { sigma } => {
                if sigma.is_finite() && sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(NoiseError::BadSigma(sigma))
                }
            }
            NoiseModel::Poisson { incident, scale } => {
                if !(incident.is_finite() && incident > 0.0) {
                    Err(NoiseError::BadIncident(incident))
                } else if !(scale.is_finite() && scale > 0.0) {
                    Err(NoiseError::BadScale(scale))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl FromStr for NoiseModel {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NoiseError::BadSpec(s.to_string());
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let mut parts = s.trim().split(':');
        let model = match parts.next().map(str::to_ascii_lowercase).as_deref() {
            Some("none") => NoiseModel::None,
            Some("gaussian") => NoiseModel::Gaussian { sigma: num(parts.next().ok_or_else(bad)?)? },
            Some("poisson") => {
                let incident = num(parts.next().ok_or_else(bad)?)?;
                let scale = match parts.next() {
                    Some(t) => num(t)?,
                    None => DEFAULT_POISSON_SCALE,
                };
                NoiseModel::Poisson { incident, scale }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        model.validate()?;
        Ok(model)
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::None => write!(f, "none"),
            NoiseModel::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            NoiseModel::Poisson { incident, scale } => write!(f, "poisson:{incident}:{scale}"),
        }
    }
}

pub fn add_noise(sino: &Sinogram, model: NoiseModel, seed: u64) -> Result<Sinogram, NoiseError> {
    model.validate()?;
    let mut out = sino.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match model {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|_| NoiseError::BadSigma(sigma))?;
                for v in out.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        NoiseModel::Poisson { incident, scale } => {
            for v in out.data_mut() {
                let mean = incident * (-scale * *v).exp();
                let counts = if mean > 0.0 {
                    Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(mean)
                } else {
                    0.0
                };
                // A zero count would log to infinity; treat it as one photon.
                *v = -(counts.max(1.0) / incident).ln() / scale;
            }
        }
    }
    Ok(out)
}
