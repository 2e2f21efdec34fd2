//! Class-K maps for barrier decay.
//!
//! [`Alpha`] is the continuous-time rate used by the baseline barrier
//! filters. [`ClassKMap`] is the one-step map `beta` used by the discrete-time
//! Q-CBF constraint, either a linear slope or the map induced by integrating
//! `dy/dt = -alpha(y)` over one sampling period.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Fixed RK4 substeps used for the induced map.
pub const INDUCED_SUBSTEPS: usize = 32;

/// Linear class-K function `alpha(r) = rate * r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alpha {
    pub rate: f64,
}

impl Default for Alpha {
    fn default() -> Self {
        Self { rate: 1.0 }
    }
}

impl Alpha {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(config_err!("alpha rate must be positive, got {rate}"));
        }
        Ok(Self { rate })
    }

    #[inline]
    pub fn apply(&self, r: f64) -> f64 {
        self.rate * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassKMap {
    /// `beta(r) = slope * r` with `slope` in (0, 1].
    Linear { slope: f64 },
    /// `beta(r) = y(dt)` where `dy/dt = -alpha(y)`, `y(0) = r`.
    Induced { alpha: Alpha, dt: f64 },
}

impl Default for ClassKMap {
    fn default() -> Self {
        ClassKMap::Linear { slope: 0.9 }
    }
}

impl ClassKMap {
    pub fn linear(slope: f64) -> Result<Self> {
        let m = ClassKMap::Linear { slope };
        m.validate()?;
        Ok(m)
    }

    pub fn induced(alpha: Alpha, dt: f64) -> Result<Self> {
        let m = ClassKMap::Induced { alpha, dt };
        m.validate()?;
        Ok(m)
    }

    /// Checks the parameters that make the map class-K with `beta(r) <= r`.
    pub fn validate(&self) -> Result<()> {
        match *self {
            ClassKMap::Linear { slope } => {
                if !(slope > 0.0 && slope <= 1.0) {
                    return Err(config_err!("linear beta slope must lie in (0, 1], got {slope}"));
                }
            }
            ClassKMap::Induced { alpha, dt } => {
                Alpha::new(alpha.rate)?;
                if !(dt.is_finite() && dt > 0.0) {
                    return Err(config_err!("induced beta needs a positive timestep, got {dt}"));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, r: f64) -> f64 {
        match *self {
            ClassKMap::Linear { slope } => slope * r,
            ClassKMap::Induced { alpha, dt } => {
                let f = |y: f64| -alpha.apply(y);
                let h = dt / INDUCED_SUBSTEPS as f64;
                let mut y = r;
                for _ in 0..INDUCED_SUBSTEPS {
                    let k1 = f(y);
                    let k2 = f(y + 0.5 * h * k1);
                    let k3 = f(y + 0.5 * h * k2);
                    let k4 = f(y + h * k3);
                    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                y
            }
        }
    }
}
