//! Time-dependent boundary signals: constants, saw-tooth ramps, and
//! tabulated data with linear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar signal of time used for boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    /// Constant value.
    Constant {
        /// The value.
        value: f64,
    },
    /// Saw-tooth ramp with unit slope:
    /// `base + t` for `t < rise_until`, then `base + (fall_until − t)` for
    /// `t < fall_until`, then `base`.
    SawTooth {
        /// Offset value outside the ramp.
        base: f64,
        /// End of the rising flank.
        rise_until: f64,
        /// End of the falling flank.
        fall_until: f64,
    },
    /// Tabulated signal with linear interpolation, clamped at both ends.
    Table {
        /// Strictly increasing sample times.
        times: Vec<f64>,
        /// Sample values (same length as `times`).
        values: Vec<f64>,
    },
}

impl Signal {
    /// Validates internal consistency (table monotonicity and lengths,
    /// saw-tooth flank ordering).
    pub fn validate(&self) -> Result<()> {
        match self {
            Signal::Constant { .. } => Ok(()),
            Signal::SawTooth { rise_until, fall_until, .. } => {
                if !(*rise_until > 0.0 && fall_until > rise_until) {
                    return Err(Error::InvalidConfig(format!(
                        "saw-tooth flanks must satisfy 0 < rise_until < fall_until, \
                         got ({rise_until}, {fall_until})"
                    )));
                }
                Ok(())
            }
            Signal::Table { times, values } => {
                if times.len() != values.len() || times.is_empty() {
                    return Err(Error::InvalidConfig(
                        "table signal needs equally many (≥1) times and values".into(),
                    ));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidConfig(
                        "table signal times must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Evaluates the signal at time `t`.
    #[must_use]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Signal::Constant { value } => *value,
            Signal::SawTooth { base, rise_until, fall_until } => {
                if t < 0.0 {
                    *base
                } else if t < *rise_until {
                    base + t
                } else if t < *fall_until {
                    base + (fall_until - rise_until) - (t - rise_until)
                } else {
                    *base
                }
            }
            Signal::Table { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let k = times.partition_point(|&s| s <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }
}
