use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise levels stored from largest to smallest, so `levels()[0]` is
/// `sigma_max`. Index `i` in the ascending sense (`sigma(0)` is the
/// smallest level) is available through [`SigmaSchedule::sigma`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct SigmaSchedule {
    levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    levels: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for SigmaSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        Self::from_levels(r.levels)
    }
}

impl From<SigmaSchedule> for ScheduleRepr {
    fn from(s: SigmaSchedule) -> Self {
        Self { levels: s.levels }
    }
}

impl SigmaSchedule {
    /// Accepts any strictly decreasing sequence of positive finite levels.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("schedule needs at least one level"));
        }
        if levels.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("schedule levels must be positive and finite"));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("schedule levels must be strictly decreasing"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `sigma_i` with `sigma_0` the smallest level.
    pub fn sigma(&self, i: usize) -> f64 {
        self.levels[self.levels.len() - 1 - i]
    }

    pub fn max(&self) -> f64 {
        self.levels[0]
    }

    pub fn min(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }
}

/// Geometric schedule of `n` levels from `sigma_max` down to `sigma_min`.
pub fn make_schedule(n: usize, sigma_min: f64, sigma_max: f64) -> Result<SigmaSchedule> {
    if n == 0 {
        return Err(Error::invalid("schedule needs at least one level"));
    }
    if !(sigma_min.is_finite() && sigma_max.is_finite() && 0.0 < sigma_min && sigma_min < sigma_max) {
        return Err(Error::invalid(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if n == 1 {
        return SigmaSchedule::from_levels(vec![sigma_max]);
    }
    let ratio = sigma_min / sigma_max;
    let last = (n - 1) as f64;
    let mut levels: Vec<f64> = (0..n).map(|k| sigma_max * ratio.powf(k as f64 / last)).collect();
    // pin the endpoints against powf rounding
    levels[n - 1] = sigma_min;
    SigmaSchedule::from_levels(levels)
}
