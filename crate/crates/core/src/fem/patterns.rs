use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Adjacent,
    Trigonometric,
    Custom,
}

/// `K × L` matrix of injected electrode currents (mA); row `k` is pattern `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentPatternSet {
    currents: DMatrix<f64>,
    kind: PatternKind,
    amplitude: f64,
}

impl CurrentPatternSet {
    /// Arbitrary patterns; every row must sum to zero.
    pub fn custom(currents: DMatrix<f64>) -> Result<Self> {
        let amplitude = currents.amax();
        for (k, row) in currents.row_iter().enumerate() {
            let s: f64 = row.sum();
            if s.abs() > 1e-12 * amplitude.max(1.0) * currents.ncols() as f64 {
                return Err(Error::Config(format!(
                    "current pattern {k} does not conserve charge (sum {s:e})"
                )));
            }
        }
        Ok(Self {
            currents,
            kind: PatternKind::Custom,
            amplitude,
        })
    }

    pub fn currents(&self) -> &DMatrix<f64> {
        &self.currents
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn n_patterns(&self) -> usize {
        self.currents.nrows()
    }

    pub fn n_electrodes(&self) -> usize {
        self.currents.ncols()
    }

    /// Same patterns with every current multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            currents: &self.currents * c,
            kind: self.kind,
            amplitude: self.amplitude * c,
        }
    }
}

/// `L − 1` adjacent-pair patterns: `+amplitude` on electrode `k`,
/// `−amplitude` on electrode `k + 1`.
pub fn adjacent_patterns(n_electrodes: usize, amplitude: f64) -> Result<CurrentPatternSet> {
    if n_electrodes < 3 {
        return Err(Error::Config(format!(
            "adjacent patterns need at least 3 electrodes, got {n_electrodes}"
        )));
    }
    let mut currents = DMatrix::zeros(n_electrodes - 1, n_electrodes);
    for k in 0..n_electrodes - 1 {
        currents[(k, k)] = amplitude;
        currents[(k, k + 1)] = -amplitude;
    }
    Ok(CurrentPatternSet {
        currents,
        kind: PatternKind::Adjacent,
        amplitude,
    })
}

/// `L − 1` trigonometric patterns, `A cos(kθ_ℓ)` for `k = 1..=L/2` followed by
/// `A sin((k − L/2)θ_ℓ)`, with `θ_ℓ = 2πℓ/L` and zero-based `ℓ`.
pub fn trig_patterns(n_electrodes: usize, amplitude: f64) -> Result<CurrentPatternSet> {
    let l = n_electrodes;
    if l < 4 || l % 2 != 0 {
        return Err(Error::Config(format!(
            "trigonometric patterns need an even electrode count >= 4, got {l}"
        )));
    }
    let half = l / 2;
    let mut currents = DMatrix::zeros(l - 1, l);
    for row in 0..l - 1 {
        let k = row + 1;
        for e in 0..l {
            let th = 2.0 * PI * e as f64 / l as f64;
            currents[(row, e)] = if k <= half {
                amplitude * (k as f64 * th).cos()
            } else {
                amplitude * ((k - half) as f64 * th).sin()
            };
        }
    }
    // Exact zeros where the cosine/sine vanish analytically.
    currents.iter_mut().for_each(|v| {
        if v.abs() < 1e-15 * amplitude.abs() {
            *v = 0.0
        }
    });
    Ok(CurrentPatternSet {
        currents,
        kind: PatternKind::Trigonometric,
        amplitude,
    })
}
