//! Shape classification of NDCG-versus-dimension curves.

use crate::error::{Result, SweepError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveVariant {
    Logarithmic,
    SinglePeak,
    DoublePeak,
    Other,
}

impl CurveVariant {
    pub fn name(&self) -> &'static str {
        match self {
            CurveVariant::Logarithmic => "logarithmic",
            CurveVariant::SinglePeak => "single-peak",
            CurveVariant::DoublePeak => "double-peak",
            CurveVariant::Other => "other",
        }
    }
}

impl std::fmt::Display for CurveVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    /// Minimum peak prominence as a fraction of the curve's range.
    pub prominence: f64,
    /// Minimum R² of the `a + b·ln(dim)` fit.
    pub min_r2: f64,
    /// Curves with fewer points are not smoothed.
    pub smooth_min_points: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            prominence: 0.02,
            min_r2: 0.9,
            smooth_min_points: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveEvidence {
    /// Dimensions of the retained interior maxima.
    pub peaks: Vec<usize>,
    /// Prominence of each retained peak, in NDCG units.
    pub prominences: Vec<f64>,
    pub r_squared: f64,
    pub log_slope: f64,
    pub smoothed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveClass {
    pub variant: CurveVariant,
    pub evidence: CurveEvidence,
}

/// Centered 3-point average; the endpoints average their two-point window.
pub fn moving_average(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Topographic prominence of each interior local maximum, as
/// `(index, prominence)`. On a plateau only the first index counts.
pub fn interior_peaks(values: &[f64]) -> Vec<(usize, f64)> {
    let n = values.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = values[i];
        if !(v > values[i - 1]) {
            continue;
        }
        // Walk right across a plateau; it must then descend.
        let mut j = i;
        while j + 1 < n && values[j + 1] == v {
            j += 1;
        }
        if j + 1 >= n || values[j + 1] > v {
            continue;
        }
        let mut left_min = v;
        for &x in values[..i].iter().rev() {
            if x > v {
                break;
            }
            left_min = left_min.min(x);
        }
        let mut right_min = v;
        for &x in &values[j + 1..] {
            if x > v {
                break;
            }
            right_min = right_min.min(x);
        }
        out.push((i, v - left_min.max(right_min)));
    }
    out
}

/// Least-squares `a + b·ln(x)`; returns `(a, b, R²)`. A constant curve
/// gets R² = 0.
pub fn log_fit(points: &[(usize, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(d, _)| (d as f64).ln()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mean_x) * (p.1 - mean_y)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = mean_y - b * mean_x;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(points).map(|(x, p)| (p.1 - a - b * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    (a, b, r2)
}

/// Classifies `(dim, mean NDCG)` points given in increasing dimension.
pub fn classify_curve(points: &[(usize, f64)], opts: &ClassifyOptions) -> Result<CurveClass> {
    if points.len() < 3 {
        return Err(SweepError::InsufficientData(points.len()));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) || points[0].0 == 0 {
        return Err(SweepError::Config("dimensions must be positive and strictly increasing".into()));
    }
    if points.iter().any(|p| !p.1.is_finite()) {
        return Err(SweepError::Config("curve values must be finite".into()));
    }
    let raw: Vec<f64> = points.iter().map(|p| p.1).collect();
    let smoothed = points.len() >= opts.smooth_min_points;
    let values = if smoothed { moving_average(&raw) } else { raw };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = opts.prominence * (hi - lo);
    let kept: Vec<(usize, f64)> = if hi > lo {
        interior_peaks(&values).into_iter().filter(|&(_, p)| p >= threshold).collect()
    } else {
        Vec::new()
    };
    let (_, slope, r2) = log_fit(points);
    let variant = match kept.len() {
        0 if r2 >= opts.min_r2 && slope > 0.0 => CurveVariant::Logarithmic,
        1 => CurveVariant::SinglePeak,
        2 => CurveVariant::DoublePeak,
        _ => CurveVariant::Other,
    };
    Ok(CurveClass {
        variant,
        evidence: CurveEvidence {
            peaks: kept.iter().map(|&(i, _)| points[i].0).collect(),
            prominences: kept.iter().map(|&(_, p)| p).collect(),
            r_squared: r2,
            log_slope: slope,
            smoothed,
        },
    })
}
