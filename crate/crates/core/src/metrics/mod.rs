//! Regression, agreement and overlap metrics.

mod overlap;

use std::path::Path;

pub use overlap::{boundary, dice, surface_dice, DEFAULT_TOLERANCE_MM};

use crate::io::{format_sig9, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("series lengths differ: {predictions} predictions vs {references} references")]
    LengthMismatch {
        predictions: usize,
        references: usize,
    },
    #[error("empty series")]
    EmptySeries,
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("mask spacings differ: {0:?} vs {1:?}")]
    SpacingMismatch([f64; 3], [f64; 3]),
    #[error("negative surface tolerance {0}")]
    NegativeTolerance(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Paired predictions and references of equal, nonzero length.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSeries {
    predictions: Vec<f64>,
    references: Vec<f64>,
}

impl PairedSeries {
    pub fn new(predictions: Vec<f64>, references: Vec<f64>) -> Result<Self> {
        if predictions.len() != references.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                references: references.len(),
            });
        }
        if predictions.is_empty() {
            return Err(MetricsError::EmptySeries);
        }
        if predictions
            .iter()
            .chain(&references)
            .any(|v| !v.is_finite())
        {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self {
            predictions,
            references,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn references(&self) -> &[f64] {
        &self.references
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    fn diffs(&self) -> impl Iterator<Item = f64> + '_ {
        self.predictions
            .iter()
            .zip(&self.references)
            .map(|(p, r)| p - r)
    }
}

pub fn mae(series: &PairedSeries) -> f64 {
    series.diffs().map(f64::abs).sum::<f64>() / series.len() as f64
}

pub fn rmse(series: &PairedSeries) -> f64 {
    (series.diffs().map(|d| d * d).sum::<f64>() / series.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation of predictions against references.
pub fn pearson_r(series: &PairedSeries) -> Result<f64> {
    let (x, y) = (series.predictions(), series.references());
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Limits-of-agreement factor (normal approximation).
pub const LOA_FACTOR: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Agreement statistics on `prediction - reference` differences (sample SD).
pub fn bland_altman(series: &PairedSeries) -> BlandAltman {
    let diffs: Vec<f64> = series.diffs().collect();
    let mean_diff = mean(&diffs);
    let sd_diff = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    BlandAltman {
        mean_diff,
        sd_diff,
        loa_low: mean_diff - LOA_FACTOR * sd_diff,
        loa_high: mean_diff + LOA_FACTOR * sd_diff,
    }
}

/// Ordinary least-squares line `prediction = intercept + slope * reference`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearFit {
    Line {
        slope: f64,
        intercept: f64,
    },
    /// All references equal: the slope is undefined.
    Degenerate,
}

pub fn least_squares(series: &PairedSeries) -> LinearFit {
    let (x, y) = (series.references(), series.predictions());
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return LinearFit::Degenerate;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    LinearFit::Line {
        slope,
        intercept: my - slope * mx,
    }
}

/// Header of the scatter CSV.
pub const SCATTER_HEADER: &str = "kind,reference,prediction,slope,intercept";

/// Renders the scatter CSV: one `point` row per pair and a final `fit` row.
pub fn scatter_csv(series: &PairedSeries) -> String {
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for (r, p) in series.references().iter().zip(series.predictions()) {
        out.push_str(&format!(
            "point,{},{},,\n",
            format_sig9(*r),
            format_sig9(*p)
        ));
    }
    match least_squares(series) {
        LinearFit::Line { slope, intercept } => out.push_str(&format!(
            "fit,,,{},{}\n",
            format_sig9(slope),
            format_sig9(intercept)
        )),
        LinearFit::Degenerate => out.push_str("fit_degenerate,,,,\n"),
    }
    out
}

pub fn scatter_export(series: &PairedSeries, path: &Path) -> Result<()> {
    write_atomic(path, scatter_csv(series).as_bytes()).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(p: &[f64], r: &[f64]) -> PairedSeries {
        PairedSeries::new(p.to_vec(), r.to_vec()).unwrap()
    }

    #[test]
    fn series_validation() {
        assert!(matches!(
            PairedSeries::new(vec![1.0], vec![1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            PairedSeries::new(vec![], vec![]),
            Err(MetricsError::EmptySeries)
        ));
        assert!(matches!(
            PairedSeries::new(vec![f64::NAN], vec![1.0]),
            Err(MetricsError::NonFinite)
        ));
    }

    #[test]
    fn regression_examples() {
        let same = s(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]);
        assert_eq!((mae(&same), rmse(&same)), (0.0, 0.0));
        let two = s(&[1.0, 3.0], &[2.0, 5.0]);
        assert_eq!(mae(&two), 1.5);
        assert!((rmse(&two) - 2.5f64.sqrt()).abs() < 1e-15);
        let one = s(&[4.0], &[6.0]);
        assert_eq!((mae(&one), rmse(&one)), (2.0, 2.0));
    }

    #[test]
    fn pearson_examples() {
        let p = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson_r(&s(&p, &p)).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = p.iter().map(|v| 10.0 - v).collect();
        assert!((pearson_r(&s(&p, &neg)).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_r(&s(&p, &[3.0; 4])),
            Err(MetricsError::ZeroVariance)
        ));
    }

    #[test]
    fn bland_altman_examples() {
        let r = [1.0, 2.5, 4.0];
        let same = bland_altman(&s(&r, &r));
        assert_eq!(
            same,
            BlandAltman {
                mean_diff: 0.0,
                sd_diff: 0.0,
                loa_low: 0.0,
                loa_high: 0.0
            }
        );
        let shifted: Vec<f64> = r.iter().map(|v| v + 1.0).collect();
        let ba = bland_altman(&s(&shifted, &r));
        assert_eq!(
            (ba.mean_diff, ba.sd_diff, ba.loa_low, ba.loa_high),
            (1.0, 0.0, 1.0, 1.0)
        );
    }

    #[test]
    fn scatter_rows_and_fit() {
        let series = s(&[3.0, 5.0, 7.0], &[1.0, 2.0, 3.0]);
        let csv = scatter_csv(&series);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert_eq!(lines[0], SCATTER_HEADER);
        assert_eq!(lines[1], "point,1,3,,");
        assert_eq!(lines[4], "fit,,,2,1");
        let flat = s(&[3.0, 5.0], &[2.0, 2.0]);
        assert!(scatter_csv(&flat).ends_with("fit_degenerate,,,,\n"));
        assert_eq!(least_squares(&flat), LinearFit::Degenerate);
    }

    #[test]
    fn scatter_export_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        scatter_export(&s(&[1.0, 2.0], &[1.5, 2.5]), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
        let bad = dir.path().join("missing").join("scatter.csv");
        assert!(matches!(
            scatter_export(&s(&[1.0], &[1.0]), &bad),
            Err(MetricsError::Io { .. })
        ));
    }
}
