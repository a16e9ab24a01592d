//! Trend summaries over predicted parameter series: least-squares slope plus
//! min/max/mean, the plot-ready numbers behind the `report` subcommand.

use crate::error::{Error, Result};

/// Least-squares slope of `values` against `times`. A degenerate time axis
/// (fewer than two distinct instants) has slope 0 by convention.
pub fn trend_slope(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::Dim(format!(
            "trend_slope needs equal nonzero lengths, got {} and {}",
            times.len(),
            values.len()
        )));
    }
    let n = times.len() as f64;
    let t_mean = times.iter().sum::<f64>() / n;
    let v_mean = values.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&t, &v) in times.iter().zip(values) {
        sxx += (t - t_mean) * (t - t_mean);
        sxy += (t - t_mean) * (v - v_mean);
    }
    if sxx == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / sxx)
}

/// Summary of one parameter series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesSummary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub slope: f64,
}

pub fn summarize(times: &[f64], values: &[f64]) -> Result<SeriesSummary> {
    let slope = trend_slope(times, values)?;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    Ok(SeriesSummary {
        n: values.len(),
        min,
        max,
        mean: sum / values.len() as f64,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_slope_line() {
        let slope = trend_slope(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_has_zero_slope() {
        let slope = trend_slope(&[0.0, 5.0, 9.0, 20.0], &[4.2; 4]).unwrap();
        assert!(slope.abs() <= 1e-12);
    }

    #[test]
    fn summary_fields() {
        let s = summarize(&[0.0, 1.0, 2.0, 3.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert_eq!(s.n, 4);
        assert_eq!(s.min, 2.0);
        assert_eq!(s.max, 8.0);
        assert_eq!(s.mean, 5.0);
        assert!((s.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(trend_slope(&[1.0], &[1.0, 2.0]).is_err());
        assert!(trend_slope(&[], &[]).is_err());
        assert_eq!(trend_slope(&[3.0, 3.0], &[1.0, 9.0]).unwrap(), 0.0);
    }
}
