use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Savitzky-Golay window length and polynomial order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSettings {
    pub window: usize,
    pub order: usize,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        SmoothSettings { window: 15, order: 3 }
    }
}

impl SmoothSettings {
    pub fn validate(&self, len: usize) -> Result<()> {
        let SmoothSettings { window, order } = *self;
        if window % 2 == 0 || window < 3 || window > len {
            return Err(Error::Parameter(format!(
                "window must be odd and within [3, {len}], got {window}"
            )));
        }
        if order >= window {
            return Err(Error::Parameter(format!(
                "polynomial order {order} must be below window {window}"
            )));
        }
        Ok(())
    }
}

impl FromStr for SmoothSettings {
    type Err = Error;

    /// Parses `"window:order"`, e.g. `"15:3"`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, o) = s
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("expected window:order, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parameter(format!("bad smoothing value {v:?}")))
        };
        Ok(SmoothSettings {
            window: parse(w)?,
            order: parse(o)?,
        })
    }
}

/// Least-squares polynomial smoothing.
///
/// Every output point is the order-`order` polynomial fitted to the points
/// within `window / 2` of it, evaluated at that point. Near the ends the
/// window is truncated rather than padded; if a truncated window holds too
/// few points for the requested order, the order drops to fit.
pub fn savgol_filter(values: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    SmoothSettings { window, order }.validate(values.len())?;
    Ok(filter_run(values, window / 2, order))
}

/// Smooth each contiguous run of present values independently; missing
/// points stay missing.
pub fn savgol_filter_gaps(values: &[Option<f64>], settings: SmoothSettings) -> Result<Vec<Option<f64>>> {
    settings.validate(values.len())?;
    let mut out = vec![None; values.len()];
    let mut i = 0;
    while i < values.len() {
        if values[i].is_none() {
            i += 1;
            continue;
        }
        let start = i;
        while i < values.len() && values[i].is_some() {
            i += 1;
        }
        let run: Vec<f64> = values[start..i].iter().map(|v| v.unwrap()).collect();
        for (k, v) in filter_run(&run, settings.window / 2, settings.order)
            .into_iter()
            .enumerate()
        {
            out[start + k] = Some(v);
        }
    }
    Ok(out)
}

fn filter_run(values: &[f64], half: usize, order: usize) -> Vec<f64> {
    let n = values.len();
    let interior = fit_weights(half, half, order);
    (0..n)
        .map(|i| {
            let left = half.min(i);
            let right = half.min(n - 1 - i);
            let owned;
            let weights = if left == half && right == half {
                &interior
            } else {
                owned = fit_weights(left, right, order);
                &owned
            };
            values[i - left..=i + right]
                .iter()
                .zip(weights)
                .map(|(v, w)| v * w)
                .sum()
        })
        .collect()
}

/// Weights `c_j` such that `sum_j c_j y_j` is the least-squares polynomial
/// fit over offsets `-left..=right`, evaluated at offset 0.
fn fit_weights(left: usize, right: usize, order: usize) -> Vec<f64> {
    let points = left + right + 1;
    let order = order.min(points - 1);
    let scale = left.max(right).max(1) as f64;
    let offsets: Vec<f64> = (0..points).map(|j| (j as f64 - left as f64) / scale).collect();
    let m = order + 1;
    let mut gram = vec![vec![0.0; m]; m];
    for &t in &offsets {
        let mut powers = vec![1.0; 2 * m - 1];
        for k in 1..powers.len() {
            powers[k] = powers[k - 1] * t;
        }
        for (a, row) in gram.iter_mut().enumerate() {
            for (b, g) in row.iter_mut().enumerate() {
                *g += powers[a + b];
            }
        }
    }
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    let u = solve(gram, rhs);
    offsets
        .iter()
        .map(|&t| {
            let mut p = 1.0;
            let mut acc = 0.0;
            for uk in &u {
                acc += uk * p;
                p *= t;
            }
            acc
        })
        .collect()
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let (upper, lower) = a.split_at_mut(row);
                for (target, pivot_value) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                    *target -= f * pivot_value;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubics() {
        let cubic = |i: usize| {
            let t = i as f64 / 179.0;
            2.5 - 4.0 * t + 7.0 * t * t - 3.0 * t.powi(3)
        };
        let xs: Vec<f64> = (0..180).map(cubic).collect();
        let ys = savgol_filter(&xs, 11, 3).unwrap();
        let err = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn window_three_order_zero_is_moving_average() {
        let ys = savgol_filter(&[1.0, 2.0, 3.0], 3, 0).unwrap();
        assert!((ys[1] - 2.0).abs() < 1e-15);
        // Truncated edge windows average the two available points.
        assert!((ys[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters() {
        let xs = vec![0.0; 180];
        assert!(matches!(savgol_filter(&xs, 1, 0), Err(Error::Parameter(_))));
        assert!(matches!(savgol_filter(&xs, 4, 1), Err(Error::Parameter(_))));
        assert!(matches!(savgol_filter(&xs, 181, 1), Err(Error::Parameter(_))));
        assert!(matches!(savgol_filter(&xs, 5, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn parses_window_order() {
        assert_eq!(
            "15:3".parse::<SmoothSettings>().unwrap(),
            SmoothSettings { window: 15, order: 3 }
        );
        assert!("15".parse::<SmoothSettings>().is_err());
        assert!("a:3".parse::<SmoothSettings>().is_err());
    }

    #[test]
    fn gaps_are_preserved() {
        let mut xs: Vec<Option<f64>> = (0..40).map(|i| Some(i as f64)).collect();
        xs[20] = None;
        let ys = savgol_filter_gaps(&xs, SmoothSettings { window: 7, order: 2 }).unwrap();
        assert!(ys[20].is_none());
        for (i, y) in ys.iter().enumerate().filter(|(i, _)| *i != 20) {
            assert!((y.unwrap() - i as f64).abs() < 1e-9);
        }
    }
}
