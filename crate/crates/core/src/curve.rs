//! Curves over normalized grasp time, where the grasp spans [0, 1].

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub normalized_time: f64,
    pub value: f64,
}

pub type Curve = Vec<CurvePoint>;

/// Frame index to normalized time for an interval `[start, end]`.
pub fn normalized_time(frame: usize, start: usize, end: usize) -> f64 {
    let span = (end - start).max(1) as f64;
    (frame as f64 - start as f64) / span
}

/// Frames covered by an interval extended by `margin_fraction` of its length
/// on both sides, clamped to `[0, n_frames)`.
pub fn frames_with_margin(
    start: usize,
    end: usize,
    margin_fraction: f64,
    n_frames: usize,
) -> std::ops::RangeInclusive<usize> {
    let span = (end - start).max(1) as f64;
    let pad = (margin_fraction.max(0.0) * span).round() as usize;
    let lo = start.saturating_sub(pad);
    let hi = (end + pad).min(n_frames.saturating_sub(1));
    lo..=hi
}

/// Averages many curves into `n_bins` equal bins over `[lo, hi)`. Bins with
/// no samples are omitted. Bin centers are reported as the time coordinate.
pub fn bin_mean(curves: &[Curve], n_bins: usize, lo: f64, hi: f64) -> Curve {
    let n_bins = n_bins.max(1);
    let width = (hi - lo) / n_bins as f64;
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for p in curves.iter().flatten() {
        if !(p.normalized_time >= lo && p.normalized_time <= hi) || !p.value.is_finite() {
            continue;
        }
        let b = (((p.normalized_time - lo) / width) as usize).min(n_bins - 1);
        sum[b] += p.value;
        count[b] += 1;
    }
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CurvePoint {
            normalized_time: lo + (b as f64 + 0.5) * width,
            value: sum[b] / count[b] as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_average_values() {
        let a = vec![
            CurvePoint { normalized_time: 0.1, value: 1.0 },
            CurvePoint { normalized_time: 0.9, value: 4.0 },
        ];
        let b = vec![CurvePoint { normalized_time: 0.2, value: 3.0 }];
        let m = bin_mean(&[a, b], 2, 0.0, 1.0);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].value, 2.0);
        assert_eq!(m[0].normalized_time, 0.25);
        assert_eq!(m[1].value, 4.0);
    }

    #[test]
    fn margin_is_clamped() {
        assert_eq!(frames_with_margin(2, 12, 0.5, 15), 0..=14);
        assert_eq!(frames_with_margin(5, 9, 0.5, 30), 3..=11);
        assert_eq!(normalized_time(9, 5, 9), 1.0);
    }
}
