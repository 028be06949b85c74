//! Frequency grids, response curves, and the scalar quantities extracted
//! from them: peak sets, the widest peak-free band, and the in-band peak
//! counter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tmm::ModeKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponseError {
    #[error("band needs 0 < lo < hi, got ({lo}, {hi})")]
    InvalidBand { lo: f64, hi: f64 },
    #[error("band ({lo}, {hi}) lies outside the grid range [{first}, {last}]")]
    OutsideGrid { lo: f64, hi: f64, first: f64, last: f64 },
    #[error("grid must be strictly increasing and positive")]
    InvalidGrid,
    #[error("grid needs at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },
}

/// Sorted, strictly increasing, positive analysis frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyGrid(Vec<f64>);

impl FrequencyGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, ResponseError> {
        let ok = points.first().is_some_and(|&f| f > 0.0 && f.is_finite())
            && points.windows(2).all(|w| w[1] > w[0] && w[1].is_finite());
        if !ok {
            return Err(ResponseError::InvalidGrid);
        }
        Ok(Self(points))
    }

    /// Endpoint-inclusive linear spacing.
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self, ResponseError> {
        if n < 2 {
            return Err(ResponseError::TooShort { needed: 2, got: n });
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        points[n - 1] = hi;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn contains_band(&self, band: &Band) -> bool {
        band.lo >= self.first() && band.hi <= self.last()
    }
}

impl TryFrom<Vec<f64>> for FrequencyGrid {
    type Error = ResponseError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<FrequencyGrid> for Vec<f64> {
    fn from(g: FrequencyGrid) -> Self {
        g.0
    }
}

pub const GRID_POINTS: usize = 80;

/// One grid per mode family. Axial and torsional share a range; lateral
/// has its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisGrids {
    pub axial: FrequencyGrid,
    pub torsional: FrequencyGrid,
    pub lateral: FrequencyGrid,
}

impl Default for AnalysisGrids {
    fn default() -> Self {
        Self::linear(GRID_POINTS, (0.1, 800.0), (0.1, 10_000.0)).expect("default grids are valid")
    }
}

impl AnalysisGrids {
    pub fn linear(n: usize, axial_torsional: (f64, f64), lateral: (f64, f64)) -> Result<Self, ResponseError> {
        let at = FrequencyGrid::linear(axial_torsional.0, axial_torsional.1, n)?;
        Ok(Self {
            axial: at.clone(),
            torsional: at,
            lateral: FrequencyGrid::linear(lateral.0, lateral.1, n)?,
        })
    }

    pub fn for_mode(&self, mode: ModeKind) -> &FrequencyGrid {
        match mode {
            ModeKind::Axial => &self.axial,
            ModeKind::Torsional => &self.torsional,
            ModeKind::Lateral => &self.lateral,
        }
    }

    /// Common point count; every family must have the same length.
    pub fn points(&self) -> usize {
        self.axial.len()
    }
}

/// Transmission magnitudes of one mode family over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub mode: ModeKind,
    pub grid: Vec<f64>,
    /// `magnitudes[i][c]` is channel `c` at grid point `i`.
    pub magnitudes: Vec<Vec<f64>>,
    /// Points where the reduced system was singular and the value was capped.
    pub resonant: Vec<bool>,
}

impl ResponseCurve {
    pub fn channels(&self) -> usize {
        self.magnitudes.first().map_or(0, Vec::len)
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.magnitudes.iter().map(|m| m[c]).collect()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Full analysis range as a band.
    pub fn range(&self) -> Band {
        Band { lo: self.grid[0], hi: self.grid[self.grid.len() - 1] }
    }
}

/// Frequency interval `(lo, hi)` in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ResponseError> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(ResponseError::InvalidBand { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo && f <= self.hi
    }

    /// `self` lies within `outer`.
    pub fn within(&self, outer: &Band) -> bool {
        self.lo >= outer.lo && self.hi <= outer.hi
    }
}

/// Interior local maxima of one channel. A point is a peak when it is not
/// below either neighbour; consecutive peak indices (a plateau) collapse to
/// the leftmost one. Endpoints are never peaks.
pub fn channel_peaks(values: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    if values.len() < 3 {
        return out;
    }
    let mut prev_peak = false;
    for i in 1..values.len() - 1 {
        let is_peak = values[i] >= values[i - 1] && values[i] >= values[i + 1];
        if is_peak && !prev_peak {
            out.push(i);
        }
        prev_peak = is_peak;
    }
    out
}

/// Union of the channel peaks plus every point flagged resonant, sorted.
pub fn detect_peaks(curve: &ResponseCurve) -> Vec<usize> {
    let n = curve.len();
    let mut mark = vec![false; n];
    for c in 0..curve.channels() {
        for i in channel_peaks(&curve.channel(c)) {
            mark[i] = true;
        }
    }
    for (m, &r) in mark.iter_mut().zip(&curve.resonant) {
        *m |= r;
    }
    (0..n).filter(|&i| mark[i]).collect()
}

/// Widest band between consecutive peaks. With fewer than two peaks the
/// band runs to the analysis endpoints. Ties go to the lower band.
pub fn largest_nonresonant_range(curve: &ResponseCurve) -> Band {
    band_from_peaks(&curve.grid, &detect_peaks(curve))
}

pub fn band_from_peaks(grid: &[f64], peaks: &[usize]) -> Band {
    let first = grid[0];
    let last = grid[grid.len() - 1];
    let candidates: Vec<(f64, f64)> = match peaks {
        [] => vec![(first, last)],
        [p] => vec![(first, grid[*p]), (grid[*p], last)],
        _ => peaks.windows(2).map(|w| (grid[w[0]], grid[w[1]])).collect(),
    };
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if c.1 - c.0 > best.1 - best.0 {
            best = c;
        }
    }
    Band { lo: best.0, hi: best.1 }
}

/// Number of detected peaks whose frequency lies in `[lo, hi]`.
pub fn count_peaks_in_band(curve: &ResponseCurve, band: &Band) -> Result<usize, ResponseError> {
    let range = curve.range();
    if !band.within(&range) {
        return Err(ResponseError::OutsideGrid { lo: band.lo, hi: band.hi, first: range.lo, last: range.hi });
    }
    Ok(detect_peaks(curve).into_iter().filter(|&i| band.contains(curve.grid[i])).count())
}

/// Peaks strictly inside `(lo, hi)`.
pub fn count_peaks_strictly_inside(curve: &ResponseCurve, band: &Band) -> usize {
    detect_peaks(curve)
        .into_iter()
        .filter(|&i| curve.grid[i] > band.lo && curve.grid[i] < band.hi)
        .count()
}

/// JSON export `{mode, peaks_hz, band: {lo, hi}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub mode: ModeKind,
    pub peaks_hz: Vec<f64>,
    pub band: Band,
}

impl PeakReport {
    pub fn from_curve(curve: &ResponseCurve) -> Self {
        let peaks = detect_peaks(curve);
        Self {
            mode: curve.mode,
            peaks_hz: peaks.iter().map(|&i| curve.grid[i]).collect(),
            band: band_from_peaks(&curve.grid, &peaks),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(values: &[f64]) -> ResponseCurve {
        let grid = FrequencyGrid::linear(1.0, values.len() as f64, values.len()).unwrap();
        ResponseCurve {
            mode: ModeKind::Axial,
            grid: grid.points().to_vec(),
            magnitudes: values.iter().map(|&v| vec![v]).collect(),
            resonant: vec![false; values.len()],
        }
    }

    #[test]
    fn simple_peak() {
        assert_eq!(detect_peaks(&curve(&[1.0, 5.0, 1.0])), vec![1]);
    }

    #[test]
    fn monotone_has_no_peak() {
        assert!(detect_peaks(&curve(&[1.0, 2.0, 3.0, 4.0])).is_empty());
    }

    #[test]
    fn plateau_collapses_left() {
        assert_eq!(detect_peaks(&curve(&[1.0, 5.0, 5.0, 5.0, 1.0])), vec![1]);
        assert_eq!(detect_peaks(&curve(&[2.0; 6])), vec![1]);
    }

    #[test]
    fn resonant_flag_forces_peak() {
        let mut c = curve(&[1.0, 2.0, 3.0, 4.0]);
        c.resonant[2] = true;
        assert_eq!(detect_peaks(&c), vec![2]);
    }

    #[test]
    fn any_channel_counts() {
        let mut c = curve(&[1.0, 2.0, 1.0, 2.0, 1.0]);
        c.magnitudes = vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![1.0, 1.5], vec![2.0, 3.0], vec![1.0, 1.0]];
        assert_eq!(detect_peaks(&c), vec![1, 3]);
        c.magnitudes[2][1] = 4.0;
        assert_eq!(detect_peaks(&c), vec![1, 2, 3]);
    }

    #[test]
    fn band_without_peaks_is_full_range() {
        let c = curve(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(largest_nonresonant_range(&c), Band { lo: 1.0, hi: 4.0 });
    }

    #[test]
    fn widest_gap_between_peaks() {
        let grid: Vec<f64> = (0..80).map(|i| 10.0 * i as f64 + 0.1).collect();
        let b = band_from_peaks(&grid, &[10, 50, 60]);
        assert_eq!(b, Band { lo: grid[10], hi: grid[50] });
    }

    #[test]
    fn single_peak_uses_endpoints_and_ties_go_low() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 + 1.0).collect();
        assert_eq!(band_from_peaks(&grid, &[3]), Band { lo: 4.0, hi: 11.0 });
        assert_eq!(band_from_peaks(&grid, &[5]), Band { lo: 1.0, hi: 6.0 });
        assert_eq!(band_from_peaks(&grid, &[1, 3, 5]), Band { lo: 2.0, hi: 4.0 });
    }

    #[test]
    fn band_counting() {
        let c = curve(&[1.0, 5.0, 1.0, 1.0, 3.0, 1.0]);
        assert_eq!(count_peaks_in_band(&c, &Band::new(1.0, 6.0).unwrap()).unwrap(), 2);
        assert_eq!(count_peaks_in_band(&c, &Band::new(2.5, 4.5).unwrap()).unwrap(), 0);
        assert_eq!(count_peaks_in_band(&c, &Band::new(2.0, 5.0).unwrap()).unwrap(), 2);
        assert!(matches!(
            count_peaks_in_band(&c, &Band::new(0.5, 3.0).unwrap()),
            Err(ResponseError::OutsideGrid { .. })
        ));
    }

    #[test]
    fn band_invariant() {
        assert!(Band::new(5.0, 5.0).is_err());
        assert!(Band::new(0.0, 5.0).is_err());
        assert!(Band::new(6.0, 5.0).is_err());
    }

    #[test]
    fn grid_is_endpoint_inclusive() {
        let g = FrequencyGrid::linear(0.1, 800.0, 80).unwrap();
        assert_eq!(g.len(), 80);
        assert_eq!(g.first(), 0.1);
        assert_eq!(g.last(), 800.0);
        assert!(FrequencyGrid::new(vec![1.0, 1.0]).is_err());
        assert!(FrequencyGrid::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = PeakReport::from_curve(&curve(&[1.0, 5.0, 1.0, 1.0]));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["mode"], "axial");
        assert_eq!(v["peaks_hz"][0], 2.0);
        assert_eq!(v["band"]["lo"], 2.0);
        assert_eq!(v["band"]["hi"], 4.0);
    }

    proptest! {
        #[test]
        fn peaks_depend_only_on_order(values in proptest::collection::vec(0.01f64..100.0, 3..60)) {
            let c = curve(&values);
            let rescaled = curve(&values.iter().map(|v| v.ln() * 3.0 + 7.0).collect::<Vec<_>>());
            prop_assert_eq!(detect_peaks(&c), detect_peaks(&rescaled));
        }

        #[test]
        fn extracted_band_is_peak_free(values in proptest::collection::vec(0.0f64..10.0, 3..60)) {
            let c = curve(&values);
            let band = largest_nonresonant_range(&c);
            prop_assert_eq!(count_peaks_strictly_inside(&c, &band), 0);
        }

        #[test]
        fn counter_is_subadditive(values in proptest::collection::vec(0.0f64..10.0, 5..60), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let c = curve(&values);
            let r = c.range();
            let mid = r.lo + (r.hi - r.lo) * a.min(b).max(0.01);
            let end = r.lo + (r.hi - r.lo) * a.max(b).max(0.02);
            prop_assume!(mid < end && r.lo < mid);
            let h = |lo: f64, hi: f64| count_peaks_in_band(&c, &Band::new(lo, hi).unwrap()).unwrap();
            let whole = h(r.lo, end);
            prop_assert!(h(r.lo, mid) + h(mid, end) >= whole);
            prop_assert!(whole >= h(r.lo, mid));
        }
    }
}
