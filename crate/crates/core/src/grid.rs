//! Patch-centric data model: inundation frames, elevation, temporal
//! covariates, window extraction and per-window standardization.

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to the context standard deviation.
pub const NORM_STD_FLOOR: f64 = 1e-6;

/// Nominal raster resolution in meters.
pub const DEFAULT_CELL_SIZE_M: f64 = 30.0;

/// A square D×D grid stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    dim: usize,
    cells: Vec<f64>,
}

impl Frame {
    pub fn new(dim: usize, cells: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("frame dimension must be positive".into()));
        }
        if cells.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "frame of dimension {dim} needs {} cells, got {}",
                dim * dim,
                cells.len()
            )));
        }
        Ok(Self { dim, cells })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            cells: vec![0.0; dim * dim],
        }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self {
            dim,
            cells: vec![value; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [f64] {
        &mut self.cells
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.dim + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            cells: self.cells.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(|v| v.is_finite())
    }
}

/// Hourly inundation series of one patch, values in feet.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSeries {
    pub patch_id: String,
    /// (row, col) offset of the patch's top-left cell in the parent raster.
    pub origin: (usize, usize),
    pub cell_size_m: f64,
    start: NaiveDateTime,
    frames: Vec<Frame>,
}

impl PatchSeries {
    pub fn new(
        patch_id: impl Into<String>,
        origin: (usize, usize),
        start: NaiveDateTime,
        frames: Vec<Frame>,
    ) -> Result<Self> {
        let patch_id = patch_id.into();
        let Some(first) = frames.first() else {
            return Err(Error::InvalidParameter(format!(
                "patch {patch_id}: series needs at least one frame"
            )));
        };
        let dim = first.dim();
        for (t, frame) in frames.iter().enumerate() {
            if frame.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "patch {patch_id}: frame {t} has dimension {}, expected {dim}",
                    frame.dim()
                )));
            }
            if !frame.is_finite() {
                return Err(Error::NonFinite(format!("patch {patch_id} frame {t}")));
            }
        }
        Ok(Self {
            patch_id,
            origin,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            start,
            frames,
        })
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::hours(index as i64)
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.len()).map(|i| self.timestamp(i)).collect()
    }

    /// Index of `ts` in this series, if it falls on one of its hours.
    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let delta = ts - self.start;
        if delta.num_seconds() < 0 || delta.num_seconds() % 3600 != 0 {
            return None;
        }
        let idx = delta.num_hours() as usize;
        (idx < self.len()).then_some(idx)
    }

    /// Contiguous sub-series `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len() {
            return Err(Error::InvalidParameter(format!(
                "slice {from}..{to} outside series of length {}",
                self.len()
            )));
        }
        Ok(Self {
            patch_id: self.patch_id.clone(),
            origin: self.origin,
            cell_size_m: self.cell_size_m,
            start: self.timestamp(from),
            frames: self.frames[from..to].to_vec(),
        })
    }
}

/// Static elevation of one patch, in feet.
#[derive(Clone, Debug, PartialEq)]
pub struct ElevationGrid {
    pub patch_id: String,
    pub values: Frame,
}

impl ElevationGrid {
    pub fn new(patch_id: impl Into<String>, values: Frame) -> Result<Self> {
        let patch_id = patch_id.into();
        if !values.is_finite() {
            return Err(Error::NonFinite(format!("elevation of patch {patch_id}")));
        }
        Ok(Self { patch_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    /// Elevation scaled by its own mean and (population) standard deviation.
    pub fn standardized(&self) -> Frame {
        let stats = NormStats::from_values(self.values.cells().iter().copied());
        self.values.map(|v| stats.normalize(v))
    }
}

/// Calendar covariates of one hourly timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub timestamp: NaiveDateTime,
    pub hour_of_day: u32,
    pub day_of_month: u32,
}

impl Covariate {
    pub fn at(timestamp: NaiveDateTime) -> Self {
        Self {
            timestamp,
            hour_of_day: timestamp.hour(),
            day_of_month: timestamp.day(),
        }
    }

    /// The covariates one hour later.
    pub fn next_hour(&self) -> Self {
        Self::at(self.timestamp + Duration::hours(1))
    }
}

/// Per-timestep covariates derived from the timestamps of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateSeries {
    steps: Vec<Covariate>,
}

impl CovariateSeries {
    pub fn hourly(start: NaiveDateTime, len: usize) -> Self {
        let steps = (0..len)
            .map(|i| Covariate::at(start + Duration::hours(i as i64)))
            .collect();
        Self { steps }
    }

    pub fn for_series(series: &PatchSeries) -> Self {
        Self::hourly(series.start(), series.len())
    }

    pub fn steps(&self) -> &[Covariate] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean and standard deviation used to standardize one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population statistics with the standard deviation floored at
    /// [`NORM_STD_FLOOR`].
    pub fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (count, sum) = values
            .clone()
            .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if count == 0 {
            return Self {
                mean: 0.0,
                std: 1.0,
            };
        }
        let mean = sum / count as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        Self {
            mean,
            std: var.sqrt().max(NORM_STD_FLOOR),
        }
    }

    pub fn normalize(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }
}

/// A context slice followed immediately by a target slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub patch_id: String,
    /// Index of the first context frame in the source series.
    pub offset: usize,
    pub context: Vec<Frame>,
    pub target: Vec<Frame>,
    pub context_covariates: Vec<Covariate>,
    pub target_covariates: Vec<Covariate>,
}

impl Window {
    /// Statistics of the context inundation values.
    pub fn norm_stats(&self) -> NormStats {
        NormStats::from_values(self.context.iter().flat_map(|f| f.cells().iter().copied()))
    }

    pub fn dim(&self) -> usize {
        self.context[0].dim()
    }
}

/// Slice `series` into `(T - c - L) / stride + 1` windows of `c` context and
/// `L` target frames.
pub fn make_windows(
    series: &PatchSeries,
    cov: &CovariateSeries,
    context_len: usize,
    target_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if context_len == 0 || target_len == 0 {
        return Err(Error::InvalidParameter(
            "context and target lengths must be positive".into(),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    if cov.len() != series.len() {
        return Err(Error::ShapeMismatch(format!(
            "covariates cover {} steps, series has {}",
            cov.len(),
            series.len()
        )));
    }
    let span = context_len + target_len;
    if series.len() < span {
        return Err(Error::InsufficientTimesteps {
            required: span,
            available: series.len(),
        });
    }
    let frames = series.frames();
    let steps = cov.steps();
    let windows = (0..=series.len() - span)
        .step_by(stride)
        .map(|k| Window {
            patch_id: series.patch_id.clone(),
            offset: k,
            context: frames[k..k + context_len].to_vec(),
            target: frames[k + context_len..k + span].to_vec(),
            context_covariates: steps[k..k + context_len].to_vec(),
            target_covariates: steps[k + context_len..k + span].to_vec(),
        })
        .collect();
    Ok(windows)
}

/// Standardize context and target by the context's mean and standard
/// deviation.
pub fn standardize_window(window: &Window) -> (Window, NormStats) {
    let stats = window.norm_stats();
    let norm = |frames: &[Frame]| -> Vec<Frame> {
        frames.iter().map(|f| f.map(|v| stats.normalize(v))).collect()
    };
    let out = Window {
        context: norm(&window.context),
        target: norm(&window.target),
        ..window.clone()
    };
    (out, stats)
}

/// Invert [`standardize_window`]; optionally clamp to physical (≥ 0) depths.
pub fn destandardize(frames: &[Frame], stats: NormStats, clamp_physical: bool) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| {
            f.map(|v| {
                let x = stats.denormalize(v);
                if clamp_physical {
                    x.max(0.0)
                } else {
                    x
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 31)
            .unwrap()
            .and_hms_opt(20, 0, 0)
            .unwrap()
    }

    fn ramp_series(len: usize, dim: usize) -> PatchSeries {
        let frames = (0..len)
            .map(|t| Frame::new(dim, (0..dim * dim).map(|i| (t * 100 + i) as f64).collect()).unwrap())
            .collect();
        PatchSeries::new("p0", (0, 0), t0(), frames).unwrap()
    }

    fn windows_of(len: usize, c: usize, l: usize, stride: usize) -> Result<Vec<Window>> {
        let s = ramp_series(len, 2);
        make_windows(&s, &CovariateSeries::for_series(&s), c, l, stride)
    }

    #[test]
    fn boundary_length_yields_one_window() {
        let w = windows_of(24, 12, 12, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].context.len(), 12);
        assert_eq!(w[0].target.len(), 12);
    }

    #[test]
    fn window_count_matches_enumeration() {
        // Enumerate every start k with k + c + L <= T and keep multiples of stride.
        for (len, stride) in [(26, 1), (40, 3), (24, 5), (37, 4)] {
            let expected: Vec<usize> = (0..len).filter(|k| k + 24 <= len && k % stride == 0).collect();
            let got: Vec<usize> = windows_of(len, 12, 12, stride)
                .unwrap()
                .iter()
                .map(|w| w.offset)
                .collect();
            assert_eq!(got, expected);
            assert_eq!(got.len(), (len - 24) / stride + 1);
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let err = windows_of(23, 12, 12, 1).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientTimesteps {
                required: 24,
                available: 23
            }
        ));
        assert!(err.to_string().contains("insufficient timesteps"));
    }

    #[test]
    fn zero_stride_is_rejected() {
        assert!(windows_of(30, 12, 12, 0).is_err());
    }

    #[test]
    fn covariates_track_frames() {
        let w = windows_of(30, 12, 12, 1).unwrap();
        let third = &w[2];
        assert_eq!(third.context_covariates[0].timestamp, t0() + Duration::hours(2));
        assert_eq!(third.target_covariates[0].timestamp, t0() + Duration::hours(14));
        // 2024-01-31 20:00 + 4h crosses into February.
        assert_eq!(third.context_covariates[2].hour_of_day, 0);
        assert_eq!(third.context_covariates[2].day_of_month, 1);
    }

    #[test]
    fn flat_context_hits_std_floor() {
        let mut w = windows_of(24, 12, 12, 1).unwrap().remove(0);
        for f in &mut w.context {
            *f = Frame::filled(2, 5.0);
        }
        let (n, stats) = standardize_window(&w);
        assert_eq!(stats.mean, 5.0);
        assert_eq!(stats.std, NORM_STD_FLOOR);
        assert!(n.context.iter().all(|f| f.cells().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn two_level_context_standardizes_to_unit() {
        let mut w = windows_of(24, 2, 1, 1).unwrap().remove(0);
        w.context = vec![Frame::new(2, vec![0.0, 2.0, 0.0, 2.0]).unwrap(); 2];
        let (n, stats) = standardize_window(&w);
        assert_eq!(stats, NormStats { mean: 1.0, std: 1.0 });
        assert_eq!(n.context[0].cells(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn destandardize_examples() {
        let one = |v| vec![Frame::new(1, vec![v]).unwrap()];
        let s = NormStats { mean: 3.2, std: 1.5 };
        assert_eq!(destandardize(&one(0.0), s, true)[0].cells(), &[3.2]);
        let s = NormStats { mean: 0.5, std: 1.0 };
        assert_eq!(destandardize(&one(-3.0), s, true)[0].cells(), &[0.0]);
        assert_eq!(destandardize(&one(-2.5), s, false)[0].cells(), &[-2.0]);
    }

    #[test]
    fn elevation_standardization_is_zero_mean() {
        let e = ElevationGrid::new("p", Frame::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let s = e.standardized();
        let mean: f64 = s.cells().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn non_hourly_index_is_none() {
        let s = ramp_series(5, 1);
        assert_eq!(s.index_of(t0() + Duration::hours(3)), Some(3));
        assert_eq!(s.index_of(t0() + Duration::minutes(30)), None);
        assert_eq!(s.index_of(t0() + Duration::hours(5)), None);
    }

    proptest! {
        #[test]
        fn windows_are_lossless(len in 3usize..40, c in 1usize..6, l in 1usize..6, k in 0usize..40) {
            prop_assume!(c + l <= len && k + c + l <= len);
            let s = ramp_series(len, 2);
            let w = make_windows(&s, &CovariateSeries::for_series(&s), c, l, 1).unwrap();
            let joined: Vec<Frame> = w[k].context.iter().chain(&w[k].target).cloned().collect();
            prop_assert_eq!(&joined[..], &s.frames()[k..k + c + l]);
        }

        #[test]
        fn standardize_roundtrip(values in proptest::collection::vec(-50.0f64..50.0, 8), target in -50.0f64..50.0) {
            let ctx: Vec<Frame> = values.chunks(4).map(|c| Frame::new(2, c.to_vec()).unwrap()).collect();
            let w = Window {
                patch_id: "p".into(),
                offset: 0,
                context: ctx,
                target: vec![Frame::filled(2, target)],
                context_covariates: vec![],
                target_covariates: vec![],
            };
            let (n, stats) = standardize_window(&w);
            let back = destandardize(&n.context, stats, false);
            for (a, b) in back.iter().zip(&w.context) {
                for (x, y) in a.cells().iter().zip(b.cells()) {
                    prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
                }
            }
            if stats.std > NORM_STD_FLOOR {
                let all: Vec<f64> = n.context.iter().flat_map(|f| f.cells().to_vec()).collect();
                let m = all.iter().sum::<f64>() / all.len() as f64;
                let sd = (all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / all.len() as f64).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }
    }
}
