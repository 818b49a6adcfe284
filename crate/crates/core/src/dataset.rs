//! Multi-patch datasets: directory loading/saving, chronological splits and
//! a synthetic tide-driven bathtub generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_windows, CovariateSeries, ElevationGrid, Frame, PatchSeries, Window};
use crate::io;

/// File listing `patch_id row col` per line; optional.
pub const LAYOUT_FILE: &str = "patches.txt";

/// One patch with its elevation and derived covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchData {
    pub series: PatchSeries,
    pub elevation: ElevationGrid,
    pub covariates: CovariateSeries,
}

impl PatchData {
    pub fn new(series: PatchSeries, elevation: ElevationGrid) -> Result<Self> {
        if elevation.dim() != series.dim() {
            return Err(Error::Alignment {
                patch: series.patch_id.clone(),
                message: format!(
                    "elevation is {0}×{0}, series is {1}×{1}",
                    elevation.dim(),
                    series.dim()
                ),
            });
        }
        let covariates = CovariateSeries::for_series(&series);
        Ok(Self {
            series,
            elevation,
            covariates,
        })
    }

    pub fn id(&self) -> &str {
        &self.series.patch_id
    }

    fn slice(&self, from: usize, to: usize) -> Result<Self> {
        Self::new(self.series.slice(from, to)?, self.elevation.clone())
    }
}

/// Placement of one patch in the parent raster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchInfo {
    pub patch_id: String,
    pub origin_row: usize,
    pub origin_col: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub patches: Vec<PatchData>,
}

impl Dataset {
    pub fn new(patches: Vec<PatchData>) -> Result<Self> {
        if let Some(first) = patches.first() {
            let (d, t) = (first.series.dim(), first.series.len());
            for p in &patches {
                if p.series.dim() != d {
                    return Err(Error::Alignment {
                        patch: p.id().into(),
                        message: format!("dimension {} differs from {d}", p.series.dim()),
                    });
                }
                if p.series.len() != t || p.series.start() != first.series.start() {
                    return Err(Error::Alignment {
                        patch: p.id().into(),
                        message: "patches must share the same time axis".into(),
                    });
                }
            }
        }
        Ok(Self { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.patches.first().map(|p| p.series.dim())
    }

    pub fn timesteps(&self) -> usize {
        self.patches.first().map_or(0, |p| p.series.len())
    }

    pub fn patch(&self, id: &str) -> Option<&PatchData> {
        self.patches.iter().find(|p| p.id() == id)
    }

    pub fn layout(&self) -> Vec<PatchInfo> {
        self.patches
            .iter()
            .map(|p| PatchInfo {
                patch_id: p.id().to_string(),
                origin_row: p.series.origin.0,
                origin_col: p.series.origin.1,
                dim: p.series.dim(),
            })
            .collect()
    }

    /// Windows from every patch, patch-major.
    pub fn windows(&self, context_len: usize, target_len: usize, stride: usize) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for p in &self.patches {
            out.extend(make_windows(&p.series, &p.covariates, context_len, target_len, stride)?);
        }
        Ok(out)
    }

    /// Contiguous train/validation/test splits taken from the start of the series.
    pub fn split_chronological(
        &self,
        train_steps: usize,
        val_steps: usize,
        test_steps: usize,
    ) -> Result<(Dataset, Dataset, Dataset)> {
        let needed = train_steps + val_steps + test_steps;
        if needed > self.timesteps() {
            return Err(Error::InsufficientTimesteps {
                required: needed,
                available: self.timesteps(),
            });
        }
        if train_steps == 0 || val_steps == 0 || test_steps == 0 {
            return Err(Error::InvalidParameter("split sizes must be positive".into()));
        }
        let part = |from: usize, to: usize| -> Result<Dataset> {
            Dataset::new(
                self.patches
                    .iter()
                    .map(|p| p.slice(from, to))
                    .collect::<Result<_>>()?,
            )
        };
        let a = train_steps;
        let b = a + val_steps;
        Ok((part(0, a)?, part(a, b)?, part(b, needed)?))
    }

    /// Load every `<id>.gsf` with its `<id>.gse` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "gsf"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::EmptyDataset(format!("no .gsf files in {}", dir.display())));
        }
        let layout = read_layout(dir)?;
        let mut patches = Vec::with_capacity(ids.len());
        let mut next_col = 0;
        for id in ids {
            let series = io::read_series(&dir.join(format!("{id}.gsf")))?;
            let dim = series.frames[0].dim();
            let elev_path = dir.join(format!("{id}.gse"));
            if !elev_path.exists() {
                return Err(Error::Alignment {
                    patch: id,
                    message: format!("missing elevation file {}", elev_path.display()),
                });
            }
            let elev = io::read_elevation(&elev_path)?;
            let origin = layout.get(&id).copied().unwrap_or((0, next_col));
            next_col = next_col.max(origin.1 + dim);
            let s = PatchSeries::new(id.clone(), origin, series.start, series.frames)?;
            patches.push(PatchData::new(s, ElevationGrid::new(id, elev)?)?);
        }
        Dataset::new(patches)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut layout = String::new();
        for p in &self.patches {
            io::write_series(&dir.join(format!("{}.gsf", p.id())), p.series.start(), p.series.frames())?;
            io::write_elevation(&dir.join(format!("{}.gse", p.id())), &p.elevation.values)?;
            layout.push_str(&format!("{} {} {}\n", p.id(), p.series.origin.0, p.series.origin.1));
        }
        fs::write(dir.join(LAYOUT_FILE), layout)?;
        Ok(())
    }
}

fn read_layout(dir: &Path) -> Result<BTreeMap<String, (usize, usize)>> {
    let path = dir.join(LAYOUT_FILE);
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(&path)?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [id, r, c] => r.parse().ok().zip(c.parse().ok()).map(|rc| (id.to_string(), rc)),
            _ => None,
        };
        let (id, rc) = parsed.ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message: format!("expected `patch_id row col`, found {line:?}"),
        })?;
        out.insert(id, rc);
    }
    Ok(out)
}

/// Parameters of the synthetic bathtub generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patches: usize,
    pub dim: usize,
    pub hours: usize,
    /// Semidiurnal tide amplitude, feet.
    pub tide_amplitude: f64,
    /// Semidiurnal period, hours.
    pub tide_period: f64,
    /// Amplitude of the 24 h component, feet.
    pub diurnal_amplitude: f64,
    /// Standard deviation of the hourly water-level noise, feet.
    pub noise_std: f64,
    pub relief_min: f64,
    pub relief_max: f64,
    /// Box-blur radius (cells) used to smooth the elevation noise.
    pub smoothing_radius: usize,
    pub seed: u64,
    pub start: NaiveDateTime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patches: 2,
            dim: 16,
            hours: 600,
            tide_amplitude: 2.0,
            tide_period: 12.42,
            diurnal_amplitude: 0.5,
            noise_std: 0.05,
            relief_min: -1.0,
            relief_max: 2.5,
            smoothing_radius: 3,
            seed: 7,
            start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .expect("valid date")
                .and_hms_opt(0, 0, 0)
                .expect("valid time"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.patches == 0 || self.dim == 0 {
            return bad("patches and dim must be positive");
        }
        if self.hours < 24 {
            return bad("synthetic series need at least 24 hours");
        }
        if !(self.tide_amplitude > 0.0 && self.tide_period > 0.0) {
            return bad("tide amplitude and period must be positive");
        }
        if self.diurnal_amplitude < 0.0 || self.noise_std < 0.0 {
            return bad("diurnal amplitude and noise std must be non-negative");
        }
        if self.relief_max < self.relief_min {
            return bad("relief_max must be ≥ relief_min");
        }
        Ok(())
    }

    /// Water level at hour `t` for a patch with diurnal phase `phase`, before noise.
    pub fn water_level(&self, t: f64, phase: f64) -> f64 {
        self.tide_amplitude * (2.0 * PI * t / self.tide_period).sin()
            + self.diurnal_amplitude * (2.0 * PI * t / 24.0 + phase).sin()
    }
}

/// Smooth random field: box-blurred uniform noise rescaled to `[lo, hi]`.
fn smooth_field(rng: &mut impl Rng, dim: usize, radius: usize, lo: f64, hi: f64) -> Vec<f64> {
    let noise: Vec<f64> = (0..dim * dim).map(|_| rng.random::<f64>()).collect();
    let r = radius as isize;
    let d = dim as isize;
    let mut blurred = vec![0.0; dim * dim];
    for i in 0..d {
        for j in 0..d {
            let (mut s, mut n) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if (0..d).contains(&a) && (0..d).contains(&b) {
                        s += noise[(a * d + b) as usize];
                        n += 1.0;
                    }
                }
            }
            blurred[(i * d + j) as usize] = s / n;
        }
    }
    let min = blurred.iter().copied().fold(f64::INFINITY, f64::min);
    let max = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    blurred
        .iter()
        .map(|v| if span > 0.0 { lo + (v - min) / span * (hi - lo) } else { lo })
        .collect()
}

/// Generate `cfg.patches` patches laid out left to right.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut patches = Vec::with_capacity(cfg.patches);
    for k in 0..cfg.patches {
        let id = format!("p{k:02}");
        let elev = smooth_field(&mut rng, cfg.dim, cfg.smoothing_radius, cfg.relief_min, cfg.relief_max);
        let phase = rng.random::<f64>() * 2.0 * PI;
        let frames = (0..cfg.hours)
            .map(|t| {
                let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let w = cfg.water_level(t as f64, phase) + eps;
                Frame::new(cfg.dim, elev.iter().map(|e| (w - e).max(0.0)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let series = PatchSeries::new(id.clone(), (0, k * cfg.dim), cfg.start, frames)?;
        let elevation = ElevationGrid::new(id, Frame::new(cfg.dim, elev)?)?;
        patches.push(PatchData::new(series, elevation)?);
    }
    Dataset::new(patches)
}
