//! Plain-text grid formats.
//!
//! Series (`.gsf`): `GSF1 D T`, an ISO-8601 start timestamp, then T blocks of
//! D rows with D whitespace-separated values. Elevation (`.gse`): `GSE1 D`
//! followed by D rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::grid::Frame;

const TS_FORMATS: [&str; 3] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S"];

pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim().trim_end_matches('Z');
    TS_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Decoded contents of a `.gsf` block.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSeries {
    pub start: NaiveDateTime,
    pub frames: Vec<Frame>,
}

pub fn write_frame(out: &mut String, frame: &Frame) {
    let d = frame.dim();
    for row in frame.cells().chunks(d) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn encode_series(start: NaiveDateTime, frames: &[Frame]) -> String {
    let d = frames.first().map_or(0, Frame::dim);
    let mut out = String::new();
    let _ = writeln!(out, "GSF1 {d} {}", frames.len());
    let _ = writeln!(out, "{}", format_timestamp(start));
    for f in frames {
        write_frame(&mut out, f);
    }
    out
}

pub fn write_series(path: &Path, start: NaiveDateTime, frames: &[Frame]) -> Result<()> {
    fs::write(path, encode_series(start, frames))?;
    Ok(())
}

pub fn write_elevation(path: &Path, frame: &Frame) -> Result<()> {
    let mut out = format!("GSE1 {}\n", frame.dim());
    write_frame(&mut out, frame);
    fs::write(path, out)?;
    Ok(())
}

/// Line-oriented cursor that skips blank lines and tracks line numbers.
pub(crate) struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    pub(crate) fn next_line(&mut self) -> Option<&'a str> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            if !line.trim().is_empty() {
                return Some(line);
            }
        }
        None
    }

    pub(crate) fn at_end(&mut self) -> bool {
        while let Some((_, line)) = self.inner.peek() {
            if line.trim().is_empty() {
                self.inner.next();
            } else {
                return false;
            }
        }
        true
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.last,
            message: message.into(),
        }
    }

    pub(crate) fn header(&mut self, magic: &str, fields: usize) -> Result<Vec<usize>> {
        let line = self
            .next_line()
            .ok_or_else(|| self.error(format!("missing {magic} header")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(magic) {
            return Err(self.error(format!("expected {magic} header, found {line:?}")));
        }
        let values: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.error(format!("malformed {magic} header {line:?}")))?;
        if values.len() != fields {
            return Err(self.error(format!("malformed {magic} header {line:?}")));
        }
        Ok(values)
    }

    pub(crate) fn frame(&mut self, dim: usize) -> Result<Option<Frame>> {
        let mut cells = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            let Some(line) = self.next_line() else {
                return if r == 0 {
                    Ok(None)
                } else {
                    Err(self.error(format!("frame ends after {r} of {dim} rows")))
                };
            };
            let before = cells.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.error(format!("non-numeric cell {tok:?}")))?;
                if !v.is_finite() {
                    return Err(self.error(format!("non-finite cell {tok:?}")));
                }
                cells.push(v);
            }
            if cells.len() - before != dim {
                return Err(self.error(format!(
                    "row has {} values, expected {dim}",
                    cells.len() - before
                )));
            }
        }
        Ok(Some(Frame::new(dim, cells)?))
    }
}

pub(crate) fn parse_series_block(lines: &mut Lines<'_>) -> Result<GridSeries> {
    let hdr = lines.header("GSF1", 2)?;
    let (dim, count) = (hdr[0], hdr[1]);
    if dim == 0 || count == 0 {
        return Err(lines.error("GSF1 dimensions must be positive"));
    }
    let ts_line = lines
        .next_line()
        .ok_or_else(|| lines.error("missing start timestamp"))?;
    let start = parse_timestamp(ts_line)
        .ok_or_else(|| lines.error(format!("invalid timestamp {:?}", ts_line.trim())))?;
    let mut frames = Vec::with_capacity(count);
    while frames.len() < count {
        match lines.frame(dim)? {
            Some(f) => frames.push(f),
            None => {
                return Err(Error::TruncatedSeries {
                    path: lines.path.to_path_buf(),
                    declared: count,
                    found: frames.len(),
                })
            }
        }
    }
    Ok(GridSeries { start, frames })
}

pub fn decode_series(path: &Path, text: &str) -> Result<GridSeries> {
    let mut lines = Lines::new(path, text);
    let series = parse_series_block(&mut lines)?;
    if !lines.at_end() {
        lines.next_line();
        return Err(lines.error("trailing data after declared frames"));
    }
    Ok(series)
}

pub fn read_series(path: &Path) -> Result<GridSeries> {
    let text = fs::read_to_string(path)?;
    decode_series(path, &text)
}

pub fn read_elevation(path: &Path) -> Result<Frame> {
    let text = fs::read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    let dim = lines.header("GSE1", 1)?[0];
    if dim == 0 {
        return Err(lines.error("GSE1 dimension must be positive"));
    }
    lines
        .frame(dim)?
        .ok_or_else(|| lines.error("elevation grid is empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2023, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    #[test]
    fn truncated_series_is_reported() {
        let frames = vec![Frame::filled(2, 1.0); 9];
        let text = encode_series(start(), &frames).replacen("GSF1 2 9", "GSF1 2 10", 1);
        let err = decode_series(Path::new("x.gsf"), &text).unwrap_err();
        assert!(matches!(err, Error::TruncatedSeries { declared: 10, found: 9, .. }));
    }

    #[test]
    fn malformed_inputs_name_the_line() {
        let bad = "GSF1 2 1\n2023-06-01T00:00:00\n1 2\n3 x\n";
        match decode_series(Path::new("bad.gsf"), bad).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("non-numeric"));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(decode_series(Path::new("h.gsf"), "GSF2 2 1\n").is_err());
        assert!(decode_series(Path::new("h.gsf"), "GSF1 2\n").is_err());
        let short_row = "GSF1 2 1\n2023-06-01T00:00:00\n1 2\n3\n";
        assert!(decode_series(Path::new("r.gsf"), short_row).is_err());
    }

    #[test]
    fn timestamps_accept_common_forms() {
        assert_eq!(parse_timestamp("2023-06-01T00:00:00Z"), Some(start()));
        assert_eq!(parse_timestamp("2023-06-01T00:00"), Some(start()));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    proptest! {
        #[test]
        fn series_roundtrip_is_lossless(values in proptest::collection::vec(-1e4f64..1e4, 12)) {
            let frames: Vec<Frame> = values.chunks(4).map(|c| Frame::new(2, c.to_vec()).unwrap()).collect();
            let text = encode_series(start(), &frames);
            let back = decode_series(Path::new("p.gsf"), &text).unwrap();
            prop_assert_eq!(back.start, start());
            prop_assert_eq!(back.frames, frames);
        }
    }
}
