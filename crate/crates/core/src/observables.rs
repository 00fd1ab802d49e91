//! Time-series records and quantum-versus-classical comparisons.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Floor on the denominator of relative deviations.
pub const REL_FLOOR: f64 = 1e-9;
/// Default saturation window: the trailing third of the run.
pub const DEFAULT_WINDOW_FRACTION: f64 = 1.0 / 3.0;

/// Aligned named time series plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.get(name).map(|v| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Misuse(format!("record has no series named {name:?}")))
    }

    /// Appends one sample. The first push fixes the set of series names.
    pub fn push(&mut self, t: f64, values: &[(&str, f64)]) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(Error::Misuse(format!("time {t} does not increase past {last}")));
            }
            if values.len() != self.series.len() || values.iter().any(|(n, _)| !self.series.contains_key(*n)) {
                return Err(Error::Misuse("series set changed between samples".into()));
            }
        } else {
            for (n, _) in values {
                self.series.insert((*n).to_string(), Vec::new());
            }
            if self.series.len() != values.len() {
                return Err(Error::Misuse("duplicate series name".into()));
            }
        }
        self.times.push(t);
        for (n, v) in values {
            self.series.get_mut(*n).expect("series").push(*v);
        }
        Ok(())
    }

    /// Adds a whole series aligned with the existing times.
    pub fn insert_series(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.times.len() {
            return Err(Error::Misuse(format!(
                "series {name:?} has {} samples, record has {}",
                values.len(),
                self.times.len()
            )));
        }
        self.series.insert(name.to_string(), values);
        Ok(())
    }

    /// Linear interpolation of every series onto `times`, which must lie inside
    /// the recorded range. Aligned times are copied exactly.
    pub fn resample(&self, times: &[f64]) -> Result<TrajectoryRecord> {
        let mut out = TrajectoryRecord { times: times.to_vec(), series: BTreeMap::new(), metadata: self.metadata.clone() };
        for (name, vals) in &self.series {
            let mut col = Vec::with_capacity(times.len());
            for &t in times {
                col.push(interp(&self.times, vals, t)?);
            }
            out.series.insert(name.clone(), col);
        }
        Ok(out)
    }

    /// CSV with `# key=value` metadata lines, a header, and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}={v}")?;
        }
        let names: Vec<&String> = self.series.keys().collect();
        write!(w, "t")?;
        for n in &names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (i, t) in self.times.iter().enumerate() {
            write!(w, "{}", fmt17(*t))?;
            for n in &names {
                write!(w, ",{}", fmt17(self.series[*n][i]))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<TrajectoryRecord> {
        let mut rec = TrajectoryRecord::new();
        let mut names: Option<Vec<String>> = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    rec.set_meta(k.trim(), v.trim());
                }
                continue;
            }
            match &names {
                None => {
                    let cols: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
                    if cols.first().map(String::as_str) != Some("t") {
                        return Err(Error::Format("record header must start with column t".into()));
                    }
                    for c in &cols[1..] {
                        rec.series.insert(c.clone(), Vec::new());
                    }
                    names = Some(cols[1..].to_vec());
                }
                Some(cols) => {
                    let vals: Vec<f64> = line
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
                    if vals.len() != cols.len() + 1 {
                        return Err(Error::Format(format!("line {}: wrong column count", lineno + 1)));
                    }
                    if let Some(&last) = rec.times.last() {
                        if !(vals[0] > last) {
                            return Err(Error::Format(format!("line {}: times not increasing", lineno + 1)));
                        }
                    }
                    rec.times.push(vals[0]);
                    for (c, v) in cols.iter().zip(&vals[1..]) {
                        rec.series.get_mut(c).expect("column").push(*v);
                    }
                }
            }
        }
        if names.is_none() {
            return Err(Error::Format("record has no header".into()));
        }
        Ok(rec)
    }
}

/// Formats a double with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn interp(ts: &[f64], vs: &[f64], t: f64) -> Result<f64> {
    let n = ts.len();
    if n == 0 {
        return Err(Error::Misuse("empty record".into()));
    }
    let tol = 1e-12 * t.abs().max(1.0);
    if t < ts[0] - tol || t > ts[n - 1] + tol {
        return Err(Error::Misuse(format!("time {t} outside [{}, {}]", ts[0], ts[n - 1])));
    }
    let j = ts.partition_point(|&s| s < t - tol);
    if j < n && (ts[j] - t).abs() <= tol {
        return Ok(vs[j]);
    }
    if j == 0 {
        return Ok(vs[0]);
    }
    let (t0, t1) = (ts[j - 1], ts[j]);
    let w = (t - t0) / (t1 - t0);
    Ok(vs[j - 1] * (1.0 - w) + vs[j] * w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub times: Vec<f64>,
    pub deviation: Vec<f64>,
    pub max_deviation: f64,
    pub max_at: f64,
    /// First time the deviation exceeds the caller's threshold.
    pub first_crossing: Option<f64>,
}

/// Pointwise `|q − c| / max(|c|, 1e-9)` over the common time range. If the
/// cadences differ, the classical record is interpolated onto the quantum
/// times that fall inside its range.
pub fn divergence(
    quantum: &TrajectoryRecord,
    classical: &TrajectoryRecord,
    series: &str,
    threshold: f64,
) -> Result<Divergence> {
    let q = quantum.require(series)?;
    let c = classical.require(series)?;
    if quantum.is_empty() || classical.is_empty() {
        return Err(Error::Misuse("empty record".into()));
    }
    let lo = classical.times[0];
    let hi = *classical.times.last().unwrap();
    let tol = 1e-12 * hi.abs().max(1.0);
    let mut times = Vec::new();
    let mut dev = Vec::new();
    for (i, &t) in quantum.times.iter().enumerate() {
        if t < lo - tol || t > hi + tol {
            continue;
        }
        let cv = interp(&classical.times, c, t)?;
        times.push(t);
        dev.push((q[i] - cv).abs() / cv.abs().max(REL_FLOOR));
    }
    if times.is_empty() {
        return Err(Error::Misuse("records share no time range".into()));
    }
    let (imax, &max_deviation) = dev
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let first_crossing = dev.iter().position(|&d| d > threshold).map(|i| times[i]);
    Ok(Divergence { max_at: times[imax], times, deviation: dev, max_deviation, first_crossing })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    /// Trailing fraction of the recorded time span.
    TrailingFraction(f64),
    /// Trailing duration in time units.
    Duration(f64),
}

impl Default for Window {
    fn default() -> Self {
        Window::TrailingFraction(DEFAULT_WINDOW_FRACTION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Saturation {
    pub saturated: bool,
    /// Least-squares slope over the window.
    pub slope: f64,
    /// Mean |value| over the window.
    pub scale: f64,
}

impl Saturation {
    pub fn relative_slope(&self) -> f64 {
        self.slope / self.scale.max(REL_FLOOR)
    }
}

/// Least-squares slope of `series` over the trailing window; saturated when
/// `|slope| < threshold · scale`.
pub fn saturation_check(record: &TrajectoryRecord, series: &str, window: Window, threshold: f64) -> Result<Saturation> {
    let vals = record.require(series)?;
    if record.len() < 2 {
        return Err(Error::Misuse("record too short for a slope".into()));
    }
    let t_end = *record.times.last().unwrap();
    let span = t_end - record.times[0];
    let width = match window {
        Window::TrailingFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Misuse(format!("window fraction {f} outside (0, 1]")));
            }
            f * span
        }
        Window::Duration(d) => {
            if d > span * (1.0 + 1e-12) || !(d > 0.0) {
                return Err(Error::Misuse(format!("window {d} longer than the record span {span}")));
            }
            d
        }
    };
    let start = t_end - width - 1e-12 * t_end.abs().max(1.0);
    let pts: Vec<(f64, f64)> = record
        .times
        .iter()
        .zip(vals)
        .filter(|(t, _)| **t >= start)
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Misuse("window holds fewer than two samples".into()));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let vm = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - vm)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let slope = sxy / sxx;
    let scale = pts.iter().map(|p| p.1.abs()).sum::<f64>() / n;
    Ok(Saturation { saturated: slope.abs() < threshold * scale, slope, scale })
}
