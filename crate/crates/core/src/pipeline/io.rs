//! CSV ingestion for meter channels and irradiance files.
//!
//! Channel files: header row, then `timestamp_utc, watts[, vars]`.
//! Irradiance files: header row, then `timestamp_utc, ghi_wm2, t_ambient_c`.
//!
//! A timestamp is either a number (UTC epoch seconds), an RFC 3339 string
//! with an explicit offset, or a naive `YYYY-MM-DD[T ]HH:MM:SS[.fff]`
//! string that is interpreted in the caller's source timezone. Everything
//! is converted to UTC epoch seconds here.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, LocalResult, NaiveDateTime, SecondsFormat, TimeZone, Utc};

use crate::error::{Error, Result};
use crate::pipeline::resample::regularize;
use crate::pv::IrradianceSeries;
use crate::types::PowerSeries;

/// Timezone used to read naive timestamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceTz {
    Fixed(FixedOffset),
    Named(chrono_tz::Tz),
}

impl Default for SourceTz {
    fn default() -> Self {
        SourceTz::utc()
    }
}

impl SourceTz {
    pub fn utc() -> Self {
        SourceTz::Fixed(FixedOffset::east_opt(0).expect("zero offset"))
    }

    /// Offset from UTC in seconds (east positive).
    pub fn fixed_seconds(secs: i32) -> Result<Self> {
        FixedOffset::east_opt(secs)
            .map(SourceTz::Fixed)
            .ok_or_else(|| Error::invalid("timezone", format!("offset {secs}s out of range")))
    }

    fn to_utc(self, naive: NaiveDateTime) -> Option<DateTime<Utc>> {
        fn pick<T: TimeZone>(r: LocalResult<DateTime<T>>) -> Option<DateTime<Utc>> {
            match r {
                LocalResult::Single(t) => Some(t.with_timezone(&Utc)),
                // DST fold: take the first occurrence
                LocalResult::Ambiguous(a, _) => Some(a.with_timezone(&Utc)),
                LocalResult::None => None,
            }
        }
        match self {
            SourceTz::Fixed(off) => pick(off.from_local_datetime(&naive)),
            SourceTz::Named(tz) => pick(tz.from_local_datetime(&naive)),
        }
    }
}

impl FromStr for SourceTz {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("utc") || s == "Z" {
            return Ok(SourceTz::utc());
        }
        if let Some(rest) = s.strip_prefix(['+', '-']) {
            let sign = if s.starts_with('-') { -1 } else { 1 };
            let (h, m) = rest.split_once(':').unwrap_or((rest, "0"));
            let h: i32 = h.parse().map_err(|_| Error::invalid("timezone", s.to_string()))?;
            let m: i32 = m.parse().map_err(|_| Error::invalid("timezone", s.to_string()))?;
            return SourceTz::fixed_seconds(sign * (h * 3600 + m * 60));
        }
        s.parse::<chrono_tz::Tz>()
            .map(SourceTz::Named)
            .map_err(|_| Error::invalid("timezone", format!("unknown timezone '{s}'")))
    }
}

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses one timestamp field to UTC epoch seconds.
pub fn parse_timestamp(field: &str, tz: SourceTz) -> std::result::Result<f64, String> {
    let field = field.trim();
    if let Ok(v) = field.parse::<f64>() {
        return if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite timestamp '{field}'"))
        };
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(field) {
        return Ok(epoch_seconds(&t.with_timezone(&Utc)));
    }
    for fmt in NAIVE_FORMATS {
        if let Ok(naive) = NaiveDateTime::parse_from_str(field, fmt) {
            return tz
                .to_utc(naive)
                .map(|t| epoch_seconds(&t))
                .ok_or_else(|| format!("'{field}' does not exist in the source timezone"));
        }
    }
    Err(format!("unrecognised timestamp '{field}'"))
}

fn epoch_seconds(t: &DateTime<Utc>) -> f64 {
    t.timestamp() as f64 + f64::from(t.timestamp_subsec_nanos()) * 1e-9
}

/// RFC 3339 UTC rendering with as many fractional digits as needed.
pub fn format_timestamp(secs: f64) -> String {
    let whole = secs.floor();
    let nanos = ((secs - whole) * 1e9).round() as u32;
    let (whole, nanos) = if nanos >= 1_000_000_000 { (whole + 1.0, 0) } else { (whole, nanos) };
    DateTime::<Utc>::from_timestamp(whole as i64, nanos)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
        .unwrap_or_else(|| format!("{secs}"))
}

fn parse_value(path: &Path, line: usize, field: Option<&str>, what: &str) -> Result<f64> {
    let raw = field.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("missing {what} column"),
    })?;
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("bad {what} value '{raw}'"),
    })
}

struct Rows {
    times: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

fn read_rows(path: &Path, tz: SourceTz, names: &[&str], optional_last: bool) -> Result<Rows> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut have_optional = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let ts = record.get(0).unwrap_or("");
        let t = parse_timestamp(ts, tz).map_err(|reason| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        })?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::NonMonotone {
                    path: path.to_path_buf(),
                    line,
                    time: t,
                    previous: prev,
                });
            }
        }
        times.push(t);
        for (c, name) in names.iter().enumerate() {
            let is_optional = optional_last && c == names.len() - 1;
            let field = record.get(c + 1).filter(|f| !f.is_empty());
            if is_optional {
                let present = field.is_some();
                match have_optional {
                    None => have_optional = Some(present),
                    Some(p) if p != present => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line,
                            reason: format!("{name} column present on some rows only"),
                        })
                    }
                    _ => {}
                }
                if !present {
                    continue;
                }
            }
            columns[c].push(parse_value(path, line, field, name)?);
        }
    }
    if times.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(Rows { times, columns })
}

/// Reads a channel file onto its native (median-spacing) grid in UTC.
pub fn load_channel(path: impl AsRef<Path>, tz: SourceTz) -> Result<PowerSeries> {
    let path = path.as_ref();
    let rows = read_rows(path, tz, &["watts", "vars"], true)?;
    let has_q = !rows.columns[1].is_empty();
    let mut cols: Vec<&[f64]> = vec![&rows.columns[0]];
    if has_q {
        cols.push(&rows.columns[1]);
    }
    let (grid, mut out) = regularize(&rows.times, &cols)?;
    let reactive = if has_q { out.pop() } else { None };
    let active = out.pop().expect("active column");
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PowerSeries::on_grid(id, grid, active, reactive)
}

pub fn load_irradiance(path: impl AsRef<Path>) -> Result<IrradianceSeries> {
    let path = path.as_ref();
    let rows = read_rows(path, SourceTz::utc(), &["ghi_wm2", "t_ambient_c"], false)?;
    let (grid, mut out) = regularize(&rows.times, &[&rows.columns[0], &rows.columns[1]])?;
    let t_amb = out.pop().expect("two columns");
    let ghi = out.pop().expect("two columns");
    IrradianceSeries::new(grid.start, grid.period, ghi, t_amb)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_channel_csv(series: &PowerSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let grid = series.grid();
    match series.reactive() {
        Some(q) => {
            writeln!(w, "timestamp_utc,watts,vars").map_err(io)?;
            for (k, (p, q)) in series.active().iter().zip(q).enumerate() {
                writeln!(w, "{},{p},{q}", format_timestamp(grid.time_at(k))).map_err(io)?;
            }
        }
        None => {
            writeln!(w, "timestamp_utc,watts").map_err(io)?;
            for (k, p) in series.active().iter().enumerate() {
                writeln!(w, "{},{p}", format_timestamp(grid.time_at(k))).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn write_irradiance_csv(irr: &IrradianceSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "timestamp_utc,ghi_wm2,t_ambient_c").map_err(io)?;
    let grid = irr.grid();
    for (k, (g, t)) in irr.ghi().iter().zip(irr.t_ambient()).enumerate() {
        writeln!(w, "{},{g},{t}", format_timestamp(grid.time_at(k))).map_err(io)?;
    }
    w.flush().map_err(io)
}
