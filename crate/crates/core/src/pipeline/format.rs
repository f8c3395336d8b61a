//! `DNILM1` dataset files.
//!
//! Every file starts with the 6-byte magic `DNILM1`, one kind byte
//! (`H` household, `W` window set), a little-endian `u32` header length and
//! a UTF-8 JSON header. The payload that follows is columnar, little-endian:
//!
//! Household (`H`), each column `len` values long:
//!   aggregate.active f64, aggregate.reactive f64 (if `aggregate_reactive`),
//!   then per appliance: active f64, reactive f64 (if its `has_reactive`),
//!   states u8; then injection.active f64, injection.reactive f64 (if
//!   `injection_reactive`).
//!
//! Window set (`W`), per segment of `len` samples:
//!   active f64, reactive f64, states u8 for each of K appliances,
//!   normalised injection target f64, then `count` window start offsets u64.
//!   A window is the `window_length` samples starting at its offset; its
//!   labels are the states at the last of them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::windows::{WindowPlan, WindowedSample, FEATURES};
use crate::types::{
    ApplianceSpec, ApplianceTrack, AugmentedHousehold, Grid, InjectionProfile, PowerSeries,
    StateSequence,
};

pub const MAGIC: &[u8; 6] = b"DNILM1";
const KIND_HOUSEHOLD: u8 = b'H';
const KIND_WINDOWS: u8 = b'W';

#[derive(Serialize, Deserialize)]
struct HouseholdHeader {
    grid: Grid,
    aggregate_id: String,
    aggregate_reactive: bool,
    appliances: Vec<ApplianceHeader>,
    injection_id: String,
    injection_reactive: bool,
    rated_capacity: f64,
    inverter_efficiency: f64,
}

#[derive(Serialize, Deserialize)]
struct ApplianceHeader {
    spec: ApplianceSpec,
    channel_id: String,
    has_reactive: bool,
}

#[derive(Serialize, Deserialize)]
struct WindowHeader {
    window_length: usize,
    features: usize,
    appliances: Vec<String>,
    rated_capacity: f64,
    segments: Vec<SegmentHeader>,
}

#[derive(Serialize, Deserialize)]
struct SegmentHeader {
    grid: Grid,
    count: usize,
}

/// Windows cut from one or more contiguous segments, with the metadata
/// needed to train on them or score them.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub appliances: Vec<String>,
    pub rated_capacity: f64,
    pub window_length: usize,
    /// Grid of each source segment; windows never straddle two.
    pub segments: Vec<Grid>,
    pub samples: Vec<WindowedSample>,
}

impl WindowSet {
    /// Cuts windows from each segment independently.
    pub fn from_segments(segments: &[AugmentedHousehold], plan: WindowPlan) -> Result<Self> {
        let first = segments.first().ok_or(Error::EmptyInput("window set"))?;
        let mut samples = Vec::new();
        let mut grids = Vec::new();
        for seg in segments {
            if seg.appliance_names() != first.appliance_names() {
                return Err(Error::invalid("segments", "appliance lists differ"));
            }
            if seg.len() < plan.window_length {
                continue;
            }
            samples.extend(crate::pipeline::extract_windows(seg, plan)?);
            grids.push(seg.grid());
        }
        if samples.is_empty() {
            let len = segments.iter().map(|s| s.len()).max().unwrap_or(0);
            return Err(Error::TooShort {
                len,
                window: plan.window_length,
            });
        }
        Ok(WindowSet {
            appliances: first.appliance_names(),
            rated_capacity: first.injection.rated_capacity(),
            window_length: plan.window_length,
            segments: grids,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct Writer {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Writer {
    fn create(path: &Path, kind: u8, header: &impl Serialize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        let json = serde_json::to_vec(header).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        w.bytes(MAGIC)?;
        w.bytes(&[kind])?;
        w.bytes(&(json.len() as u32).to_le_bytes())?;
        w.bytes(&json)?;
        Ok(w)
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    fn f64s(&mut self, values: impl IntoIterator<Item = f64>) -> Result<()> {
        for v in values {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

struct Reader {
    inp: BufReader<File>,
    path: PathBuf,
}

impl Reader {
    fn open<H: for<'de> Deserialize<'de>>(path: &Path, kind: u8) -> Result<(Self, H)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inp: BufReader::new(file),
            path: path.to_path_buf(),
        };
        let magic = r.bytes(7)?;
        if &magic[..6] != MAGIC {
            return Err(r.bad("missing DNILM1 magic"));
        }
        if magic[6] != kind {
            return Err(r.bad(format!("expected kind '{}', found '{}'", kind as char, magic[6] as char)));
        }
        let n = u32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes")) as usize;
        let json = r.bytes(n)?;
        let header = serde_json::from_slice(&json).map_err(|e| r.bad(e.to_string()))?;
        Ok((r, header))
    }

    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inp.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.bad("truncated file"),
            _ => Error::io(&self.path, e),
        })?;
        Ok(buf)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inp.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.bad("trailing bytes after payload")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

pub fn write_household(h: &AugmentedHousehold, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let inj = h.injection.series();
    let header = HouseholdHeader {
        grid: h.grid(),
        aggregate_id: h.aggregate.channel_id().to_string(),
        aggregate_reactive: h.aggregate.reactive().is_some(),
        appliances: h
            .appliances
            .iter()
            .map(|a| ApplianceHeader {
                spec: a.spec.clone(),
                channel_id: a.series.channel_id().to_string(),
                has_reactive: a.series.reactive().is_some(),
            })
            .collect(),
        injection_id: inj.channel_id().to_string(),
        injection_reactive: inj.reactive().is_some(),
        rated_capacity: h.injection.rated_capacity(),
        inverter_efficiency: h.injection.inverter_efficiency(),
    };
    let n = h.len();
    let check = |s: &PowerSeries| {
        if s.len() == n {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("channel '{}' has {} samples, expected {n}", s.channel_id(), s.len())))
        }
    };
    let mut w = Writer::create(path, KIND_HOUSEHOLD, &header)?;
    w.f64s(h.aggregate.active().iter().copied())?;
    if let Some(q) = h.aggregate.reactive() {
        w.f64s(q.iter().copied())?;
    }
    for a in &h.appliances {
        check(&a.series)?;
        w.f64s(a.series.active().iter().copied())?;
        if let Some(q) = a.series.reactive() {
            w.f64s(q.iter().copied())?;
        }
        w.bytes(a.states.states())?;
    }
    check(inj)?;
    w.f64s(inj.active().iter().copied())?;
    if let Some(q) = inj.reactive() {
        w.f64s(q.iter().copied())?;
    }
    w.finish()
}

pub fn read_household(path: impl AsRef<Path>) -> Result<AugmentedHousehold> {
    let path = path.as_ref();
    let (mut r, header): (Reader, HouseholdHeader) = Reader::open(path, KIND_HOUSEHOLD)?;
    let grid = header.grid;
    let n = grid.len;
    let fmt = |e: Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let agg_p = r.f64s(n)?;
    let agg_q = if header.aggregate_reactive { Some(r.f64s(n)?) } else { None };
    let aggregate = PowerSeries::on_grid(header.aggregate_id, grid, agg_p, agg_q).map_err(fmt)?;
    let mut appliances = Vec::with_capacity(header.appliances.len());
    for a in header.appliances {
        let p = r.f64s(n)?;
        let q = if a.has_reactive { Some(r.f64s(n)?) } else { None };
        let states = StateSequence::new(a.spec.name(), grid, r.bytes(n)?).map_err(fmt)?;
        appliances.push(ApplianceTrack {
            series: PowerSeries::on_grid(a.channel_id, grid, p, q).map_err(fmt)?,
            states,
            spec: a.spec,
        });
    }
    let inj_p = r.f64s(n)?;
    let inj_q = if header.injection_reactive { Some(r.f64s(n)?) } else { None };
    let injection = InjectionProfile::new(
        PowerSeries::on_grid(header.injection_id, grid, inj_p, inj_q).map_err(fmt)?,
        header.rated_capacity,
        header.inverter_efficiency,
    )
    .map_err(fmt)?;
    r.expect_eof()?;
    Ok(AugmentedHousehold {
        aggregate,
        appliances,
        injection,
    })
}

/// Writes the windows of `segments` under `plan` without duplicating
/// overlapping samples.
pub fn write_window_set(segments: &[AugmentedHousehold], plan: WindowPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = segments.first().ok_or(Error::EmptyInput("window set"))?;
    let usable: Vec<&AugmentedHousehold> = segments.iter().filter(|s| s.len() >= plan.window_length).collect();
    if usable.is_empty() {
        return Err(Error::TooShort {
            len: segments.iter().map(|s| s.len()).max().unwrap_or(0),
            window: plan.window_length,
        });
    }
    let header = WindowHeader {
        window_length: plan.window_length,
        features: FEATURES,
        appliances: first.appliance_names(),
        rated_capacity: first.injection.rated_capacity(),
        segments: usable
            .iter()
            .map(|s| SegmentHeader {
                grid: s.grid(),
                count: plan.count(s.len()),
            })
            .collect(),
    };
    let mut w = Writer::create(path, KIND_WINDOWS, &header)?;
    for seg in usable {
        if seg.appliance_names() != header.appliances {
            return Err(Error::invalid("segments", "appliance lists differ"));
        }
        let q = seg
            .aggregate
            .reactive()
            .ok_or_else(|| Error::invalid("aggregate.reactive", "reactive channel missing"))?;
        w.f64s(seg.aggregate.active().iter().copied())?;
        w.f64s(q.iter().copied())?;
        for a in &seg.appliances {
            w.bytes(a.states.states())?;
        }
        let rated = seg.injection.rated_capacity();
        w.f64s(seg.injection.series().active().iter().map(|v| (v / rated).clamp(0.0, 1.0)))?;
        for k in 0..plan.count(seg.len()) {
            w.bytes(&((k * plan.stride) as u64).to_le_bytes())?;
        }
    }
    w.finish()
}

pub fn read_window_set(path: impl AsRef<Path>) -> Result<WindowSet> {
    let path = path.as_ref();
    let (mut r, header): (Reader, WindowHeader) = Reader::open(path, KIND_WINDOWS)?;
    if header.features != FEATURES {
        return Err(r.bad(format!("expected {FEATURES} features, found {}", header.features)));
    }
    let t_len = header.window_length;
    let k = header.appliances.len();
    let mut samples = Vec::new();
    let mut grids = Vec::new();
    for seg in &header.segments {
        let n = seg.grid.len;
        let p = r.f64s(n)?;
        let q = r.f64s(n)?;
        let states: Vec<Vec<u8>> = (0..k).map(|_| r.bytes(n)).collect::<Result<_>>()?;
        let target = r.f64s(n)?;
        for start in r.u64s(seg.count)? {
            let start = start as usize;
            let end = start + t_len;
            if end > n {
                return Err(r.bad(format!("window at {start} overruns segment of {n}")));
            }
            let mut inputs = Vec::with_capacity(t_len * FEATURES);
            for t in start..end {
                inputs.push(p[t]);
                inputs.push(q[t]);
            }
            samples.push(WindowedSample {
                start_time: seg.grid.time_at(start),
                end_time: seg.grid.time_at(end - 1),
                inputs,
                state_labels: states.iter().map(|s| s[end - 1]).collect(),
                injection_target: target[start..end].to_vec(),
            });
        }
        grids.push(seg.grid);
    }
    r.expect_eof()?;
    Ok(WindowSet {
        appliances: header.appliances,
        rated_capacity: header.rated_capacity,
        window_length: t_len,
        segments: grids,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::windows::WindowPlan;
    use crate::pipeline::{split_dataset, synthesize_household, SplitMode};
    use crate::types::ApplianceSpec;

    fn household(n: usize) -> AugmentedHousehold {
        let a: Vec<f64> = (0..n).map(|i| ((i * 37) % 500) as f64 + 0.1).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 11) % 90) as f64 / 3.0).collect();
        let pv: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.01).sin().abs() * 200.0).collect();
        let inj = InjectionProfile::new(PowerSeries::new("pv", 1e9, 6.0, pv, None).unwrap(), 200.0, 0.96).unwrap();
        synthesize_household(
            &[PowerSeries::new("a", 1e9, 6.0, a, None).unwrap(), PowerSeries::new("b", 1e9, 6.0, b, None).unwrap()],
            &[
                ApplianceSpec::appliance("a", 200.0, 0.8).unwrap(),
                ApplianceSpec::appliance("b", 10.0, 0.95).unwrap(),
            ],
            None,
            &inj,
        )
        .unwrap()
    }

    #[test]
    fn household_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let h = household(1234);
        let p = dir.path().join("h.dnilm");
        write_household(&h, &p).unwrap();
        let back = read_household(&p).unwrap();
        assert_eq!(back, h);
        let bits = |s: &PowerSeries| s.active().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.aggregate), bits(&h.aggregate));
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..6], b"DNILM1");
    }

    #[test]
    fn window_set_matches_direct_extraction() {
        let dir = tempfile::tempdir().unwrap();
        let h = household(1000);
        let folds = split_dataset(&h, SplitMode::TestMiddle { test_span_s: 300.0 * 6.0 }).unwrap();
        let plan = WindowPlan::new(50, 7).unwrap();
        let p = dir.path().join("train.dnilm");
        write_window_set(&folds[0].train, plan, &p).unwrap();
        let back = read_window_set(&p).unwrap();
        let direct = WindowSet::from_segments(&folds[0].train, plan).unwrap();
        assert_eq!(back, direct);
        assert_eq!(back.segments.len(), 2);
        // no window crosses into the test block
        let test = folds[0].test.grid();
        for w in &back.samples {
            assert!(w.end_time < test.start || w.start_time > test.last_time());
        }
    }

    #[test]
    fn wrong_kind_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let h = household(400);
        let p = dir.path().join("h.dnilm");
        write_household(&h, &p).unwrap();
        assert!(matches!(read_window_set(&p), Err(Error::Format { .. })));
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(read_household(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"NOTDNILM").unwrap();
        assert!(matches!(read_household(&p), Err(Error::Format { .. })));
    }
}
