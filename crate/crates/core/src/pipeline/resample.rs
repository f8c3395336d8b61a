//! Step-hold resampling onto a uniform grid.

use crate::error::{Error, Result};
use crate::types::{Grid, PowerSeries};

/// Tolerance (in periods) for snapping a target time onto a source sample.
const SNAP: f64 = 1e-9;

/// For every point of `target`, the index of the most recent `source`
/// sample at or before it. Points before the source start map to 0
/// (back-fill), points past the end map to the last sample (forward-fill).
pub fn hold_indices(source: &Grid, target: &Grid) -> Vec<usize> {
    let last = source.len.saturating_sub(1);
    (0..target.len)
        .map(|k| {
            let pos = (target.time_at(k) - source.start) / source.period;
            if pos <= 0.0 {
                0
            } else {
                ((pos + SNAP).floor() as usize).min(last)
            }
        })
        .collect()
}

/// Same rule as [`hold_indices`] for an irregular, strictly increasing
/// list of source timestamps.
pub fn hold_indices_irregular(times: &[f64], target: &Grid) -> Vec<usize> {
    (0..target.len)
        .map(|k| {
            let t = target.time_at(k);
            let slack = SNAP * target.period;
            // number of source samples with time <= t
            let n = times.partition_point(|&s| s <= t + slack);
            n.saturating_sub(1)
        })
        .collect()
}

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Resamples `series` onto `grid` by forward-fill, back-filling any leading
/// gap from the first sample.
pub fn resample_align(series: &PowerSeries, grid: Grid) -> Result<PowerSeries> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if grid.len == 0 {
        return Err(Error::EmptySeries);
    }
    let idx = hold_indices(&series.grid(), &grid);
    PowerSeries::on_grid(
        series.channel_id(),
        grid,
        gather(series.active(), &idx),
        series.reactive().map(|q| gather(q, &idx)),
    )
}

/// Places irregular timestamped samples on a uniform grid that starts at
/// the first timestamp, using the median spacing as the period.
pub(crate) fn regularize(
    times: &[f64],
    columns: &[&[f64]],
) -> Result<(Grid, Vec<Vec<f64>>)> {
    if times.is_empty() {
        return Err(Error::EmptySeries);
    }
    let period = if times.len() == 1 {
        1.0
    } else {
        let mut diffs: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        diffs.sort_by(f64::total_cmp);
        diffs[diffs.len() / 2]
    };
    let span = times[times.len() - 1] - times[0];
    let len = (span / period + SNAP).floor() as usize + 1;
    let grid = Grid::new(times[0], period, len)?;
    let idx = hold_indices_irregular(times, &grid);
    let cols = columns.iter().map(|c| gather(c, &idx)).collect();
    Ok((grid, cols))
}
