use std::path::Path;

use plotters::prelude::*;

use crate::error::{CliError, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

const ON_TRUE: RGBColor = RGBColor(60, 60, 60);
const ON_PRED: RGBColor = RGBColor(214, 96, 39);

/// Two bands per appliance, ground truth above prediction; a filled cell is
/// an "on" window.
pub fn state_raster(path: &Path, appliances: &[String], truth: &[Vec<u8>], pred: Option<&[Vec<u8>]>) -> Result<()> {
    let n = truth.len().max(1);
    let bands = appliances.len() * 2;
    let root = SVGBackend::new(path, (1000, 120 + 50 * bands as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("appliance states per test window", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(140)
        .build_cartesian_2d(0f64..n as f64, 0f64..bands as f64)
        .map_err(|e| plot_err(path, e))?;
    let labels: Vec<String> = appliances
        .iter()
        .flat_map(|a| [format!("{a} (true)"), format!("{a} (pred)")])
        .collect();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("window")
        .y_labels(bands)
        .y_label_formatter(&|y| {
            let i = y.floor() as usize;
            // Bands are drawn top-down, the axis counts bottom-up.
            labels.get(bands.saturating_sub(i + 1)).cloned().unwrap_or_default()
        })
        .draw()
        .map_err(|e| plot_err(path, e))?;

    let mut cells = Vec::new();
    for (j, _) in appliances.iter().enumerate() {
        let true_row = (bands - 1 - 2 * j) as f64;
        let pred_row = true_row - 1.0;
        for (w, row) in truth.iter().enumerate() {
            if row[j] == 1 {
                cells.push(Rectangle::new([(w as f64, true_row + 0.1), (w as f64 + 1.0, true_row + 0.9)], ON_TRUE.filled()));
            }
            if pred.is_some_and(|p| p[w][j] == 1) {
                cells.push(Rectangle::new([(w as f64, pred_row + 0.1), (w as f64 + 1.0, pred_row + 0.9)], ON_PRED.filled()));
            }
        }
    }
    chart.draw_series(cells).map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Estimated and true injection in watts against hours since the first
/// test sample.
pub fn injection_overlay(path: &Path, times: &[f64], truth: &[f64], pred: Option<&[f64]>) -> Result<()> {
    let t0 = times.first().copied().unwrap_or(0.0);
    let hours: Vec<f64> = times.iter().map(|t| (t - t0) / 3600.0).collect();
    let x_max = hours.last().copied().unwrap_or(0.0).max(1e-9);
    let y_max = truth
        .iter()
        .chain(pred.unwrap_or(&[]))
        .fold(1.0f64, |m, &v| if v.is_finite() { m.max(v) } else { m })
        * 1.05;
    let root = SVGBackend::new(path, (1000, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("behind-the-meter injection", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..x_max, 0f64..y_max)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("hours")
        .y_desc("W")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(hours.iter().copied().zip(truth.iter().copied()), &ON_TRUE))
        .map_err(|e| plot_err(path, e))?
        .label("true")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], ON_TRUE));
    if let Some(p) = pred {
        chart
            .draw_series(LineSeries::new(hours.iter().copied().zip(p.iter().copied()), &ON_PRED))
            .map_err(|e| plot_err(path, e))?
            .label("estimated")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 20, y)], ON_PRED));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// One bar per label with a ±1 std whisker.
pub fn bar_chart(path: &Path, title: &str, labels: &[String], means: &[f64], stds: &[f64]) -> Result<()> {
    let n = labels.len().max(1);
    let top = means
        .iter()
        .zip(stds)
        .map(|(m, s)| m + if s.is_finite() { *s } else { 0.0 })
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let root = SVGBackend::new(path, (160 + 90 * n as u32, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..n).into_segmented(), 0f64..top * 1.05)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let bars = means.iter().enumerate().filter(|(_, m)| m.is_finite()).map(|(i, &m)| {
        Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), m)], ON_PRED.filled())
    });
    chart.draw_series(bars).map_err(|e| plot_err(path, e))?;
    let whiskers = means
        .iter()
        .zip(stds)
        .enumerate()
        .filter(|(_, (m, s))| m.is_finite() && s.is_finite() && **s > 0.0)
        .map(|(i, (&m, &s))| {
            let x = SegmentValue::CenterOf(i);
            PathElement::new([(x.clone(), (m - s).max(0.0)), (x, m + s)], BLACK)
        });
    chart.draw_series(whiskers).map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
