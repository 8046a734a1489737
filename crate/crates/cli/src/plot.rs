//! BER-against-SNR charts rendered from a metrics CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mudemod_core::{Error, Result};
use plotters::prelude::*;

/// One (method, SNR, BER) point of a curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub cell: usize,
    pub system: String,
    pub method: String,
    pub snr_db: f64,
    pub ber: f64,
}

/// Splits a CSV line on commas outside double quotes.
fn split_csv(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    fields.push(cur);
    fields
}

pub fn read_curves(csv: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = csv.lines();
    let header = split_csv(lines.next().ok_or_else(|| Error::Config("metrics CSV is empty".into()))?);
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("metrics CSV has no '{name}' column")))
    };
    let (ci, si, mi, ni, bi) = (col("cell")?, col("system")?, col("method")?, col("snr_db")?, col("ber")?);
    let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| Error::Config(format!("metrics CSV line {line}: bad number '{s}'")));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = split_csv(line);
        if f.len() != header.len() {
            return Err(Error::Config(format!("metrics CSV line {}: {} fields, header has {}", i + 2, f.len(), header.len())));
        }
        out.push(CurvePoint {
            cell: num(&f[ci], i + 2)? as usize,
            system: f[si].clone(),
            method: f[mi].clone(),
            snr_db: num(&f[ni], i + 2)?,
            ber: num(&f[bi], i + 2)?,
        });
    }
    Ok(out)
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Writes `ber_cell-NN.svg` per grid cell into `out_dir`.
pub fn render_ber_plots(metrics_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let points = read_curves(&fs::read_to_string(metrics_csv)?)?;
    fs::create_dir_all(out_dir)?;
    let mut cells: BTreeMap<usize, Vec<&CurvePoint>> = BTreeMap::new();
    for p in &points {
        cells.entry(p.cell).or_default().push(p);
    }
    let mut written = Vec::new();
    for (cell, pts) in cells {
        let path = out_dir.join(format!("ber_cell-{cell:02}.svg"));
        draw_cell(&path, &pts)?;
        written.push(path);
    }
    Ok(written)
}

fn draw_cell(path: &Path, pts: &[&CurvePoint]) -> Result<()> {
    let floor = 1e-5;
    let x_lo = pts.iter().map(|p| p.snr_db).fold(f64::INFINITY, f64::min);
    let x_hi = pts.iter().map(|p| p.snr_db).fold(f64::NEG_INFINITY, f64::max);
    let (x_lo, x_hi) = if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo - 1.0, x_lo + 1.0) };
    let y_lo = pts.iter().map(|p| p.ber.max(floor)).fold(1.0, f64::min) / 2.0;

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&pts[0].system, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_lo..x_hi, (y_lo..1.0).log_scale())
        .map_err(plot_error)?;
    chart.configure_mesh().x_desc("SNR (dB)").y_desc("BER").draw().map_err(plot_error)?;

    let mut methods: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in pts {
        methods.entry(p.method.as_str()).or_default().push((p.snr_db, p.ber.max(floor)));
    }
    for (i, (name, mut curve)) in methods.into_iter().enumerate() {
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(curve.clone(), color.stroke_width(2)))
            .map_err(plot_error)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(curve.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(plot_error)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}
