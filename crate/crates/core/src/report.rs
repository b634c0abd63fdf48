// SPDX-License-Identifier: MIT OR Apache-2.0

//! Figure artifacts: per-channel 3×3 image grids and ratio-versus-scale
//! plots with their tabular exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablate::AblationReport;
use crate::error::{Error, Result};
use crate::imgops::resize_bilinear;
use crate::netgraph::BlockAddress;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Color of cells whose content is missing.
pub const PLACEHOLDER_RGB: [u8; 3] = [255, 0, 255];

const BACKGROUND_RGB: [u8; 3] = [255, 255, 255];

/// Content of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub enum GridCell<T> {
    /// A single `[1, 3, H, W]` image in `[0, 1]`.
    Image(Tensor<T>),
    /// Exactly nine images tiled 3×3 in reading order.
    Mosaic(Vec<Tensor<T>>),
    /// Rendered as a placeholder; the string says what is missing.
    Missing(String),
}

/// Columns are the In, Pre and Post taps; rows are the center-neuron
/// visualization, the whole-channel visualization and the top-9 natural
/// images.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid<T> {
    pub addr: BlockAddress,
    pub channel: usize,
    pub cells: [[GridCell<T>; 3]; 3],
}

/// Pixel geometry of a rendered grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub cell: usize,
    pub gap: usize,
}

impl Default for GridLayout {
    fn default() -> Self {
        Self { cell: 225, gap: 4 }
    }
}

impl GridLayout {
    pub fn side(&self) -> usize {
        3 * self.cell + 4 * self.gap
    }

    /// Top-left pixel `(y, x)` of cell `(row, col)`.
    pub fn cell_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (self.gap + row * (self.cell + self.gap), self.gap + col * (self.cell + self.gap))
    }

    /// Side of one mosaic tile.
    pub fn tile(&self) -> usize {
        self.cell / 3
    }
}

/// Warnings produced while rendering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderOutcome {
    pub warnings: Vec<String>,
}

fn paste<T: Scalar>(canvas: &mut image::RgbImage, img: &Tensor<T>, top: usize, left: usize, size: usize) {
    let scaled = resize_bilinear(img, size, size, false);
    for y in 0..size {
        for x in 0..size {
            let px = std::array::from_fn(|c| {
                let v = scaled.at(0, c.min(scaled.channels() - 1), y, x).as_f64();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            canvas.put_pixel((left + x) as u32, (top + y) as u32, image::Rgb(px));
        }
    }
}

fn fill(canvas: &mut image::RgbImage, top: usize, left: usize, size: usize, rgb: [u8; 3]) {
    for y in 0..size {
        for x in 0..size {
            canvas.put_pixel((left + x) as u32, (top + y) as u32, image::Rgb(rgb));
        }
    }
}

/// Renders the grid as an 8-bit RGB image.
pub fn compose_channel_grid<T: Scalar>(grid: &ChannelGrid<T>, layout: GridLayout) -> Result<(image::RgbImage, RenderOutcome)> {
    let side = layout.side() as u32;
    let mut canvas = image::RgbImage::from_pixel(side, side, image::Rgb(BACKGROUND_RGB));
    let mut outcome = RenderOutcome::default();
    for (row, cells) in grid.cells.iter().enumerate() {
        for (col, cell) in cells.iter().enumerate() {
            let (top, left) = layout.cell_origin(row, col);
            match cell {
                GridCell::Image(img) => paste(&mut canvas, img, top, left, layout.cell),
                GridCell::Mosaic(tiles) => {
                    if tiles.len() != 9 {
                        return Err(Error::Report(format!(
                            "block {} channel {}: mosaic needs 9 images, got {}",
                            grid.addr,
                            grid.channel,
                            tiles.len()
                        )));
                    }
                    let t = layout.tile();
                    for (i, tile) in tiles.iter().enumerate() {
                        paste(&mut canvas, tile, top + (i / 3) * t, left + (i % 3) * t, t);
                    }
                }
                GridCell::Missing(what) => {
                    fill(&mut canvas, top, left, layout.cell, PLACEHOLDER_RGB);
                    let msg = format!("block {} channel {} cell ({row}, {col}): {what}", grid.addr, grid.channel);
                    tracing::warn!("{msg}");
                    outcome.warnings.push(msg);
                }
            }
        }
    }
    Ok((canvas, outcome))
}

/// Renders the grid to a PNG file.
pub fn render_channel_grid<T: Scalar>(grid: &ChannelGrid<T>, layout: GridLayout, path: &Path) -> Result<RenderOutcome> {
    let (canvas, outcome) = compose_channel_grid(grid, layout)?;
    let mut bytes = Vec::new();
    canvas
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Report(e.to_string()))?;
    crate::datahub::write_atomic(path, &bytes)?;
    Ok(outcome)
}

/// Data of one ratio-versus-scale plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPlotSpec {
    pub addr: BlockAddress,
    pub percentages: Vec<u32>,
    pub ratios: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub no_scale_ratio: f64,
    /// Per-percentage per-trial ratios, drawn as a scatter layer when set.
    #[serde(default)]
    pub trial_ratios: Option<Vec<Vec<f64>>>,
}

impl RatioPlotSpec {
    pub fn from_report(report: &AblationReport, with_trials: bool) -> Result<Self> {
        let missing = |p: &u32| Error::Report(format!("block {}: no ratio for percentage {p}", report.addr));
        let ratios = report.scale_percentages.iter().map(|p| report.ratios.get(p).copied().ok_or_else(|| missing(p))).collect::<Result<_>>()?;
        let standard_errors = report
            .scale_percentages
            .iter()
            .map(|p| report.ratio_standard_errors.get(p).copied().ok_or_else(|| missing(p)))
            .collect::<Result<_>>()?;
        let trial_ratios = with_trials.then(|| {
            report
                .scale_percentages
                .iter()
                .map(|p| report.rand_ablate_accs.iter().map(|t| report.scale_ablate_acc[p] / t[p]).collect())
                .collect()
        });
        Ok(Self {
            addr: report.addr,
            percentages: report.scale_percentages.clone(),
            ratios,
            standard_errors,
            no_scale_ratio: report.no_scale_ratio,
            trial_ratios,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.percentages.is_empty() || self.ratios.len() != self.percentages.len() || self.standard_errors.len() != self.percentages.len() {
            return Err(Error::Report(format!(
                "block {}: {} percentages but {} ratios and {} standard errors",
                self.addr,
                self.percentages.len(),
                self.ratios.len(),
                self.standard_errors.len()
            )));
        }
        Ok(())
    }
}

/// The plot as CSV: one row per percentage.
pub fn ratio_table(spec: &RatioPlotSpec) -> Result<String> {
    spec.validate()?;
    let mut out = String::from("block,percentage,mean_ratio,standard_error,no_scale_ratio\n");
    for i in 0..spec.percentages.len() {
        writeln!(out, "{},{},{},{},{}", spec.addr, spec.percentages[i], spec.ratios[i], spec.standard_errors[i], spec.no_scale_ratio).unwrap();
    }
    Ok(out)
}

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// The plot as a standalone SVG document.
pub fn ratio_svg(spec: &RatioPlotSpec) -> Result<String> {
    spec.validate()?;
    let mut values: Vec<f64> = vec![spec.no_scale_ratio];
    for (r, se) in spec.ratios.iter().zip(&spec.standard_errors) {
        values.extend([r - se, r + se]);
    }
    if let Some(t) = &spec.trial_ratios {
        values.extend(t.iter().flatten());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = spec.percentages.len();
    let x_at = |i: usize| MARGIN + (i as f64 + 0.5) * (PLOT_W - 2.0 * MARGIN) / n as f64;
    let y_at = |v: f64| PLOT_H - MARGIN - (v - lo) / (hi - lo) * (PLOT_H - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">Block {}</text>"#, PLOT_W / 2.0, spec.addr).unwrap();
    let (x0, x1, yb, yt) = (MARGIN, PLOT_W - MARGIN, PLOT_H - MARGIN, MARGIN);
    writeln!(s, r#"<line x1="{x0}" y1="{yb}" x2="{x1}" y2="{yb}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{yb}" x2="{x0}" y2="{yt}" stroke="black"/>"#).unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, x0 - 6.0, y + 4.0).unwrap();
    }
    let y_ref = y_at(spec.no_scale_ratio);
    writeln!(s, r#"<line x1="{x0}" y1="{y_ref:.2}" x2="{x1}" y2="{y_ref:.2}" stroke="gray" stroke-dasharray="6 4"/>"#).unwrap();
    writeln!(s, r#"<text x="{x1}" y="{:.2}" text-anchor="end" fill="gray">no scale</text>"#, y_ref - 4.0).unwrap();
    if let Some(trials) = &spec.trial_ratios {
        for (i, pts) in trials.iter().enumerate() {
            for &v in pts {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.35"/>"#, x_at(i) + 8.0, y_at(v)).unwrap();
            }
        }
    }
    let mut path = String::new();
    for (i, (&r, &se)) in spec.ratios.iter().zip(&spec.standard_errors).enumerate() {
        let x = x_at(i);
        let (ya, yr, yb2) = (y_at(r + se), y_at(r), y_at(r - se));
        writeln!(s, r#"<line x1="{x:.2}" y1="{ya:.2}" x2="{x:.2}" y2="{yb2:.2}" stroke="black"/>"#).unwrap();
        writeln!(s, r#"<line x1="{:.2}" y1="{ya:.2}" x2="{:.2}" y2="{ya:.2}" stroke="black"/>"#, x - 4.0, x + 4.0).unwrap();
        writeln!(s, r#"<line x1="{:.2}" y1="{yb2:.2}" x2="{:.2}" y2="{yb2:.2}" stroke="black"/>"#, x - 4.0, x + 4.0).unwrap();
        writeln!(s, r#"<circle cx="{x:.2}" cy="{yr:.2}" r="3.5" fill="black"/>"#).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}%</text>"#, yb + 16.0, spec.percentages[i]).unwrap();
        path.push_str(&format!("{}{x:.2},{yr:.2}", if i == 0 { "M" } else { " L" }));
    }
    writeln!(s, r#"<path d="{path}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">scale transform</text>"#, PLOT_W / 2.0, PLOT_H - 14.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">mean accuracy ratio</text>"#,
        PLOT_H / 2.0,
        PLOT_H / 2.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the SVG plot and its CSV table.
pub fn render_ratio_plot(spec: &RatioPlotSpec, svg_path: &Path, csv_path: &Path) -> Result<()> {
    let svg = ratio_svg(spec)?;
    let table = ratio_table(spec)?;
    crate::datahub::write_atomic(svg_path, svg.as_bytes())?;
    crate::datahub::write_atomic(csv_path, table.as_bytes())
}
