//! Plain raster charts of a report: loss curves, per-round Dice and FID bars.
//!
//! Rendering uses no fonts or randomness, so the same report always yields
//! the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::report::{MetricsReport, Table};
use crate::error::{Error, IoContext, Result};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: i64 = 40;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    /// Charts that were skipped and why.
    pub notes: Vec<String>,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas {
            img: RgbImage::from_pixel(W, H, Rgb([255, 255, 255])),
        };
        let (x0, y0, x1, y1) = (MARGIN, H as i64 - MARGIN, W as i64 - MARGIN / 2, MARGIN / 2);
        c.line(x0, y0, x1, y0, [0, 0, 0]);
        c.line(x0, y0, x0, y1, [0, 0, 0]);
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i / 4;
            c.line(x0 - 4, y, x0, y, [0, 0, 0]);
            if i > 0 {
                c.line(x0 + 1, y, x1, y, [225, 225, 225]);
            }
        }
        c
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn thick_line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for o in [0, 1] {
            self.line(x0, y0 + o, x1, y1 + o, color);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Maps `[lo, hi]` onto the plot's pixel rows.
fn y_of(v: f64, lo: f64, hi: f64) -> i64 {
    let top = MARGIN / 2;
    let bottom = H as i64 - MARGIN;
    let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    bottom - ((bottom - top) as f64 * f.clamp(0.0, 1.0)).round() as i64
}

fn x_span() -> (i64, i64) {
    (MARGIN + 1, W as i64 - MARGIN / 2)
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn curves_chart(report: &MetricsReport) -> Option<Canvas> {
    let curves: Vec<_> = report.curves.iter().filter(|c| !c.values.is_empty()).collect();
    let (lo, hi) = finite_range(curves.iter().flat_map(|c| c.values.iter().copied()))?;
    let longest = curves.iter().map(|c| c.values.len()).max()?;
    let (xa, xb) = x_span();
    let x_of = |i: usize| xa + ((xb - xa) as f64 * i as f64 / (longest.max(2) - 1) as f64).round() as i64;
    let mut c = Canvas::new();
    for (n, curve) in curves.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let pts: Vec<(i64, i64)> = curve
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (x_of(i), y_of(v, 0.0f64.min(lo), hi)))
            .collect();
        for w in pts.windows(2) {
            c.thick_line(w[0].0, w[0].1, w[1].0, w[1].1, color);
        }
        if let [(x, y)] = pts[..] {
            c.rect(x - 2, y - 2, x + 2, y + 2, color);
        }
    }
    Some(c)
}

/// Grouped bars: one group per row, one bar per column.
fn bar_chart(t: &Table, columns: &[usize], fixed_max: Option<f64>) -> Option<Canvas> {
    if t.rows.is_empty() || columns.is_empty() {
        return None;
    }
    let values = t.rows.iter().flat_map(|r| columns.iter().map(|&c| r.cells[c].value));
    let (_, hi) = finite_range(values)?;
    let hi = fixed_max.unwrap_or(hi).max(hi);
    let (xa, xb) = x_span();
    let group = (xb - xa) / t.rows.len() as i64;
    let bar = ((group * 3 / 4) / columns.len() as i64).max(1);
    let mut c = Canvas::new();
    for (g, row) in t.rows.iter().enumerate() {
        let start = xa + g as i64 * group + group / 8;
        for (j, &col) in columns.iter().enumerate() {
            let v = row.cells[col].value;
            if !v.is_finite() {
                continue;
            }
            let x = start + j as i64 * bar;
            let color = PALETTE[j % PALETTE.len()];
            c.rect(x, y_of(v, 0.0, hi), x + bar - 2, H as i64 - MARGIN - 1, color);
        }
    }
    Some(c)
}

/// Writes `loss_curves.png`, `round_dice.png` and `fid.png` when the report
/// has data for them; missing series are skipped with a note.
pub fn emit_plots(report: &MetricsReport, dir: &Path) -> Result<PlotOutput> {
    fs::create_dir_all(dir).at(dir)?;
    let mut out = PlotOutput::default();
    let mut emit = |name: &str, canvas: Option<Canvas>, missing: &str| -> Result<()> {
        match canvas {
            Some(c) => {
                let path = dir.join(name);
                c.save(&path)?;
                out.files.push(path);
            }
            None => out.notes.push(format!("{name} skipped: {missing}")),
        }
        Ok(())
    };
    emit("loss_curves.png", curves_chart(report), "no loss curves in the report")?;
    let dice = report.rounds.as_ref().and_then(|t| {
        let col = t.columns.iter().position(|c| c == "Dice")?;
        bar_chart(t, &[col], Some(1.0))
    });
    emit("round_dice.png", dice, "no per-round Dice in the report")?;
    let fid = report.fid.as_ref().and_then(|t| bar_chart(t, &(0..t.columns.len()).collect::<Vec<_>>(), None));
    emit("fid.png", fid, "no FID values in the report")?;
    Ok(out)
}
