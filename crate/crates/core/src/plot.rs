//! Loss curves and bar charts rendered straight to PNG.
//!
//! Inputs are the JSON-lines files written by training, evaluation and the
//! ablation runner. Each file is classified line by line, and every kind of
//! record found in it yields one image next to the others in the output
//! directory. Input files are only read.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::ablation::AblationRow;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, NoiseMetricReport};
use crate::run::{create_dir, MetricsRecord};
use crate::train::{DivergenceRecord, StepRecord};

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [255, 255, 255];
pub const AXIS: Rgb = [40, 40, 40];
/// Colour of harmonic-mean bars and of the total-loss curve.
pub const PRIMARY: Rgb = [31, 119, 180];
pub const SECONDARY: Rgb = [255, 127, 14];
pub const TERTIARY: Rgb = [44, 160, 44];

const WIDTH: usize = 640;
const HEIGHT: usize = 400;
const MARGIN: usize = 40;

/// Everything recognized in one input file.
#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub steps: Vec<StepRecord>,
    pub divergences: Vec<DivergenceRecord>,
    pub evals: Vec<EvalReport>,
    pub noise: Vec<NoiseMetricReport>,
    pub ablation: Vec<AblationRow>,
}

impl ParsedRecords {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.evals.is_empty() && self.noise.is_empty() && self.ablation.is_empty()
    }
}

/// Parses a JSON-lines file. A malformed line is reported as `path:line`.
pub fn parse_records(path: &Path) -> Result<ParsedRecords> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = ParsedRecords::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let parsed = if value.get("record").is_some() {
            serde_json::from_value::<MetricsRecord>(value).map(|r| match r {
                MetricsRecord::Eval(e) => out.evals.push(e),
                MetricsRecord::Noise { report, .. } => out.noise.push(report),
                MetricsRecord::Ablation(a) => out.ablation.push(a),
            })
        } else if value.get("diverged").is_some() {
            serde_json::from_value::<DivergenceRecord>(value).map(|d| out.divergences.push(d))
        } else {
            serde_json::from_value::<StepRecord>(value).map(|s| out.steps.push(s))
        };
        parsed.map_err(|e| bad(e.to_string()))?;
    }
    Ok(out)
}

/// A plain RGB raster.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: Rgb) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.set(x as i64, y as i64, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn axes(&mut self, x0: usize, x1: usize) {
        let base = HEIGHT - MARGIN;
        self.line((x0 as i64, MARGIN as i64), (x0 as i64, base as i64), AXIS);
        self.line((x0 as i64, base as i64), (x1 as i64, base as i64), AXIS);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        writer.write_image_data(&bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Parse {
            location: path.display().to_string(),
            reason,
        };
        let mut reader = png::Decoder::new(std::io::BufReader::new(file))
            .read_info()
            .map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(bad("expected 8-bit RGB".into()));
        }
        let pixels = buf[..info.buffer_size()].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels,
        })
    }

    /// Number of maximal horizontal runs of colour `c` on row `y`.
    pub fn runs_on_row(&self, y: usize, c: Rgb) -> usize {
        let mut runs = 0;
        let mut inside = false;
        for x in 0..self.width {
            let hit = self.get(x, y) == c;
            if hit && !inside {
                runs += 1;
            }
            inside = hit;
        }
        runs
    }
}

/// Rows just above the baseline, where every bar is present.
pub fn bar_probe_row() -> usize {
    HEIGHT - MARGIN - 1
}

/// Line chart of one or more series sharing the x axis.
pub fn line_chart(series: &[(&[f64], Rgb)]) -> Canvas {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let x_max = WIDTH - MARGIN;
    canvas.axes(MARGIN, x_max);
    let finite = series.iter().flat_map(|(s, _)| s.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return canvas;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let plot_w = (x_max - MARGIN - 1) as f64;
    for (values, colour) in series {
        let n = values.len().max(2) - 1;
        let point = |i: usize, v: f64| {
            let x = MARGIN as f64 + 1.0 + plot_w * i as f64 / n as f64;
            let y = (HEIGHT - MARGIN) as f64 - 1.0 - (plot_h - 1.0) * (v - lo) / span;
            (x.round() as i64, y.round() as i64)
        };
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = point(i, v);
            match prev {
                Some(q) => canvas.line(q, p, *colour),
                None => canvas.set(p.0, p.1, *colour),
            }
            prev = Some(p);
        }
    }
    canvas
}

/// Bar chart with one group per entry of `groups`; each group holds one bar
/// per value, drawn in the matching colour. Values are scaled by `y_max`.
pub fn bar_chart(groups: &[Vec<f64>], colours: &[Rgb], y_max: f64) -> Canvas {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let x_max = WIDTH - MARGIN;
    canvas.axes(MARGIN, x_max);
    if groups.is_empty() {
        return canvas;
    }
    let per_group = groups.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let slot = (x_max - MARGIN - 2) as f64 / groups.len() as f64;
    let bar_w = ((slot * 0.8) / per_group as f64).max(1.0);
    let plot_h = (HEIGHT - 2 * MARGIN - 1) as f64;
    let base = HEIGHT - MARGIN;
    for (g, values) in groups.iter().enumerate() {
        let left = MARGIN as f64 + 2.0 + g as f64 * slot + slot * 0.1;
        for (b, &v) in values.iter().enumerate() {
            let frac = if y_max > 0.0 && v.is_finite() { (v / y_max).clamp(0.0, 1.0) } else { 0.0 };
            // a sliver stays visible for zero-valued bars
            let h = ((plot_h * frac).round() as usize).max(2);
            let x0 = (left + b as f64 * bar_w).round() as usize;
            let x1 = ((left + (b + 1) as f64 * bar_w).round() as usize).max(x0 + 1);
            // one background column between neighbouring bars
            let x1 = if x1 - x0 > 2 { x1 - 1 } else { x1 };
            canvas.fill_rect(x0, base - h, x1, base, colours[b % colours.len()]);
        }
    }
    canvas
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "records".into())
}

/// Renders every recognized record kind of every input file into
/// `out_dir` and returns the written image paths.
pub fn plot_files(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Input("no metrics files given to plot".into()));
    }
    let parsed = inputs
        .iter()
        .map(|p| parse_records(p).map(|r| (p, r)))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for (path, records) in parsed {
        if records.is_empty() {
            return Err(Error::Input(format!("{} contains no plottable records", path.display())));
        }
        let name = stem(path);
        let mut emit = |suffix: &str, canvas: Canvas| -> Result<()> {
            let target = out_dir.join(format!("{name}_{suffix}.png"));
            if inputs.iter().any(|p| p == &target) {
                return Err(Error::Input(format!("refusing to overwrite input {}", target.display())));
            }
            canvas.save(&target)?;
            written.push(target);
            Ok(())
        };
        if !records.steps.is_empty() {
            let total: Vec<f64> = records.steps.iter().map(|s| s.total).collect();
            let ce: Vec<f64> = records.steps.iter().map(|s| s.ce).collect();
            emit("loss", line_chart(&[(&total, PRIMARY), (&ce, SECONDARY)]))?;
        }
        if !records.ablation.is_empty() {
            let groups: Vec<Vec<f64>> = records.ablation.iter().map(|r| vec![r.hm]).collect();
            emit("ablation", bar_chart(&groups, &[PRIMARY], 100.0))?;
        }
        if !records.evals.is_empty() {
            let groups: Vec<Vec<f64>> = records
                .evals
                .iter()
                .map(|r| vec![r.base_acc, r.novel_acc, r.hm])
                .collect();
            emit("accuracy", bar_chart(&groups, &[SECONDARY, TERTIARY, PRIMARY], 100.0))?;
        }
        if !records.noise.is_empty() {
            // text shift lives in [0, 4]; preservation in [0, 1]; accuracy shift in points
            let groups: Vec<Vec<f64>> = records
                .noise
                .iter()
                .map(|r| vec![r.ts / 4.0, r.lpr, r.as_ / 100.0])
                .collect();
            emit("noise", bar_chart(&groups, &[PRIMARY, SECONDARY, TERTIARY], 1.0))?;
        }
    }
    Ok(written)
}
