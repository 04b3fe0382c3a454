//! Minimal raster plots. There is no text rendering: each PNG gets a
//! `.txt` sidecar naming the series colours and axis ranges.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

use sal_core::experiment::{aggregate, RunRecord};
use sal_core::probe::{probe, save_overlay};
use sal_core::Network32;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: f64 = 40.0;
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

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut c = Canvas {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])),
            x,
            y,
        };
        c.axes();
        c
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = WIDTH as f64 - 2.0 * MARGIN;
        let h = HEIGHT as f64 - 2.0 * MARGIN;
        let fx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.5 };
        let fy = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.5 };
        (MARGIN + fx * w, HEIGHT as f64 - MARGIN - fy * h)
    }

    fn put(&mut self, px: i64, py: i64, color: [u8; 3]) {
        if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
            self.img.put_pixel(px as u32, py as u32, Rgb(color));
        }
    }

    fn blend(&mut self, px: i64, py: i64, color: [u8; 3], alpha: f64) {
        if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
            let p = self.img.get_pixel_mut(px as u32, py as u32);
            for c in 0..3 {
                p.0[c] = (p.0[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha).round() as u8;
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3], thickness: i64) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            for dx in -thickness / 2..=thickness / 2 {
                for dy in -thickness / 2..=thickness / 2 {
                    self.put(x.round() as i64 + dx, y.round() as i64 + dy, color);
                }
            }
        }
    }

    fn axes(&mut self) {
        let grey = [225, 225, 225];
        for i in 0..=5 {
            let v = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 5.0;
            let (a, b) = (self.to_px(self.x.0, v), self.to_px(self.x.1, v));
            self.segment(a, b, grey, 1);
            let u = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 5.0;
            let (a, b) = (self.to_px(u, self.y.0), self.to_px(u, self.y.1));
            self.segment(a, b, grey, 1);
        }
        let origin = self.to_px(self.x.0, self.y.0);
        let (xe, ye) = (self.to_px(self.x.1, self.y.0), self.to_px(self.x.0, self.y.1));
        self.segment(origin, xe, [0, 0, 0], 1);
        self.segment(origin, ye, [0, 0, 0], 1);
    }

    /// Shaded region between two curves sharing x values.
    fn band(&mut self, xs: &[f64], lo: &[f64], hi: &[f64], color: [u8; 3]) {
        for i in 1..xs.len() {
            let (x0, x1) = (self.to_px(xs[i - 1], 0.0).0, self.to_px(xs[i], 0.0).0);
            for px in x0.round() as i64..=x1.round() as i64 {
                let t = if x1 > x0 { (px as f64 - x0) / (x1 - x0) } else { 0.0 };
                let l = lo[i - 1] + t * (lo[i] - lo[i - 1]);
                let h = hi[i - 1] + t * (hi[i] - hi[i - 1]);
                let (ya, yb) = (self.to_px(0.0, h).1, self.to_px(0.0, l).1);
                for py in ya.round() as i64..=yb.round() as i64 {
                    self.blend(px, py, color, 0.15);
                }
            }
        }
    }

    fn dot(&mut self, x: f64, y: f64, color: [u8; 3]) {
        let (px, py) = self.to_px(x, y);
        for dx in -3i64..=3 {
            for dy in -3i64..=3 {
                if dx * dx + dy * dy <= 9 {
                    self.put(px.round() as i64 + dx, py.round() as i64 + dy, color);
                }
            }
        }
    }

    fn legend(&mut self, n: usize) {
        for i in 0..n {
            let x0 = WIDTH as i64 - 30;
            let y0 = 10 + 14 * i as i64;
            for dx in 0..10 {
                for dy in 0..10 {
                    self.put(x0 + dx, y0 + dy, PALETTE[i % PALETTE.len()]);
                }
            }
        }
    }

    fn save(&self, path: &Path, legend: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.img.save(path).with_context(|| format!("writing {}", path.display()))?;
        std::fs::write(path.with_extension("txt"), legend)?;
        Ok(())
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Records grouped by configuration, in a stable order.
fn series(records: &[RunRecord]) -> BTreeMap<String, Vec<RunRecord>> {
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(format!("{}/{}", r.config.name, r.config.scenario)).or_default().push(r.clone());
    }
    groups
}

/// Mean learning curve per configuration with a ±1 std band.
pub fn curve(records: &[RunRecord], dice: bool, out: &Path) -> Result<()> {
    let groups = series(records);
    let reports = groups
        .values()
        .map(|runs| aggregate(runs).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let xs_all = reports.iter().flat_map(|r| r.curve.iter().map(|p| p.budget_fraction.mean));
    let (xmin, xmax) = xs_all.fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let mut canvas = Canvas::new((xmin, xmax), (0.0, 1.0));
    let metric = if dice { "mean Dice" } else { "accuracy" };
    let mut legend = format!("x: budget fraction [{xmin:.3}, {xmax:.3}]\ny: {metric} [0, 1], band = ±1 std\n");
    for (i, (name, report)) in groups.keys().zip(&reports).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let xs: Vec<f64> = report.curve.iter().map(|p| p.budget_fraction.mean).collect();
        let stat = |p: &sal_core::experiment::AggregatePoint| if dice { p.mean_dice } else { p.accuracy };
        let mean: Vec<f64> = report.curve.iter().map(|p| stat(p).mean).collect();
        let lo: Vec<f64> = report.curve.iter().map(|p| (stat(p).mean - stat(p).std).max(0.0)).collect();
        let hi: Vec<f64> = report.curve.iter().map(|p| (stat(p).mean + stat(p).std).min(1.0)).collect();
        canvas.band(&xs, &lo, &hi, color);
        for w in 1..xs.len() {
            let (a, b) = (canvas.to_px(xs[w - 1], mean[w - 1]), canvas.to_px(xs[w], mean[w]));
            canvas.segment(a, b, color, 3);
        }
        let _ = writeln!(legend, "{} {name} ({} runs)", hex(color), report.seeds.len());
    }
    canvas.legend(groups.len());
    canvas.save(out, &legend)
}

/// Final accuracy against final mean Dice, one dot per run.
pub fn scatter(records: &[RunRecord], out: &Path) -> Result<()> {
    let groups = series(records);
    let mut canvas = Canvas::new((0.0, 1.0), (0.0, 1.0));
    let mut legend = String::from("x: final accuracy [0, 1]\ny: final mean Dice [0, 1]\n");
    for (i, (name, runs)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for r in runs {
            if let Some(p) = r.final_point() {
                canvas.dot(p.accuracy, p.mean_dice, color);
            }
        }
        let _ = writeln!(legend, "{} {name} ({} runs)", hex(color), runs.len());
    }
    canvas.legend(groups.len());
    canvas.save(out, &legend)
}

fn find_file(dir: &Path, name: &str) -> Option<PathBuf> {
    let direct = dir.join(name);
    if direct.is_file() {
        return Some(direct);
    }
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|d| d.join(name))
        .find(|p| p.is_file())
}

/// CAM overlays of the final accuracy model on the first `count` test
/// images of each run.
pub fn overlays(dir: &Path, records: &[RunRecord], count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for r in records {
        let Some(model_path) = find_file(dir, &format!("{}-model.json", r.run_id)) else {
            log::warn!("{}: no saved model, skipping", r.run_id);
            continue;
        };
        let text = std::fs::read_to_string(&model_path)?;
        let model: Network32 = serde_json::from_str(&text).with_context(|| format!("parsing {}", model_path.display()))?;
        let data = r.config.dataset.load()?;
        for sample in data.test.samples().iter().take(count) {
            let map = probe(&model, &sample.image, sample.label, r.config.probe_method)?;
            let path = out.join(format!("{}-{}.png", r.run_id, sample.id));
            save_overlay(&path, &sample.image, map.upsampled().view(), 0.5)?;
            written.push(path);
        }
    }
    if written.is_empty() {
        bail!("no saved models found under {}", dir.display());
    }
    Ok(written)
}
