//! Summary tables and static plots for metrics and sweep files.
//!
//! Plots carry no text: each series has a fixed color (see the summary file
//! for the legend), axes span the data range on x and `[0, 1]` on y.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use xdomain_core::engine::{MetricsRecord, SweepParam, SweepRow};
use xdomain_core::transforms::TaskKind;
use xdomain_core::Result;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 30;

pub const PALETTE: [(&str, [u8; 3]); 5] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
];

struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
}

impl Canvas {
    fn new(x_min: f64, x_max: f64) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let axis = Rgb([0, 0, 0]);
        for x in MARGIN..WIDTH - MARGIN / 2 {
            img.put_pixel(x, HEIGHT - MARGIN, axis);
        }
        for y in MARGIN / 2..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, axis);
        }
        // Light grid lines at 0.25 steps of accuracy.
        for q in 1..=4 {
            let y = Self::y_px(q as f64 / 4.0);
            for x in (MARGIN + 1..WIDTH - MARGIN / 2).step_by(3) {
                img.put_pixel(x, y as u32, Rgb([200, 200, 200]));
            }
        }
        let x_range = if x_max > x_min { (x_min, x_max) } else { (x_min - 1.0, x_max + 1.0) };
        Self { img, x_range }
    }

    fn y_px(v: f64) -> i64 {
        let span = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        (HEIGHT - MARGIN) as i64 - (v.clamp(0.0, 1.0) * span).round() as i64
    }

    fn x_px(&self, v: f64) -> i64 {
        let span = (WIDTH - MARGIN - MARGIN) as f64;
        let (lo, hi) = self.x_range;
        (MARGIN + MARGIN / 2) as i64 + ((v - lo) / (hi - lo) * (span - MARGIN as f64 / 2.0)).round() as i64
    }

    fn dot(&mut self, x: i64, y: i64, color: Rgb<u8>, r: i64) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                    self.img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = x0 as f64 + t * (x1 - x0) as f64;
            let y = y0 as f64 + t * (y1 - y0) as f64;
            self.dot(x.round() as i64, y.round() as i64, color, 1);
        }
    }

    fn series(&mut self, points: &[(f64, f64)], color: [u8; 3]) {
        let color = Rgb(color);
        let px: Vec<(i64, i64)> = points.iter().map(|&(x, y)| (self.x_px(x), Self::y_px(y))).collect();
        for w in px.windows(2) {
            self.line(w[0], w[1], color);
        }
        for &(x, y) in &px {
            self.dot(x, y, color, 3);
        }
    }

    fn bar(&mut self, x: f64, width: i64, mean: f64, std: f64, color: [u8; 3]) {
        let cx = self.x_px(x);
        let top = Self::y_px(mean);
        for px in cx - width / 2..=cx + width / 2 {
            for py in top..(HEIGHT - MARGIN) as i64 {
                self.dot(px, py, Rgb(color), 0);
            }
        }
        let black = Rgb([0, 0, 0]);
        let (hi, lo) = (Self::y_px(mean + std), Self::y_px(mean - std));
        self.line((cx, hi), (cx, lo), black);
        self.line((cx - 4, hi), (cx + 4, hi), black);
        self.line((cx - 4, lo), (cx + 4, lo), black);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Accuracy-versus-epoch series of one metrics file, with their legend names.
fn epoch_series(records: &[MetricsRecord]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let mut out = vec![("val_acc", records.iter().map(|r| (r.epoch as f64, r.val_acc)).collect())];
    let collect = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let target = collect(&|r| r.target_acc);
    if !target.is_empty() {
        out.push(("target_acc", target));
    }
    for (name, task) in [("pretext_acc_jigsaw", TaskKind::Jigsaw), ("pretext_acc_rotation", TaskKind::Rotation)] {
        let s = collect(&|r| r.pretext_acc.get(&task).copied());
        if !s.is_empty() {
            out.push((name, s));
        }
    }
    out
}

pub fn metrics_report(name: &str, records: &[MetricsRecord], out_dir: &Path, summary: &mut String) -> Result<()> {
    let plot = format!("{name}.png");
    let series = epoch_series(records);
    let _ = writeln!(summary, "## {name}\n");
    let legend: Vec<String> = series.iter().zip(PALETTE).map(|((s, _), (c, _))| format!("{s} = {c}")).collect();
    let _ = writeln!(summary, "Plot `{plot}` (accuracy vs epoch): {}\n", legend.join(", "));
    let _ = writeln!(summary, "| epoch | lr | lambda | object_loss | val_acc | target_acc | pretext_acc_jigsaw | pretext_acc_rotation |");
    let _ = writeln!(summary, "|---|---|---|---|---|---|---|---|");
    for r in records {
        let _ = writeln!(
            summary,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
            r.epoch,
            r.lr,
            r.lambda,
            r.object_loss,
            r.val_acc,
            fmt_opt(r.target_acc),
            fmt_opt(r.pretext_acc.get(&TaskKind::Jigsaw).copied()),
            fmt_opt(r.pretext_acc.get(&TaskKind::Rotation).copied()),
        );
    }
    if let Some(g) = records.last().and_then(|r| r.gamma.as_ref()) {
        let g: Vec<String> = g.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(summary, "\nFinal class weights: {}", g.join(", "));
    }
    summary.push('\n');

    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.epoch as f64), hi.max(r.epoch as f64))
    });
    let mut canvas = Canvas::new(lo, hi);
    for ((_, points), (_, color)) in series.iter().zip(PALETTE) {
        canvas.series(points, color);
    }
    canvas.img.save(out_dir.join(plot))?;
    Ok(())
}

pub fn sweep_report(name: &str, param: SweepParam, rows: &[SweepRow], out_dir: &Path, summary: &mut String) -> Result<()> {
    let plot = format!("{name}.png");
    let _ = writeln!(summary, "## {name}\n");
    let _ = writeln!(summary, "Plot `{plot}`: mean accuracy vs {param}, bars in value order, whiskers one std.\n");
    let _ = writeln!(summary, "| {param} | mean_acc | std_acc | seeds |");
    let _ = writeln!(summary, "|---|---|---|---|");
    for r in rows {
        let _ = writeln!(summary, "| {} | {:.4} | {:.4} | {} |", r.value, r.mean, r.std, r.accuracies.len());
    }
    summary.push('\n');
    // Bars are evenly spaced by rank so that uneven grids stay readable.
    let mut canvas = Canvas::new(0.0, rows.len().saturating_sub(1) as f64);
    let width = ((WIDTH - 3 * MARGIN) as i64 / rows.len().max(1) as i64 / 2).clamp(2, 40);
    for (i, r) in rows.iter().enumerate() {
        canvas.bar(i as f64, width, r.mean, r.std, PALETTE[0].1);
    }
    canvas.img.save(out_dir.join(plot))?;
    Ok(())
}
