//! Minimal PNG renderings of the ROC curve and the score histogram.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::evaluation::{EvalReport, HistogramBin, RocRow};

use super::PipelineError;

pub const ROC_PNG: &str = "roc.png";
pub const HIST_PNG: &str = "hist.png";

const SIZE: u32 = 400;
const PAD: u32 = 30;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRAY: Rgb<u8> = Rgb([190, 190, 190]);
const ID_COLOR: Rgb<u8> = Rgb([40, 90, 200]);
const OOD_COLOR: Rgb<u8> = Rgb([210, 60, 40]);

struct Canvas(RgbImage);

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas(RgbImage::from_pixel(SIZE, SIZE, WHITE));
        let far = (SIZE - PAD) as i64;
        c.line((PAD as i64, far), (far, far), BLACK);
        c.line((PAD as i64, far), (PAD as i64, PAD as i64), BLACK);
        c
    }

    /// Map unit coordinates to pixels, y up.
    fn at(x: f64, y: f64) -> (i64, i64) {
        let span = f64::from(SIZE - 2 * PAD);
        (
            (f64::from(PAD) + x.clamp(0.0, 1.0) * span).round() as i64,
            (f64::from(SIZE - PAD) - y.clamp(0.0, 1.0) * span).round() as i64,
        )
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < SIZE && (y as u32) < SIZE {
            self.0.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Bresenham line.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
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

    fn rect(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }
}

/// FPR on x, TPR on y, starting from the origin.
pub fn render_roc(rows: &[RocRow]) -> RgbImage {
    let mut c = Canvas::new();
    c.line(Canvas::at(0.0, 0.0), Canvas::at(1.0, 1.0), GRAY);
    let mut prev = Canvas::at(0.0, 0.0);
    for r in rows {
        let next = Canvas::at(r.fpr, r.tpr);
        c.line(prev, next, ID_COLOR);
        prev = next;
    }
    c.0
}

/// ID and OOD counts as side-by-side bars per bin.
pub fn render_histogram(bins: &[HistogramBin]) -> RgbImage {
    let mut c = Canvas::new();
    let peak = bins
        .iter()
        .map(|b| b.id_count.max(b.ood_count))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let n = bins.len().max(1) as f64;
    for (i, b) in bins.iter().enumerate() {
        let left = i as f64 / n;
        let mid = (i as f64 + 0.5) / n;
        let right = (i as f64 + 1.0) / n;
        if b.id_count > 0 {
            c.rect(
                Canvas::at(left, 0.0),
                Canvas::at(mid, b.id_count as f64 / peak),
                ID_COLOR,
            );
        }
        if b.ood_count > 0 {
            c.rect(
                Canvas::at(mid, 0.0),
                Canvas::at(right, b.ood_count as f64 / peak),
                OOD_COLOR,
            );
        }
    }
    c.0
}

pub fn write_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let roc = dir.join(ROC_PNG);
    let hist = dir.join(HIST_PNG);
    let save = |img: RgbImage, p: &Path| {
        img.save(p)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))
    };
    save(render_roc(&report.roc), &roc)?;
    save(render_histogram(&report.histogram), &hist)?;
    Ok(vec![roc, hist])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_curve_reaches_top_left_for_perfect_separation() {
        let rows = [
            RocRow {
                threshold: 1.0,
                tpr: 1.0,
                fpr: 0.0,
            },
            RocRow {
                threshold: 0.0,
                tpr: 1.0,
                fpr: 1.0,
            },
        ];
        let img = render_roc(&rows);
        let (x, y) = Canvas::at(0.0, 1.0);
        assert_eq!(*img.get_pixel(x as u32, y as u32), ID_COLOR);
    }

    #[test]
    fn histogram_draws_both_classes() {
        let bins = [HistogramBin {
            bin_left: 0.0,
            bin_right: 1.0,
            id_count: 2,
            ood_count: 1,
        }];
        let img = render_histogram(&bins);
        assert!(img.pixels().any(|p| *p == ID_COLOR));
        assert!(img.pixels().any(|p| *p == OOD_COLOR));
    }
}
