//! Self-contained SVG charts with fixed number formatting, so identical input
//! gives identical bytes.

use crate::detector::{Detection, EpochLog};
use crate::evalkit::FullReport;
use crate::synthdata::{RgbImage, CATEGORIES};
use base64::Engine;
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
}

/// Chart shown in place of a plot whose input has nothing to draw.
pub fn placeholder(title: &str, warning: &str) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    let _ = writeln!(out, r##"<rect x="40" y="{:.1}" width="{:.1}" height="48" fill="#fff3cd" stroke="#d39e00"/>"##, H / 2.0 - 24.0, W - 80.0);
    let _ = writeln!(out, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#856404">warning: {}</text>"##, W / 2.0, H / 2.0 + 4.0, escape(warning));
    out.push_str("</svg>\n");
    out
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn draw(&self, out: &mut String, xlabel: &str, ylabel: &str, xticks: &[(f64, String)], yticks: usize) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(out, r##"<path d="M{l:.1} {t:.1} V{b:.1} H{r:.1}" fill="none" stroke="#333333"/>"##);
        for k in 0..=yticks {
            let v = self.y0 + (self.y1 - self.y0) * k as f64 / yticks as f64;
            let y = self.py(v);
            let _ = writeln!(out, r##"<line x1="{l:.1}" y1="{y:.1}" x2="{r:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, l - 6.0, y + 4.0);
        }
        for (v, label) in xticks {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, self.px(*v), b + 18.0, escape(label));
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn legend(out: &mut String, entries: &[(String, &str, bool)]) {
    for (i, (name, color, dashed)) in entries.iter().enumerate() {
        let y = TOP + 8.0 + 16.0 * i as f64;
        let x = W - RIGHT - 150.0;
        let dash = if *dashed { r#" stroke-dasharray="5 3""# } else { "" };
        let _ = writeln!(out, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 26.0, y + 4.0, escape(name));
    }
}

fn polyline(out: &mut String, ax: &Axes, pts: &[(f64, f64)], color: &str, dashed: bool) {
    if pts.is_empty() {
        return;
    }
    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", ax.px(*x), ax.py(*y))).collect();
    let dash = if dashed { r#" stroke-dasharray="5 3""# } else { "" };
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, d.join(" "));
}

/// Bar chart of mean IoU per stage over the matched detections.
pub fn stage_iou(report: &FullReport) -> String {
    let title = "Mean IoU of matched detections per stage";
    let Some(stats) = report.stage_iou.as_ref().filter(|s| !s.mean_iou.is_empty()) else {
        return placeholder(title, "no detection matched a ground-truth box");
    };
    let vals = &stats.mean_iou;
    let lo = (vals.iter().copied().fold(f64::INFINITY, f64::min) - 0.05).clamp(0.0, 0.9);
    let lo = (lo * 20.0).floor() / 20.0;
    let ax = Axes { x0: 0.0, x1: vals.len() as f64, y0: lo, y1: 1.0 };
    let mut out = String::new();
    open(&mut out, W, H, title);
    let ticks: Vec<(f64, String)> = (0..vals.len()).map(|i| (i as f64 + 0.5, format!("B{}", i + 1))).collect();
    ax.draw(&mut out, &format!("stage ({} matched pairs)", stats.matched), "mean IoU", &ticks, 5);
    let slot = (W - LEFT - RIGHT) / vals.len() as f64;
    for (i, v) in vals.iter().enumerate() {
        let x = ax.px(i as f64) + slot * 0.2;
        let y = ax.py(*v);
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.6,
            ax.py(lo) - y,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.4}</text>"#, x + slot * 0.3, y - 6.0);
    }
    out.push_str("</svg>\n");
    out
}

/// Precision/recall envelopes at IoU 0.5 (solid) and 0.75 (dashed), one color per stage.
pub fn pr_curves(report: &FullReport) -> String {
    let title = "Precision-recall, averaged over categories";
    let any = report.stages.iter().any(|s| s.pr_curves.iter().any(|c| !c.recall.is_empty()));
    if !any {
        return placeholder(title, "no ground truth to compute precision/recall");
    }
    let ax = Axes { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
    let mut out = String::new();
    open(&mut out, W, H, title);
    let ticks: Vec<(f64, String)> = (0..=5).map(|k| (k as f64 / 5.0, format!("{:.1}", k as f64 / 5.0))).collect();
    ax.draw(&mut out, "recall", "precision", &ticks, 5);
    let mut entries = Vec::new();
    for (s, stage) in report.stages.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        for c in &stage.pr_curves {
            let dashed = c.iou > 0.5;
            let pts: Vec<(f64, f64)> = c.recall.iter().copied().zip(c.precision.iter().copied()).collect();
            polyline(&mut out, &ax, &pts, color, dashed);
            entries.push((format!("B{} @ IoU {:.2}", s + 1, c.iou), color, dashed));
        }
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// Per-epoch mean training losses.
pub fn loss(logs: &[EpochLog]) -> String {
    let title = "Training loss per epoch";
    if logs.is_empty() {
        return placeholder(title, "training log has no epochs");
    }
    let mut series: Vec<(String, Vec<f64>)> = vec![
        ("total".into(), logs.iter().map(|l| l.loss_total).collect()),
        ("classification".into(), logs.iter().map(|l| l.loss_cls).collect()),
        ("box".into(), logs.iter().map(|l| l.loss_box).collect()),
    ];
    let stages = logs.iter().map(|l| l.loss_ref.len()).max().unwrap_or(0);
    for s in 0..stages {
        series.push((format!("refine B{}", s + 2), logs.iter().map(|l| l.loss_ref.get(s).copied().unwrap_or(f64::NAN)).collect()));
    }
    let top = series.iter().flat_map(|s| s.1.iter()).copied().filter(|v| v.is_finite()).fold(0.0_f64, f64::max);
    let top = if top > 0.0 { top * 1.05 } else { 1.0 };
    let first = logs[0].epoch as f64;
    let last = (logs[logs.len() - 1].epoch as f64).max(first + 1.0);
    let ax = Axes { x0: first, x1: last, y0: 0.0, y1: top };
    let mut out = String::new();
    open(&mut out, W, H, title);
    let ticks: Vec<(f64, String)> = logs.iter().map(|l| (l.epoch as f64, l.epoch.to_string())).collect();
    ax.draw(&mut out, "epoch", "loss", &ticks, 5);
    let mut entries = Vec::new();
    for (i, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> =
            logs.iter().zip(vals).filter(|(_, v)| v.is_finite()).map(|(l, v)| (l.epoch as f64, *v)).collect();
        polyline(&mut out, &ax, &pts, color, false);
        entries.push((name.clone(), color, false));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

fn png_data_uri(img: &RgbImage) -> Result<String, png::EncodingError> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&img.data)?;
    }
    Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

/// The image with every detection's box per stage: stage 1 dashed, final stage solid.
pub fn detections(img: &RgbImage, dets: &[Detection], scale: f64) -> Result<String, png::EncodingError> {
    let (w, h) = (img.width as f64 * scale, img.height as f64 * scale);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r#"<image width="{w:.0}" height="{h:.0}" style="image-rendering:pixelated" href="{}"/>"#,
        png_data_uri(img)?
    );
    for d in dets {
        let color = PALETTE[d.category % PALETTE.len()];
        let n = d.boxes.len();
        for (s, b) in d.boxes.iter().enumerate() {
            let style = if s + 1 == n { r#"stroke-width="2""#.to_string() } else { format!(r#"stroke-width="1" stroke-dasharray="{} 2" opacity="0.7""#, 2 + 2 * s) };
            let _ = writeln!(
                out,
                r#"<rect class="stage{}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{color}" {style}/>"#,
                s + 1,
                b.x1 * scale,
                b.y1 * scale,
                b.width() * scale,
                b.height() * scale
            );
        }
        let f = d.final_box();
        let name = CATEGORIES.get(d.category).copied().unwrap_or("?");
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{} {:.2}</text>"#,
            f.x1 * scale + 2.0,
            (f.y1 * scale - 3.0).max(10.0),
            name,
            d.score
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{EvalReport, StageIou};

    fn report(miou: Vec<f64>) -> FullReport {
        let empty = EvalReport {
            map: None,
            ap50: None,
            ap75: None,
            ap_small: None,
            ap_medium: None,
            ap_large: None,
            ap_per_threshold: vec![],
            per_category: vec![],
            pr_curves: vec![],
        };
        FullReport {
            final_stage: empty.clone(),
            stages: vec![empty; miou.len().max(1)],
            stage_iou: if miou.is_empty() { None } else { Some(StageIou { mean_iou: miou, matched: 7 }) },
            num_images: 1,
            num_detections: 7,
        }
    }

    fn bar_heights(svg: &str) -> Vec<f64> {
        svg.lines()
            .filter(|l| l.contains(r#"class="bar""#))
            .map(|l| {
                let s = l.split("height=\"").nth(1).unwrap();
                s[..s.find('"').unwrap()].parse().unwrap()
            })
            .collect()
    }

    #[test]
    fn three_stages_three_bars() {
        assert_eq!(bar_heights(&stage_iou(&report(vec![0.7, 0.75, 0.8]))).len(), 3);
    }

    #[test]
    fn monotone_input_monotone_bars() {
        let h = bar_heights(&stage_iou(&report(vec![0.6, 0.7, 0.72])));
        assert!(h.windows(2).all(|w| w[1] > w[0]), "{h:?}");
    }

    #[test]
    fn empty_report_gives_banner() {
        let svg = stage_iou(&report(vec![]));
        assert!(svg.contains("warning:"));
        assert!(pr_curves(&report(vec![])).contains("warning:"));
        assert!(loss(&[]).contains("warning:"));
    }

    #[test]
    fn byte_stable() {
        let r = report(vec![0.61, 0.7, 0.73]);
        assert_eq!(stage_iou(&r), stage_iou(&r));
    }

    #[test]
    fn escapes_text() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
