//! Plain SVG output: one ground-truth/prediction timeline per video and a
//! loss curve. All numbers are printed at fixed precision so identical
//! inputs give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::evaluate::{EvaluationReport, VideoAssessment};
use super::train::RunLog;
use super::create_dir;
use crate::datamodel::{ClassId, FrameLabelSequence, NUM_CLASSES};
use crate::error::{Error, Result};

const PALETTE: [&str; NUM_CLASSES] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#d9d9d9"];
const WIDTH: f64 = 800.0;
const BAR_H: f64 = 24.0;

fn color(c: ClassId) -> &'static str {
    PALETTE[c.index()]
}

fn bar(svg: &mut String, labels: &FrameLabelSequence, y: f64, caption: &str) {
    let scale = (WIDTH - 80.0) / labels.len().max(1) as f64;
    let _ = writeln!(svg, r#"<text x="4" y="{:.1}" font-size="12">{caption}</text>"#, y + 16.0);
    for (class, start, end) in labels.spans() {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{y:.1}" width="{:.2}" height="{BAR_H:.1}" fill="{}"/>"#,
            70.0 + start as f64 * scale,
            (end - start) as f64 * scale,
            color(class)
        );
    }
}

/// Two stacked label bars. Without a prediction, the ground truth is drawn
/// alone.
pub fn timeline_svg(id: &str, gt: &FrameLabelSequence, pred: Option<&FrameLabelSequence>) -> String {
    let height = 40.0 + 2.0 * (BAR_H + 8.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{height:.0}\">\n<text x=\"4\" y=\"14\" font-size=\"13\">{}</text>\n",
        escape(id)
    );
    bar(&mut svg, gt, 24.0, "GT");
    if let Some(p) = pred {
        bar(&mut svg, p, 24.0 + BAR_H + 8.0, "Pred");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Total, segmentation and assessment loss per epoch.
pub fn loss_curve_svg(log: &RunLog) -> String {
    let (w, h, pad) = (WIDTH, 300.0, 40.0);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\">\n");
    let _ = writeln!(
        svg,
        r##"<rect x="{pad:.0}" y="{pad:.0}" width="{:.0}" height="{:.0}" fill="none" stroke="#000"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("total", "#000000", log.epochs.iter().map(|e| e.total_loss).collect()),
        ("segmentation", "#1f77b4", log.epochs.iter().map(|e| e.seg_loss).collect()),
        ("assessment", "#d62728", log.epochs.iter().map(|e| e.mse_loss).collect()),
    ];
    let max = series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let n = log.epochs.len();
    for (k, (name, col, values)) in series.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.0}" y="{:.0}" font-size="12" fill="{col}">{name}</text>"#,
            pad + 120.0 * k as f64,
            pad - 10.0
        );
        if values.is_empty() {
            continue;
        }
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let y = h - pad - (h - 2.0 * pad) * (v / max);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{col}" points="{}"/>"#,
            points.join(" ")
        );
    }
    let _ = writeln!(svg, r#"<text x="{pad:.0}" y="{:.0}" font-size="11">max {max:.4}, {n} epochs</text>"#, h - 10.0);
    svg.push_str("</svg>\n");
    svg
}

fn timeline_for(v: &VideoAssessment) -> Result<String> {
    let gt = FrameLabelSequence::from_pairs(&v.gt_labels)?;
    let pred = v.predicted_labels.as_deref().map(FrameLabelSequence::from_pairs).transpose()?;
    Ok(timeline_svg(&v.id, &gt, pred.as_ref()))
}

/// Writes `loss_curve.svg` and `timeline_<id>.svg` per evaluated video.
pub fn emit_plots(log: &RunLog, report: Option<&EvaluationReport>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("loss_curve.svg".into(), loss_curve_svg(log))?;
    for v in report.map(|r| r.videos.as_slice()).unwrap_or_default() {
        put(format!("timeline_{}.svg", v.id), timeline_for(v)?)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_bars_when_prediction_matches() {
        let gt = FrameLabelSequence::from_pairs(&[[6, 4], [0, 10], [6, 3], [5, 7]]).unwrap();
        let svg = timeline_svg("v", &gt, Some(&gt));
        let rects: Vec<&str> = svg.lines().filter(|l| l.starts_with("<rect")).collect();
        assert_eq!(rects.len(), 8);
        for (a, b) in rects[..4].iter().zip(&rects[4..]) {
            let strip = |s: &str| s.split_whitespace().filter(|t| !t.starts_with("y=")).collect::<Vec<_>>().join(" ");
            assert_eq!(strip(a), strip(b));
        }
    }

    #[test]
    fn empty_report_gives_loss_curve_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&RunLog::default(), None, dir.path()).unwrap();
        assert_eq!(files, vec![dir.path().join("loss_curve.svg")]);
    }
}
