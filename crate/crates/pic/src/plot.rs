//! SVG bar charts and a CSV summary from an [`EvalReport`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use pic_core::taskgen::Task;

use crate::bench::EvalReport;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain vertical bar chart. Missing values leave an empty slot.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, Option<f64>)]) -> String {
    let max = bars.iter().filter_map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title)).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, esc(y_label)).unwrap();
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - PAD).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for (i, (label, v)) in bars.iter().enumerate() {
        let cx = x0 + slot * (i as f64 + 0.5);
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 16.0, esc(label)).unwrap();
        if let Some(v) = v {
            let h = (y0 - y1) * v / max;
            writeln!(
                s,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4a7ab5"/>"##,
                cx - slot * 0.35,
                y0 - h,
                slot * 0.7
            )
            .unwrap();
            writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, y0 - h - 4.0).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one chart per task in the report plus `summary.csv`. Returns the
/// written paths.
pub fn write_plots(report: &EvalReport, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for task in [Task::Reconstruction, Task::Denoising, Task::Registration] {
        let rows: Vec<_> = report.cd.iter().filter(|r| r.task == task).collect();
        if rows.is_empty() {
            continue;
        }
        let bars: Vec<(String, Option<f64>)> = rows.iter().map(|r| (format!("L{}", r.level), r.cd)).collect();
        let title = format!("{task} ({}, {} prompts)", report.predictor, report.strategy);
        let p = out.join(format!("{task}.svg"));
        fs::write(&p, bar_chart(&title, "CD x1000", &bars))?;
        written.push(p);
    }
    if let Some(m) = &report.segmentation {
        let title = format!("segmentation ({}, {} prompts)", report.predictor, report.strategy);
        let p = out.join("segmentation.svg");
        fs::write(&p, bar_chart(&title, "mIoU (%)", &[("mIoU".to_string(), Some(m.miou))]))?;
        written.push(p);
    }
    let p = out.join("summary.csv");
    fs::write(&p, report.to_csv())?;
    written.push(p);
    Ok(written)
}
