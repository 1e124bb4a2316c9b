//! Report emission: JSON, CSV and a PNG bar chart of per-class F1.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::metrics::EvalReport;

pub fn to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialisation")
}

/// One row per predicate followed by an `Avg` row.
pub fn to_csv(report: &EvalReport) -> String {
    let mut s = String::from("predicate,precision,recall,f1,tp,fp,fn\n");
    for c in &report.per_predicate {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{},{},{}",
            c.predicate, c.precision, c.recall, c.f1, c.tp, c.fp, c.fn_
        );
    }
    let m = &report.macro_avg;
    let _ = writeln!(s, "Avg,{:.4},{:.4},{:.4},,,", m.precision, m.recall, m.f1);
    s
}

/// Bars of per-class F1 (taxonomy order) with the macro average as the last, darker bar.
pub fn bar_chart(report: &EvalReport) -> RgbImage {
    let values: Vec<f64> = report
        .per_predicate
        .iter()
        .map(|c| c.f1)
        .chain(std::iter::once(report.macro_avg.f1))
        .collect();
    let (bar, gap, h, margin) = (24u32, 8u32, 200u32, 10u32);
    let w = margin * 2 + values.len() as u32 * (bar + gap) - gap;
    let mut img = RgbImage::from_pixel(w, h + 2 * margin, Rgb([255, 255, 255]));
    for x in margin..w - margin {
        img.put_pixel(x, margin + h, Rgb([0, 0, 0]));
        img.put_pixel(x, margin, Rgb([210, 210, 210]));
    }
    for (i, v) in values.iter().enumerate() {
        let x0 = margin + i as u32 * (bar + gap);
        let bh = (v.clamp(0.0, 1.0) * h as f64).round() as u32;
        let color = if i + 1 == values.len() { [40, 40, 120] } else { [70, 130, 200] };
        for x in x0..x0 + bar {
            for y in margin + h - bh..margin + h {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.png` next to `json_path`.
pub fn write_report(json_path: &Path, report: &EvalReport) -> std::io::Result<()> {
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(json_path, to_json(report))?;
    std::fs::write(json_path.with_extension("csv"), to_csv(report))?;
    bar_chart(report)
        .save(json_path.with_extension("png"))
        .map_err(std::io::Error::other)
}
