//! CSV and SVG writers.
//!
//! CSV files are comma separated with `.` decimals, LF line endings and a
//! header row. The very first line is a `#` metadata comment; it carries a
//! timestamp and is the only line that differs between identical runs.
//! Non-finite values are written as `inf`, `-inf` and `nan`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::sweep::{CellStatus, CellSummary, SeedRow};
use crate::continual::RunTrace;
use crate::error::Result;

pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:e}")
    }
}

pub fn metadata_line(fields: &str) -> String {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# cocoa-continual {fields} generated_unix={now}\n")
}

fn csv_writer(path: &Path, meta: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(metadata_line(meta).as_bytes())?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn write_trace_csv(path: &Path, trace: &RunTrace, meta: &str) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record(["t", "forgetting", "forgetting_unique", "rel_step", "dist_to_gen", "diverged"])?;
    for r in &trace.records {
        w.write_record([
            r.t.to_string(),
            fmt_float(r.forgetting),
            fmt_float(r.forgetting_unique),
            fmt_float(r.rel_step),
            fmt_float(r.dist_to_gen),
            u8::from(r.diverged).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SeedRow], meta: &str) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record([
        "n_m",
        "M",
        "seed",
        "final_forgetting",
        "final_rel_step",
        "final_dist",
        "diverged",
        "status",
        "steps",
    ])?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.n_m.to_string(),
            r.tasks.to_string(),
            seed,
            fmt_float(r.final_forgetting),
            fmt_float(r.final_rel_step),
            fmt_float(r.final_dist),
            u8::from(r.diverged).to_string(),
            r.status.as_str().to_string(),
            r.steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cells_csv(path: &Path, cells: &[CellSummary], meta: &str) -> Result<()> {
    let mut w = csv_writer(path, meta)?;
    w.write_record([
        "n_m",
        "M",
        "status",
        "seeds",
        "diverged_seeds",
        "median_forgetting",
        "median_rel_step",
        "median_dist",
        "reason",
    ])?;
    for c in cells {
        w.write_record([
            c.n_m.to_string(),
            c.tasks.to_string(),
            c.status.as_str().to_string(),
            c.seeds.to_string(),
            c.diverged_seeds.to_string(),
            fmt_float(c.median_forgetting),
            fmt_float(c.median_rel_step),
            fmt_float(c.median_dist),
            c.reason.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Piecewise-linear dark-blue → teal → yellow ramp.
fn ramp(u: f64) -> (u8, u8, u8) {
    const STOPS: [(f64, [f64; 3]); 3] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let u = u.clamp(0.0, 1.0);
    let i = if u <= 0.5 { 0 } else { 1 };
    let (u0, c0) = STOPS[i];
    let (u1, c1) = STOPS[i + 1];
    let s = (u - u0) / (u1 - u0);
    let mix = |j: usize| (c0[j] + s * (c1[j] - c0[j])).round() as u8;
    (mix(0), mix(1), mix(2))
}

/// Heatmap over `(M, n_m)` with a log₁₀ colour scale. Skipped cells are
/// grey, cells with non-finite or non-positive medians are dark red.
pub fn heatmap_svg(cells: &[CellSummary], value: impl Fn(&CellSummary) -> f64, title: &str) -> String {
    let mut ms: Vec<usize> = cells.iter().map(|c| c.tasks).collect();
    let mut ns: Vec<usize> = cells.iter().map(|c| c.n_m).collect();
    ms.sort_unstable();
    ms.dedup();
    ns.sort_unstable();
    ns.dedup();

    let logs: Vec<f64> = cells
        .iter()
        .filter(|c| c.status != CellStatus::Skipped)
        .map(&value)
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(f64::log10)
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1e-9)) } else { (0.0, 1.0) };

    let (cw, ch, left, top) = (48.0, 28.0, 60.0, 40.0);
    let width = left + cw * ms.len() as f64 + 120.0;
    let height = top + ch * ns.len() as f64 + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="14">{title}</text>"#);
    for c in cells {
        let (Some(ix), Some(iy)) = (
            ms.iter().position(|&m| m == c.tasks),
            ns.iter().position(|&n| n == c.n_m),
        ) else {
            continue;
        };
        let v = value(c);
        let fill = match c.status {
            CellStatus::Skipped => "#bbbbbb".to_string(),
            _ if !(v.is_finite() && v > 0.0) => "#7f0000".to_string(),
            _ => {
                let (r, g, b) = ramp((v.log10() - lo) / (hi - lo));
                format!("#{r:02x}{g:02x}{b:02x}")
            }
        };
        let x = left + cw * ix as f64;
        let y = top + ch * (ns.len() - 1 - iy) as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}"><title>n_m={} M={} value={}</title></rect>"#,
            c.n_m,
            c.tasks,
            fmt_float(v)
        );
    }
    for (i, m) in ms.iter().enumerate() {
        let x = left + cw * (i as f64 + 0.5);
        let y = top + ch * ns.len() as f64 + 15.0;
        let _ = writeln!(svg, r#"<text x="{x}" y="{y}" text-anchor="middle">{m}</text>"#);
    }
    for (i, n) in ns.iter().enumerate() {
        let y = top + ch * (ns.len() - 1 - i) as f64 + ch * 0.65;
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" text-anchor="end">{n}</text>"#, left - 6.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">M</text>"#,
        left + cw * ms.len() as f64 / 2.0,
        top + ch * ns.len() as f64 + 35.0
    );
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})">n_m</text>"#, top + 40.0, top + 40.0);

    // colour bar
    let bx = left + cw * ms.len() as f64 + 30.0;
    let bar_h = ch * ns.len() as f64;
    let steps = 20;
    for s in 0..steps {
        let u = s as f64 / (steps - 1) as f64;
        let (r, g, b) = ramp(u);
        let y = top + bar_h * (1.0 - (s + 1) as f64 / steps as f64);
        let _ = writeln!(
            svg,
            r##"<rect x="{bx}" y="{y}" width="16" height="{}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
            bar_h / steps as f64 + 0.5
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}">1e{:.1}</text>"#, bx + 20.0, top + 10.0, hi);
    let _ = writeln!(svg, r#"<text x="{}" y="{}">1e{:.1}</text>"#, bx + 20.0, top + bar_h, lo);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_float(f64::INFINITY), "inf");
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert_eq!(fmt_float(1e-30), "1e-30");
        assert_eq!(fmt_float(0.25), "2.5e-1");
        let x = 0.1 + 0.2;
        assert_eq!(fmt_float(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), (68, 1, 84));
        assert_eq!(ramp(1.0), (253, 231, 37));
        assert_eq!(ramp(7.0), ramp(1.0));
    }
}
