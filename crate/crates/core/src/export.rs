//! CSV tables and SVG figures for balance reports and curves.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::matching::BalanceReport;
use crate::quantile::QuantileCurve;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Wide balance table: one row per covariate plus `AAC` and `median` rows,
/// one column per labelled report.
pub fn write_balance_csv<W: Write>(reports: &[(&str, &BalanceReport)], writer: W) -> Result<()> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::InvalidArgument("no balance reports to write".into()));
    };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["covariate".to_string()];
    header.extend(reports.iter().map(|(l, _)| l.to_string()));
    wtr.write_record(&header)?;
    for (k, name) in first.covariate_names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(reports.iter().map(|(_, r)| r.per_covariate_abs_corr[k].to_string()));
        wtr.write_record(&row)?;
    }
    let mut aac = vec!["AAC".to_string()];
    aac.extend(reports.iter().map(|(_, r)| r.aac.to_string()));
    wtr.write_record(&aac)?;
    let mut med = vec!["median".to_string()];
    med.extend(reports.iter().map(|(_, r)| r.median_abs_corr.to_string()));
    wtr.write_record(&med)?;
    wtr.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal grouped bar chart of absolute correlations with a dashed line
/// at `threshold`.
pub fn balance_svg(reports: &[(&str, &BalanceReport)], threshold: f64) -> String {
    let names = reports.first().map(|(_, r)| r.covariate_names.clone()).unwrap_or_default();
    let bar = 10.0;
    let group = bar * reports.len() as f64 + 8.0;
    let (left, top, width) = (120.0, 30.0, 420.0);
    let height = top + group * names.len() as f64 + 50.0;
    let xmax = reports
        .iter()
        .flat_map(|(_, r)| r.per_covariate_abs_corr.iter().copied())
        .fold(threshold * 1.2, f64::max)
        .max(1e-3);
    let x = |v: f64| left + width * v / xmax;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        left + width + 130.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, name) in names.iter().enumerate() {
        let y0 = top + group * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y0 + group / 2.0,
            escape(name)
        );
        for (i, (_, r)) in reports.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{left}" y="{}" width="{:.2}" height="{}" fill="{}"/>"#,
                y0 + bar * i as f64,
                x(r.per_covariate_abs_corr[k]) - left,
                bar - 1.0,
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    let bottom = top + group * names.len() as f64;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, left + width);
    for i in 0..=4 {
        let v = xmax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, x(v), bottom + 14.0);
    }
    let _ = writeln!(
        s,
        r#"<line x1="{0:.1}" y1="{top}" x2="{0:.1}" y2="{bottom}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(threshold)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">absolute correlation with exposure</text>"#,
        left + width / 2.0,
        bottom + 32.0
    );
    for (i, (label, r)) in reports.iter().enumerate() {
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{} (AAC {:.3})</text>"#,
            left + width + 10.0,
            ly,
            PALETTE[i % PALETTE.len()],
            left + width + 24.0,
            ly + 9.0,
            escape(label),
            r.aac
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of several curves on their grids, with shaded bands where
/// present. Undefined points break the line.
pub fn curves_svg(curves: &[QuantileCurve], title: &str, y_label: &str) -> String {
    let (left, top, width, height) = (60.0, 30.0, 480.0, 300.0);
    let finite = |v: &&f64| v.is_finite();
    let all_x = curves.iter().flat_map(|c| c.grid.iter());
    let all_y = curves.iter().flat_map(|c| {
        c.estimate
            .iter()
            .chain(c.lower.iter().flatten())
            .chain(c.upper.iter().flatten())
    });
    let (x0, x1) = all_x.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = all_y.filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |v: f64| left + width * (v - x0) / (x1 - x0);
    let py = |v: f64| top + height * (1.0 - (v - y0) / (y1 - y0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        left + width + 110.0,
        top + height + 50.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, left + width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{width}" height="{height}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let vx = x0 + (x1 - x0) * i as f64 / 4.0;
        let vy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{vx:.2}</text>"#, px(vx), top + height + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{vy:.2}</text>"#, left - 4.0, py(vy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">exposure</text>"#, left + width / 2.0, top + height + 34.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        top + height / 2.0,
        escape(y_label)
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let (Some(lo), Some(hi)) = (&c.lower, &c.upper) {
            let ok: Vec<usize> = (0..c.grid.len()).filter(|&g| lo[g].is_finite() && hi[g].is_finite()).collect();
            if ok.len() > 1 {
                let mut pts: Vec<String> = ok.iter().map(|&g| format!("{:.2},{:.2}", px(c.grid[g]), py(hi[g]))).collect();
                pts.extend(ok.iter().rev().map(|&g| format!("{:.2},{:.2}", px(c.grid[g]), py(lo[g]))));
                let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, pts.join(" "));
            }
        }
        let mut path = String::new();
        let mut pen_down = false;
        for (g, &v) in c.estimate.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(path, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, px(c.grid[g]), py(v));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.trim_end());
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">tau = {5}</text>"#,
            left + width + 10.0,
            ly + 5.0,
            left + width + 28.0,
            left + width + 32.0,
            ly + 9.0,
            c.tau
        );
    }
    s.push_str("</svg>\n");
    s
}
