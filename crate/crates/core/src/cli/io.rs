//! Plain-file outputs and their loaders: point CSVs, PGM images, SVG line
//! charts and the run summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Points as CSV with header `x0,x1,...`. Values use the shortest
/// round-trip representation, so reading back is exact.
pub fn points_to_csv(points: &[Vec<f64>]) -> String {
    let d = points.first().map_or(0, Vec::len);
    let mut out = (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for p in points {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn points_from_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err("empty points CSV"))?;
    let d = header.split(',').filter(|s| !s.is_empty()).count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row = l
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format_err(format!("row {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d {
                return Err(format_err(format!("row {} has {} values, expected {d}", i + 1, row.len())));
            }
            Ok(row)
        })
        .collect()
}

/// Binary 8-bit PGM, linearly mapping `[lo, hi]` of the values to `0..=255`.
pub fn to_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::Parameter(format!("{} values do not fill a {height}x{width} image", values.len())));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// `(height, width, pixels)` of a binary PGM with maxval 255.
pub fn from_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("bad PGM header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format_err("only binary 8-bit PGM is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| format_err("bad PGM width"))?;
    let h: usize = fields[2].parse().map_err(|_| format_err("bad PGM height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(format_err(format!("PGM has {} pixels, expected {}", data.len(), w * h)));
    }
    Ok((h, w, data.to_vec()))
}

/// A self-contained line chart of one or more series against their index.
pub fn svg_line_chart(title: &str, series: &[(&str, &[f64])], log_y: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let tf = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let finite = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| v.is_finite() && (!log_y || *v > 0.0));
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(tf(v)), h.max(tf(v))));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.clamp(-1e300, 0.0), lo.max(0.0) + 1.0) };
    let n_max = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{M}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{M},{M} {M},{} {},{}"/>"#,
        H - M,
        W - M,
        H - M
    );
    for (k, (name, s)) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite() && (!log_y || **v > 0.0))
            .map(|(i, &v)| {
                let x = M + (W - 2.0 * M) * i as f64 / (n_max - 1) as f64;
                let y = H - M - (H - 2.0 * M) * (tf(v) - lo) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            out,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            escape(name),
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - M - 120.0,
            M + 16.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Series names and point counts of a chart written by [`svg_line_chart`].
pub fn svg_series(svg: &str) -> Result<Vec<(String, usize)>> {
    if !svg.trim_start().starts_with("<svg") || !svg.trim_end().ends_with("</svg>") {
        return Err(format_err("not an SVG document"));
    }
    let mut out = Vec::new();
    for line in svg.lines().filter(|l| l.contains("data-series=")) {
        let attr = |name: &str| -> Result<&str> {
            let key = format!("{name}=\"");
            let start = line.find(&key).ok_or_else(|| format_err(format!("missing {name}")))? + key.len();
            let len = line[start..].find('"').ok_or_else(|| format_err("unterminated attribute"))?;
            Ok(&line[start..start + len])
        };
        let n = attr("points")?.split_whitespace().count();
        out.push((attr("data-series")?.to_string(), n));
    }
    Ok(out)
}

/// `name=value` lines, sorted by name.
pub fn summary_to_text(values: &BTreeMap<String, String>) -> String {
    values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn summary_from_text(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err(format!("summary line without '=': {l}")))
        })
        .collect()
}
