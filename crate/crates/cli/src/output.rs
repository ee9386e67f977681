//! Stamped output files and a dependency-free SVG plotter for log-log
//! rate pictures.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Create `name` under `outdir` and write the header comments every
/// artifact carries. Returns the path and the open writer.
pub fn create_stamped(
    outdir: &Path,
    name: &str,
    hash: &str,
    seed: u64,
    command: &str,
) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(outdir)
        .with_context(|| format!("cannot create output directory {}", outdir.display()))?;
    let path = outdir.join(name);
    let file =
        File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config: {hash}")?;
    writeln!(w, "# seed: {seed}")?;
    writeln!(w, "# version: {VERSION}")?;
    writeln!(w, "# command: {command}")?;
    Ok((path, w))
}

/// A fitted power law `value = exp(intercept) * x^slope`, drawn as a line
/// in log-log coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FitLine {
    pub slope: f64,
    pub intercept: f64,
}

const W: f64 = 640.0;
const H: f64 = 460.0;
const ML: f64 = 76.0;
const MR: f64 = 24.0;
const MT: f64 = 42.0;
const MB: f64 = 58.0;

/// Render a log-log scatter of `(xs, ys)` with an optional fitted line.
/// Non-positive or non-finite points are skipped. Everything is inline;
/// the file opens in any browser without further assets.
pub fn loglog_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    xs: &[f64],
    ys: &[f64],
    fit: Option<FitLine>,
) -> String {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(&x, &y)| x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    let (mut lo_x, mut hi_x) = span(pts.iter().map(|p| p.0));
    let (mut lo_y, mut hi_y) = span(pts.iter().map(|p| p.1));
    pad(&mut lo_x, &mut hi_x);
    pad(&mut lo_y, &mut hi_y);
    let px = |lx: f64| ML + (lx - lo_x) / (hi_x - lo_x) * (W - ML - MR);
    let py = |ly: f64| H - MB - (ly - lo_y) / (hi_y - lo_y) * (H - MT - MB);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (ML + W - MR) / 2.0,
        escape(title)
    ));

    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let lx = lo_x + f * (hi_x - lo_x);
        let ly = lo_y + f * (hi_y - lo_y);
        let x = px(lx);
        let y = py(ly);
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MT:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            H - MB
        ));
        s.push_str(&format!(
            "<line x1=\"{ML:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            W - MR
        ));
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            tick(lx.exp())
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            y + 4.0,
            tick(ly.exp())
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MB
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        escape(y_label)
    ));

    if let Some(line) = fit {
        let y0 = line.intercept + line.slope * lo_x;
        let y1 = line.intercept + line.slope * hi_x;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
            px(lo_x),
            py(y0),
            px(hi_x),
            py(y1)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d62728\">slope {:.3}</text>\n",
            ML + 10.0,
            MT + 16.0,
            line.slope
        ));
    }
    for (lx, ly) in &pts {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#1f77b4\"/>\n",
            px(*lx),
            py(*ly)
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(outdir: &Path, name: &str, svg: &str) -> Result<PathBuf> {
    fs::create_dir_all(outdir)
        .with_context(|| format!("cannot create output directory {}", outdir.display()))?;
    let path = outdir.join(name);
    fs::write(&path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn pad(lo: &mut f64, hi: &mut f64) {
    let w = *hi - *lo;
    if w <= 0.0 {
        *lo -= 1.0;
        *hi += 1.0;
    } else {
        *lo -= 0.08 * w;
        *hi += 0.08 * w;
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e3 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
