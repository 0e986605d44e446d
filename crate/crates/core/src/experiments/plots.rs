//! SVG rendering of run and sweep artifacts. Output is a pure function of
//! the input CSV bytes: regenerating a plot from the same file produces
//! byte-identical SVG.
//!
//! Plot kinds are inferred from the CSV header:
//! - `n,ess,...` (runrecord / diagnostics): ESS versus time, plus filter
//!   means versus time when mean columns are present.
//! - `filter,delta,median_ess,mse` (sweep): median ESS and MSE versus
//!   log10(1/delta), one polyline per filter; the delta = 0 limit row is
//!   drawn one decade beyond the largest finite abscissa.
//! - `delta,lr_error,mc_se` (convergence harness): error versus
//!   log10(1/delta) with the same limit-row convention.
//! - `...,weight` (marginals): weighted kernel density estimate per
//!   component, Gaussian kernel, Silverman bandwidth on the weighted
//!   sample.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::run::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Minimal deterministic line chart.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (mut y0, mut y1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, y)| (a.min(*y), b.max(*y)));
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad_y = 0.05 * (y1 - y0);
    y0 -= pad_y;
    y1 += pad_y;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{title}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    for k in 0..=5 {
        let fx = x0 + (x1 - x0) * k as f64 / 5.0;
        let fy = y0 + (y1 - y0) * k as f64 / 5.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            px(fx),
            HEIGHT - MARGIN_B,
            px(fx),
            HEIGHT - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" \
             font-family=\"sans-serif\">{}</text>\n",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(fx)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0,
            py(fy),
            py(fy)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" \
             font-family=\"sans-serif\">{}</text>\n",
            MARGIN_L - 8.0,
            py(fy) + 4.0,
            fmt_tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{xlabel}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 16 {:.1})\">{ylabel}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        if pts.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for p in &pts {
            let mut it = p.split(',');
            let (cx, cy) = (it.next().unwrap(), it.next().unwrap());
            svg.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"2.2\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MARGIN_T + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 30.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>\n",
            WIDTH - MARGIN_R + 35.0,
            ly + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Weighted Gaussian-kernel density estimate with Silverman's bandwidth on
/// the weighted sample (effective sample size in place of n). Returns an
/// evaluation grid of 201 points.
pub fn weighted_kde(values: &[f64], weights: &[f64]) -> Vec<(f64, f64)> {
    assert_eq!(values.len(), weights.len());
    let wsum: f64 = weights.iter().sum();
    if values.is_empty() || wsum <= 0.0 {
        return Vec::new();
    }
    let w: Vec<f64> = weights.iter().map(|x| x / wsum).collect();
    let mean: f64 = values.iter().zip(&w).map(|(v, wi)| v * wi).sum();
    let var: f64 = values.iter().zip(&w).map(|(v, wi)| wi * (v - mean) * (v - mean)).sum();
    let n_eff = 1.0 / w.iter().map(|x| x * x).sum::<f64>();

    // Weighted IQR.
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let quantile = |q: f64| -> f64 {
        let mut acc = 0.0;
        for &i in &idx {
            acc += w[i];
            if acc >= q {
                return values[i];
            }
        }
        values[*idx.last().unwrap()]
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let sd = var.sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let scale = spread.max(1e-12 * (mean.abs() + 1.0));
    let bw = 0.9 * scale * n_eff.powf(-0.2);

    let lo = values[idx[0]] - 3.0 * bw;
    let hi = values[*idx.last().unwrap()] + 3.0 * bw;
    let m = 201;
    (0..m)
        .map(|k| {
            let x = lo + (hi - lo) * k as f64 / (m - 1) as f64;
            let f: f64 = values
                .iter()
                .zip(&w)
                .map(|(v, wi)| {
                    let u = (x - v) / bw;
                    wi * (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                / (bw * (2.0 * std::f64::consts::PI).sqrt());
            (x, f)
        })
        .collect()
}

fn parse_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Invalid(format!("csv number '{s}': {e}")))
}

/// Abscissa for a delta value: log10(1/delta), with delta = 0 placed one
/// decade beyond `max_finite`.
fn delta_abscissa(delta: f64, max_finite: f64) -> f64 {
    if delta > 0.0 {
        (1.0 / delta).log10()
    } else {
        max_finite + 1.0
    }
}

fn plot_sweep(path: &Path, out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let (_, rows) = parse_csv(path)?;
    if rows.is_empty() {
        eprintln!("warning: {} has no rows; skipping plot", path.display());
        return Ok(());
    }
    let mut max_finite = 0.0f64;
    for r in &rows {
        let d = parse_f64(&r[1])?;
        if d > 0.0 {
            max_finite = max_finite.max((1.0 / d).log10());
        }
    }
    let mut ess: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut mse: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        let filter = r[0].clone();
        let x = delta_abscissa(parse_f64(&r[1])?, max_finite);
        ess.entry(filter.clone()).or_default().push((x, parse_f64(&r[2])?));
        mse.entry(filter).or_default().push((x, parse_f64(&r[3])?));
    }
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    for (metric, data, ylabel) in
        [("ess", &ess, "median ESS"), ("mse", &mse, "MSE")]
    {
        let series: Vec<Series> = data
            .iter()
            .map(|(label, pts)| {
                let mut pts = pts.clone();
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                Series { label: label.clone(), points: pts }
            })
            .collect();
        let svg =
            line_chart(&format!("{ylabel} vs log10(1/delta)"), "log10(1/delta)", ylabel, &series);
        let out = out_dir.join(format!("{stem}_{metric}.svg"));
        write_atomic(&out, svg.as_bytes())?;
        written.push(out);
    }
    Ok(())
}

fn plot_run(path: &Path, out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let (header, rows) = parse_csv(path)?;
    if rows.is_empty() {
        eprintln!("warning: {} has no rows; skipping plot", path.display());
        return Ok(());
    }
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let ess_points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| Ok((parse_f64(&r[0])?, parse_f64(&r[1])?)))
        .collect::<Result<_>>()?;
    let svg = line_chart(
        "ESS vs n",
        "n",
        "ESS",
        &[Series { label: "ess".into(), points: ess_points }],
    );
    let out = out_dir.join(format!("{stem}_ess.svg"));
    write_atomic(&out, svg.as_bytes())?;
    written.push(out);

    let mean_cols: Vec<usize> =
        header.iter().enumerate().filter(|(_, h)| h.starts_with("mean_")).map(|(i, _)| i).collect();
    if !mean_cols.is_empty() {
        let series: Vec<Series> = mean_cols
            .iter()
            .map(|&c| {
                let points = rows
                    .iter()
                    .map(|r| Ok((parse_f64(&r[0])?, parse_f64(&r[c])?)))
                    .collect::<Result<_>>()?;
                Ok(Series { label: header[c].clone(), points })
            })
            .collect::<Result<_>>()?;
        let svg = line_chart("filter means vs n", "n", "mean", &series);
        let out = out_dir.join(format!("{stem}_means.svg"));
        write_atomic(&out, svg.as_bytes())?;
        written.push(out);
    }
    Ok(())
}

fn plot_marginals(path: &Path, out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let (header, rows) = parse_csv(path)?;
    if rows.is_empty() {
        eprintln!("warning: {} has no rows; skipping plot", path.display());
        return Ok(());
    }
    let wcol = header.len() - 1;
    let weights: Vec<f64> =
        rows.iter().map(|r| parse_f64(&r[wcol])).collect::<Result<_>>()?;
    let mut series = Vec::new();
    for c in 0..wcol {
        let values: Vec<f64> = rows.iter().map(|r| parse_f64(&r[c])).collect::<Result<_>>()?;
        series.push(Series { label: header[c].clone(), points: weighted_kde(&values, &weights) });
    }
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let svg = line_chart("weighted marginal density", "x", "density", &series);
    let out = out_dir.join(format!("{stem}_kde.svg"));
    write_atomic(&out, svg.as_bytes())?;
    written.push(out);
    Ok(())
}

fn plot_prop1(path: &Path, out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let (_, rows) = parse_csv(path)?;
    if rows.is_empty() {
        eprintln!("warning: {} has no rows; skipping plot", path.display());
        return Ok(());
    }
    let mut max_finite = 0.0f64;
    for r in &rows {
        let d = parse_f64(&r[0])?;
        if d > 0.0 {
            max_finite = max_finite.max((1.0 / d).log10());
        }
    }
    let mut points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| Ok((delta_abscissa(parse_f64(&r[0])?, max_finite), parse_f64(&r[1])?)))
        .collect::<Result<_>>()?;
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let svg = line_chart(
        "empirical Lr error vs log10(1/delta)",
        "log10(1/delta)",
        "Lr error",
        &[Series { label: "lr_error".into(), points }],
    );
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let out = out_dir.join(format!("{stem}_error.svg"));
    write_atomic(&out, svg.as_bytes())?;
    written.push(out);
    Ok(())
}

/// Render SVGs for the given CSV artifacts, inferring the plot kind from
/// each header. Returns the written paths.
pub fn emit_plots(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)?;
        let header = text.lines().next().unwrap_or("");
        if header.starts_with("filter,delta,") {
            plot_sweep(path, out_dir, &mut written)?;
        } else if header.starts_with("delta,lr_error") {
            plot_prop1(path, out_dir, &mut written)?;
        } else if header.starts_with("n,ess") {
            plot_run(path, out_dir, &mut written)?;
        } else if header.ends_with(",weight") || header == "weight" {
            plot_marginals(path, out_dir, &mut written)?;
        } else {
            return Err(Error::Invalid(format!(
                "{}: unrecognized csv header '{header}'",
                path.display()
            )));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_mass_integrates_to_one() {
        let values: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let weights: Vec<f64> = (0..200).map(|i| 1.0 + (i % 7) as f64).collect();
        let pts = weighted_kde(&values, &weights);
        // Trapezoid over the KDE grid.
        let mut mass = 0.0;
        for w in pts.windows(2) {
            mass += 0.5 * (w[1].1 + w[0].1) * (w[1].0 - w[0].0);
        }
        assert!((mass - 1.0).abs() < 0.02, "kde mass {mass}");
    }

    #[test]
    fn chart_is_deterministic() {
        let series = vec![Series {
            label: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
        }];
        let a = line_chart("t", "x", "y", &series);
        let b = line_chart("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.contains("polyline"));
    }

    #[test]
    fn single_point_series_renders_marker_only() {
        let series = vec![Series { label: "one".into(), points: vec![(1.0, 1.0)] }];
        let svg = line_chart("t", "x", "y", &series);
        assert!(svg.contains("circle"));
        assert!(!svg.contains("polyline"));
    }
}
