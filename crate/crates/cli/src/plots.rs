//! Plot data exports (CSV) and a minimal SVG line/scatter emitter, enough to
//! eyeball loss curves, PCA clouds, and marginal densities without external
//! tooling.

use std::path::Path;

use chime_core::metrics::pca_project;
use chime_core::numerics::Tensor;
use chime_core::Result;

use crate::report::write_atomic;

/// PCA of the pooled real + generated windows; one CSV row per window with
/// its set label.
pub fn write_pca_csv(path: &Path, real: &[Tensor], generated: &[Tensor]) -> Result<()> {
    let pooled: Vec<Tensor> = real.iter().chain(generated.iter()).cloned().collect();
    let projection = pca_project(&pooled, 2)?;
    let mut body = String::from("set,x,y\n");
    for (i, coords) in projection.coords.iter().enumerate() {
        let label = if i < real.len() { "real" } else { "generated" };
        body.push_str(&format!("{label},{},{}\n", coords[0], coords[1]));
    }
    write_atomic(path, body.as_bytes())
}

/// Histogram densities of pooled values per set over a shared binning.
pub fn write_marginal_density_csv(
    path: &Path,
    real: &[Tensor],
    generated: &[Tensor],
    bins: usize,
) -> Result<()> {
    let all_values = |set: &[Tensor]| -> Vec<f64> {
        set.iter().flat_map(|t| t.values().iter().copied()).collect()
    };
    let rv = all_values(real);
    let gv = all_values(generated);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in rv.iter().chain(&gv) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() || lo == hi {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |values: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        let norm = values.len() as f64 * width;
        for x in &mut h {
            *x /= norm.max(1e-12);
        }
        h
    };
    let hr = histogram(&rv);
    let hg = histogram(&gv);
    let mut body = String::from("value,real_density,generated_density\n");
    for b in 0..bins {
        let center = lo + (b as f64 + 0.5) * width;
        body.push_str(&format!("{center},{},{}\n", hr[b], hg[b]));
    }
    write_atomic(path, body.as_bytes())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 40.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        SVG_W / 2.0
    )
}

fn scale_points(points: &[(f64, f64)], bounds: (f64, f64, f64, f64)) -> Vec<(f64, f64)> {
    let (x0, x1, y0, y1) = bounds;
    let sx = (SVG_W - 2.0 * MARGIN) / (x1 - x0).max(1e-12);
    let sy = (SVG_H - 2.0 * MARGIN) / (y1 - y0).max(1e-12);
    points
        .iter()
        .map(|&(x, y)| {
            (
                MARGIN + (x - x0) * sx,
                SVG_H - MARGIN - (y - y0) * sy,
            )
        })
        .collect()
}

fn bounds_of(series: &[&[(f64, f64)]]) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in *s {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x0 == x1 {
        x1 = x0 + 1.0;
    }
    if y0 == y1 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Multi-series line chart.
pub fn svg_line_chart(path: &Path, title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let views: Vec<&[(f64, f64)]> = series.iter().map(|(_, s)| s.as_slice()).collect();
    let bounds = bounds_of(&views);
    let mut svg = svg_open(title);
    for (i, (name, points)) in series.iter().enumerate() {
        let scaled = scale_points(points, bounds);
        let d: Vec<String> = scaled.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let color = COLORS[i % COLORS.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            d.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{name}</text>\n",
            SVG_W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

/// Scatter plot with one color per group.
pub fn svg_scatter(path: &Path, title: &str, groups: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let views: Vec<&[(f64, f64)]> = groups.iter().map(|(_, s)| s.as_slice()).collect();
    let bounds = bounds_of(&views);
    let mut svg = svg_open(title);
    for (i, (name, points)) in groups.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (x, y) in scale_points(points, bounds) {
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{name}</text>\n",
            SVG_W - MARGIN - 120.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

/// The standard plot bundle for generation runs.
pub fn write_generation_plots(
    dir: &Path,
    real: &[Tensor],
    generated: &[Tensor],
    loss_curve: &[f64],
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| chime_core::ChimeError::io(dir.display().to_string(), e))?;
    write_pca_csv(&dir.join("pca.csv"), real, generated)?;
    write_marginal_density_csv(&dir.join("marginal_density.csv"), real, generated, 64)?;

    let pooled: Vec<Tensor> = real.iter().chain(generated.iter()).cloned().collect();
    let projection = pca_project(&pooled, 2)?;
    let to_points = |range: std::ops::Range<usize>| -> Vec<(f64, f64)> {
        range.map(|i| (projection.coords[i][0], projection.coords[i][1])).collect()
    };
    svg_scatter(
        &dir.join("pca.svg"),
        "PCA of real vs generated windows",
        &[
            ("real", to_points(0..real.len())),
            ("generated", to_points(real.len()..pooled.len())),
        ],
    )?;
    if !loss_curve.is_empty() {
        let points: Vec<(f64, f64)> = loss_curve
            .iter()
            .enumerate()
            .map(|(i, &l)| ((i + 1) as f64, l))
            .collect();
        svg_line_chart(&dir.join("loss_curve.svg"), "Training loss", &[("loss", points)])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows(n: usize, seed: u64) -> Vec<Tensor> {
        chime_core::data::generate_sines(n, 6, 2, seed)
            .into_iter()
            .map(|w| w.values)
            .collect()
    }

    #[test]
    fn plot_bundle_writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let real = windows(12, 1);
        let generated = windows(12, 2);
        write_generation_plots(dir.path(), &real, &generated, &[2.0, 1.0, 0.5]).unwrap();
        for f in [
            "pca.csv",
            "marginal_density.csv",
            "pca.svg",
            "loss_curve.svg",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let pca = std::fs::read_to_string(dir.path().join("pca.csv")).unwrap();
        assert!(pca.starts_with("set,x,y\n"));
        assert_eq!(pca.lines().count(), 25);
    }

    #[test]
    fn density_bins_integrate_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let real = windows(8, 3);
        let generated = windows(8, 4);
        let path = dir.path().join("density.csv");
        write_marginal_density_csv(&path, &real, &generated, 32).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        lines.next();
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 32);
        let width = rows[1][0] - rows[0][0];
        let real_mass: f64 = rows.iter().map(|r| r[1] * width).sum();
        assert!((real_mass - 1.0).abs() < 1e-9, "mass {real_mass}");
    }
}
