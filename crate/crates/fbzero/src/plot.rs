//! Minimal SVG emission (polylines, bars, scatters) and a 2-D PCA for
//! latent collections. Pure text output, deterministic byte-for-byte.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("points have inconsistent dimensions")]
    DimMismatch,
    #[error("need at least 2 dimensions for a 2-D projection, got {0}")]
    TooFewDims(usize),
    #[error("labels and values differ in length: {labels} vs {values}")]
    LabelMismatch { labels: usize, values: usize },
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Result<Self, PlotError> {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        let mut any = false;
        for &(x, y) in points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            any = true;
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if !any {
            return Err(PlotError::Empty);
        }
        if f.x_min == f.x_max {
            f.x_min -= 1.0;
            f.x_max += 1.0;
        }
        if f.y_min == f.y_max {
            f.y_min -= 1.0;
            f.y_max += 1.0;
        }
        Ok(f)
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN);
        let py =
            HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN);
        (px, py)
    }
}

fn fmt(v: f64) -> String {
    format!("{:.2}", v)
}

fn document(title: &str, body: &str, frame: Option<&Frame>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));
    if let Some(f) = frame {
        let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            WIDTH - MARGIN
        ));
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{MARGIN}\" stroke=\"black\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{x0}\" y=\"{}\" font-size=\"10\">{}</text>\n",
            HEIGHT - MARGIN / 2.0,
            fmt(f.x_min)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
            WIDTH - MARGIN,
            HEIGHT - MARGIN / 2.0,
            fmt(f.x_max)
        ));
        out.push_str(&format!(
            "<text x=\"4\" y=\"{y0}\" font-size=\"10\">{}</text>\n",
            fmt(f.y_min)
        ));
        out.push_str(&format!(
            "<text x=\"4\" y=\"{MARGIN}\" font-size=\"10\">{}</text>\n",
            fmt(f.y_max)
        ));
    }
    out.push_str(body);
    out.push_str("</svg>\n");
    out
}

/// Multi-series line chart; NaN points are dropped from their series.
pub fn line_chart(title: &str, series: &[Series]) -> Result<String, PlotError> {
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()))?;
    let mut body = String::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, y);
                format!("{},{}", fmt(px), fmt(py))
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            s.label
        ));
    }
    Ok(document(title, &body, Some(&frame)))
}

pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> Result<String, PlotError> {
    if labels.len() != values.len() {
        return Err(PlotError::LabelMismatch { labels: labels.len(), values: values.len() });
    }
    if values.is_empty() {
        return Err(PlotError::Empty);
    }
    let y_max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let y_min = values.iter().cloned().fold(0.0f64, f64::min);
    let frame = Frame { x_min: 0.0, x_max: values.len() as f64, y_min, y_max };
    let mut body = String::new();
    let slot = (WIDTH - 2.0 * MARGIN) / values.len() as f64;
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let (_, py) = frame.map(0.0, v);
        let (_, base) = frame.map(0.0, 0.0);
        let (top, h) = if py <= base { (py, base - py) } else { (base, py - base) };
        let x = MARGIN + i as f64 * slot + 0.1 * slot;
        body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            fmt(x),
            fmt(top),
            fmt(0.8 * slot),
            fmt(h),
            PALETTE[i % PALETTE.len()]
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            fmt(x + 0.4 * slot),
            HEIGHT - MARGIN + 14.0,
            label
        ));
    }
    Ok(document(title, &body, Some(&frame)))
}

pub fn scatter(title: &str, points: &[(f64, f64)]) -> Result<String, PlotError> {
    let frame = Frame::from_points(points.iter())?;
    let mut body = String::new();
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let (px, py) = frame.map(x, y);
        body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#1f77b4\" fill-opacity=\"0.7\"/>\n",
            fmt(px),
            fmt(py)
        ));
    }
    Ok(document(title, &body, Some(&frame)))
}

/// Project rows onto the top-2 principal components of their covariance
/// (eigen-decomposition by cyclic Jacobi rotations).
pub fn pca_2d(data: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, PlotError> {
    if data.is_empty() {
        return Err(PlotError::Empty);
    }
    let d = data[0].len();
    if d < 2 {
        return Err(PlotError::TooFewDims(d));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(PlotError::DimMismatch);
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in data {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / n;
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&mut cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let (c0, c1) = (order[0], order[1]);
    Ok(data
        .iter()
        .map(|row| {
            let mut p = (0.0, 0.0);
            for i in 0..d {
                let x = row[i] - mean[i];
                p.0 += x * eigvecs[i][c0];
                p.1 += x * eigvecs[i][c1];
            }
            p
        })
        .collect())
}

/// Cyclic Jacobi on a symmetric matrix; returns (eigenvalues, column
/// eigenvectors). The input is consumed as workspace.
fn jacobi_eigen(a: &mut [Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i][i]).collect(), v)
}
