//! Depth error/accuracy measures and scale-invariant intrinsic-decomposition measures.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

/// Accuracy thresholds `1.25^k`, `k = 1, 2, 3`.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.5625, 1.953125];

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LMSE_MIN_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthMetrics {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub acc: [f64; 3],
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = ["rel", "log10", "rms", "rms_log", "delta<1.25", "delta<1.25^2", "delta<1.25^3"];

    pub fn values(&self) -> [f64; 7] {
        [self.rel, self.log10, self.rms, self.rms_log, self.acc[0], self.acc[1], self.acc[2]]
    }

    pub fn mean(items: &[DepthMetrics]) -> DepthMetrics {
        let n = items.len().max(1) as f64;
        let mut out = DepthMetrics::default();
        for m in items {
            out.rel += m.rel / n;
            out.log10 += m.log10 / n;
            out.rms += m.rms / n;
            out.rms_log += m.rms_log / n;
            for k in 0..3 {
                out.acc[k] += m.acc[k] / n;
            }
        }
        out
    }
}

/// Metrics of one intrinsic map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MapMetrics {
    pub mse: f64,
    pub lmse: f64,
    pub dssim: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntrinsicMetrics {
    pub albedo: MapMetrics,
    pub shading: MapMetrics,
}

impl IntrinsicMetrics {
    pub const COLUMNS: [&'static str; 9] = [
        "mse_albedo",
        "mse_shading",
        "mse_avg",
        "lmse_albedo",
        "lmse_shading",
        "lmse_avg",
        "dssim_albedo",
        "dssim_shading",
        "dssim_avg",
    ];

    pub fn average(&self) -> MapMetrics {
        MapMetrics {
            mse: (self.albedo.mse + self.shading.mse) / 2.0,
            lmse: (self.albedo.lmse + self.shading.lmse) / 2.0,
            dssim: (self.albedo.dssim + self.shading.dssim) / 2.0,
        }
    }

    pub fn values(&self) -> [f64; 9] {
        let (a, s, m) = (self.albedo, self.shading, self.average());
        [a.mse, s.mse, m.mse, a.lmse, s.lmse, m.lmse, a.dssim, s.dssim, m.dssim]
    }

    pub fn mean(items: &[IntrinsicMetrics]) -> IntrinsicMetrics {
        let n = items.len().max(1) as f64;
        let mut out = IntrinsicMetrics::default();
        for m in items {
            for (acc, v) in [(&mut out.albedo, m.albedo), (&mut out.shading, m.shading)] {
                acc.mse += v.mse / n;
                acc.lmse += v.lmse / n;
                acc.dssim += v.dssim / n;
            }
        }
        out
    }
}

fn check_pair(op: &'static str, pred: &Image, gt: &Image) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty image")));
    }
    Ok(())
}

/// Error and accuracy measures between linear depth maps.
pub fn depth_metrics(pred: &Image, gt: &Image) -> Result<DepthMetrics> {
    check_pair("depth_metrics", pred, gt)?;
    if pred.data().iter().chain(gt.data()).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument("depth_metrics: depths must be finite and positive".into()));
    }
    let n = pred.len() as f64;
    let mut m = DepthMetrics::default();
    let (mut sq, mut sq_log) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        m.rel += (p - g).abs() / g;
        m.log10 += (p.log10() - g.log10()).abs();
        sq += (p - g) * (p - g);
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        for (acc, t) in m.acc.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < t {
                *acc += 1.0;
            }
        }
    }
    m.rel /= n;
    m.log10 /= n;
    m.rms = (sq / n).sqrt();
    m.rms_log = (sq_log / n).sqrt();
    m.acc.iter_mut().for_each(|a| *a /= n);
    Ok(m)
}

/// `argmin_α ‖α·p − g‖²`; zero when `p` is zero.
pub fn scale_fit(pred: &[f64], gt: &[f64]) -> f64 {
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    if pp == 0.0 {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| p * g).sum::<f64>() / pp
}

fn scaled_mse(pred: &[f64], gt: &[f64]) -> f64 {
    let alpha = scale_fit(pred, gt);
    pred.iter().zip(gt).map(|(p, g)| (alpha * p - g).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Window side used by [`lmse`] for an image of the given size.
pub fn lmse_window(height: usize, width: usize) -> usize {
    let k = (0.1 * height.max(width) as f64).round() as usize;
    k.max(LMSE_MIN_WINDOW).min(height).min(width)
}

fn window_starts(len: usize, k: usize, stride: usize) -> Vec<usize> {
    (0..=len - k).step_by(stride.max(1)).collect()
}

/// Mean of scale-fitted MSEs over sliding square windows (all channels fitted jointly).
pub fn lmse(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair("lmse", pred, gt)?;
    let (h, w, c) = gt.shape();
    let k = lmse_window(h, w);
    let stride = k / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    let (mut pw, mut gw) = (Vec::with_capacity(k * k * c), Vec::with_capacity(k * k * c));
    for y0 in window_starts(h, k, stride) {
        for x0 in window_starts(w, k, stride) {
            pw.clear();
            gw.clear();
            for y in y0..y0 + k {
                let row = (y * w + x0) * c;
                pw.extend_from_slice(&pred.data()[row..row + k * c]);
                gw.extend_from_slice(&gt.data()[row..row + k * c]);
            }
            total += scaled_mse(&pw, &gw);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM over all `8×8` windows (stride 1) and channels, dynamic range 1.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair("ssim", pred, gt)?;
    let (h, w, c) = gt.shape();
    let k = SSIM_WINDOW.min(h).min(w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let i = (y * w + x) * c + ch;
                        let (a, b) = (pred.data()[i], gt.data()[i]);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn map_metrics(pred: &Image, gt: &Image) -> Result<MapMetrics> {
    check_pair("intrinsic_metrics", pred, gt)?;
    let alpha = scale_fit(pred.data(), gt.data());
    let fitted = pred.map(|v| alpha * v);
    Ok(MapMetrics {
        mse: scaled_mse(pred.data(), gt.data()),
        lmse: lmse(pred, gt)?,
        dssim: ((1.0 - ssim(&fitted, gt)?) / 2.0).clamp(0.0, 1.0),
    })
}

/// Scale-invariant MSE, LMSE and DSSIM of linear albedo and shading predictions.
pub fn intrinsic_metrics(pred_albedo: &Image, pred_shading: &Image, gt_albedo: &Image, gt_shading: &Image) -> Result<IntrinsicMetrics> {
    Ok(IntrinsicMetrics {
        albedo: map_metrics(pred_albedo, gt_albedo)?,
        shading: map_metrics(pred_shading, gt_shading)?,
    })
}

/// Scores log-domain depth, albedo and shading predictions against a ground-truth record.
/// Depth is compared in linear depth, albedo and shading in the linear domain.
pub fn score_record(
    depth: &Image,
    albedo: &Image,
    shading: &Image,
    gt: &crate::data::SceneRecord,
) -> Result<(DepthMetrics, IntrinsicMetrics)> {
    let d = depth_metrics(&depth.map(f64::exp), &gt.linear_depth())?;
    let i = intrinsic_metrics(
        &albedo.to_linear()?,
        &shading.to_linear()?,
        &gt.albedo.to_linear()?,
        &gt.shading.to_linear()?,
    )?;
    Ok((d, i))
}

/// Per-image rows plus their mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub depth: Vec<DepthMetrics>,
    pub intrinsic: Vec<IntrinsicMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, depth: DepthMetrics, intrinsic: IntrinsicMetrics) {
        self.ids.push(id.into());
        self.depth.push(depth);
        self.intrinsic.push(intrinsic);
    }

    pub fn depth_mean(&self) -> DepthMetrics {
        DepthMetrics::mean(&self.depth)
    }

    pub fn intrinsic_mean(&self) -> IntrinsicMetrics {
        IntrinsicMetrics::mean(&self.intrinsic)
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["id"];
        cols.extend(DepthMetrics::COLUMNS);
        cols.extend(IntrinsicMetrics::COLUMNS);
        cols.join(",")
    }

    /// One row per image, then a `mean` row. Values use round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        let row = |out: &mut String, id: &str, d: &DepthMetrics, i: &IntrinsicMetrics| {
            let vals: Vec<String> = d.values().iter().chain(i.values().iter()).map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{id},{}", vals.join(","));
        };
        for ((id, d), i) in self.ids.iter().zip(&self.depth).zip(&self.intrinsic) {
            row(&mut out, id, d, i);
        }
        row(&mut out, "mean", &self.depth_mean(), &self.intrinsic_mean());
        out
    }

    pub fn to_table(&self) -> String {
        let d = self.depth_mean();
        let i = self.intrinsic_mean();
        let mut out = String::new();
        let _ = writeln!(out, "depth ({} images)", self.ids.len());
        let _ = writeln!(out, "{}", DepthMetrics::COLUMNS.map(|c| format!("{c:>13}")).join(""));
        let _ = writeln!(out, "{}", d.values().map(|v| format!("{v:>13.4}")).join(""));
        let _ = writeln!(out, "intrinsic");
        let _ = writeln!(out, "{:>8}{:>10}{:>10}{:>10}", "", "albedo", "shading", "avg");
        let avg = i.average();
        for (name, a, s, m) in [
            ("MSE", i.albedo.mse, i.shading.mse, avg.mse),
            ("LMSE", i.albedo.lmse, i.shading.lmse, avg.lmse),
            ("DSSIM", i.albedo.dssim, i.shading.dssim, avg.dssim),
        ] {
            let _ = writeln!(out, "{name:>8}{a:>10.4}{s:>10.4}{m:>10.4}");
        }
        out
    }
}
