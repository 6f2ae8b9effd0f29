//! Training objective: uncertainty-weighted photometric loss plus positive
//! and negative motion fusion, with exact reverse-mode gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{BlockId, FieldView, GradAccumulator, GridGrad, Layer, LayeredFieldParams, SmallGrad, Trainable};
use crate::geometry::CameraPose;
use crate::renderer::{backward, clip_for_field, trace, with_workers, BundleGrad, RayTape, RenderBundle, RenderSettings};

pub const DEFAULT_LAMBDA_PMF: f64 = 1.1;
pub const DEFAULT_LAMBDA_NMF: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Rays processed per parallel chunk. Fixed so the reduction order never
/// depends on the worker count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub rgb: bool,
    pub pmf: bool,
    pub nmf: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        rgb: true,
        pmf: true,
        nmf: true,
    };
    pub const RGB: LossToggles = LossToggles {
        rgb: true,
        pmf: false,
        nmf: false,
    };

    pub fn uses_masks(&self) -> bool {
        self.pmf || self.nmf
    }

    /// Parses a comma-separated subset of `rgb`, `pmf`, `nmf`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = LossToggles {
            rgb: false,
            pmf: false,
            nmf: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "rgb" => t.rgb = true,
                "pmf" => t.pmf = true,
                "nmf" => t.nmf = true,
                other => return Err(Error::Config(format!("unknown loss `{other}`"))),
            }
        }
        if !(t.rgb || t.pmf || t.nmf) {
            return Err(Error::Config("no loss enabled".into()));
        }
        Ok(t)
    }

    pub fn names(&self) -> String {
        let mut v = Vec::new();
        if self.rgb {
            v.push("rgb");
        }
        if self.pmf {
            v.push("pmf");
        }
        if self.nmf {
            v.push("nmf");
        }
        v.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub toggles: LossToggles,
    pub lambda_pmf: f64,
    pub lambda_nmf: f64,
    /// Pseudo-mask binarisation threshold for the negative term.
    pub threshold: f64,
    pub render: RenderSettings,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            toggles: LossToggles::ALL,
            lambda_pmf: DEFAULT_LAMBDA_PMF,
            lambda_nmf: DEFAULT_LAMBDA_NMF,
            threshold: DEFAULT_THRESHOLD,
            render: RenderSettings::default(),
        }
    }
}

/// One supervised pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTarget {
    pub frame: usize,
    pub pixel: (f64, f64),
    pub color: [f64; 3],
    /// Pseudo-mask value `M(u, t)`; `None` when no mask is available.
    pub mask: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_pmf: f64,
    pub l_nmf: f64,
    pub l_total: f64,
    /// Euclidean gradient norm of `W_st`, `W_ss`, `W_dy`.
    pub grad_norms: [f64; 3],
    /// `|Ω|`
    pub pixels: usize,
    /// `|Ω̄|`
    pub dynamic_pixels: usize,
}

/// Per-pixel uncertainty-weighted term `‖Î − I‖² / (2B²) + log B²`.
pub fn rgb_term(pred: &[f64; 3], target: &[f64; 3], b: f64) -> f64 {
    let r2: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    r2 / (2.0 * b * b) + (b * b).ln()
}

pub fn rgb_loss(pred: &[[f64; 3]], target: &[[f64; 3]], b: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), &[target.len(), b.len()])?;
    if let Some(bad) = b.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("uncertainty must be positive, got {bad}")));
    }
    let sum: f64 = pred.iter().zip(target).zip(b).map(|((p, t), &b)| rgb_term(p, t, b)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn pmf_loss(pred_dy: &[f64], mask: &[f64], lambda: f64) -> Result<f64> {
    check_lengths(pred_dy.len(), &[mask.len()])?;
    let sum: f64 = pred_dy.iter().zip(mask).map(|(p, m)| (p - m) * (p - m)).sum();
    Ok(lambda * sum / pred_dy.len() as f64)
}

/// Mean of `M̂_ss²` over pixels whose binarised pseudo-mask is set; zero
/// when no pixel is set.
pub fn nmf_loss(pred_ss: &[f64], dynamic: &[bool], lambda: f64) -> Result<f64> {
    check_lengths(pred_ss.len(), &[dynamic.len()])?;
    let n = dynamic.iter().filter(|&&d| d).count();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred_ss.iter().zip(dynamic).filter(|(_, &d)| d).map(|(p, _)| p * p).sum();
    Ok(lambda * sum / n as f64)
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("empty pixel batch".into()));
    }
    if others.iter().any(|&m| m != n) {
        return Err(Error::Data("batch arrays differ in length".into()));
    }
    Ok(())
}

struct RayResult {
    terms: [f64; 3],
    small: SmallGrad,
    grids: Vec<GridGrad>,
}

fn ray_pass(
    view: &FieldView<'_>,
    cameras: &[CameraPose],
    target: &RayTarget,
    cfg: &LossConfig,
    norm: (f64, f64),
    trainable: Trainable,
) -> Result<RayResult> {
    let pose = &cameras[target.frame];
    let ray = clip_for_field(view.params(), &pose.ray_through_pixel(target.pixel)?);
    let mut tape = RayTape::default();
    let b: RenderBundle = trace(view, pose, &ray, target.frame, &cfg.render, Some(&mut tape))?;
    let (inv_n, inv_dyn) = norm;
    let mut terms = [0.0; 3];
    let mut g = BundleGrad::default();
    if cfg.toggles.rgb {
        let r2: f64 = b.color.iter().zip(&target.color).map(|(p, t)| (p - t) * (p - t)).sum();
        let b2 = b.uncertainty * b.uncertainty;
        terms[0] = r2 / (2.0 * b2) + b2.ln();
        for ch in 0..3 {
            g.color[ch] = (b.color[ch] - target.color[ch]) / b2 * inv_n;
        }
        g.uncertainty = (-r2 / (b2 * b.uncertainty) + 2.0 / b.uncertainty) * inv_n;
    }
    let mask = target.mask.unwrap_or(0.0);
    if cfg.toggles.pmf {
        let d = b.mask_dy - mask;
        terms[1] = cfg.lambda_pmf * d * d;
        g.mask_dy = 2.0 * cfg.lambda_pmf * d * inv_n;
    }
    if cfg.toggles.nmf && mask >= cfg.threshold {
        terms[2] = cfg.lambda_nmf * b.mask_ss * b.mask_ss;
        g.mask_ss = 2.0 * cfg.lambda_nmf * b.mask_ss * inv_dyn;
    }
    let mut small = SmallGrad::new(target.frame);
    let mut grids = Vec::with_capacity(cfg.render.samples);
    backward(view, &tape, target.frame, &g, trainable, &mut small, &mut grids);
    Ok(RayResult { terms, small, grids })
}


/// Losses over a ray batch and their gradient with respect to every
/// parameter. Partitions not in `trainable` get zero gradient.
///
/// The result is identical for any `workers` value: per-ray work runs in
/// parallel, but all reductions happen in batch order.
pub fn total_loss_and_gradients(
    params: &LayeredFieldParams,
    cameras: &[CameraPose],
    batch: &[RayTarget],
    cfg: &LossConfig,
    trainable: Trainable,
    workers: usize,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty ray batch".into()));
    }
    let frames = params.config().frames.min(cameras.len());
    if let Some(bad) = batch.iter().find(|r| r.frame >= frames) {
        return Err(Error::Domain(format!("ray frame {} outside [0, {frames})", bad.frame)));
    }
    if cfg.toggles.uses_masks() && batch.iter().any(|r| r.mask.is_none()) {
        return Err(Error::Config("motion fusion enabled but a ray has no pseudo-mask".into()));
    }
    let n = batch.len();
    let n_dyn = batch.iter().filter(|r| r.mask.unwrap_or(0.0) >= cfg.threshold).count();
    let norm = (1.0 / n as f64, if n_dyn > 0 { 1.0 / n_dyn as f64 } else { 0.0 });

    let view = FieldView::new(params);
    let mut acc = GradAccumulator::new(params, trainable);
    let mut sums = [0.0; 3];
    with_workers(workers, || -> Result<()> {
        for chunk in batch.chunks(CHUNK) {
            let results: Vec<RayResult> = chunk
                .par_iter()
                .map(|r| ray_pass(&view, cameras, r, cfg, norm, trainable))
                .collect::<Result<_>>()?;
            for r in &results {
                for (s, v) in sums.iter_mut().zip(&r.terms) {
                    *s += v;
                }
                acc.add_small(&view, &r.small);
                for g in &r.grids {
                    acc.add_grid(&view, g);
                }
            }
        }
        Ok(())
    })?;
    let grad = acc.finish(&view);

    for id in BlockId::ALL {
        if grad[params.layout().range(id)].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: id.name().to_string(),
            });
        }
    }
    let mut grad_norms = [0.0; 3];
    for id in BlockId::ALL {
        let s: f64 = grad[params.layout().range(id)].iter().map(|v| v * v).sum();
        grad_norms[id.layer() as usize] += s;
    }
    let l_rgb = sums[0] * norm.0;
    let l_pmf = sums[1] * norm.0;
    let l_nmf = sums[2] * norm.1;
    let report = LossReport {
        l_rgb,
        l_pmf,
        l_nmf,
        l_total: l_rgb + l_pmf + l_nmf,
        grad_norms: grad_norms.map(f64::sqrt),
        pixels: n,
        dynamic_pixels: n_dyn,
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite { block: "loss".into() });
    }
    Ok((report, grad))
}

/// Loss values only (no gradient bookkeeping beyond what the shared pass
/// needs).
pub fn total_loss(
    params: &LayeredFieldParams,
    cameras: &[CameraPose],
    batch: &[RayTarget],
    cfg: &LossConfig,
    workers: usize,
) -> Result<LossReport> {
    total_loss_and_gradients(params, cameras, batch, cfg, Trainable([false; 3]), workers).map(|(r, _)| r)
}

/// Partition whose gradient `g` belongs to, for reporting.
pub fn layer_of_index(params: &LayeredFieldParams, index: usize) -> Option<Layer> {
    BlockId::ALL
        .into_iter()
        .find(|&b| params.layout().range(b).contains(&index))
        .map(BlockId::layer)
}

#[cfg(test)]
mod tests;
