//! Segmentation scoring: per-frame average precision for the dynamic,
//! semi-static and union categories, and confusion curves for pseudo-masks.
//!
//! AP here is the mean of precision at the rank of each positive, with
//! pixels ranked by descending score and ties kept in pixel order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::LayeredFieldParams;
use crate::geometry::CameraPose;
use crate::renderer::{render_frame, RenderSettings};
use crate::image::{BinaryMask, GrayImage};
use crate::scenegen::{GroundTruth, MotionMask};

/// Returns `None` when `gt` has no positives.
pub fn average_precision(scores: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    if scores.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            gt.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {bad} is not a number")));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `sort_by` is stable, so equal scores keep their pixel order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gt[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            if hits == positives {
                break;
            }
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Dynamic,
    SemiStatic,
    Union,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Dynamic, Category::SemiStatic, Category::Union];

    pub fn name(self) -> &'static str {
        match self {
            Category::Dynamic => "dyn",
            Category::SemiStatic => "ss",
            Category::Union => "ss+dyn",
        }
    }
}

/// Soft mask predictions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub frame: usize,
    pub mask_ss: GrayImage,
    pub mask_dy: GrayImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryResult {
    pub category: Category,
    /// Mean AP over frames with at least one positive; `0` if there are none.
    pub map: f64,
    pub per_frame: Vec<(usize, Option<f64>)>,
    /// Frames skipped because the ground truth had no positives.
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub fnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub dynamic: CategoryResult,
    pub semi_static: CategoryResult,
    pub union: CategoryResult,
    /// Confusion statistics of the dynamic scores over a threshold sweep.
    pub curve: Vec<CurvePoint>,
    /// Mean semi-static score over ground-truth dynamic pixels; `None` if
    /// no evaluated frame has any.
    pub ss_on_dynamic: Option<f64>,
}

pub const CURVE_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl EvalReport {
    pub fn category(&self, c: Category) -> &CategoryResult {
        match c {
            Category::Dynamic => &self.dynamic,
            Category::SemiStatic => &self.semi_static,
            Category::Union => &self.union,
        }
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for c in Category::ALL {
            let r = self.category(c);
            for (frame, ap) in &r.per_frame {
                match ap {
                    Some(v) => writeln!(s, "{},{},{},{:.6}", self.label, c.name(), frame, v).unwrap(),
                    None => writeln!(s, "{},{},{},excluded", self.label, c.name(), frame).unwrap(),
                }
            }
            writeln!(s, "{},{},map,{:.6}", self.label, c.name(), r.map).unwrap();
        }
        s
    }
}

pub const REPORT_CSV_HEADER: &str = "label,category,frame,ap";

/// Fixed-width summary table, one row per report, values in percent.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>7}", "Method", "Dyn", "SS", "SS+Dyn").unwrap();
    for r in reports {
        writeln!(
            s,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}",
            r.label,
            100.0 * r.dynamic.map,
            100.0 * r.semi_static.map,
            100.0 * r.union.map
        )
        .unwrap();
    }
    s
}

fn category_result(category: Category, per_frame: Vec<(usize, Option<f64>)>) -> CategoryResult {
    let aps: Vec<f64> = per_frame.iter().filter_map(|(_, ap)| *ap).collect();
    CategoryResult {
        category,
        map: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
        excluded: per_frame.len() - aps.len(),
        per_frame,
    }
}

/// Scores predictions against ground truth. Dynamic uses `M̂_dy`,
/// semi-static `M̂_ss` and the union `min(M̂_ss + M̂_dy, 1)` against the OR
/// of both ground-truth masks.
pub fn evaluate(predictions: &[MaskPrediction], gt: &GroundTruth, label: &str) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    for p in predictions {
        let Some(g) = gt.mask_dyn.get(p.frame) else {
            return Err(Error::Data(format!("no ground truth for frame {}", p.frame)));
        };
        for m in [&p.mask_ss, &p.mask_dy] {
            if m.width != g.width || m.height != g.height {
                return Err(Error::Data(format!(
                    "frame {}: prediction {}x{} vs ground truth {}x{}",
                    p.frame, m.width, m.height, g.width, g.height
                )));
            }
        }
    }
    let per_frame: Vec<[Option<f64>; 3]> = predictions
        .par_iter()
        .map(|p| {
            let gd = &gt.mask_dyn[p.frame].data;
            let gs = &gt.mask_ss[p.frame].data;
            let union_gt: Vec<bool> = gd.iter().zip(gs).map(|(a, b)| *a || *b).collect();
            let union: Vec<f64> = p.mask_ss.data.iter().zip(&p.mask_dy.data).map(|(a, b)| (a + b).min(1.0)).collect();
            Ok([
                average_precision(&p.mask_dy.data, gd)?,
                average_precision(&p.mask_ss.data, gs)?,
                average_precision(&union, &union_gt)?,
            ])
        })
        .collect::<Result<_>>()?;
    let pick = |i: usize| predictions.iter().zip(&per_frame).map(|(p, a)| (p.frame, a[i])).collect();

    let dyn_masks: Vec<GrayImage> = predictions.iter().map(|p| p.mask_dy.clone()).collect();
    let dyn_gt: Vec<&BinaryMask> = predictions.iter().map(|p| &gt.mask_dyn[p.frame]).collect();
    let curve = confusion_curve(&dyn_masks, &dyn_gt, &CURVE_THRESHOLDS);
    let (mut leak, mut count) = (0.0, 0usize);
    for p in predictions {
        for (v, &g) in p.mask_ss.data.iter().zip(&gt.mask_dyn[p.frame].data) {
            if g {
                leak += v;
                count += 1;
            }
        }
    }
    Ok(EvalReport {
        label: label.to_string(),
        dynamic: category_result(Category::Dynamic, pick(0)),
        semi_static: category_result(Category::SemiStatic, pick(1)),
        union: category_result(Category::Union, pick(2)),
        curve,
        ss_on_dynamic: (count > 0).then(|| leak / count as f64),
    })
}

fn confusion_curve(scores: &[GrayImage], gt: &[&BinaryMask], thresholds: &[f64]) -> Vec<CurvePoint> {
    thresholds
        .iter()
        .map(|&th| {
            let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
            for (s, g) in scores.iter().zip(gt) {
                for (&v, &label) in s.data.iter().zip(&g.data) {
                    match (v >= th, label) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            let ratio = |a: usize, b: usize, empty: f64| if a + b == 0 { empty } else { a as f64 / (a + b) as f64 };
            CurvePoint {
                threshold: th,
                precision: ratio(tp, fp, 1.0),
                recall: ratio(tp, fneg, 1.0),
                fpr: ratio(fp, tn, 0.0),
                fnr: ratio(fneg, tp, 0.0),
            }
        })
        .collect()
}

/// Precision, recall, FPR and FNR of pseudo-masks against the dynamic
/// ground truth, pooled over all frames, for each threshold.
pub fn analyze_pseudo_masks(pseudo: &[MotionMask], gt: &GroundTruth, thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    let mut gts = Vec::with_capacity(pseudo.len());
    for m in pseudo {
        let g = gt
            .mask_dyn
            .get(m.frame)
            .ok_or_else(|| Error::Data(format!("no ground truth for frame {}", m.frame)))?;
        if g.width != m.values.width || g.height != m.values.height {
            return Err(Error::Data(format!("frame {}: mask size mismatch", m.frame)));
        }
        gts.push(g);
    }
    let scores: Vec<GrayImage> = pseudo.iter().map(|m| m.values.clone()).collect();
    Ok(confusion_curve(&scores, &gts, thresholds))
}

/// Treats pseudo-masks as dynamic predictions with an empty semi-static
/// channel, so they can be scored like any method.
pub fn pseudo_mask_predictions(pseudo: &[MotionMask], frames: &[usize]) -> Vec<MaskPrediction> {
    frames
        .iter()
        .filter_map(|&t| pseudo.iter().find(|m| m.frame == t))
        .map(|m| MaskPrediction {
            frame: m.frame,
            mask_ss: GrayImage::filled(m.values.width, m.values.height, 0.0),
            mask_dy: m.values.clone(),
        })
        .collect()
}

/// Renders the mask channels of a field at the given frames.
pub fn render_predictions(
    params: &LayeredFieldParams,
    cameras: &[CameraPose],
    frames: &[usize],
    settings: &RenderSettings,
    workers: usize,
) -> Result<Vec<MaskPrediction>> {
    frames
        .iter()
        .map(|&t| {
            let pose = cameras
                .get(t)
                .ok_or_else(|| Error::Data(format!("no camera for frame {t}")))?;
            let r = render_frame(params, pose, t, settings, workers)?;
            Ok(MaskPrediction {
                frame: t,
                mask_ss: r.mask_ss,
                mask_dy: r.mask_dy,
            })
        })
        .collect()
}
