//! Pseudo-label generator standing in for a 2D motion segmentation model.
//!
//! Real motion segmenters produce incomplete but precise masks: they miss
//! parts of moving objects (low recall) and rarely fire on static content
//! (low false-positive rate). Recall is reduced here by eroding the dynamic
//! ground truth and randomly dropping pixels; false positives are injected
//! as small square blobs on negative pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage};

/// Soft per-frame motion mask `M(u, t)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    pub values: GrayImage,
    pub frame: usize,
    pub threshold: f64,
}

impl MotionMask {
    pub fn new(values: GrayImage, frame: usize, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Domain(format!("binarization threshold {threshold} not in (0, 1)")));
        }
        if values.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("mask for frame {frame} has values outside [0, 1]")));
        }
        Ok(MotionMask {
            values,
            frame,
            threshold,
        })
    }

    /// `M̄(u) = 1` iff `M(u) >= threshold`.
    pub fn binarized(&self) -> BinaryMask {
        BinaryMask {
            width: self.values.width,
            height: self.values.height,
            data: self.values.data.iter().map(|&v| v >= self.threshold).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    /// Target fraction of dynamic pixels kept, in (0, 1].
    pub recall: f64,
    /// Target fraction of negative pixels labelled positive, in [0, 1).
    pub fpr: f64,
    /// Side length of injected false-positive squares.
    pub blob_size: usize,
    /// Labelled pixels get a value drawn uniformly from `[floor, 1]`.
    /// `1.0` yields binary masks.
    pub confidence_floor: f64,
    pub threshold: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            recall: 0.6,
            fpr: 0.002,
            blob_size: 2,
            confidence_floor: 1.0,
            threshold: 0.5,
        }
    }
}

fn erode(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = BinaryMask::empty(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            let keep = (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && nx < w && ny < h && mask.data[(ny * w + nx) as usize]
                })
            });
            out.data[(y * w + x) as usize] = keep;
        }
    }
    out
}

/// Splits `total` integer units across frames proportionally to `weights`
/// using the largest-remainder rule.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        if out[i] < weights[i] {
            out[i] += 1;
            rest -= 1;
        }
    }
    out
}

pub fn degrade_to_pseudo_masks(gt: &GroundTruth, config: &DegradeConfig, seed: u64) -> Result<Vec<MotionMask>> {
    if !(config.recall > 0.0 && config.recall <= 1.0) {
        return Err(Error::Domain(format!("recall {} not in (0, 1]", config.recall)));
    }
    if !(config.fpr >= 0.0 && config.fpr < 1.0) {
        return Err(Error::Domain(format!("fpr {} not in [0, 1)", config.fpr)));
    }
    if !(0.0..=1.0).contains(&config.confidence_floor) || config.blob_size == 0 {
        return Err(Error::Domain("invalid confidence floor or blob size".into()));
    }

    let positives: usize = gt.mask_dyn.iter().map(BinaryMask::count).sum();
    let mut sources: Vec<BinaryMask> = gt.mask_dyn.clone();
    let mut keep_prob = 1.0;
    if config.recall < 1.0 && positives > 0 {
        let eroded: Vec<BinaryMask> = gt.mask_dyn.iter().map(erode).collect();
        let retained = eroded.iter().map(BinaryMask::count).sum::<usize>() as f64 / positives as f64;
        if retained >= config.recall {
            sources = eroded;
            keep_prob = config.recall / retained;
        } else {
            keep_prob = config.recall;
        }
    }

    let negatives: Vec<usize> = gt.mask_dyn.iter().map(|m| m.data.len() - m.count()).collect();
    let total_fp = (config.fpr * negatives.iter().sum::<usize>() as f64).round() as usize;
    let fp_targets = apportion(total_fp, &negatives);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let confidence = |rng: &mut ChaCha8Rng| {
        if config.confidence_floor >= 1.0 {
            1.0
        } else {
            rng.gen_range(config.confidence_floor..=1.0)
        }
    };

    let mut out = Vec::with_capacity(gt.frames());
    for (t, (source, dyn_gt)) in sources.iter().zip(&gt.mask_dyn).enumerate() {
        let (w, h) = (source.width, source.height);
        let mut values = GrayImage::filled(w, h, 0.0);
        for (i, &on) in source.data.iter().enumerate() {
            if on && (keep_prob >= 1.0 || rng.gen::<f64>() < keep_prob) {
                values.data[i] = confidence(&mut rng);
            }
        }

        let mut remaining = fp_targets[t];
        let mut attempts = 0;
        let blob = config.blob_size.min(w).min(h);
        while remaining > 0 && attempts < 100_000 {
            attempts += 1;
            let x0 = rng.gen_range(0..=w - blob);
            let y0 = rng.gen_range(0..=h - blob);
            'blob: for y in y0..y0 + blob {
                for x in x0..x0 + blob {
                    let i = y * w + x;
                    if !dyn_gt.data[i] && values.data[i] == 0.0 {
                        values.data[i] = confidence(&mut rng);
                        remaining -= 1;
                        if remaining == 0 {
                            break 'blob;
                        }
                    }
                }
            }
        }
        out.push(MotionMask::new(values, t, config.threshold)?);
    }
    Ok(out)
}
