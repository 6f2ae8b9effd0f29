//! Base optimisation and test-time refinement.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{Layer, LayeredFieldParams, Trainable};
use crate::geometry::CameraPose;
use crate::image::RgbImage;
use crate::losses::{total_loss_and_gradients, LossConfig, LossReport, LossToggles, RayTarget};
use crate::renderer::RenderSettings;
use crate::scenegen::MotionMask;

/// Frames, cameras and (optionally) pseudo-masks of one video.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<CameraPose>,
    pub frames: Vec<RgbImage>,
    pub pseudo_masks: Option<Vec<MotionMask>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.cameras.len() != self.frames.len() {
            return Err(Error::Data(format!(
                "{} frames but {} cameras",
                self.frames.len(),
                self.cameras.len()
            )));
        }
        let (w, h) = (self.frames[0].width, self.frames[0].height);
        for (t, (f, c)) in self.frames.iter().zip(&self.cameras).enumerate() {
            if f.width != w || f.height != h || c.intrinsics().width != w || c.intrinsics().height != h {
                return Err(Error::Data(format!("frame {t} size does not match")));
            }
        }
        if let Some(masks) = &self.pseudo_masks {
            if masks.len() != self.frames.len() {
                return Err(Error::Data(format!(
                    "{} pseudo-masks for {} frames",
                    masks.len(),
                    self.frames.len()
                )));
            }
            if masks.iter().any(|m| m.values.width != w || m.values.height != h) {
                return Err(Error::Data("pseudo-mask size does not match frames".into()));
            }
        }
        Ok(())
    }

    fn size(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }

    fn target(&self, frame: usize, x: usize, y: usize) -> RayTarget {
        let w = self.frames[frame].width;
        RayTarget {
            frame,
            pixel: (x as f64, y as f64),
            color: self.frames[frame].data[y * w + x],
            mask: self.pseudo_masks.as_ref().map(|m| m[frame].values.data[y * w + x]),
        }
    }

    fn require_masks(&self, frames: &[usize]) -> Result<()> {
        match &self.pseudo_masks {
            None => Err(Error::Config("motion fusion enabled but the dataset has no pseudo-masks".into())),
            Some(m) => match frames.iter().find(|&&t| t >= m.len()) {
                Some(t) => Err(Error::Config(format!("no pseudo-mask for frame {t}"))),
                None => Ok(()),
            },
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Applies one update to the coordinates in `ranges`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ranges: &[std::ops::Range<usize>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for r in ranges {
            for i in r.clone() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `lr` at step 0 to `lr * floor` at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = step as f64 / (total - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub steps_per_epoch: usize,
    pub rays_per_step: usize,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    /// Fraction of steps at the start during which only the static
    /// partition is optimised.
    pub static_warmup: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 5e-4,
            steps_per_epoch: 10,
            rays_per_step: 2048,
            lr_floor: 0.05,
            static_warmup: 0.0,
            loss: LossConfig {
                render: RenderSettings {
                    samples: 48,
                    stratified: true,
                    seed: 0,
                },
                ..LossConfig::default()
            },
            seed: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps_per_epoch == 0 || self.rays_per_step == 0 || self.loss.render.samples < 2 {
            return Err(Error::Config("steps, rays and samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr floor must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.static_warmup) {
            return Err(Error::Config("static warm-up must lie in [0, 1)".into()));
        }
        if !(self.loss.threshold > 0.0 && self.loss.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.loss.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

fn step_seed(seed: u64, step: usize, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17));
    rng.set_stream(step as u64);
    rng.gen()
}

fn layer_ranges(params: &LayeredFieldParams, trainable: Trainable) -> Vec<std::ops::Range<usize>> {
    crate::fields::BlockId::ALL
        .into_iter()
        .filter(|b| trainable.contains(b.layer()))
        .map(|b| params.layout().range(b))
        .collect()
}

/// Names the first parameter block holding a NaN or infinity.
fn check_finite(p: &LayeredFieldParams) -> Result<()> {
    match crate::fields::BlockId::ALL.into_iter().find(|&b| p.block(b).iter().any(|v| !v.is_finite())) {
        Some(b) => Err(Error::NonFinite { block: b.name().into() }),
        None => Ok(()),
    }
}

/// Optimises all partitions on uniformly sampled rays from every frame.
/// With `epochs == 0` the parameters are returned unchanged.
pub fn train(
    params: &LayeredFieldParams,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<(LayeredFieldParams, Vec<LogRow>)> {
    cfg.validate()?;
    data.validate()?;
    if data.len() > params.config().frames {
        return Err(Error::Data(format!(
            "dataset has {} frames but the field was built for {}",
            data.len(),
            params.config().frames
        )));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    if cfg.loss.toggles.uses_masks() {
        data.require_masks(&all)?;
    }
    let mut p = params.clone();
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok((p, log));
    }
    let ranges = layer_ranges(&p, Trainable::ALL);
    let static_ranges = layer_ranges(&p, Trainable::STATIC);
    let mut adam = Adam::new(p.len());
    let total = cfg.epochs * cfg.steps_per_epoch;
    let warmup = (cfg.static_warmup * total as f64).round() as usize;
    let (w, h) = data.size();
    for step in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step, 1));
        let batch: Vec<RayTarget> = (0..cfg.rays_per_step)
            .map(|_| data.target(rng.gen_range(0..data.len()), rng.gen_range(0..w), rng.gen_range(0..h)))
            .collect();
        let mut loss = cfg.loss;
        loss.render.seed = rng.gen();
        let (trainable, active) = if step < warmup {
            (Trainable::STATIC, &static_ranges)
        } else {
            (Trainable::ALL, &ranges)
        };
        let (report, grad) = total_loss_and_gradients(&p, &data.cameras, &batch, &loss, trainable, cfg.workers)?;
        let lr = cosine_lr(cfg.learning_rate, step, total, cfg.lr_floor);
        adam.update(p.values_mut(), &grad, lr, active);
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite { block: "loss".into() });
        }
        check_finite(&p)?;
        let row = LogRow {
            epoch: step / cfg.steps_per_epoch,
            step,
            lr,
            report,
        };
        on_step(&row);
        log.push(row);
    }
    Ok((p, log))
}

/// `{t − N, …, t + N} ∩ [0, T)` in ascending order.
pub fn neighbor_frames(t: usize, n: usize, frames: usize) -> Vec<usize> {
    if t >= frames {
        return Vec::new();
    }
    (t.saturating_sub(n)..=(t + n).min(frames - 1)).collect()
}

/// Union of the neighbour windows of every frame in `set`, ascending.
pub fn refinement_set(set: &[usize], n: usize, frames: usize) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::Config("refinement frame set is empty".into()));
    }
    if let Some(&bad) = set.iter().find(|&&t| t >= frames) {
        return Err(Error::Config(format!("refinement frame {bad} outside [0, {frames})")));
    }
    let all: BTreeSet<usize> = set.iter().flat_map(|&t| neighbor_frames(t, n, frames)).collect();
    Ok(all.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub frames: Vec<usize>,
    pub neighbors: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Rays drawn once from the refinement frames and reused every step.
    pub rays: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            frames: vec![0],
            neighbors: 0,
            steps: 30,
            learning_rate: 5e-3,
            rays: 4096,
            loss: LossConfig {
                toggles: LossToggles::ALL,
                render: RenderSettings {
                    samples: 48,
                    stratified: false,
                    seed: 0,
                },
                ..LossConfig::default()
            },
            seed: 0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub params: LayeredFieldParams,
    /// Accepted objective values, starting with the initial one.
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
    pub frames: Vec<usize>,
}

/// Test-time refinement of the semi-static and dynamic partitions on the
/// neighbour-expanded frame set. The static partition is never written.
///
/// A fixed ray set with deterministic sampling makes the objective a plain
/// function of the parameters; a step that would increase it is undone and
/// the learning rate halved, so accepted losses never increase.
pub fn refine(params: &LayeredFieldParams, data: &Dataset, cfg: &RefineConfig) -> Result<RefineOutcome> {
    data.validate()?;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("refinement learning rate must be positive".into()));
    }
    let frames = refinement_set(&cfg.frames, cfg.neighbors, data.len())?;
    if cfg.loss.toggles.uses_masks() {
        data.require_masks(&frames)?;
    }
    let static_before = params.partition_checksum(Layer::Static);
    let mut p = params.clone();
    if cfg.steps == 0 {
        return Ok(RefineOutcome {
            params: p,
            losses: Vec::new(),
            rejected_steps: 0,
            frames,
        });
    }
    let (w, h) = data.size();
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 0, 2));
    let batch: Vec<RayTarget> = (0..cfg.rays.max(1))
        .map(|_| data.target(frames[rng.gen_range(0..frames.len())], rng.gen_range(0..w), rng.gen_range(0..h)))
        .collect();
    let mut loss = cfg.loss;
    loss.render.stratified = false;

    let trainable = Trainable::TIME_DEPENDENT;
    let ranges = layer_ranges(&p, trainable);
    let mut adam = Adam::new(p.len());
    let (mut report, mut grad) = total_loss_and_gradients(&p, &data.cameras, &batch, &loss, trainable, cfg.workers)?;
    let mut losses = vec![report.l_total];
    let mut lr = cfg.learning_rate;
    let mut rejected = 0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < cfg.steps && attempts < 4 * cfg.steps {
        attempts += 1;
        let mut candidate = p.clone();
        let mut trial_adam = adam.clone();
        trial_adam.update(candidate.values_mut(), &grad, lr, &ranges);
        let (r, g) = total_loss_and_gradients(&candidate, &data.cameras, &batch, &loss, trainable, cfg.workers)?;
        if r.l_total <= report.l_total {
            p = candidate;
            adam = trial_adam;
            report = r;
            grad = g;
            losses.push(r.l_total);
            accepted += 1;
        } else {
            rejected += 1;
            lr *= 0.5;
        }
    }
    debug_assert_eq!(p.partition_checksum(Layer::Static), static_before);
    if p.partition_checksum(Layer::Static) != static_before {
        return Err(Error::Evaluation("static partition changed during refinement".into()));
    }
    Ok(RefineOutcome {
        params: p,
        losses,
        rejected_steps: rejected,
        frames,
    })
}

#[cfg(test)]
mod tests;
