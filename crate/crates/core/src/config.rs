//! Flat `key = value` run configuration covering scene generation,
//! training, refinement and evaluation.
//!
//! Unset keys keep the benchmark defaults from [`RunConfig::bench`].
//! `#` starts a comment. Unknown keys are rejected so typos surface early.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossToggles};
use crate::renderer::RenderSettings;
use crate::scenegen::{DegradeConfig, SceneConfig, BENCH_PRESET};
use crate::trainer::{RefineConfig, TrainConfig};

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 23] = [
    "scene",
    "seed",
    "workers",
    "losses",
    "epochs",
    "steps_per_epoch",
    "lr",
    "lr_floor",
    "static_warmup",
    "rays_per_step",
    "samples",
    "lambda_pmf",
    "lambda_nmf",
    "threshold",
    "frames",
    "neighbors",
    "refine_steps",
    "refine_lr",
    "refine_rays",
    "refine_samples",
    "eval_samples",
    "pseudo_recall",
    "pseudo_fpr",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: String,
    /// Drives the scene, pseudo-masks, initialization, training and refinement.
    pub seed: u64,
    /// Worker threads; `0` uses every core.
    pub workers: usize,
    pub train: TrainConfig,
    /// `frames` doubles as the evaluation frame set.
    pub refine: RefineConfig,
    pub eval_samples: usize,
    pub degrade: DegradeConfig,
}

/// Frames 3, 9, ..., 57: every sixth frame, avoiding both sequence ends.
pub fn bench_eval_frames() -> Vec<usize> {
    (0..10).map(|i| 3 + 6 * i).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::bench()
    }
}

impl RunConfig {
    /// Desk-scale protocol for the benchmark scene. Training is far shorter
    /// than the 20 long epochs of a GPU run, so the step size is much larger
    /// than [`TrainConfig::default`]. The first 15% of steps fit the static
    /// layer alone; without that the static/semi-static split of the
    /// background is left to chance.
    pub fn bench() -> Self {
        let loss = LossConfig {
            toggles: LossToggles::ALL,
            render: RenderSettings {
                samples: 32,
                stratified: true,
                seed: 0,
            },
            ..LossConfig::default()
        };
        RunConfig {
            scene: BENCH_PRESET.to_string(),
            seed: 0,
            workers: 0,
            train: TrainConfig {
                epochs: 20,
                steps_per_epoch: 15,
                learning_rate: 0.1,
                rays_per_step: 2048,
                lr_floor: 0.05,
                static_warmup: 0.15,
                loss,
                seed: 0,
                workers: 0,
            },
            refine: RefineConfig {
                frames: bench_eval_frames(),
                neighbors: 0,
                steps: 40,
                learning_rate: 0.01,
                rays: 4096,
                loss: LossConfig {
                    render: RenderSettings {
                        stratified: false,
                        ..loss.render
                    },
                    ..loss
                },
                seed: 0,
                workers: 0,
            },
            eval_samples: 64,
            degrade: DegradeConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::bench();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let mut s = SceneConfig::preset(&self.scene)?;
        s.seed = self.seed;
        Ok(s)
    }

    /// Seed for pseudo-mask degradation, distinct from the scene seed.
    pub fn pseudo_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn eval_frames(&self) -> &[usize] {
        &self.refine.frames
    }

    pub fn eval_render(&self) -> RenderSettings {
        RenderSettings {
            samples: self.eval_samples,
            stratified: false,
            seed: 0,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|e| bad(&e))?
            };
        }
        match key {
            "scene" => {
                SceneConfig::preset(value)?;
                self.scene = value.to_string();
            }
            "seed" => {
                self.seed = num!();
                self.train.seed = self.seed;
                self.refine.seed = self.seed;
            }
            "workers" => {
                self.workers = num!();
                self.train.workers = self.workers;
                self.refine.workers = self.workers;
            }
            "losses" => {
                let t = LossToggles::parse(value).map_err(|e| bad(&e))?;
                self.train.loss.toggles = t;
                self.refine.loss.toggles = t;
            }
            "epochs" => self.train.epochs = num!(),
            "steps_per_epoch" => self.train.steps_per_epoch = num!(),
            "lr" => self.train.learning_rate = num!(),
            "lr_floor" => self.train.lr_floor = num!(),
            "static_warmup" => self.train.static_warmup = num!(),
            "rays_per_step" => self.train.rays_per_step = num!(),
            "samples" => self.train.loss.render.samples = num!(),
            "lambda_pmf" => {
                self.train.loss.lambda_pmf = num!();
                self.refine.loss.lambda_pmf = self.train.loss.lambda_pmf;
            }
            "lambda_nmf" => {
                self.train.loss.lambda_nmf = num!();
                self.refine.loss.lambda_nmf = self.train.loss.lambda_nmf;
            }
            "threshold" => {
                let th: f64 = num!();
                self.train.loss.threshold = th;
                self.refine.loss.threshold = th;
                self.degrade.threshold = th;
            }
            "frames" => self.refine.frames = parse_frames(value).map_err(|e| bad(&e))?,
            "neighbors" => self.refine.neighbors = num!(),
            "refine_steps" => self.refine.steps = num!(),
            "refine_lr" => self.refine.learning_rate = num!(),
            "refine_rays" => self.refine.rays = num!(),
            "refine_samples" => self.refine.loss.render.samples = num!(),
            "eval_samples" => self.eval_samples = num!(),
            "pseudo_recall" => self.degrade.recall = num!(),
            "pseudo_fpr" => self.degrade.fpr = num!(),
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Checks cross-field constraints. Training with zero epochs is allowed
    /// by the trainer but rejected here, since a run must train.
    pub fn validate(&self) -> Result<()> {
        let scene = self.scene_config()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("key `epochs`: must be at least 1".into()));
        }
        self.train.validate()?;
        if !(self.refine.learning_rate > 0.0 && self.refine.learning_rate.is_finite()) {
            return Err(Error::Config("key `refine_lr`: must be positive".into()));
        }
        if self.refine.rays == 0 || self.refine.loss.render.samples < 2 || self.eval_samples < 2 {
            return Err(Error::Config("ray and sample counts must be positive".into()));
        }
        if self.refine.frames.is_empty() {
            return Err(Error::Config("key `frames`: empty frame set".into()));
        }
        if let Some(&t) = self.refine.frames.iter().find(|&&t| t >= scene.frames) {
            return Err(Error::Config(format!("key `frames`: frame {t} out of range 0..{}", scene.frames)));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let frames: Vec<String> = self.refine.frames.iter().map(usize::to_string).collect();
        let values: [String; 23] = [
            self.scene.clone(),
            self.seed.to_string(),
            self.workers.to_string(),
            self.train.loss.toggles.names(),
            self.train.epochs.to_string(),
            self.train.steps_per_epoch.to_string(),
            self.train.learning_rate.to_string(),
            self.train.lr_floor.to_string(),
            self.train.static_warmup.to_string(),
            self.train.rays_per_step.to_string(),
            self.train.loss.render.samples.to_string(),
            self.train.loss.lambda_pmf.to_string(),
            self.train.loss.lambda_nmf.to_string(),
            self.train.loss.threshold.to_string(),
            frames.join(","),
            self.refine.neighbors.to_string(),
            self.refine.steps.to_string(),
            self.refine.learning_rate.to_string(),
            self.refine.rays.to_string(),
            self.refine.loss.render.samples.to_string(),
            self.eval_samples.to_string(),
            self.degrade.recall.to_string(),
            self.degrade.fpr.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

/// Parses `"a,b,c"` into an ascending, deduplicated frame list.
pub fn parse_frames(s: &str) -> Result<Vec<usize>> {
    let mut frames = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        frames.push(
            part.parse::<usize>()
                .map_err(|e| Error::Config(format!("frame `{part}`: {e}")))?,
        );
    }
    frames.sort_unstable();
    frames.dedup();
    if frames.is_empty() {
        return Err(Error::Config("empty frame list".into()));
    }
    Ok(frames)
}
