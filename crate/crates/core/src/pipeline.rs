//! Glue shared by the command-line tool and end-to-end tests: building the
//! benchmark, initial parameters and evaluation of a trained field.

use crate::config::RunConfig;
use crate::error::Result;
use crate::evalkit::{evaluate, render_predictions, EvalReport};
use crate::fields::{FieldConfig, LayeredFieldParams};
use crate::losses::LossToggles;
use crate::scenegen::{degrade_to_pseudo_masks, generate_scene, render_ground_truth, GroundTruth, MotionMask, SceneSpec};
use crate::trainer::Dataset;

/// A generated scene with its ground truth and pseudo-masks.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub scene: SceneSpec,
    pub gt: GroundTruth,
    pub pseudo: Vec<MotionMask>,
}

impl Benchmark {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let scene = generate_scene(&cfg.scene_config()?)?;
        let gt = render_ground_truth(&scene)?;
        let pseudo = degrade_to_pseudo_masks(&gt, &cfg.degrade, cfg.pseudo_seed())?;
        Ok(Benchmark { scene, gt, pseudo })
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            cameras: self.scene.cameras.clone(),
            frames: self.gt.rgb.clone(),
            pseudo_masks: Some(self.pseudo.clone()),
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig::for_scene(
            self.scene.world_bounds,
            self.scene.cameras[0].intrinsics(),
            self.scene.frames(),
            self.scene.near,
        )
    }
}

/// Row label for an ablation: `ND` is the photometric baseline, followed
/// by `TR` for refinement and the enabled fusion terms.
pub fn method_label(toggles: LossToggles, refined: bool) -> String {
    let mut parts = vec!["ND"];
    if refined {
        parts.push("TR");
    }
    if toggles.pmf {
        parts.push("PMF");
    }
    if toggles.nmf {
        parts.push("NMF");
    }
    parts.join("+")
}

/// Renders masks at the configured evaluation frames and scores them.
pub fn evaluate_field(
    params: &LayeredFieldParams,
    bench: &Benchmark,
    cfg: &RunConfig,
    label: &str,
) -> Result<EvalReport> {
    let preds = render_predictions(params, &bench.scene.cameras, cfg.eval_frames(), &cfg.eval_render(), cfg.workers)?;
    evaluate(&preds, &bench.gt, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(method_label(LossToggles::RGB, false), "ND");
        assert_eq!(method_label(LossToggles::parse("rgb,nmf").unwrap(), false), "ND+NMF");
        assert_eq!(method_label(LossToggles::ALL, false), "ND+PMF+NMF");
        assert_eq!(method_label(LossToggles::ALL, true), "ND+TR+PMF+NMF");
        assert_eq!(method_label(LossToggles::RGB, true), "ND+TR");
    }
}
