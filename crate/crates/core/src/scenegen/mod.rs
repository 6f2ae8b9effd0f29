//! Procedural dynamic scenes with exact ground truth.
//!
//! A scene has three kinds of content, mirroring the three field layers:
//! static primitives in world space, semi-static primitives that jump from
//! one pose to another at a single frame, and dynamic primitives rigidly
//! attached to the camera.

mod degrade;
mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use degrade::{degrade_to_pseudo_masks, DegradeConfig, MotionMask};
pub use shapes::{Hit, Primitive, Shape, Texture};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraPose, Intrinsics, Vec3};
use crate::image::{BinaryMask, RgbImage};

/// Name of the default benchmark scene.
pub const BENCH_PRESET: &str = "lmf-bench-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub seed: u64,
    /// Room, table and shelf.
    pub static_objects: bool,
    pub semi_static_objects: usize,
    pub dynamic_objects: usize,
    /// Frame at which semi-static objects relocate; `None` means `frames / 2`.
    pub relocation_frame: Option<usize>,
}

impl SceneConfig {
    /// The desk-scale benchmark: 60 frames at 64x64, one relocating cube and
    /// one camera-attached sphere.
    pub fn bench() -> Self {
        SceneConfig {
            frames: 60,
            width: 64,
            height: 64,
            hfov_deg: 60.0,
            seed: 0,
            static_objects: true,
            semi_static_objects: 1,
            dynamic_objects: 1,
            relocation_frame: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            BENCH_PRESET => Ok(Self::bench()),
            other => Err(Error::Config(format!("unknown scene preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiStaticObject {
    /// Primitive in object-local coordinates.
    pub primitive: Primitive,
    pub pose_a: Vec3,
    pub pose_b: Vec3,
    /// First frame at which `pose_b` applies.
    pub relocation_frame: usize,
}

impl SemiStaticObject {
    pub fn offset_at(&self, frame: usize) -> Vec3 {
        if frame < self.relocation_frame {
            self.pose_a
        } else {
            self.pose_b
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub static_objects: Vec<Primitive>,
    pub semi_static_objects: Vec<SemiStaticObject>,
    /// Primitives expressed in camera coordinates.
    pub dynamic_objects: Vec<Primitive>,
    pub cameras: Vec<CameraPose>,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [f64; 3],
    /// Region the learned world-space layers cover.
    pub world_bounds: Aabb,
    /// Closest sampling distance along camera rays.
    pub near: f64,
}

impl SceneSpec {
    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        for (i, obj) in self.semi_static_objects.iter().enumerate() {
            if obj.relocation_frame == 0 || obj.relocation_frame >= t {
                return Err(Error::Config(format!(
                    "semi-static object {i}: relocation frame {} not in (0, {t})",
                    obj.relocation_frame
                )));
            }
        }
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.gen_range(-amount..=amount)
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [f64; 3]) -> [f64; 3] {
    c.map(|v| (v + jitter(rng, 0.04)).clamp(0.02, 0.98))
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneSpec> {
    if config.frames < 2 {
        return Err(Error::Config(format!("frames must be >= 2, got {}", config.frames)));
    }
    if config.width < 8 || config.height < 8 {
        return Err(Error::Config(format!(
            "image must be at least 8x8, got {}x{}",
            config.width, config.height
        )));
    }
    if !config.static_objects && config.semi_static_objects == 0 && config.dynamic_objects == 0 {
        return Err(Error::Config("scene has no objects".into()));
    }
    if config.semi_static_objects > 2 || config.dynamic_objects > 2 {
        return Err(Error::Config("at most two semi-static and two dynamic objects".into()));
    }
    let relocation_frame = config.relocation_frame.unwrap_or(config.frames / 2);
    if config.semi_static_objects > 0 && (relocation_frame == 0 || relocation_frame >= config.frames) {
        return Err(Error::Config(format!(
            "relocation frame {relocation_frame} not in (0, {})",
            config.frames
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let room = Aabb::new(Vec3::new(-2.0, -1.0, -2.0), Vec3::new(2.0, 1.5, 2.0));

    let mut static_objects = Vec::new();
    if config.static_objects {
        static_objects.push(Primitive {
            shape: Shape::Enclosure(room),
            texture: Texture {
                color_a: jitter_color(&mut rng, [0.78, 0.74, 0.62]),
                color_b: jitter_color(&mut rng, [0.40, 0.47, 0.58]),
                period: 0.5,
            },
        });
        static_objects.push(Primitive {
            shape: Shape::Box(Aabb::new(Vec3::new(-0.9, -1.0, -1.7), Vec3::new(0.9, -0.35, -0.85))),
            texture: Texture {
                color_a: jitter_color(&mut rng, [0.55, 0.36, 0.20]),
                color_b: jitter_color(&mut rng, [0.42, 0.27, 0.15]),
                period: 0.3,
            },
        });
        static_objects.push(Primitive {
            shape: Shape::Box(Aabb::new(Vec3::new(1.35, -1.0, -0.6), Vec3::new(2.0, 0.3, 0.5))),
            texture: Texture {
                color_a: jitter_color(&mut rng, [0.25, 0.55, 0.35]),
                color_b: jitter_color(&mut rng, [0.70, 0.80, 0.70]),
                period: 0.35,
            },
        });
    }

    let cube_half = 0.18;
    let semi_static_palette = [[0.90, 0.22, 0.15], [0.20, 0.35, 0.90]];
    let semi_static_poses = [
        (Vec3::new(-0.45, -0.35 + cube_half, -1.3), Vec3::new(0.40, -0.35 + cube_half, -1.15)),
        (Vec3::new(0.30, -0.35 + cube_half, -1.45), Vec3::new(-0.20, -0.35 + cube_half, -1.05)),
    ];
    let semi_static_objects = (0..config.semi_static_objects)
        .map(|i| {
            let (a, b) = semi_static_poses[i];
            let j = Vec3::new(jitter(&mut rng, 0.05), 0.0, jitter(&mut rng, 0.05));
            SemiStaticObject {
                primitive: Primitive {
                    shape: Shape::Box(Aabb::new(Vec3::repeat(-cube_half), Vec3::repeat(cube_half))),
                    texture: Texture {
                        color_a: jitter_color(&mut rng, semi_static_palette[i]),
                        color_b: jitter_color(&mut rng, [0.95, 0.85, 0.30]),
                        period: 0.12,
                    },
                },
                pose_a: a + j,
                pose_b: b + j,
                relocation_frame,
            }
        })
        .collect();

    let dynamic_anchors = [Vec3::new(0.13, -0.12, -0.45), Vec3::new(-0.16, -0.14, -0.50)];
    let dynamic_objects = (0..config.dynamic_objects)
        .map(|i| Primitive {
            shape: Shape::Sphere {
                center: dynamic_anchors[i] + Vec3::new(jitter(&mut rng, 0.01), jitter(&mut rng, 0.01), 0.0),
                radius: 0.085,
            },
            texture: Texture {
                color_a: jitter_color(&mut rng, [0.92, 0.72, 0.58]),
                color_b: jitter_color(&mut rng, [0.70, 0.45, 0.38]),
                period: 0.05,
            },
        })
        .collect();

    // Egocentric-like sweep: the camera walks along the table while glancing
    // across it.
    let intrinsics = Intrinsics::from_fov(config.width, config.height, config.hfov_deg);
    let start_jitter = Vec3::new(jitter(&mut rng, 0.05), jitter(&mut rng, 0.03), jitter(&mut rng, 0.05));
    let mut cameras = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let s = t as f64 / (config.frames - 1) as f64;
        let eye = Vec3::new(
            -0.7 + 1.4 * s,
            0.35 + 0.05 * (std::f64::consts::TAU * s).sin(),
            0.5 - 0.2 * s,
        ) + start_jitter;
        let target = Vec3::new(-0.5 + 1.0 * s, -0.45, -1.25);
        cameras.push(CameraPose::look_at(eye, target, Vec3::y(), intrinsics, t)?);
    }

    let spec = SceneSpec {
        static_objects,
        semi_static_objects,
        dynamic_objects,
        cameras,
        width: config.width,
        height: config.height,
        seed: config.seed,
        background: [0.0, 0.0, 0.0],
        world_bounds: room.expanded(0.15),
        near: 0.2,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Background,
    Static,
    SemiStatic,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rgb: Vec<RgbImage>,
    pub mask_dyn: Vec<BinaryMask>,
    pub mask_ss: Vec<BinaryMask>,
}

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.rgb.len()
    }
}

/// Front-most surface along the viewing ray of `pixel` at frame `t`.
pub fn trace_pixel(scene: &SceneSpec, t: usize, pixel: (f64, f64)) -> Result<(Category, [f64; 3], f64)> {
    let pose = &scene.cameras[t];
    let ray = pose.ray_through_pixel(pixel)?;
    let origin = ray.origin;
    let dir = ray.travel_dir();
    let mut best = (Category::Background, scene.background, f64::INFINITY);

    for prim in &scene.static_objects {
        if let Some(hit) = prim.shape.intersect(&origin, &dir) {
            if hit.t < best.2 {
                best = (Category::Static, prim.color_at(&hit), hit.t);
            }
        }
    }
    for obj in &scene.semi_static_objects {
        let local_origin = origin - obj.offset_at(t);
        if let Some(hit) = obj.primitive.shape.intersect(&local_origin, &dir) {
            if hit.t < best.2 {
                best = (Category::SemiStatic, obj.primitive.color_at(&hit), hit.t);
            }
        }
    }
    if !scene.dynamic_objects.is_empty() {
        // Rays start at the camera centre, which is the camera-frame origin.
        let cam_dir = pose.direction_to_camera(&dir);
        for prim in &scene.dynamic_objects {
            if let Some(hit) = prim.shape.intersect(&Vec3::zeros(), &cam_dir) {
                if hit.t < best.2 {
                    best = (Category::Dynamic, prim.color_at(&hit), hit.t);
                }
            }
        }
    }
    Ok(best)
}

/// Analytic rendering of every frame with exact per-pixel categories.
pub fn render_ground_truth(scene: &SceneSpec) -> Result<GroundTruth> {
    let (w, h) = (scene.width, scene.height);
    let frames: Vec<(RgbImage, BinaryMask, BinaryMask)> = (0..scene.frames())
        .into_par_iter()
        .map(|t| {
            let mut rgb = RgbImage::filled(w, h, scene.background);
            let mut dyn_mask = BinaryMask::empty(w, h);
            let mut ss_mask = BinaryMask::empty(w, h);
            for y in 0..h {
                for x in 0..w {
                    let (cat, color, _) = trace_pixel(scene, t, (x as f64, y as f64))?;
                    let i = y * w + x;
                    rgb.data[i] = color;
                    dyn_mask.data[i] = cat == Category::Dynamic;
                    ss_mask.data[i] = cat == Category::SemiStatic;
                }
            }
            Ok((rgb, dyn_mask, ss_mask))
        })
        .collect::<Result<_>>()?;
    let mut gt = GroundTruth {
        rgb: Vec::with_capacity(frames.len()),
        mask_dyn: Vec::with_capacity(frames.len()),
        mask_ss: Vec::with_capacity(frames.len()),
    };
    for (rgb, d, s) in frames {
        gt.rgb.push(rgb);
        gt.mask_dyn.push(d);
        gt.mask_ss.push(s);
    }
    Ok(gt)
}
