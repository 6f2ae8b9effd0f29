//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fields::{Activation, CodeMode, FieldConfig, Frustum, LayeredFieldParams};
use crate::geometry::{Aabb, CameraPose, Intrinsics, Vec3};

/// A random field on a small grid and a camera looking into it.
pub(crate) fn tiny_scene_params(seed: u64) -> (LayeredFieldParams, CameraPose) {
    let k = Intrinsics::from_fov(6, 5, 60.0);
    let (tx, ty) = k.half_fov_tangents();
    let cfg = FieldConfig {
        world: Aabb::new(Vec3::new(-1.0, -1.0, -3.0), Vec3::new(1.0, 1.0, 0.5)),
        world_res: [5, 5, 6],
        shared_features: 2,
        semi_res: [4, 4, 5],
        frustum: Frustum {
            tan_x: tx,
            tan_y: ty,
            near: 0.1,
            far: 4.0,
        },
        dyn_res: [4, 4, 4],
        basis_grids: 2,
        frames: 3,
        code_rank: 2,
        code_dim: 3,
        code_mode: CodeMode::FixedBasis,
        activation: Activation::default(),
    };
    let mut p = LayeredFieldParams::zeros(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let pose = CameraPose::look_at(Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.0, -0.1, -2.0), Vec3::y(), k, 1).unwrap();
    (p, pose)
}


/// One slightly different camera per frame of the [`tiny_scene_params`]
/// field.
pub(crate) fn tiny_cameras() -> Vec<CameraPose> {
    let k = Intrinsics::from_fov(6, 5, 60.0);
    (0..3)
        .map(|t| {
            let s = t as f64 * 0.1;
            CameraPose::look_at(Vec3::new(0.1 - s, 0.05 * s, 0.2), Vec3::new(s, -0.1, -2.0), Vec3::y(), k, t).unwrap()
        })
        .collect()
}
