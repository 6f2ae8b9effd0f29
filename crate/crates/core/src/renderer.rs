//! Discrete emission-absorption rendering of the layered field.
//!
//! Alongside colour, every ray yields the rendered uncertainty `B` and the
//! two pseudo-colour mask channels: the expected fraction of absorbed light
//! contributed by the semi-static and the dynamic layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{
    FieldView, GridGrad, LayerTriple, LayeredFieldParams, SampleForward, SamplePoint, SmallGrad, Trainable, CHANNELS,
};
use crate::geometry::{CameraPose, Ray};
use crate::image::{GrayImage, RgbImage};

/// Below this density a sample counts as empty space: colour and mask
/// ratios are defined as zero.
pub const SIGMA_EPS: f64 = 1e-12;

/// Stand-in for the infinite length of the last quadrature interval.
pub const LAST_DELTA: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSettings {
    /// Samples per ray.
    pub samples: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples: 64,
            stratified: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Places `k` samples in `[ray.t_near, ray.t_far]`: bin midpoints, or one
/// uniform draw per bin when `stratified`.
pub fn sample_ray(ray: &Ray, k: usize, stratified: bool, seed: u64) -> Result<RaySamples> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 samples per ray, got {k}")));
    }
    if !(ray.t_near.is_finite() && ray.t_far.is_finite() && ray.t_far > ray.t_near) {
        return Err(Error::Domain(format!("invalid ray interval [{}, {}]", ray.t_near, ray.t_far)));
    }
    let bin = (ray.t_far - ray.t_near) / k as f64;
    let depths: Vec<f64> = if stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|i| ray.t_near + (i as f64 + rng.gen::<f64>()) * bin).collect()
    } else {
        (0..k).map(|i| ray.t_near + (i as f64 + 0.5) * bin).collect()
    };
    let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(LAST_DELTA);
    Ok(RaySamples { depths, deltas })
}

/// Per-sample mixture of the three layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub sigma: f64,
    pub color: [f64; 3],
    pub beta: f64,
    pub m_st: f64,
    pub m_ss: f64,
    pub m_dy: f64,
}

pub fn composite_point(layers: &[LayerTriple; 3]) -> Composite {
    let sigma = layers[0].sigma + layers[1].sigma + layers[2].sigma;
    if sigma < SIGMA_EPS {
        return Composite {
            sigma,
            color: [0.0; 3],
            beta: 0.0,
            m_st: 0.0,
            m_ss: 0.0,
            m_dy: 0.0,
        };
    }
    let mut color = [0.0; 3];
    let mut beta = 0.0;
    for l in layers {
        for (c, lc) in color.iter_mut().zip(&l.color) {
            *c += l.sigma * lc;
        }
        beta += l.sigma * l.beta;
    }
    Composite {
        sigma,
        color: color.map(|c| c / sigma),
        beta: beta / sigma,
        m_st: layers[0].sigma / sigma,
        m_ss: layers[1].sigma / sigma,
        m_dy: layers[2].sigma / sigma,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderBundle {
    pub color: [f64; 3],
    pub uncertainty: f64,
    pub mask_ss: f64,
    pub mask_dy: f64,
    /// `Σ w_i m_st,i`, the share of absorbed light owed to the static layer.
    pub static_share: f64,
    pub t_bg: f64,
}

impl RenderBundle {
    fn empty(beta_min: f64) -> Self {
        RenderBundle {
            color: [0.0; 3],
            uncertainty: beta_min,
            mask_ss: 0.0,
            mask_dy: 0.0,
            static_share: 0.0,
            t_bg: 1.0,
        }
    }
}

/// Gradient of a scalar loss with respect to the rendered channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BundleGrad {
    pub color: [f64; 3],
    pub uncertainty: f64,
    pub mask_ss: f64,
    pub mask_dy: f64,
}

/// Forward intermediates of one ray, enough to run the backward pass.
#[derive(Debug, Clone, Default)]
pub struct RayTape {
    points: Vec<SamplePoint>,
    forwards: Vec<SampleForward>,
    deltas: Vec<f64>,
    composites: Vec<Composite>,
    weights: Vec<f64>,
    /// `T_i` for `i = 0..=K`; the last entry is `T_bg`.
    trans: Vec<f64>,
}

/// Clips a camera ray to the region the field can occupy.
pub fn clip_for_field(params: &LayeredFieldParams, ray: &Ray) -> Ray {
    let c = params.config();
    let near = c.frustum.near;
    ray.clip_to(&c.world, near).unwrap_or(Ray {
        t_near: near,
        t_far: c.frustum.far,
        ..*ray
    })
}

fn pixel_seed(seed: u64, t: usize, pixel: (f64, f64)) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [t as u64, pixel.0.to_bits(), pixel.1.to_bits()] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Renders one ray and records the tape. `ray` must already be clipped.
pub fn trace(
    view: &FieldView<'_>,
    pose: &CameraPose,
    ray: &Ray,
    t: usize,
    settings: &RenderSettings,
    tape: Option<&mut RayTape>,
) -> Result<RenderBundle> {
    let params = view.params();
    let beta_min = params.config().activation.beta_min;
    let samples = sample_ray(ray, settings.samples, settings.stratified, pixel_seed(settings.seed, t, ray.pixel))?;
    let dir_world = ray.travel_dir();
    let dir_camera = pose.direction_to_camera(&dir_world);

    let mut local = RayTape::default();
    let tp = match tape {
        Some(tp) => tp,
        None => &mut local,
    };
    tp.points.clear();
    tp.forwards.clear();
    tp.composites.clear();
    tp.deltas.clear();
    tp.deltas.extend_from_slice(&samples.deltas);
    for (i, &tau) in samples.depths.iter().enumerate() {
        let world = ray.point_at(tau);
        let point = SamplePoint {
            world,
            camera: pose.world_to_camera(&world),
            dir_world,
            dir_camera,
        };
        let fwd = view.forward(&point, t);
        let comp = composite_point(&fwd.out);
        if !(comp.sigma.is_finite() && comp.beta.is_finite() && comp.color.iter().all(|c| c.is_finite())) {
            return Err(Error::Render {
                sample: i,
                message: "non-finite density or colour".into(),
            });
        }
        tp.points.push(point);
        tp.forwards.push(fwd);
        tp.composites.push(comp);
    }
    let RayTape {
        composites,
        deltas,
        weights,
        trans,
        ..
    } = tp;
    Ok(accumulate(composites, deltas, beta_min, weights, trans))
}

/// Alpha-compositing quadrature over per-sample mixtures. Fills the sample
/// weights `w_i` and transmittances `T_0..=T_K`.
fn accumulate(
    composites: &[Composite],
    deltas: &[f64],
    beta_min: f64,
    weights: &mut Vec<f64>,
    trans_out: &mut Vec<f64>,
) -> RenderBundle {
    weights.clear();
    trans_out.clear();
    let mut out = RenderBundle::empty(beta_min);
    out.uncertainty = 0.0;
    let mut trans = 1.0;
    for (comp, &delta) in composites.iter().zip(deltas) {
        let alpha = 1.0 - (-comp.sigma * delta).exp();
        let w = trans * alpha;
        for (o, c) in out.color.iter_mut().zip(&comp.color) {
            *o += w * c;
        }
        out.uncertainty += w * comp.beta;
        out.mask_ss += w * comp.m_ss;
        out.mask_dy += w * comp.m_dy;
        out.static_share += w * comp.m_st;
        weights.push(w);
        trans_out.push(trans);
        trans *= 1.0 - alpha;
    }
    trans_out.push(trans);
    out.t_bg = trans;
    out.uncertainty += beta_min * trans;
    out
}

/// Renders a ray given the layer outputs at each sample and the interval
/// lengths.
pub fn composite_ray(layers: &[[LayerTriple; 3]], deltas: &[f64], beta_min: f64) -> Result<RenderBundle> {
    if layers.len() != deltas.len() || layers.is_empty() {
        return Err(Error::Domain("need one delta per sample".into()));
    }
    let mut comps = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let c = composite_point(l);
        if !(c.sigma.is_finite() && c.sigma >= 0.0 && c.beta.is_finite() && c.color.iter().all(|v| v.is_finite())) {
            return Err(Error::Render {
                sample: i,
                message: "non-finite or negative density".into(),
            });
        }
        comps.push(c);
    }
    Ok(accumulate(&comps, deltas, beta_min, &mut Vec::new(), &mut Vec::new()))
}

/// Back-propagates `grad` through a recorded ray. Small-block gradients are
/// accumulated into `small`; per-sample grid gradients are appended to
/// `grids`.
pub fn backward(
    view: &FieldView<'_>,
    tape: &RayTape,
    t: usize,
    grad: &BundleGrad,
    trainable: Trainable,
    small: &mut SmallGrad,
    grids: &mut Vec<GridGrad>,
) {
    let beta_min = view.params().config().activation.beta_min;
    let k = tape.weights.len();
    let g = [
        grad.color[0],
        grad.color[1],
        grad.color[2],
        grad.uncertainty,
        grad.mask_ss,
        grad.mask_dy,
    ];
    let value = |c: &Composite| [c.color[0], c.color[1], c.color[2], c.beta, c.m_ss, c.m_dy];
    let gdot = |v: &[f64; 6]| g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let t_bg = tape.trans[k];

    // Suffix sums of w_j (g · v_j) for j > i.
    let mut suffix = 0.0;
    let mut dsigma = vec![0.0; k];
    for i in (0..k).rev() {
        let gv = gdot(&value(&tape.composites[i]));
        dsigma[i] = tape.deltas[i] * (tape.trans[i + 1] * gv - suffix - t_bg * grad.uncertainty * beta_min);
        suffix += tape.weights[i] * gv;
    }

    for i in 0..k {
        let comp = &tape.composites[i];
        let fwd = &tape.forwards[i];
        let w = tape.weights[i];
        let mut dout = [[0.0; CHANNELS]; 3];
        if comp.sigma >= SIGMA_EPS {
            let v = value(comp);
            for (l, layer) in fwd.out.iter().enumerate() {
                let share = layer.sigma / comp.sigma;
                let own = [
                    layer.color[0],
                    layer.color[1],
                    layer.color[2],
                    layer.beta,
                    (l == 1) as u8 as f64,
                    (l == 2) as u8 as f64,
                ];
                let mut ds = dsigma[i];
                for ch in 0..6 {
                    ds += w * g[ch] * (own[ch] - v[ch]) / comp.sigma;
                }
                dout[l][0] = ds;
                for ch in 0..3 {
                    dout[l][1 + ch] = w * g[ch] * share;
                }
                dout[l][4] = w * g[3] * share;
            }
        } else {
            for d in dout.iter_mut() {
                d[0] = dsigma[i];
            }
        }
        let gg = view.backward(fwd, &tape.points[i], t, &dout, trainable, small);
        if gg.world_u.is_some() || gg.frustum_u.is_some() {
            grids.push(gg);
        }
    }
}

/// Renders the ray through `pixel` of the camera at frame `t`.
pub fn render_ray(
    params: &LayeredFieldParams,
    pose: &CameraPose,
    pixel: (f64, f64),
    t: usize,
    settings: &RenderSettings,
) -> Result<RenderBundle> {
    check_frame(params, t)?;
    let view = FieldView::new(params);
    let ray = clip_for_field(params, &pose.ray_through_pixel(pixel)?);
    trace(&view, pose, &ray, t, settings, None)
}

fn check_frame(params: &LayeredFieldParams, t: usize) -> Result<()> {
    let frames = params.config().frames;
    if t >= frames {
        return Err(Error::Domain(format!("frame {t} outside [0, {frames})")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub color: RgbImage,
    pub uncertainty: GrayImage,
    pub mask_ss: GrayImage,
    pub mask_dy: GrayImage,
    pub static_share: GrayImage,
    pub t_bg: GrayImage,
}

/// Runs `f` on a pool with `workers` threads (`0` means the global pool).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Renders every pixel of frame `t`. Pixels are independent, so the result
/// does not depend on `workers`.
pub fn render_frame(
    params: &LayeredFieldParams,
    pose: &CameraPose,
    t: usize,
    settings: &RenderSettings,
    workers: usize,
) -> Result<FrameRender> {
    check_frame(params, t)?;
    let (w, h) = (pose.intrinsics().width, pose.intrinsics().height);
    let view = FieldView::new(params);
    let bundles: Vec<RenderBundle> = with_workers(workers, || {
        (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let pixel = (x as f64, y as f64);
                let run = || {
                    let ray = clip_for_field(params, &pose.ray_through_pixel(pixel)?);
                    trace(&view, pose, &ray, t, settings, None)
                };
                run().map_err(|e| Error::Pixel {
                    x,
                    y,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()
    })?;
    let gray = |f: fn(&RenderBundle) -> f64| GrayImage {
        width: w,
        height: h,
        data: bundles.iter().map(f).collect(),
    };
    Ok(FrameRender {
        color: RgbImage {
            width: w,
            height: h,
            data: bundles.iter().map(|b| b.color).collect(),
        },
        uncertainty: gray(|b| b.uncertainty),
        mask_ss: gray(|b| b.mask_ss),
        mask_dy: gray(|b| b.mask_dy),
        static_share: gray(|b| b.static_share),
        t_bg: gray(|b| b.t_bg),
    })
}
