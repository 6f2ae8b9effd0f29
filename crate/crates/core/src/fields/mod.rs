//! The learnable three-layer radiance field.
//!
//! Every layer emits five pre-activation channels per point:
//! density, three colour channels and uncertainty. They are produced by
//! trilinear feature grids with small linear heads:
//!
//! * static: `g_st(x) + H_st Φ₀(x)`, where `Φ₀` is a feature grid shared with
//!   the semi-static layer;
//! * semi-static: `b_ss + H_ss Φ₀(x) + Σ_k a_k(z_t) G_k(x)`;
//! * dynamic, in normalised camera-frustum coordinates:
//!   `b_dy + Σ_k a_k(z_t) D_k(x̄)`.
//!
//! The mixing weights `a(z) = A z + a₀` are linear in the per-frame code
//! `z_t` of the layer. Colours additionally receive a linear function of the
//! ray direction (world frame for the world layers, camera frame for the
//! dynamic one).
//!
//! All learnable scalars live in a single flat vector split into named
//! blocks, which makes optimisers, checkpoints and per-layer freezing
//! uniform.

mod code;
mod grid;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use code::{fourier_basis, fourier_time_features, TemporalCode};
pub use grid::{vertex_count, GridRes, Stencil};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Intrinsics, Vec3};

/// Density, red, green, blue, uncertainty.
pub const CHANNELS: usize = 5;
pub const MAX_FEATURES: usize = 16;
pub const MAX_BASIS: usize = 8;
pub const MAX_CODE_DIM: usize = 64;

/// One of the three layers; also names the parameter partitions
/// `W_st`, `W_ss` and `W_dy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Static = 0,
    SemiStatic = 1,
    Dynamic = 2,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Static, Layer::SemiStatic, Layer::Dynamic];

    pub fn short_name(self) -> &'static str {
        match self {
            Layer::Static => "st",
            Layer::SemiStatic => "ss",
            Layer::Dynamic => "dy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockId {
    StaticGrid,
    SharedGrid,
    StaticHead,
    StaticView,
    SemiGrids,
    SemiHead,
    SemiMix,
    SemiBias,
    SemiView,
    SemiCode,
    DynGrids,
    DynMix,
    DynBias,
    DynView,
    DynCode,
}

impl BlockId {
    pub const ALL: [BlockId; 15] = [
        BlockId::StaticGrid,
        BlockId::SharedGrid,
        BlockId::StaticHead,
        BlockId::StaticView,
        BlockId::SemiGrids,
        BlockId::SemiHead,
        BlockId::SemiMix,
        BlockId::SemiBias,
        BlockId::SemiView,
        BlockId::SemiCode,
        BlockId::DynGrids,
        BlockId::DynMix,
        BlockId::DynBias,
        BlockId::DynView,
        BlockId::DynCode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::StaticGrid => "static.grid",
            BlockId::SharedGrid => "static.shared",
            BlockId::StaticHead => "static.head",
            BlockId::StaticView => "static.view",
            BlockId::SemiGrids => "semi.grids",
            BlockId::SemiHead => "semi.head",
            BlockId::SemiMix => "semi.mix",
            BlockId::SemiBias => "semi.bias",
            BlockId::SemiView => "semi.view",
            BlockId::SemiCode => "semi.code",
            BlockId::DynGrids => "dyn.grids",
            BlockId::DynMix => "dyn.mix",
            BlockId::DynBias => "dyn.bias",
            BlockId::DynView => "dyn.view",
            BlockId::DynCode => "dyn.code",
        }
    }

    pub fn from_name(name: &str) -> Option<BlockId> {
        BlockId::ALL.into_iter().find(|b| b.name() == name)
    }

    /// Which parameter partition the block belongs to. The shared grid `Φ₀`
    /// is counted as static; each layer owns its own temporal code.
    pub fn layer(self) -> Layer {
        match self {
            BlockId::StaticGrid | BlockId::SharedGrid | BlockId::StaticHead | BlockId::StaticView => Layer::Static,
            BlockId::SemiGrids
            | BlockId::SemiHead
            | BlockId::SemiMix
            | BlockId::SemiBias
            | BlockId::SemiView
            | BlockId::SemiCode => Layer::SemiStatic,
            _ => Layer::Dynamic,
        }
    }

    fn index(self) -> usize {
        BlockId::ALL.iter().position(|&b| b == self).unwrap()
    }
}

/// Which factor of `Z = Z̃ F` is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    /// `F` is the fixed Fourier-like basis and the per-frame coefficients
    /// `Z̃` are learned.
    FixedBasis,
    /// `Z̃` holds fixed Fourier features of `t / T` and `F` is learned, which
    /// makes codes smooth in time.
    LearnedBasis,
}

impl CodeMode {
    pub fn name(self) -> &'static str {
        match self {
            CodeMode::FixedBasis => "fixed-basis",
            CodeMode::LearnedBasis => "learned-basis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed-basis" => Ok(CodeMode::FixedBasis),
            "learned-basis" => Ok(CodeMode::LearnedBasis),
            _ => Err(Error::Config(format!("unknown code mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    /// Added to the softplus uncertainty so rendered `B` stays positive.
    pub beta_min: f64,
    /// Density is `softplus(density_gain * pre)`.
    pub density_gain: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Activation {
            beta_min: 0.03,
            density_gain: 1.0,
        }
    }
}

/// Domain of the dynamic layer: a camera frustum mapped to the unit cube.
/// `x` and `y` are the pixel-plane coordinates scaled to `[-1, 1]`, depth is
/// mapped through disparity so resolution concentrates near the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frustum {
    pub tan_x: f64,
    pub tan_y: f64,
    pub near: f64,
    pub far: f64,
}

impl Frustum {
    pub fn normalize(&self, p: &Vec3) -> Option<Vec3> {
        let depth = -p.z;
        if !(depth >= self.near && depth <= self.far) {
            return None;
        }
        let nx = p.x / (depth * self.tan_x);
        let ny = p.y / (depth * self.tan_y);
        if nx.abs() > 1.0 || ny.abs() > 1.0 {
            return None;
        }
        let s = (1.0 / self.near - 1.0 / depth) / (1.0 / self.near - 1.0 / self.far);
        Some(Vec3::new(0.5 * (nx + 1.0), 0.5 * (ny + 1.0), s))
    }

    /// Inverse of [`Frustum::normalize`].
    pub fn denormalize(&self, u: &Vec3) -> Vec3 {
        let inv = 1.0 / self.near - u.z * (1.0 / self.near - 1.0 / self.far);
        let depth = 1.0 / inv;
        Vec3::new(
            (2.0 * u.x - 1.0) * depth * self.tan_x,
            (2.0 * u.y - 1.0) * depth * self.tan_y,
            -depth,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub world: Aabb,
    pub world_res: GridRes,
    pub shared_features: usize,
    pub semi_res: GridRes,
    pub frustum: Frustum,
    pub dyn_res: GridRes,
    /// Number of time-mixed grids per time-dependent layer.
    pub basis_grids: usize,
    pub frames: usize,
    pub code_rank: usize,
    pub code_dim: usize,
    pub code_mode: CodeMode,
    pub activation: Activation,
}

impl FieldConfig {
    /// Default resolutions for a scene with the given bounds and camera.
    pub fn for_scene(world: Aabb, intrinsics: &Intrinsics, frames: usize, near: f64) -> Self {
        let size = world.size();
        let voxel = size.max() / 43.0;
        let res = |len: f64| ((len / voxel).round() as usize + 1).max(2);
        let semi_voxel = size.max() / 31.0;
        let semi = |len: f64| ((len / semi_voxel).round() as usize + 1).max(2);
        let (tan_x, tan_y) = intrinsics.half_fov_tangents();
        FieldConfig {
            world,
            world_res: [res(size.x), res(size.y), res(size.z)],
            shared_features: 4,
            semi_res: [semi(size.x), semi(size.y), semi(size.z)],
            frustum: Frustum {
                tan_x,
                tan_y,
                near,
                far: size.norm(),
            },
            dyn_res: [32, 32, 24],
            basis_grids: 4,
            frames,
            code_rank: 6,
            code_dim: 16,
            code_mode: CodeMode::FixedBasis,
            activation: Activation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, res) in [("world", self.world_res), ("semi", self.semi_res), ("dyn", self.dyn_res)] {
            if res.iter().any(|&n| n < 2) {
                return bad(format!("{name} grid resolution {res:?} must be >= 2 per axis"));
            }
        }
        if !(1..=MAX_FEATURES).contains(&self.shared_features) {
            return bad(format!("shared_features must be in 1..={MAX_FEATURES}"));
        }
        if !(1..=MAX_BASIS).contains(&self.basis_grids) {
            return bad(format!("basis_grids must be in 1..={MAX_BASIS}"));
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.code_rank == 0 || self.code_rank > self.code_dim || self.code_dim > MAX_CODE_DIM {
            return bad(format!(
                "need 1 <= code_rank <= code_dim <= {MAX_CODE_DIM}, got {} and {}",
                self.code_rank, self.code_dim
            ));
        }
        if !(self.activation.beta_min > 0.0 && self.activation.density_gain > 0.0) {
            return bad("beta_min and density_gain must be positive".into());
        }
        let f = &self.frustum;
        if !(f.tan_x > 0.0 && f.tan_y > 0.0 && f.near > 0.0 && f.far > f.near) {
            return bad("invalid frustum".into());
        }
        if (0..3).any(|i| !(self.world.max[i] > self.world.min[i])) {
            return bad("world bounds are empty".into());
        }
        Ok(())
    }

    fn block_len(&self, id: BlockId) -> usize {
        let k = self.basis_grids;
        let f = self.shared_features;
        let code = match self.code_mode {
            CodeMode::FixedBasis => self.frames * self.code_rank,
            CodeMode::LearnedBasis => self.code_rank * self.code_dim,
        };
        match id {
            BlockId::StaticGrid => vertex_count(self.world_res) * CHANNELS,
            BlockId::SharedGrid => vertex_count(self.world_res) * f,
            BlockId::StaticHead | BlockId::SemiHead => CHANNELS * f,
            BlockId::StaticView | BlockId::SemiView | BlockId::DynView => 9,
            BlockId::SemiGrids => k * vertex_count(self.semi_res) * CHANNELS,
            BlockId::DynGrids => k * vertex_count(self.dyn_res) * CHANNELS,
            BlockId::SemiMix | BlockId::DynMix => k * self.code_dim + k,
            BlockId::SemiBias | BlockId::DynBias => CHANNELS,
            BlockId::SemiCode | BlockId::DynCode => code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    offsets: [usize; 15],
    lens: [usize; 15],
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &FieldConfig) -> Self {
        let mut offsets = [0; 15];
        let mut lens = [0; 15];
        let mut total = 0;
        for (i, id) in BlockId::ALL.into_iter().enumerate() {
            offsets[i] = total;
            lens[i] = config.block_len(id);
            total += lens[i];
        }
        ParamLayout { offsets, lens, total }
    }

    pub fn range(&self, id: BlockId) -> std::ops::Range<usize> {
        let i = id.index();
        self.offsets[i]..self.offsets[i] + self.lens[i]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn layer_len(&self, layer: Layer) -> usize {
        BlockId::ALL.into_iter().filter(|b| b.layer() == layer).map(|b| self.range(b).len()).sum()
    }
}

/// Blocks of each partition, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSets {
    pub static_blocks: Vec<BlockId>,
    pub semi_static_blocks: Vec<BlockId>,
    pub dynamic_blocks: Vec<BlockId>,
}

pub fn parameter_partition(params: &LayeredFieldParams) -> PartitionSets {
    let _ = params;
    let of = |layer| BlockId::ALL.into_iter().filter(|b| b.layer() == layer).collect();
    PartitionSets {
        static_blocks: of(Layer::Static),
        semi_static_blocks: of(Layer::SemiStatic),
        dynamic_blocks: of(Layer::Dynamic),
    }
}

/// Output of one layer at one point, after activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTriple {
    pub sigma: f64,
    pub color: [f64; 3],
    pub beta: f64,
}

/// A sample location expressed in both reference frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub world: Vec3,
    pub camera: Vec3,
    /// Ray direction `ν` in world coordinates.
    pub dir_world: Vec3,
    /// `ν̄`, the same direction in camera coordinates.
    pub dir_camera: Vec3,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for initialisation.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFieldParams {
    config: FieldConfig,
    layout: ParamLayout,
    values: Vec<f64>,
    /// The non-learned factor of the temporal codes: the Fourier basis
    /// (`FixedBasis`) or the Fourier time features (`LearnedBasis`).
    fixed_code: Vec<f64>,
}

impl LayeredFieldParams {
    /// All parameters zero.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let fixed_code = match config.code_mode {
            CodeMode::FixedBasis => fourier_basis(config.code_rank, config.code_dim),
            CodeMode::LearnedBasis => fourier_time_features(config.frames, config.code_rank),
        };
        Ok(LayeredFieldParams {
            values: vec![0.0; layout.total()],
            config,
            layout,
            fixed_code,
        })
    }

    /// Random initialisation: nearly empty space with mid-grey colour.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = p.config.activation.density_gain;
        let k = p.config.basis_grids;
        let d = p.config.code_dim;

        let static_sigma = softplus_inverse(0.1) / gain;
        for cell in p.block_mut(BlockId::StaticGrid).chunks_mut(CHANNELS) {
            cell[0] = static_sigma;
        }
        let shared = normal(0.1);
        for v in p.block_mut(BlockId::SharedGrid) {
            *v = shared.sample(&mut rng);
        }
        let bias_sigma = softplus_inverse(0.01) / gain;
        for (bias, mix) in [(BlockId::SemiBias, BlockId::SemiMix), (BlockId::DynBias, BlockId::DynMix)] {
            p.block_mut(bias)[0] = bias_sigma;
            let dist = normal(1.0 / (d as f64).sqrt());
            let m = p.block_mut(mix);
            for v in m[..k * d].iter_mut() {
                *v = dist.sample(&mut rng);
            }
            m[k * d..].fill(1.0);
        }
        for code in [BlockId::SemiCode, BlockId::DynCode] {
            match p.config.code_mode {
                CodeMode::FixedBasis => {
                    let dist = normal(1.0);
                    for v in p.block_mut(code) {
                        *v = dist.sample(&mut rng);
                    }
                }
                CodeMode::LearnedBasis => {
                    let basis = fourier_basis(p.config.code_rank, p.config.code_dim);
                    p.block_mut(code).copy_from_slice(&basis);
                }
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.values[self.layout.range(id)]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        let r = self.layout.range(id);
        &mut self.values[r]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The temporal code consumed by `layer` (semi-static or dynamic).
    pub fn temporal_code(&self, layer: Layer) -> Result<TemporalCode> {
        let block = match layer {
            Layer::SemiStatic => BlockId::SemiCode,
            Layer::Dynamic => BlockId::DynCode,
            Layer::Static => return Err(Error::Domain("the static layer has no temporal code".into())),
        };
        let c = &self.config;
        let learned = self.block(block).to_vec();
        match c.code_mode {
            CodeMode::FixedBasis => TemporalCode::new(c.frames, c.code_rank, c.code_dim, learned, self.fixed_code.clone()),
            CodeMode::LearnedBasis => TemporalCode::new(c.frames, c.code_rank, c.code_dim, self.fixed_code.clone(), learned),
        }
    }

    /// `z_t` for `layer`.
    pub fn time_code(&self, layer: Layer, t: usize) -> Result<Vec<f64>> {
        self.temporal_code(layer)?.code(t)
    }

    /// SHA-256 over the little-endian bytes of one partition's blocks.
    pub fn partition_checksum(&self, layer: Layer) -> String {
        let mut h = Sha256::new();
        for id in BlockId::ALL.into_iter().filter(|b| b.layer() == layer) {
            for v in self.block(id) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn from_parts(config: FieldConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match layout {}",
                values.len(),
                p.values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("positive standard deviation")
}

/// Forward state of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub world_u: Option<Vec3>,
    pub frustum_u: Option<Vec3>,
    pub pre: [[f64; CHANNELS]; 3],
    pub out: [LayerTriple; 3],
    phi0: [f64; MAX_FEATURES],
    basis_ss: [[f64; CHANNELS]; MAX_BASIS],
    basis_dy: [[f64; CHANNELS]; MAX_BASIS],
}

/// Parameter-space gradient of one sample that still has to be scattered
/// into the grids.
#[derive(Debug, Clone, Copy)]
pub struct GridGrad {
    pub frame: usize,
    pub world_u: Option<Vec3>,
    pub frustum_u: Option<Vec3>,
    pub dpre: [[f64; CHANNELS]; 3],
    pub dphi0: [f64; MAX_FEATURES],
}

/// Gradient of the small (non-grid) blocks accumulated over one ray.
#[derive(Debug, Clone)]
pub struct SmallGrad {
    pub frame: usize,
    head_st: [f64; CHANNELS * MAX_FEATURES],
    head_ss: [f64; CHANNELS * MAX_FEATURES],
    view: [[f64; 9]; 3],
    bias: [[f64; CHANNELS]; 2],
    mix: [[f64; MAX_BASIS]; 2],
}

impl SmallGrad {
    pub fn new(frame: usize) -> Self {
        SmallGrad {
            frame,
            head_st: [0.0; CHANNELS * MAX_FEATURES],
            head_ss: [0.0; CHANNELS * MAX_FEATURES],
            view: [[0.0; 9]; 3],
            bias: [[0.0; CHANNELS]; 2],
            mix: [[0.0; MAX_BASIS]; 2],
        }
    }
}

/// Which partitions receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable(pub [bool; 3]);

impl Trainable {
    pub const ALL: Trainable = Trainable([true; 3]);
    pub const STATIC: Trainable = Trainable([true, false, false]);
    /// Semi-static and dynamic only.
    pub const TIME_DEPENDENT: Trainable = Trainable([false, true, true]);

    pub fn contains(&self, layer: Layer) -> bool {
        self.0[layer as usize]
    }
}

/// Read-only evaluator with the per-frame mixing weights precomputed.
pub struct FieldView<'a> {
    params: &'a LayeredFieldParams,
    /// Per frame: `a(z_t)` for the semi-static and dynamic layers.
    mix: [Vec<[f64; MAX_BASIS]>; 2],
    codes: [Vec<[f64; MAX_CODE_DIM]>; 2],
}

impl<'a> FieldView<'a> {
    pub fn new(params: &'a LayeredFieldParams) -> Self {
        let c = &params.config;
        let (k, d) = (c.basis_grids, c.code_dim);
        let mut mix = [Vec::with_capacity(c.frames), Vec::with_capacity(c.frames)];
        let mut codes = [Vec::with_capacity(c.frames), Vec::with_capacity(c.frames)];
        for (slot, layer, mix_block) in [(0, Layer::SemiStatic, BlockId::SemiMix), (1, Layer::Dynamic, BlockId::DynMix)] {
            let code = params.temporal_code(layer).expect("time-dependent layer");
            let m = params.block(mix_block);
            for t in 0..c.frames {
                let mut z = [0.0; MAX_CODE_DIM];
                code.code_into(t, &mut z[..d]);
                let mut a = [0.0; MAX_BASIS];
                for (kk, ak) in a.iter_mut().enumerate().take(k) {
                    let row = &m[kk * d..(kk + 1) * d];
                    *ak = m[k * d + kk] + row.iter().zip(&z[..d]).map(|(x, y)| x * y).sum::<f64>();
                }
                mix[slot].push(a);
                codes[slot].push(z);
            }
        }
        FieldView { params, mix, codes }
    }

    pub fn params(&self) -> &LayeredFieldParams {
        self.params
    }

    /// Mixing weights `a(z_t)` of a time-dependent layer.
    pub fn mixing(&self, layer: Layer, t: usize) -> &[f64] {
        let k = self.params.config.basis_grids;
        match layer {
            Layer::SemiStatic => &self.mix[0][t][..k],
            Layer::Dynamic => &self.mix[1][t][..k],
            Layer::Static => &[],
        }
    }

    pub fn forward(&self, p: &SamplePoint, t: usize) -> SampleForward {
        let params = self.params;
        let c = &params.config;
        let f = c.shared_features;
        let k = c.basis_grids;
        let act = c.activation;
        let mut s = SampleForward {
            world_u: None,
            frustum_u: None,
            pre: [[0.0; CHANNELS]; 3],
            out: [LayerTriple {
                sigma: 0.0,
                color: [0.0; 3],
                beta: act.beta_min,
            }; 3],
            phi0: [0.0; MAX_FEATURES],
            basis_ss: [[0.0; CHANNELS]; MAX_BASIS],
            basis_dy: [[0.0; CHANNELS]; MAX_BASIS],
        };

        if c.world.contains(&p.world) {
            let u = (p.world - c.world.min).component_div(&c.world.size());
            s.world_u = Some(u);
            let st = Stencil::new(c.world_res, &u);
            st.gather(params.block(BlockId::SharedGrid), f, &mut s.phi0[..f]);
            let mut g = [0.0; CHANNELS];
            st.gather(params.block(BlockId::StaticGrid), CHANNELS, &mut g);
            let head = params.block(BlockId::StaticHead);
            let view = params.block(BlockId::StaticView);
            let pre = &mut s.pre[0];
            for ch in 0..CHANNELS {
                pre[ch] = g[ch] + dot(&head[ch * f..(ch + 1) * f], &s.phi0[..f]);
            }
            add_view(pre, view, &p.dir_world);

            let ss = Stencil::new(c.semi_res, &u);
            let grids = params.block(BlockId::SemiGrids);
            let n = vertex_count(c.semi_res) * CHANNELS;
            let a = &self.mix[0][t];
            let head = params.block(BlockId::SemiHead);
            let bias = params.block(BlockId::SemiBias);
            let pre = &mut s.pre[1];
            for ch in 0..CHANNELS {
                pre[ch] = bias[ch] + dot(&head[ch * f..(ch + 1) * f], &s.phi0[..f]);
            }
            for kk in 0..k {
                let gk = &mut s.basis_ss[kk];
                ss.gather(&grids[kk * n..(kk + 1) * n], CHANNELS, gk);
                for ch in 0..CHANNELS {
                    pre[ch] += a[kk] * gk[ch];
                }
            }
            add_view(pre, params.block(BlockId::SemiView), &p.dir_world);
            s.out[0] = activate(&s.pre[0], act);
            s.out[1] = activate(&s.pre[1], act);
        }

        if let Some(u) = c.frustum.normalize(&p.camera) {
            s.frustum_u = Some(u);
            let st = Stencil::new(c.dyn_res, &u);
            let grids = params.block(BlockId::DynGrids);
            let n = vertex_count(c.dyn_res) * CHANNELS;
            let a = &self.mix[1][t];
            let bias = params.block(BlockId::DynBias);
            let pre = &mut s.pre[2];
            pre.copy_from_slice(bias);
            for kk in 0..k {
                let gk = &mut s.basis_dy[kk];
                st.gather(&grids[kk * n..(kk + 1) * n], CHANNELS, gk);
                for ch in 0..CHANNELS {
                    pre[ch] += a[kk] * gk[ch];
                }
            }
            add_view(pre, params.block(BlockId::DynView), &p.dir_camera);
            s.out[2] = activate(&s.pre[2], act);
        }
        s
    }

    /// Back-propagates `dout` (gradient w.r.t. each layer's activated
    /// `(σ, r, g, b, β)`) to the pre-activations, accumulating small-block
    /// gradients into `small` and returning what must be scattered into
    /// the grids.
    pub fn backward(
        &self,
        s: &SampleForward,
        p: &SamplePoint,
        t: usize,
        dout: &[[f64; CHANNELS]; 3],
        trainable: Trainable,
        small: &mut SmallGrad,
    ) -> GridGrad {
        let params = self.params;
        let c = &params.config;
        let f = c.shared_features;
        let k = c.basis_grids;
        let gain = c.activation.density_gain;
        let mut g = GridGrad {
            frame: t,
            world_u: s.world_u,
            frustum_u: s.frustum_u,
            dpre: [[0.0; CHANNELS]; 3],
            dphi0: [0.0; MAX_FEATURES],
        };
        for layer in 0..3 {
            let inside = if layer == 2 { s.frustum_u.is_some() } else { s.world_u.is_some() };
            if !inside {
                continue;
            }
            let pre = &s.pre[layer];
            let out = &s.out[layer];
            let d = &mut g.dpre[layer];
            d[0] = dout[layer][0] * gain * sigmoid(gain * pre[0]);
            for ch in 0..3 {
                let cc = out.color[ch];
                d[1 + ch] = dout[layer][1 + ch] * cc * (1.0 - cc);
            }
            d[4] = dout[layer][4] * sigmoid(pre[4]);
        }

        if s.world_u.is_some() {
            let dst = g.dpre[0];
            let dss = g.dpre[1];
            if trainable.contains(Layer::Static) {
                let head = params.block(BlockId::StaticHead);
                for ch in 0..CHANNELS {
                    for j in 0..f {
                        small.head_st[ch * f + j] += dst[ch] * s.phi0[j];
                        g.dphi0[j] += head[ch * f + j] * dst[ch];
                    }
                }
                add_view_grad(&mut small.view[0], &dst, &p.dir_world);
                let head = params.block(BlockId::SemiHead);
                for ch in 0..CHANNELS {
                    for j in 0..f {
                        g.dphi0[j] += head[ch * f + j] * dss[ch];
                    }
                }
            }
            if trainable.contains(Layer::SemiStatic) {
                for ch in 0..CHANNELS {
                    small.bias[0][ch] += dss[ch];
                    for j in 0..f {
                        small.head_ss[ch * f + j] += dss[ch] * s.phi0[j];
                    }
                }
                add_view_grad(&mut small.view[1], &dss, &p.dir_world);
                for kk in 0..k {
                    small.mix[0][kk] += dot(&dss, &s.basis_ss[kk]);
                }
            }
        }
        if s.frustum_u.is_some() && trainable.contains(Layer::Dynamic) {
            let ddy = g.dpre[2];
            for ch in 0..CHANNELS {
                small.bias[1][ch] += ddy[ch];
            }
            add_view_grad(&mut small.view[2], &ddy, &p.dir_camera);
            for kk in 0..k {
                small.mix[1][kk] += dot(&ddy, &s.basis_dy[kk]);
            }
        }
        g
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_view(pre: &mut [f64; CHANNELS], view: &[f64], dir: &Vec3) {
    for ch in 0..3 {
        pre[1 + ch] += view[ch * 3] * dir.x + view[ch * 3 + 1] * dir.y + view[ch * 3 + 2] * dir.z;
    }
}

#[inline]
fn add_view_grad(acc: &mut [f64; 9], dpre: &[f64; CHANNELS], dir: &Vec3) {
    for ch in 0..3 {
        acc[ch * 3] += dpre[1 + ch] * dir.x;
        acc[ch * 3 + 1] += dpre[1 + ch] * dir.y;
        acc[ch * 3 + 2] += dpre[1 + ch] * dir.z;
    }
}

#[inline]
fn activate(pre: &[f64; CHANNELS], act: Activation) -> LayerTriple {
    LayerTriple {
        sigma: softplus(act.density_gain * pre[0]),
        color: [sigmoid(pre[1]), sigmoid(pre[2]), sigmoid(pre[3])],
        beta: softplus(pre[4]) + act.beta_min,
    }
}

/// Accumulates parameter gradients over many samples.
///
/// Grid scatters and small-block sums are applied in call order, so the
/// result depends only on the order in which samples are fed, not on how
/// they were computed.
pub struct GradAccumulator {
    pub grad: Vec<f64>,
    frame_mix: [Vec<[f64; MAX_BASIS]>; 2],
    trainable: Trainable,
}

impl GradAccumulator {
    pub fn new(params: &LayeredFieldParams, trainable: Trainable) -> Self {
        let t = params.config.frames;
        GradAccumulator {
            grad: vec![0.0; params.len()],
            frame_mix: [vec![[0.0; MAX_BASIS]; t], vec![[0.0; MAX_BASIS]; t]],
            trainable,
        }
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn add_small(&mut self, view: &FieldView<'_>, small: &SmallGrad) {
        let params = view.params;
        let layout = &params.layout;
        let f = params.config.shared_features;
        let k = params.config.basis_grids;
        let grad = &mut self.grad;
        if self.trainable.contains(Layer::Static) {
            add_into(&mut grad[layout.range(BlockId::StaticHead)], &small.head_st[..CHANNELS * f]);
            add_into(&mut grad[layout.range(BlockId::StaticView)], &small.view[0]);
        }
        if self.trainable.contains(Layer::SemiStatic) {
            add_into(&mut grad[layout.range(BlockId::SemiHead)], &small.head_ss[..CHANNELS * f]);
            add_into(&mut grad[layout.range(BlockId::SemiView)], &small.view[1]);
            add_into(&mut grad[layout.range(BlockId::SemiBias)], &small.bias[0]);
            add_into(&mut self.frame_mix[0][small.frame][..k], &small.mix[0][..k]);
        }
        if self.trainable.contains(Layer::Dynamic) {
            add_into(&mut grad[layout.range(BlockId::DynView)], &small.view[2]);
            add_into(&mut grad[layout.range(BlockId::DynBias)], &small.bias[1]);
            add_into(&mut self.frame_mix[1][small.frame][..k], &small.mix[1][..k]);
        }
    }

    pub fn add_grid(&mut self, view: &FieldView<'_>, g: &GridGrad) {
        let params = view.params;
        let c = &params.config;
        let layout = &params.layout;
        let f = c.shared_features;
        let k = c.basis_grids;
        if let Some(u) = g.world_u {
            if self.trainable.contains(Layer::Static) {
                let st = Stencil::new(c.world_res, &u);
                st.scatter(&mut self.grad[layout.range(BlockId::StaticGrid)], CHANNELS, &g.dpre[0], 1.0);
                st.scatter(&mut self.grad[layout.range(BlockId::SharedGrid)], f, &g.dphi0[..f], 1.0);
            }
            if self.trainable.contains(Layer::SemiStatic) {
                let ss = Stencil::new(c.semi_res, &u);
                let n = vertex_count(c.semi_res) * CHANNELS;
                let a = &view.mix[0][g.frame];
                let grids = &mut self.grad[layout.range(BlockId::SemiGrids)];
                for kk in 0..k {
                    ss.scatter(&mut grids[kk * n..(kk + 1) * n], CHANNELS, &g.dpre[1], a[kk]);
                }
            }
        }
        if let Some(u) = g.frustum_u {
            if self.trainable.contains(Layer::Dynamic) {
                let st = Stencil::new(c.dyn_res, &u);
                let n = vertex_count(c.dyn_res) * CHANNELS;
                let a = &view.mix[1][g.frame];
                let grids = &mut self.grad[layout.range(BlockId::DynGrids)];
                for kk in 0..k {
                    st.scatter(&mut grids[kk * n..(kk + 1) * n], CHANNELS, &g.dpre[2], a[kk]);
                }
            }
        }
    }

    /// Chains the per-frame mixing-weight gradients through `a = A z + a₀`
    /// and `z = Z̃ F` and returns the dense gradient.
    pub fn finish(mut self, view: &FieldView<'_>) -> Vec<f64> {
        let params = view.params;
        let c = &params.config;
        let (k, d, p) = (c.basis_grids, c.code_dim, c.code_rank);
        for (slot, layer, mix_block, code_block) in [
            (0, Layer::SemiStatic, BlockId::SemiMix, BlockId::SemiCode),
            (1, Layer::Dynamic, BlockId::DynMix, BlockId::DynCode),
        ] {
            if !self.trainable.contains(layer) {
                continue;
            }
            let mix = params.block(mix_block);
            let learned_code = params.block(code_block);
            let mix_range = params.layout.range(mix_block);
            let code_range = params.layout.range(code_block);
            for t in 0..c.frames {
                let da = &self.frame_mix[slot][t];
                if da[..k].iter().all(|&v| v == 0.0) {
                    continue;
                }
                let z = &view.codes[slot][t];
                let mut dz = [0.0; MAX_CODE_DIM];
                {
                    let gm = &mut self.grad[mix_range.clone()];
                    for kk in 0..k {
                        gm[k * d + kk] += da[kk];
                        for dd in 0..d {
                            gm[kk * d + dd] += da[kk] * z[dd];
                            dz[dd] += mix[kk * d + dd] * da[kk];
                        }
                    }
                }
                let gc = &mut self.grad[code_range.clone()];
                match c.code_mode {
                    CodeMode::FixedBasis => {
                        let basis = &params.fixed_code;
                        for pp in 0..p {
                            gc[t * p + pp] += dot(&basis[pp * d..(pp + 1) * d], &dz[..d]);
                        }
                    }
                    CodeMode::LearnedBasis => {
                        let coeffs = &params.fixed_code;
                        let _ = learned_code;
                        for pp in 0..p {
                            let zt = coeffs[t * p + pp];
                            for dd in 0..d {
                                gc[pp * d + dd] += zt * dz[dd];
                            }
                        }
                    }
                }
            }
        }
        self.grad
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Evaluates all three layers at one point.
pub fn eval_layers(params: &LayeredFieldParams, point: &SamplePoint, t: usize) -> Result<[LayerTriple; 3]> {
    let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
    if !(finite(&point.world) && finite(&point.camera) && finite(&point.dir_world) && finite(&point.dir_camera)) {
        return Err(Error::Evaluation("non-finite sample point".into()));
    }
    if t >= params.config.frames {
        return Err(Error::Domain(format!("frame {t} outside [0, {})", params.config.frames)));
    }
    let out = FieldView::new(params).forward(point, t).out;
    if out.iter().any(|o| !(o.sigma.is_finite() && o.beta.is_finite() && o.color.iter().all(|c| c.is_finite()))) {
        return Err(Error::Evaluation("non-finite layer output".into()));
    }
    Ok(out)
}
