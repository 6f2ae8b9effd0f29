use crate::geometry::Vec3;

/// Vertex counts along x, y and z. Vertices are laid out x-fastest.
pub type GridRes = [usize; 3];

pub fn vertex_count(res: GridRes) -> usize {
    res[0] * res[1] * res[2]
}

/// Trilinear interpolation weights for one point: the eight surrounding
/// vertex indices and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    /// `u` holds normalised coordinates in `[0, 1]^3`; vertex `i` along an
    /// axis sits at `i / (n - 1)`.
    pub fn new(res: GridRes, u: &Vec3) -> Stencil {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let g = u[a].clamp(0.0, 1.0) * (res[a] - 1) as f64;
            let i = (g.floor() as usize).min(res[a] - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            idx[corner] = (base[2] + dz) * res[1] * res[0] + (base[1] + dy) * res[0] + base[0] + dx;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            w[corner] = wx * wy * wz;
        }
        Stencil { idx, w }
    }

    /// Interpolates `out.len()` channels from a channel-last grid.
    #[inline]
    pub fn gather(&self, grid: &[f64], channels: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&i, &w) in self.idx.iter().zip(&self.w) {
            let cell = &grid[i * channels..i * channels + out.len()];
            for (o, &g) in out.iter_mut().zip(cell) {
                *o += w * g;
            }
        }
    }

    /// Adjoint of [`Stencil::gather`]: adds `scale * w * grad` to each vertex.
    #[inline]
    pub fn scatter(&self, grid: &mut [f64], channels: usize, grad: &[f64], scale: f64) {
        for (&i, &w) in self.idx.iter().zip(&self.w) {
            let ws = w * scale;
            let cell = &mut grid[i * channels..i * channels + grad.len()];
            for (c, &g) in cell.iter_mut().zip(grad) {
                *c += ws * g;
            }
        }
    }
}
