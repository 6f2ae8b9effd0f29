use std::f64::consts::TAU;

use crate::error::{Error, Result};

/// Low-rank per-frame code `Z = Z̃ F`.
///
/// `coeffs` is `frames x rank` and `basis` is `rank x dim`, both row-major.
/// Row `t` of the product is the code `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCode {
    frames: usize,
    rank: usize,
    dim: usize,
    coeffs: Vec<f64>,
    basis: Vec<f64>,
}

impl TemporalCode {
    pub fn new(frames: usize, rank: usize, dim: usize, coeffs: Vec<f64>, basis: Vec<f64>) -> Result<Self> {
        if coeffs.len() != frames * rank || basis.len() != rank * dim {
            return Err(Error::Domain(format!(
                "temporal code shapes: coeffs {} (expected {frames}x{rank}), basis {} (expected {rank}x{dim})",
                coeffs.len(),
                basis.len()
            )));
        }
        Ok(TemporalCode {
            frames,
            rank,
            dim,
            coeffs,
            basis,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// `z_t`, row `t` of `coeffs * basis`.
    pub fn code(&self, t: usize) -> Result<Vec<f64>> {
        if t >= self.frames {
            return Err(Error::Domain(format!("frame {t} outside [0, {})", self.frames)));
        }
        let mut z = vec![0.0; self.dim];
        self.code_into(t, &mut z);
        Ok(z)
    }

    pub(crate) fn code_into(&self, t: usize, z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        let row = &self.coeffs[t * self.rank..(t + 1) * self.rank];
        for (p, &c) in row.iter().enumerate() {
            let b = &self.basis[p * self.dim..(p + 1) * self.dim];
            for (zd, &bd) in z.iter_mut().zip(b) {
                *zd += c * bd;
            }
        }
    }
}

/// Fixed Fourier-like basis: row `p` is a unit-norm sinusoid of frequency
/// `ceil(p / 2)` sampled at `dim` points, cosine for even `p` and sine for
/// odd `p`. Requires `rank <= dim`, which keeps every frequency below the
/// Nyquist limit.
pub fn fourier_basis(rank: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rank * dim];
    for p in 0..rank {
        let freq = p.div_ceil(2) as f64;
        let row = &mut out[p * dim..(p + 1) * dim];
        for (d, v) in row.iter_mut().enumerate() {
            let phase = TAU * freq * d as f64 / dim as f64;
            *v = if p % 2 == 0 { phase.cos() } else { phase.sin() };
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Fourier features of normalised time `t / frames`, one row per frame:
/// `[1, sin(2π t/T), cos(2π t/T), sin(4π t/T), ...]` truncated to `rank`.
pub fn fourier_time_features(frames: usize, rank: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames * rank];
    for t in 0..frames {
        let s = t as f64 / frames as f64;
        for p in 0..rank {
            let freq = p.div_ceil(2) as f64;
            let phase = TAU * freq * s;
            out[t * rank + p] = if p == 0 {
                1.0
            } else if p % 2 == 1 {
                phase.sin()
            } else {
                phase.cos()
            };
        }
    }
    out
}
