//! Homogenized problem `div((I + k M) grad psi_c) = f`.
//!
//! Gradients are stored on the grid of the volume fraction `k`. The operator
//! `L g = grad Lap^{-1} div(k M g)` has two backends: a padded periodic FFT and
//! a direct principal-value sum with the local term `w/2`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Matrix2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::{smooth_size, Fft2};
use crate::geometry::VolumeFraction;
use crate::grid::{perp, GridSpec, Vec2, VectorGridField};
use crate::potential::{grad_log_rect_integral, Source};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
pub const DEFAULT_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveMatrix {
    pub m: Matrix2<f64>,
    pub m_hat: Matrix2<f64>,
}

impl EffectiveMatrix {
    pub fn new(m: Matrix2<f64>) -> Self {
        let m_hat = Matrix2::new(m[(1, 1)], -m[(1, 0)], -m[(0, 1)], m[(0, 0)]);
        EffectiveMatrix { m, m_hat }
    }

    /// `M = 2 I` for disk holes.
    pub fn disk() -> Self {
        EffectiveMatrix::new(Matrix2::identity() * 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Backend {
    /// Periodic FFT on a box `pad` times larger in each direction.
    Spectral { pad: usize },
    /// Direct principal-value quadrature.
    Direct,
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Spectral { pad: DEFAULT_PAD }
    }
}

/// `k M g` on the grid of `k`.
pub fn weighted_field(g: &VectorGridField, k: &VolumeFraction, m: &EffectiveMatrix) -> Result<VectorGridField> {
    if g.spec != k.field.spec {
        return Err(Error::InvalidInput("gradient and volume fraction grids differ".into()));
    }
    Ok(VectorGridField {
        spec: g.spec,
        values: g.values.iter().zip(&k.field.values).map(|(v, kv)| if *kv == 0.0 { Vec2::zeros() } else { *kv * (m.m * v) }).collect(),
    })
}

/// `L g = grad Lap^{-1} div(k M g)` on the grid of `k`.
pub fn apply_l(g: &VectorGridField, k: &VolumeFraction, m: &EffectiveMatrix, backend: Backend) -> Result<VectorGridField> {
    let w = weighted_field(g, k, m)?;
    match backend {
        Backend::Spectral { pad } => project_spectral(&w, pad),
        Backend::Direct => Ok(project_direct(&w)),
    }
}

/// `grad Lap^{-1} div w` by a periodic FFT on a zero-padded box.
///
/// The multiplier is `xi xi^T / |xi|^2`; the mean mode receives its angular
/// average `I/2`, which matches the free-space mean over a square box.
pub fn project_spectral(w: &VectorGridField, pad: usize) -> Result<VectorGridField> {
    if pad < 2 {
        return Err(Error::Padding(pad));
    }
    let s = w.spec;
    let (px, py) = (smooth_size(pad * s.nx), smooth_size(pad * s.ny));
    let (lx, ly) = (px as f64 * s.h, py as f64 * s.h);
    let fft = Fft2::new(px, py);
    let load = |axis: usize| {
        let mut buf = vec![Complex64::new(0.0, 0.0); px * py];
        for j in 0..s.ny {
            for i in 0..s.nx {
                buf[j * px + i] = Complex64::new(w.values[s.index(i, j)][axis], 0.0);
            }
        }
        fft.forward(&mut buf);
        buf
    };
    let (mut bx, mut by) = (load(0), load(1));
    for jy in 0..py {
        for ix in 0..px {
            let idx = jy * px + ix;
            let (Some(kx), Some(ky)) = (Fft2::wavenumber(ix, px, lx), Fft2::wavenumber(jy, py, ly)) else {
                bx[idx] = Complex64::new(0.0, 0.0);
                by[idx] = Complex64::new(0.0, 0.0);
                continue;
            };
            let k2 = kx * kx + ky * ky;
            if k2 == 0.0 {
                bx[idx] *= 0.5;
                by[idx] *= 0.5;
                continue;
            }
            let dotk = (kx * bx[idx] + ky * by[idx]) / k2;
            bx[idx] = kx * dotk;
            by[idx] = ky * dotk;
        }
    }
    fft.inverse(&mut bx);
    fft.inverse(&mut by);
    let mut out = VectorGridField::zeros(s);
    for j in 0..s.ny {
        for i in 0..s.nx {
            out.values[s.index(i, j)] = Vec2::new(bx[j * px + i].re, by[j * px + i].re);
        }
    }
    Ok(out)
}

/// Second-derivative kernel `(delta_ij |z|^2 - 2 z_i z_j) / (2 pi |z|^4)` applied to `w`.
#[inline]
fn hessian_kernel(z: Vec2, w: Vec2) -> Vec2 {
    let r2 = z.norm_squared();
    (w * r2 - z * (2.0 * z.dot(&w))) / (2.0 * PI * r2 * r2)
}

/// Direct principal-value quadrature of `grad Lap^{-1} div w` at the cell centers.
pub fn project_direct(w: &VectorGridField) -> VectorGridField {
    let s = w.spec;
    let sources: Vec<(usize, Vec2, Vec2)> =
        w.values.iter().enumerate().filter(|(_, v)| **v != Vec2::zeros()).map(|(i, v)| (i, s.center_of(i), *v * s.cell_area())).collect();
    let values = (0..s.len())
        .into_par_iter()
        .map(|t| {
            let x = s.center_of(t);
            let mut acc = 0.5 * w.values[t];
            for (idx, y, wy) in &sources {
                if *idx != t {
                    acc += hessian_kernel(x - y, *wy);
                }
            }
            acc
        })
        .collect();
    VectorGridField { spec: s, values }
}

/// `grad Lap^{-1} div w` at an arbitrary point. Cells within two spacings of
/// `x` are refined 4x4; the cell containing `x` contributes `w/2`.
pub fn projection_at(w: &VectorGridField, x: Vec2) -> Vec2 {
    let s = &w.spec;
    let near2 = (2.0 * s.h).powi(2);
    let own = s.locate(x).map(|(i, j)| s.index(i, j));
    let area = s.cell_area();
    let mut acc = Vec2::zeros();
    for (idx, v) in w.values.iter().enumerate() {
        if *v == Vec2::zeros() {
            continue;
        }
        if Some(idx) == own {
            acc += 0.5 * v;
            continue;
        }
        let c = s.center_of(idx);
        let z = x - c;
        if z.norm_squared() < near2 {
            let sub = 4;
            let hs = s.h / sub as f64;
            for q in 0..sub * sub {
                let y = c + Vec2::new(((q % sub) as f64 + 0.5) * hs - 0.5 * s.h, ((q / sub) as f64 + 0.5) * hs - 0.5 * s.h);
                acc += hessian_kernel(x - y, *v * hs * hs);
            }
        } else {
            acc += hessian_kernel(z, *v * area);
        }
    }
    acc
}

/// `Lap^{-1} div w (x) = (1/2pi) int (x - y).w(y) / |x - y|^2 dy`, exact for
/// piecewise-constant `w`.
pub fn potential_of_divergence(w: &VectorGridField, x: Vec2) -> f64 {
    let s = &w.spec;
    let mut acc = 0.0;
    for (idx, v) in w.values.iter().enumerate() {
        if *v == Vec2::zeros() {
            continue;
        }
        let c = s.center_of(idx);
        let z = x - c;
        let r2 = z.norm_squared();
        if r2 < (3.0 * s.h).powi(2) {
            acc += v.dot(&grad_log_rect_integral(x, &s.cell_rect(idx % s.nx, idx / s.nx)));
        } else {
            acc += v.dot(&z) * s.cell_area() / r2;
        }
    }
    acc / (2.0 * PI)
}

/// `grad psi0` at the cell centers of `spec`.
pub fn grad_psi0_on(source: &Source, spec: GridSpec) -> VectorGridField {
    let pts: Vec<Vec2> = spec.centers().collect();
    VectorGridField { spec, values: source.grad_psi0_batch(&pts) }
}

#[derive(Clone, Debug)]
pub struct HomogSolution {
    pub grad: VectorGridField,
    pub iterations: usize,
    /// Relative L2 increments, one per iteration.
    pub increments: Vec<f64>,
    pub last_increment: f64,
}

impl HomogSolution {
    /// `u_c = grad^perp psi_c` by bilinear interpolation.
    pub fn velocity_c(&self, x: Vec2) -> Result<Vec2> {
        Ok(perp(self.grad.interpolate(x)?))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.grad.write_csv(w)
    }
}

/// Neumann iteration `g_n = grad psi0 - L g_{n-1}` from `g_0 = start`.
pub fn solve_from(
    grad_psi0: &VectorGridField,
    start: &VectorGridField,
    k: &VolumeFraction,
    m: &EffectiveMatrix,
    backend: Backend,
    tol: f64,
    max_iter: usize,
) -> Result<HomogSolution> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput("tolerance must be positive and max_iter at least 1".into()));
    }
    let mut g = start.clone();
    let mut increments = Vec::new();
    for it in 1..=max_iter {
        let lg = apply_l(&g, k, m, backend)?;
        let next = grad_psi0.zip_with(&lg, |p, l| p - l);
        let inc = (&next - &g).l2_norm();
        let scale = next.l2_norm();
        let rel = if scale > 0.0 { inc / scale } else { inc };
        increments.push(rel);
        g = next;
        if rel < tol {
            return Ok(HomogSolution { grad: g, iterations: it, last_increment: rel, increments });
        }
        let n = increments.len();
        if n >= 3 && increments[n - 1] > increments[n - 2] && increments[n - 2] > increments[n - 3] {
            return Err(Error::NonContraction(increments));
        }
    }
    let last_increment = *increments.last().unwrap();
    Ok(HomogSolution { grad: g, iterations: max_iter, last_increment, increments })
}

pub fn solve_psic(
    grad_psi0: &VectorGridField,
    k: &VolumeFraction,
    m: &EffectiveMatrix,
    backend: Backend,
    tol: f64,
    max_iter: usize,
) -> Result<HomogSolution> {
    solve_from(grad_psi0, grad_psi0, k, m, backend, tol, max_iter)
}

/// `grad psi~_c = grad psi0 - L grad psi0`.
pub fn first_order_expansion(grad_psi0: &VectorGridField, k: &VolumeFraction, m: &EffectiveMatrix, backend: Backend) -> Result<VectorGridField> {
    let lg = apply_l(grad_psi0, k, m, backend)?;
    Ok(grad_psi0.zip_with(&lg, |p, l| p - l))
}
