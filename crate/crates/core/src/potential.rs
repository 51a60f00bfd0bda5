//! Free-space potential theory.
//!
//! `psi0 = (1/2pi) int ln|x - y| f(y) dy` and its gradient are evaluated from a
//! grid vorticity by midpoint quadrature, with the cells next to the target
//! integrated exactly (constant density per cell), or from vortex blobs.
//! The single-disk reflection `V^a[A](z) = a^2 A.z / |z|^2` solves the exterior
//! Dirichlet problem with data `A.z` on `|z| = a` and vanishes at infinity.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::euler::VortexParticles;
use crate::geometry::PorousConfig;
use crate::grid::{Rect, ScalarGridField, Vec2};

/// Cells whose center is within this many spacings of the target are
/// integrated exactly.
const NEAR_CELLS: f64 = 2.5;

/// Vorticity generating the free-space stream function `psi0`.
#[derive(Clone, Debug)]
pub enum Source {
    /// Piecewise-constant density on a grid.
    Grid(ScalarGridField),
    /// Vortex blobs.
    Particles(VortexParticles),
    /// Harmonic background `psi0(x) = g . x` (no vorticity); used for
    /// linearized boundary data.
    Linear(Vec2),
}

impl Source {
    pub fn zero() -> Self {
        Source::Linear(Vec2::zeros())
    }

    pub fn psi0(&self, x: Vec2) -> f64 {
        match self {
            Source::Grid(f) => psi0_eval(f, x),
            Source::Particles(p) => p.stream(x),
            Source::Linear(g) => g.dot(&x),
        }
    }

    pub fn grad_psi0(&self, x: Vec2) -> Vec2 {
        match self {
            Source::Grid(f) => grad_psi0_eval(f, x),
            Source::Particles(p) => p.stream_gradient(x),
            Source::Linear(g) => *g,
        }
    }

    /// Gradients at many targets, evaluated in parallel.
    pub fn grad_psi0_batch(&self, xs: &[Vec2]) -> Vec<Vec2> {
        xs.par_iter().map(|x| self.grad_psi0(*x)).collect()
    }

    /// Total vorticity `int f`.
    pub fn mass(&self) -> f64 {
        match self {
            Source::Grid(f) => f.integral(),
            Source::Particles(p) => p.total_circulation(),
            Source::Linear(_) => 0.0,
        }
    }

    /// Errors if the vorticity support meets a hole.
    pub fn check_disjoint(&self, config: &PorousConfig) -> Result<()> {
        if config.a <= 0.0 {
            return Ok(());
        }
        match self {
            Source::Grid(f) => {
                for (cell, _) in f.nonzero_cells() {
                    let hit = config.centers.iter().position(|c| {
                        let nearest = Vec2::new(c.x.clamp(cell.x0, cell.x1), c.y.clamp(cell.y0, cell.y1));
                        (nearest - c).norm() < config.a
                    });
                    if let Some(hole) = hit {
                        return Err(Error::SupportOverlap(hole));
                    }
                }
                Ok(())
            }
            Source::Particles(p) => {
                for (x, w) in p.positions.iter().zip(&p.weights) {
                    if *w != 0.0 {
                        if let Some(hole) = config.hole_containing(*x) {
                            return Err(Error::SupportOverlap(hole));
                        }
                    }
                }
                Ok(())
            }
            Source::Linear(_) => Ok(()),
        }
    }
}

/// `int_rect ln|x - y| dy` in closed form.
pub fn log_rect_integral(x: Vec2, r: &Rect) -> f64 {
    // P(u, v) = int_0^u int_0^v ln(s^2 + t^2) dt ds.
    fn p(u: f64, v: f64) -> f64 {
        let r2 = u * u + v * v;
        if r2 == 0.0 {
            return 0.0;
        }
        let mut out = -3.0 * u * v;
        if u != 0.0 && v != 0.0 {
            out += u * v * r2.ln();
        }
        if u != 0.0 {
            out += u * u * (v / u).atan();
        }
        if v != 0.0 {
            out += v * v * (u / v).atan();
        }
        out
    }
    let (ax, bx) = (r.x0 - x.x, r.x1 - x.x);
    let (ay, by) = (r.y0 - x.y, r.y1 - x.y);
    0.5 * (p(bx, by) - p(ax, by) - p(bx, ay) + p(ax, ay))
}

/// `int_rect (x - y) / |x - y|^2 dy` in closed form.
pub fn grad_log_rect_integral(x: Vec2, r: &Rect) -> Vec2 {
    // Q(u, v) = int_0^u int_0^v s / (s^2 + t^2) dt ds, up to terms in v alone.
    fn q(u: f64, v: f64) -> f64 {
        let r2 = u * u + v * v;
        let mut out = 0.0;
        if u != 0.0 {
            out += u * (v / u).atan();
        }
        if v != 0.0 && r2 > 0.0 {
            out += 0.5 * v * r2.ln();
        }
        out
    }
    let corners = |f: &dyn Fn(f64, f64) -> f64| {
        let (ax, bx) = (r.x0 - x.x, r.x1 - x.x);
        let (ay, by) = (r.y0 - x.y, r.y1 - x.y);
        f(bx, by) - f(ax, by) - f(bx, ay) + f(ax, ay)
    };
    // With u = y - x the integrand is -u / |u|^2.
    let gx = -corners(&|u, v| q(u, v));
    let gy = -corners(&|u, v| q(v, u));
    Vec2::new(gx, gy)
}

/// `psi0(x)` for a grid vorticity.
pub fn psi0_eval(f: &ScalarGridField, x: Vec2) -> f64 {
    let s = &f.spec;
    let near2 = (NEAR_CELLS * s.h).powi(2);
    let area = s.cell_area();
    let mut acc = 0.0;
    for (idx, v) in f.values.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let c = s.center_of(idx);
        let r2 = (x - c).norm_squared();
        if r2 < near2 {
            acc += v * log_rect_integral(x, &s.cell_rect(idx % s.nx, idx / s.nx));
        } else {
            acc += v * 0.5 * r2.ln() * area;
        }
    }
    acc / (2.0 * PI)
}

/// `grad psi0(x) = (1/2pi) int (x - y)/|x - y|^2 f(y) dy` for a grid vorticity.
pub fn grad_psi0_eval(f: &ScalarGridField, x: Vec2) -> Vec2 {
    let s = &f.spec;
    let near2 = (NEAR_CELLS * s.h).powi(2);
    let area = s.cell_area();
    let mut acc = Vec2::zeros();
    for (idx, v) in f.values.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let c = s.center_of(idx);
        let z = x - c;
        let r2 = z.norm_squared();
        if r2 < near2 {
            acc += *v * grad_log_rect_integral(x, &s.cell_rect(idx % s.nx, idx / s.nx));
        } else {
            acc += z * (*v * area / r2);
        }
    }
    acc / (2.0 * PI)
}

/// A disk hole of radius `a` at `center` carrying the reflection `V^a[moment]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DipoleSpec {
    pub center: Vec2,
    pub a: f64,
    pub moment: Vec2,
}

impl DipoleSpec {
    fn offset(&self, x: Vec2) -> Result<Vec2> {
        let z = x - self.center;
        if z.norm_squared() < self.a * self.a * (1.0 - 1e-12) {
            return Err(Error::InsideHole { hole: 0, x: x.x, y: x.y });
        }
        Ok(z)
    }
}

/// `V^a[A](x - center) = a^2 A.z / |z|^2`.
pub fn dipole_eval(spec: &DipoleSpec, x: Vec2) -> Result<f64> {
    let z = spec.offset(x)?;
    Ok(dipole_value(spec.a, spec.moment, z))
}

/// Exact gradient `a^2 [A/|z|^2 - 2 (A.z) z / |z|^4]`.
pub fn dipole_grad(spec: &DipoleSpec, x: Vec2) -> Result<Vec2> {
    let z = spec.offset(x)?;
    Ok(dipole_gradient(spec.a, spec.moment, z))
}

#[inline]
pub(crate) fn dipole_value(a: f64, moment: Vec2, z: Vec2) -> f64 {
    let r2 = z.norm_squared();
    a * a * moment.dot(&z) / r2
}

#[inline]
pub(crate) fn dipole_gradient(a: f64, moment: Vec2, z: Vec2) -> Vec2 {
    let r2 = z.norm_squared();
    let a2 = a * a;
    (moment - z * (2.0 * moment.dot(&z) / r2)) * (a2 / r2)
}

/// Sampled diagnostics for the `L^inf` gradient bound and the log-Lipschitz
/// modulus of `grad psi0`, reported with reference constant 1.
#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub sup_grad: f64,
    pub l1: f64,
    pub linf: f64,
    /// `||f||_1^(1/2) ||f||_inf^(1/2)`.
    pub bound_value: f64,
    /// `sup_grad / bound_value` (0 when `f = 0`).
    pub bound_ratio: f64,
    /// Max over sampled pairs of `|grad psi0(x) - grad psi0(y)| / ((||f||_1 + ||f||_inf) h(|x - y|))`.
    pub modulus_ratio: f64,
    pub pairs: usize,
}

/// `h(r) = r max(-ln r, 1)`.
pub fn log_lipschitz_modulus(r: f64) -> f64 {
    r * (-r.ln()).max(1.0)
}

pub fn psi0_bounds_check(f: &ScalarGridField, pairs: usize, seed: u64) -> BoundsReport {
    let (l1, linf) = (f.l1_norm(), f.sup_norm());
    let Some(supp) = f.support_rect() else {
        return BoundsReport {
            sup_grad: 0.0,
            l1,
            linf,
            bound_value: 0.0,
            bound_ratio: 0.0,
            modulus_ratio: 0.0,
            pairs: 0,
        };
    };
    // Cell corners over the support (strided to at most ~20000 points), then
    // rings about the support center out to twice its half-width.
    let c = supp.center();
    let radius = 0.5 * supp.width().max(supp.height());
    let (ni, nj) = ((supp.width() / f.spec.h).round() as usize + 1, (supp.height() / f.spec.h).round() as usize + 1);
    let stride = ((ni * nj) as f64 / 20000.0).sqrt().ceil().max(1.0) as usize;
    let mut samples = Vec::new();
    for j in (0..nj).step_by(stride) {
        for i in (0..ni).step_by(stride) {
            samples.push(Vec2::new(supp.x0 + i as f64 * f.spec.h, supp.y0 + j as f64 * f.spec.h));
        }
    }
    for j in 1..=32 {
        let r = radius * j as f64 / 16.0;
        for m in 0..64 {
            let th = 2.0 * PI * m as f64 / 64.0;
            samples.push(c + Vec2::new(r * th.cos(), r * th.sin()));
        }
    }
    let grads: Vec<Vec2> = samples.par_iter().map(|x| grad_psi0_eval(f, *x)).collect();
    let sup_grad = grads.iter().fold(0.0, |m: f64, g| m.max(g.norm()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = supp.expand(radius);
    let pts: Vec<(Vec2, Vec2)> = (0..pairs)
        .map(|_| {
            let x = Vec2::new(rng.random_range(window.x0..window.x1), rng.random_range(window.y0..window.y1));
            let dir = rng.random_range(0.0..2.0 * PI);
            let len = radius * 10f64.powf(rng.random_range(-3.0..0.0));
            (x, x + len * Vec2::new(dir.cos(), dir.sin()))
        })
        .collect();
    let modulus_ratio = pts
        .par_iter()
        .map(|(x, y)| {
            let diff = (grad_psi0_eval(f, *x) - grad_psi0_eval(f, *y)).norm();
            diff / ((l1 + linf) * log_lipschitz_modulus((x - y).norm()))
        })
        .reduce(|| 0.0, f64::max);
    let bound_value = (l1 * linf).sqrt();
    BoundsReport {
        sup_grad,
        l1,
        linf,
        bound_value,
        bound_ratio: if bound_value > 0.0 { sup_grad / bound_value } else { 0.0 },
        modulus_ratio,
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn unit_disk(h: f64) -> ScalarGridField {
        let spec = GridSpec::covering(&Rect::new(-1.0 - 2.0 * h, -1.0 - 2.0 * h, 1.0 + 2.0 * h, 1.0 + 2.0 * h).unwrap(), h)
            .unwrap();
        ScalarGridField::disk_indicator(spec, Vec2::zeros(), 1.0, 1.0)
    }

    /// Tensor Gauss-Legendre reference on a rectangle split into many tiles.
    fn brute_rect(x: Vec2, r: &Rect, f: impl Fn(Vec2) -> f64) -> f64 {
        let nodes = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
        let weights = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
        let tiles = 200;
        let (tw, th) = (r.width() / tiles as f64, r.height() / tiles as f64);
        let mut acc = 0.0;
        for tj in 0..tiles {
            for ti in 0..tiles {
                let (cx, cy) = (r.x0 + (ti as f64 + 0.5) * tw, r.y0 + (tj as f64 + 0.5) * th);
                for (p, wp) in nodes.iter().zip(weights) {
                    for (q, wq) in nodes.iter().zip(weights) {
                        let y = Vec2::new(cx + 0.5 * tw * p, cy + 0.5 * th * q);
                        acc += wp * wq * f(y - x) * 0.25 * tw * th;
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn closed_form_cell_integrals_match_quadrature() {
        let r = Rect::new(0.1, -0.2, 0.35, 0.05).unwrap();
        for x in [Vec2::new(0.2, -0.1), Vec2::new(-0.3, 0.4), Vec2::new(0.1, 0.05), Vec2::new(0.5, -0.07)] {
            let exact = log_rect_integral(x, &r);
            let num = brute_rect(x, &r, |u| u.norm().ln());
            assert!((exact - num).abs() < 1e-6, "log at {x:?}: {exact} vs {num}");
            let g = grad_log_rect_integral(x, &r);
            let gx = brute_rect(x, &r, |u| -u.x / u.norm_squared());
            let gy = brute_rect(x, &r, |u| -u.y / u.norm_squared());
            assert!((g.x - gx).abs() < 1e-4 && (g.y - gy).abs() < 1e-4, "grad at {x:?}: {g:?} vs ({gx}, {gy})");
        }
        let centered = grad_log_rect_integral(Vec2::new(0.225, -0.075), &r);
        assert!(centered.norm() < 1e-14);
    }

    #[test]
    fn zero_source_gives_zero() {
        let spec = GridSpec::covering(&Rect::unit(), 0.1).unwrap();
        let f = ScalarGridField::zeros(spec);
        assert_eq!(psi0_eval(&f, Vec2::new(0.3, 0.2)), 0.0);
        assert_eq!(grad_psi0_eval(&f, Vec2::new(0.3, 0.2)), Vec2::zeros());
        let rep = psi0_bounds_check(&f, 100, 1);
        assert_eq!((rep.sup_grad, rep.bound_value, rep.modulus_ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unit_disk_values() {
        let f = unit_disk(1.0 / 128.0);
        let psi = psi0_eval(&f, Vec2::new(2.0, 0.0));
        assert!((psi - 0.5 * 2f64.ln()).abs() < 1e-3, "psi = {psi}");
        let g = grad_psi0_eval(&f, Vec2::new(2.0, 0.0));
        assert!((g - Vec2::new(0.25, 0.0)).norm() < 1e-3, "g = {g:?}");
        let g_in = grad_psi0_eval(&f, Vec2::new(0.5, 0.0));
        assert!((g_in - Vec2::new(0.25, 0.0)).norm() < 1e-3, "g_in = {g_in:?}");
    }

    #[test]
    fn translation_covariance() {
        let h = 1.0 / 32.0;
        let spec = GridSpec::covering(&Rect::new(-0.5, -0.5, 0.5, 0.5).unwrap(), h).unwrap();
        let f = ScalarGridField::disk_indicator(spec, Vec2::zeros(), 0.4, 1.0);
        let shift = Vec2::new(3.0 * h, -5.0 * h);
        let mut moved = f.clone();
        moved.spec.origin = [spec.origin[0] + shift.x, spec.origin[1] + shift.y];
        let x = Vec2::new(0.9, 0.3);
        assert!((psi0_eval(&f, x) - psi0_eval(&moved, x + shift)).abs() < 1e-12);
    }

    #[test]
    fn far_field_deviation_decays_quadratically() {
        let spec = GridSpec::covering(&Rect::new(-0.5, -0.5, 0.7, 0.5).unwrap(), 1.0 / 32.0).unwrap();
        let f = ScalarGridField::from_fn(spec, |p| if p.x > 0.0 { 1.0 + p.y } else { 0.3 });
        let mass = f.integral();
        let dev = |r: f64| {
            let x = Vec2::new(r * 0.6, r * 0.8);
            (grad_psi0_eval(&f, x) - x * (mass / (2.0 * PI * x.norm_squared()))).norm()
        };
        let ratio = dev(10.0) / dev(20.0);
        assert!((ratio - 4.0).abs() < 1.2, "ratio = {ratio}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = GridSpec::covering(&Rect::new(-0.5, -0.5, 0.5, 0.5).unwrap(), 1.0 / 32.0).unwrap();
        let f = ScalarGridField::disk_indicator(spec, Vec2::new(0.1, 0.0), 0.3, 2.0);
        let x = Vec2::new(1.2, -0.4);
        let e = 1e-5;
        let fd = Vec2::new(
            (psi0_eval(&f, x + Vec2::new(e, 0.0)) - psi0_eval(&f, x - Vec2::new(e, 0.0))) / (2.0 * e),
            (psi0_eval(&f, x + Vec2::new(0.0, e)) - psi0_eval(&f, x - Vec2::new(0.0, e))) / (2.0 * e),
        );
        let g = grad_psi0_eval(&f, x);
        assert!((g - fd).norm() / g.norm() < 1e-4);
    }

    #[test]
    fn dipole_closed_forms() {
        let spec = DipoleSpec { center: Vec2::new(1.0, 2.0), a: 0.1, moment: Vec2::new(1.0, 0.0) };
        let on_boundary = dipole_eval(&spec, spec.center + Vec2::new(0.1, 0.0)).unwrap();
        assert!((on_boundary - 0.1).abs() < 1e-15);
        assert!((dipole_eval(&spec, spec.center + Vec2::new(1.0, 0.0)).unwrap() - 0.01).abs() < 1e-15);
        let gx = dipole_grad(&spec, spec.center + Vec2::new(0.5, 0.0)).unwrap();
        assert!((gx - Vec2::new(-0.04, 0.0)).norm() < 1e-15);
        let gy = dipole_grad(&spec, spec.center + Vec2::new(0.0, 0.5)).unwrap();
        assert!((gy - Vec2::new(0.04, 0.0)).norm() < 1e-15);
        let zero = DipoleSpec { moment: Vec2::zeros(), ..spec };
        assert_eq!(dipole_eval(&zero, Vec2::new(7.0, 1.0)).unwrap(), 0.0);
        assert!(matches!(dipole_eval(&spec, spec.center), Err(Error::InsideHole { .. })));
        assert!(dipole_grad(&spec, spec.center + Vec2::new(0.05, 0.0)).is_err());
    }

    #[test]
    fn dipole_gradient_matches_finite_differences() {
        let spec = DipoleSpec { center: Vec2::new(-0.2, 0.3), a: 0.1, moment: Vec2::new(0.7, -1.3) };
        let x = spec.center + Vec2::new(0.3, 0.4);
        let e = 1e-6;
        let fd = Vec2::new(
            (dipole_eval(&spec, x + Vec2::new(e, 0.0)).unwrap() - dipole_eval(&spec, x - Vec2::new(e, 0.0)).unwrap()) / (2.0 * e),
            (dipole_eval(&spec, x + Vec2::new(0.0, e)).unwrap() - dipole_eval(&spec, x - Vec2::new(0.0, e)).unwrap()) / (2.0 * e),
        );
        let g = dipole_grad(&spec, x).unwrap();
        assert!((g - fd).norm() / g.norm() < 1e-6);
    }

    #[test]
    fn dipole_decay_and_zero_flux() {
        let spec = DipoleSpec { center: Vec2::zeros(), a: 0.2, moment: Vec2::new(0.3, 0.9) };
        let z = Vec2::new(0.7, -0.4);
        let (v1, v2) = (dipole_eval(&spec, z).unwrap(), dipole_eval(&spec, 2.0 * z).unwrap());
        assert!((v1 / v2 - 2.0).abs() < 1e-12);
        let (g1, g2) = (dipole_grad(&spec, z).unwrap(), dipole_grad(&spec, 2.0 * z).unwrap());
        assert!((g1.norm() / g2.norm() - 4.0).abs() < 1e-12);

        let (m, r) = (256, 2.0 * spec.a);
        let flux: f64 = (0..m)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / m as f64;
                let n = Vec2::new(th.cos(), th.sin());
                dipole_grad(&spec, r * n).unwrap().dot(&n) * r * 2.0 * PI / m as f64
            })
            .sum();
        assert!(flux.abs() < 1e-10);
    }

    #[test]
    fn bounds_check_unit_disk() {
        let f = unit_disk(1.0 / 64.0);
        let rep = psi0_bounds_check(&f, 1000, 7);
        assert!((rep.sup_grad - 0.5).abs() < 2e-3, "sup = {}", rep.sup_grad);
        assert!(rep.modulus_ratio.is_finite() && rep.modulus_ratio > 0.0);
        assert!((rep.bound_value - PI.sqrt()).abs() < 1e-2);
    }

    #[test]
    fn support_overlap_detection() {
        let spec = GridSpec::covering(&Rect::new(-0.5, -0.5, 0.5, 0.5).unwrap(), 0.05).unwrap();
        let f = ScalarGridField::disk_indicator(spec, Vec2::zeros(), 0.3, 1.0);
        let near = PorousConfig::single(Vec2::new(0.32, 0.0), 0.05, 0.25, Rect::new(0.2, -0.2, 0.6, 0.2).unwrap()).unwrap();
        assert!(matches!(Source::Grid(f.clone()).check_disjoint(&near), Err(Error::SupportOverlap(0))));
        let far = PorousConfig::single(Vec2::new(3.0, 0.0), 0.05, 0.25, Rect::new(2.5, -0.5, 3.5, 0.5).unwrap()).unwrap();
        assert!(Source::Grid(f).check_disjoint(&far).is_ok());
    }
}
