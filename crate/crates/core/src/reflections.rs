//! Method of reflections.
//!
//! Level 1 cancels the linear part of `psi0` on every hole,
//! `A_l = -grad psi0(x_l)`; level `n + 1` cancels the linear part of the
//! fields created at level `n` by all other holes. The stream function after
//! `n` levels is `psi0 + sum_j sum_l V^a[A_l^(j)](x - x_l)`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::PorousConfig;
use crate::grid::{perp, GridSpec, Vec2, VectorGridField};
use crate::potential::{dipole_gradient, dipole_value, Source};

/// Harmonic correction added to `psi0` by a perforated-domain solver.
pub trait StreamCorrection: Sync {
    fn correction(&self, x: Vec2) -> f64;
    fn correction_grad(&self, x: Vec2) -> Vec2;
}

/// Per-hole vectors of one reflection level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DipoleSet {
    pub level: usize,
    pub vectors: Vec<Vec2>,
}

impl DipoleSet {
    pub fn zeros(level: usize, holes: usize) -> Self {
        DipoleSet { level, vectors: vec![Vec2::zeros(); holes] }
    }

    /// `l^q` norm of the vector lengths; `q = inf` gives the maximum.
    pub fn norm(&self, q: f64) -> f64 {
        lq(self.vectors.iter().map(|v| v.norm()), q)
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.x.is_finite() && v.y.is_finite())
    }
}

fn lq(values: impl Iterator<Item = f64>, q: f64) -> f64 {
    if q.is_infinite() {
        values.fold(0.0, f64::max)
    } else {
        values.map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

/// Exponents for which level norms are recorded.
pub const NORM_EXPONENTS: [f64; 3] = [2.0, 4.0, f64::INFINITY];

/// `A^(1)_l = -grad psi0(x_l)`.
pub fn init_dipoles(source: &Source, config: &PorousConfig) -> Result<DipoleSet> {
    source.check_disjoint(config)?;
    let grads = source.grad_psi0_batch(&config.centers);
    Ok(DipoleSet { level: 1, vectors: grads.into_iter().map(|g| -g).collect() })
}

/// `A^(n+1)_l = -sum_{m != l} grad V^a[A^(n)_m](x_l - x_m)`.
pub fn iterate_dipoles(prev: &DipoleSet, config: &PorousConfig) -> DipoleSet {
    let c = &config.centers;
    let vectors = (0..c.len())
        .into_par_iter()
        .map(|l| {
            let mut acc = Vec2::zeros();
            for (m, (xm, am)) in c.iter().zip(&prev.vectors).enumerate() {
                if m != l {
                    acc -= dipole_gradient(config.a, *am, c[l] - xm);
                }
            }
            acc
        })
        .collect();
    DipoleSet { level: prev.level + 1, vectors }
}

/// `psi0` plus the dipole corrections of the stored levels.
#[derive(Clone, Debug)]
pub struct HybridStream {
    pub source: Source,
    pub config: PorousConfig,
    pub levels: Vec<DipoleSet>,
    /// Sum of all stored levels per hole.
    total: Vec<Vec2>,
}

impl HybridStream {
    fn from_levels(source: Source, config: PorousConfig, levels: Vec<DipoleSet>) -> Self {
        let mut total = vec![Vec2::zeros(); config.len()];
        for set in &levels {
            for (t, v) in total.iter_mut().zip(&set.vectors) {
                *t += v;
            }
        }
        HybridStream { source, config, levels, total }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// The same stream truncated to its first `n` levels.
    pub fn truncated(&self, n: usize) -> HybridStream {
        let n = n.clamp(1, self.depth());
        HybridStream::from_levels(self.source.clone(), self.config.clone(), self.levels[..n].to_vec())
    }

    /// Summed moments per hole.
    pub fn total_moments(&self) -> &[Vec2] {
        &self.total
    }

    /// Level norms as `(level, q, norm)` rows.
    pub fn norm_table(&self) -> Vec<(usize, f64, f64)> {
        let mut rows = Vec::new();
        for set in &self.levels {
            for q in NORM_EXPONENTS {
                rows.push((set.level, q, set.norm(q)));
            }
        }
        rows
    }

    pub fn norms(&self, q: f64) -> Vec<f64> {
        self.levels.iter().map(|s| s.norm(q)).collect()
    }

    pub fn stream_eval(&self, x: Vec2) -> Result<f64> {
        self.config.check_fluid(x)?;
        Ok(self.source.psi0(x) + self.correction(x))
    }

    pub fn stream_grad(&self, x: Vec2) -> Result<Vec2> {
        self.config.check_fluid(x)?;
        Ok(self.source.grad_psi0(x) + self.correction_grad(x))
    }

    /// `u = grad^perp psi`.
    pub fn velocity_eval(&self, x: Vec2) -> Result<Vec2> {
        Ok(perp(self.stream_grad(x)?))
    }

    /// Largest deviation of `psi` from its mean over `pts` equispaced points
    /// on each hole boundary.
    pub fn boundary_residual(&self, pts: usize) -> f64 {
        let a = self.config.a;
        self.config
            .centers
            .par_iter()
            .map(|c| {
                let vals: Vec<f64> = (0..pts)
                    .map(|k| {
                        let th = 2.0 * PI * k as f64 / pts as f64;
                        let x = c + a * Vec2::new(th.cos(), th.sin());
                        self.source.psi0(x) + self.correction(x)
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / pts as f64;
                vals.iter().fold(0.0, |m: f64, v| m.max((v - mean).abs()))
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Writes `level,hole_index,Ax,Ay` rows.
    pub fn write_dipoles_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["level", "hole_index", "Ax", "Ay"])?;
        for set in &self.levels {
            for (i, v) in set.vectors.iter().enumerate() {
                out.write_record(&[set.level.to_string(), i.to_string(), fmt(v.x), fmt(v.y)])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `level,q,norm` rows.
    pub fn write_norms_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["level", "q", "norm"])?;
        for (level, q, n) in self.norm_table() {
            let q = if q.is_infinite() { "inf".to_string() } else { q.to_string() };
            out.write_record(&[level.to_string(), q, fmt(n)])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

impl StreamCorrection for HybridStream {
    fn correction(&self, x: Vec2) -> f64 {
        let a = self.config.a;
        self.config.centers.iter().zip(&self.total).map(|(c, m)| dipole_value(a, *m, x - c)).sum()
    }

    fn correction_grad(&self, x: Vec2) -> Vec2 {
        let a = self.config.a;
        let mut acc = Vec2::zeros();
        for (c, m) in self.config.centers.iter().zip(&self.total) {
            acc += dipole_gradient(a, *m, x - c);
        }
        acc
    }
}

/// Runs `n_levels` reflection levels.
pub fn run_reflections(source: &Source, config: &PorousConfig, n_levels: usize) -> Result<HybridStream> {
    if n_levels == 0 {
        return Err(Error::InvalidInput("reflection depth must be at least 1".into()));
    }
    let mut levels = vec![init_dipoles(source, config)?];
    while levels.len() < n_levels {
        let next = iterate_dipoles(levels.last().unwrap(), config);
        levels.push(next);
    }
    Ok(HybridStream::from_levels(source.clone(), config.clone(), levels))
}

/// Successive norm ratios and their geometric mean.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub ratios: Vec<f64>,
    pub ratio: f64,
    /// Level at which a zero norm stopped the report, if any.
    pub terminated_at: Option<usize>,
}

pub fn contraction_report(norms: &[f64]) -> Result<ContractionReport> {
    if norms.len() < 3 {
        return Err(Error::InvalidInput(format!("contraction report needs at least 3 levels, got {}", norms.len())));
    }
    let mut ratios = Vec::new();
    let mut terminated_at = None;
    for (i, w) in norms.windows(2).enumerate() {
        if w[0] == 0.0 {
            terminated_at = Some(i + 1);
            break;
        }
        ratios.push(w[1] / w[0]);
    }
    let ratio = if ratios.is_empty() || ratios.contains(&0.0) {
        0.0
    } else {
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
    };
    Ok(ContractionReport { ratios, ratio, terminated_at })
}

/// Rasterizes `(4/pi^2) sum_l A_l 1_{B(x_l, d/2)}` at cell centers.
pub fn rasterize_phi(set: &DipoleSet, config: &PorousConfig, spec: GridSpec) -> VectorGridField {
    let r2 = 0.25 * config.d * config.d;
    let scale = 4.0 / (PI * PI);
    VectorGridField::from_fn(spec, |p| {
        config
            .centers
            .iter()
            .zip(&set.vectors)
            .find(|(c, _)| (p - *c).norm_squared() < r2)
            .map_or(Vec2::zeros(), |(_, v)| v * scale)
    })
}

/// `||Phi||_p` from the closed form `(4^(p-1) d^2 / pi^(2p-1) sum |A_l|^p)^(1/p)`.
pub fn phi_lp_norm(set: &DipoleSet, d: f64, p: f64) -> f64 {
    let s: f64 = set.vectors.iter().map(|v| v.norm().powf(p)).sum();
    (4f64.powf(p - 1.0) * d * d / PI.powf(2.0 * p - 1.0) * s).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_lattice;
    use crate::grid::{Rect, ScalarGridField};
    use proptest::prelude::*;

    fn disk_source(center: Vec2, r: f64, h: f64) -> Source {
        let rect = Rect::new(center.x - r - h, center.y - r - h, center.x + r + h, center.y + r + h).unwrap();
        let spec = GridSpec::covering(&rect, h).unwrap();
        Source::Grid(ScalarGridField::disk_indicator(spec, center, r, 1.0))
    }

    fn two_holes(a: f64, d: f64) -> PorousConfig {
        let b = Rect::new(-1.0, -1.0, d + 1.0, 1.0).unwrap();
        PorousConfig::new(vec![Vec2::new(0.0, 0.0), Vec2::new(d, 0.0)], a, d, 0.25, b).unwrap()
    }

    #[test]
    fn zero_source_gives_zero_dipoles() {
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        let hs = run_reflections(&Source::zero(), &cfg, 3).unwrap();
        assert!(hs.levels.iter().all(|s| s.norm(2.0) == 0.0));
        assert_eq!(hs.stream_eval(Vec2::new(0.5, 0.5)).unwrap(), 0.0);
    }

    #[test]
    fn single_hole_level_one() {
        let src = disk_source(Vec2::zeros(), 1.0, 1.0 / 128.0);
        let b = Rect::new(2.5, -0.5, 3.5, 0.5).unwrap();
        let cfg = PorousConfig::single(Vec2::new(3.0, 0.0), 0.1, 0.25, b).unwrap();
        let set = init_dipoles(&src, &cfg).unwrap();
        assert!((set.vectors[0] - Vec2::new(-1.0 / 6.0, 0.0)).norm() < 1e-3);
        assert_eq!(iterate_dipoles(&set, &cfg).vectors[0], Vec2::zeros());
    }

    #[test]
    fn overlap_is_rejected() {
        let src = disk_source(Vec2::new(0.5, 0.5), 0.3, 0.05);
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        assert!(matches!(init_dipoles(&src, &cfg), Err(Error::SupportOverlap(_))));
    }

    #[test]
    fn two_hole_recursion() {
        let (a, d) = (0.1, 1.0);
        let cfg = two_holes(a, d);
        let set = DipoleSet { level: 1, vectors: vec![Vec2::new(-1.0, 0.0); 2] };
        let next = iterate_dipoles(&set, &cfg);
        for v in &next.vectors {
            assert!((v - Vec2::new(-a * a / (d * d), 0.0)).norm() < 1e-15);
        }
        let tilted = DipoleSet { level: 1, vectors: vec![Vec2::new(0.3, -0.7), Vec2::new(-0.2, 0.5)] };
        let next = iterate_dipoles(&tilted, &cfg);
        let r = (a / d).powi(2);
        assert!((next.vectors[0] - r * Vec2::new(-0.2, -0.5)).norm() < 1e-15);
        assert!((next.vectors[1] - r * Vec2::new(0.3, 0.7)).norm() < 1e-15);
    }

    #[test]
    fn lattice_norms_decrease() {
        let src = disk_source(Vec2::new(-1.0, 0.5), 0.3, 1.0 / 32.0);
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        let hs = run_reflections(&src, &cfg, 3).unwrap();
        let n = hs.norms(2.0);
        assert_eq!(hs.depth(), 3);
        assert!(n[0] > n[1] && n[1] > n[2]);
    }

    #[test]
    fn no_holes_matches_psi0() {
        let src = disk_source(Vec2::zeros(), 0.5, 1.0 / 32.0);
        let hs = run_reflections(&src, &PorousConfig::empty(Rect::new(3.0, 3.0, 4.0, 4.0).unwrap()), 2).unwrap();
        let x = Vec2::new(0.9, -0.2);
        assert_eq!(hs.stream_eval(x).unwrap(), src.psi0(x));
    }

    #[test]
    fn level_one_cancels_linear_part() {
        let src = Source::Linear(Vec2::new(0.4, -1.1));
        let b = Rect::new(-0.5, -0.5, 0.5, 0.5).unwrap();
        let cfg = PorousConfig::single(Vec2::zeros(), 0.1, 0.25, b).unwrap();
        let hs = run_reflections(&src, &cfg, 1).unwrap();
        assert!(hs.boundary_residual(64) < 1e-14);
    }

    #[test]
    fn boundary_residual_decreases_with_depth() {
        let src = disk_source(Vec2::new(-0.6, 0.5), 0.3, 1.0 / 32.0);
        let cfg = build_lattice(3, 0.1, Rect::unit(), 0.25).unwrap();
        let hs = run_reflections(&src, &cfg, 3).unwrap();
        let r: Vec<f64> = (1..=3).map(|n| hs.truncated(n).boundary_residual(64)).collect();
        assert!(r[0] >= r[1] && r[1] >= r[2], "{r:?}");
    }

    #[test]
    fn velocity_matches_finite_differences() {
        let src = disk_source(Vec2::new(-1.0, 0.5), 0.3, 1.0 / 32.0);
        let cfg = build_lattice(2, 0.2, Rect::unit(), 0.25).unwrap();
        let hs = run_reflections(&src, &cfg, 3).unwrap();
        let x = Vec2::new(0.5, 0.5);
        let e = 1e-5;
        let fd = Vec2::new(
            (hs.stream_eval(x + Vec2::new(e, 0.0)).unwrap() - hs.stream_eval(x - Vec2::new(e, 0.0)).unwrap()) / (2.0 * e),
            (hs.stream_eval(x + Vec2::new(0.0, e)).unwrap() - hs.stream_eval(x - Vec2::new(0.0, e)).unwrap()) / (2.0 * e),
        );
        let u = hs.velocity_eval(x).unwrap();
        assert!((u - perp(fd)).norm() / u.norm() < 1e-4);
        assert!(hs.stream_eval(Vec2::new(0.25, 0.25)).is_err());
    }

    #[test]
    fn mirror_symmetry() {
        let b = Rect::new(0.0, -0.5, 1.0, 0.5).unwrap();
        let cfg = PorousConfig::new(
            vec![Vec2::new(0.3, 0.25), Vec2::new(0.3, -0.25), Vec2::new(0.7, 0.25), Vec2::new(0.7, -0.25)],
            0.05,
            0.4,
            0.25,
            b,
        )
        .unwrap();
        let spec = GridSpec::covering(&Rect::new(-1.5, -0.5, -0.5, 0.5).unwrap(), 1.0 / 32.0).unwrap();
        let src = Source::Grid(ScalarGridField::disk_indicator(spec, Vec2::new(-1.0, 0.0), 0.3, 1.0));
        let hs = run_reflections(&src, &cfg, 3).unwrap();
        for set in &hs.levels {
            for (i, j) in [(0, 1), (2, 3)] {
                let (u, v) = (set.vectors[i], set.vectors[j]);
                assert!((u.x - v.x).abs() < 1e-12 && (u.y + v.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contraction_report_cases() {
        let rep = contraction_report(&[1.0, 0.3, 0.09, 0.027]).unwrap();
        assert!((rep.ratio - 0.3).abs() < 1e-12);
        let rep = contraction_report(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(rep.terminated_at, Some(2));
        assert!(contraction_report(&[1.0, 0.5]).is_err());

        let (a, d) = (0.1, 1.0);
        let cfg = two_holes(a, d);
        let l1 = DipoleSet { level: 1, vectors: vec![Vec2::new(-1.0, 0.0); 2] };
        let l2 = iterate_dipoles(&l1, &cfg);
        let l3 = iterate_dipoles(&l2, &cfg);
        let rep = contraction_report(&[l1.norm(2.0), l2.norm(2.0), l3.norm(2.0)]).unwrap();
        assert!((rep.ratio - (a / d).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn phi_norm_identity() {
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        let set = DipoleSet {
            level: 1,
            vectors: vec![Vec2::new(1.0, 0.0), Vec2::new(0.0, -2.0), Vec2::new(0.5, 0.5), Vec2::new(-1.0, 1.0)],
        };
        let spec = GridSpec::covering(&Rect::new(-0.05, -0.05, 1.05, 1.05).unwrap(), 1.0 / 400.0).unwrap();
        let field = rasterize_phi(&set, &cfg, spec);
        for p in [2.0, 4.0] {
            let num = field.lq_norm(p);
            let exact = phi_lp_norm(&set, cfg.d, p);
            assert!((num - exact).abs() / exact < 5e-3, "p = {p}: {num} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn iteration_is_linear(ax in -1.0..1.0f64, ay in -1.0..1.0f64, bx in -1.0..1.0f64, by in -1.0..1.0f64, s in -3.0..3.0f64) {
            let cfg = build_lattice(2, 0.15, Rect::unit(), 0.25).unwrap();
            let u = DipoleSet { level: 1, vectors: vec![Vec2::new(ax, ay), Vec2::new(bx, by), Vec2::new(ay, bx), Vec2::new(by, ax)] };
            let v = DipoleSet { level: 1, vectors: u.vectors.iter().map(|w| perp(*w)).collect() };
            let sum = DipoleSet { level: 1, vectors: u.vectors.iter().zip(&v.vectors).map(|(p, q)| s * p + q).collect() };
            let (iu, iv, is) = (iterate_dipoles(&u, &cfg), iterate_dipoles(&v, &cfg), iterate_dipoles(&sum, &cfg));
            for i in 0..4 {
                prop_assert!((is.vectors[i] - (s * iu.vectors[i] + iv.vectors[i])).norm() < 1e-12);
            }
        }

        #[test]
        fn small_ratio_contracts(eps in 0.01..0.1f64, n in 2usize..6) {
            let cfg = build_lattice(n, eps, Rect::unit(), 0.25).unwrap();
            let set = DipoleSet { level: 1, vectors: (0..cfg.len()).map(|i| Vec2::new((i as f64).sin(), 1.0)).collect() };
            let next = iterate_dipoles(&set, &cfg);
            prop_assert!(next.norm(2.0) <= 0.5 * set.norm(2.0));
        }
    }
}
