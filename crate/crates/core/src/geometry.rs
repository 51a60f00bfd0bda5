//! Porous-medium configurations: disk holes of radius `a` with centers at
//! least `d` apart, all contained in the porous box.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{disk_cell_fraction, GridSpec, Rect, ScalarGridField, Vec2};

/// Attempts allowed per point when sampling random configurations.
pub const REJECTION_CAP: usize = 100_000;

/// Hole centers, radius, declared minimum center distance and porous box.
#[derive(Clone, Debug, PartialEq)]
pub struct PorousConfig {
    pub centers: Vec<Vec2>,
    pub a: f64,
    pub d: f64,
    pub eps0: f64,
    pub kpm_box: Rect,
}

impl PorousConfig {
    /// Builds a configuration and checks every invariant.
    pub fn new(centers: Vec<Vec2>, a: f64, d: f64, eps0: f64, kpm_box: Rect) -> Result<Self> {
        let cfg = PorousConfig { centers, a, d, eps0, kpm_box };
        cfg.validate().into_result()?;
        Ok(cfg)
    }

    /// A configuration with no holes inside `kpm_box`.
    pub fn empty(kpm_box: Rect) -> Self {
        PorousConfig { centers: Vec::new(), a: 0.0, d: kpm_box.diameter(), eps0: 0.25, kpm_box }
    }

    /// One hole; `d` is the diameter of the porous box.
    pub fn single(center: Vec2, a: f64, eps0: f64, kpm_box: Rect) -> Result<Self> {
        PorousConfig::new(vec![center], a, kpm_box.diameter(), eps0, kpm_box)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn a_over_d(&self) -> f64 {
        if self.d > 0.0 {
            self.a / self.d
        } else {
            0.0
        }
    }

    /// Index of the hole containing `x` (closed disk of radius `a`), if any.
    pub fn hole_containing(&self, x: Vec2) -> Option<usize> {
        if self.a <= 0.0 {
            return None;
        }
        let a2 = self.a * self.a;
        self.centers.iter().position(|c| (x - c).norm_squared() < a2 * (1.0 - 1e-12))
    }

    /// Error unless `x` is in the fluid region.
    pub fn check_fluid(&self, x: Vec2) -> Result<()> {
        match self.hole_containing(x) {
            Some(hole) => Err(Error::InsideHole { hole, x: x.x, y: x.y }),
            None => Ok(()),
        }
    }

    /// Smallest gap between two hole boundaries, `min dist - 2a`.
    pub fn min_gap(&self) -> Option<f64> {
        min_pairwise_distance(&self.centers).map(|m| m - 2.0 * self.a)
    }

    pub fn validate(&self) -> ValidationReport {
        let min_distance = min_pairwise_distance(&self.centers);
        let a_over_d = self.a_over_d();
        let uncontained: Vec<usize> = self
            .centers
            .iter()
            .enumerate()
            .filter(|(_, c)| !self.kpm_box.contains_disk(**c, self.a))
            .map(|(i, _)| i)
            .collect();
        let tol = 1e-12 * self.d.max(1.0);
        ValidationReport {
            holes: self.len(),
            min_distance,
            a_over_d,
            min_distance_ok: min_distance.is_none_or(|m| m >= self.d - tol),
            ratio_ok: a_over_d <= self.eps0 * (1.0 + 1e-12) && self.eps0 < 0.5,
            containment_ok: uncontained.is_empty(),
            uncontained,
            finite_ok: self.a >= 0.0
                && self.d > 0.0
                && self.centers.iter().all(|c| c.x.is_finite() && c.y.is_finite()),
        }
    }

    /// Stable hash of the geometry, used to tag exported solutions.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for v in [self.a, self.d, self.eps0, self.kpm_box.x0, self.kpm_box.y0, self.kpm_box.x1, self.kpm_box.y1] {
            hasher.update(v.to_le_bytes());
        }
        for c in &self.centers {
            hasher.update(c.x.to_le_bytes());
            hasher.update(c.y.to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the centers as CSV with columns `x,y`.
    pub fn write_centers_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x", "y"])?;
        for c in &self.centers {
            wtr.write_record(&[c.x.to_string(), c.y.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads centers written by [`PorousConfig::write_centers_csv`].
pub fn read_centers_csv<R: Read>(r: R) -> Result<Vec<Vec2>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidInput(format!("bad centers row {rec:?}")))
        };
        out.push(Vec2::new(parse(0)?, parse(1)?));
    }
    Ok(out)
}

/// Pass/fail per configuration invariant.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub holes: usize,
    pub min_distance: Option<f64>,
    pub a_over_d: f64,
    pub min_distance_ok: bool,
    pub ratio_ok: bool,
    pub containment_ok: bool,
    pub uncontained: Vec<usize>,
    pub finite_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.min_distance_ok && self.ratio_ok && self.containment_ok && self.finite_ok
    }

    /// Names of the violated invariants.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.finite_ok {
            v.push("finite_parameters");
        }
        if !self.min_distance_ok {
            v.push("min_center_distance");
        }
        if !self.ratio_ok {
            v.push("a_over_d_le_eps0");
        }
        if !self.containment_ok {
            v.push("holes_inside_kpm_box");
        }
        v
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Violated {
                invariants: self.violations(),
                detail: format!("a/d = {}, min distance = {:?}", self.a_over_d, self.min_distance),
            })
        }
    }
}

fn min_pairwise_distance(centers: &[Vec2]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (i, p) in centers.iter().enumerate() {
        for q in &centers[i + 1..] {
            let dist = (p - q).norm();
            best = Some(best.map_or(dist, |b: f64| b.min(dist)));
        }
    }
    best
}

/// `n x n` holes at the centers of a uniform lattice of `kpm_box`, with
/// `d` the lattice spacing and `a = epsilon * d` (so `a = epsilon / sqrt(N)` on
/// the unit square).
pub fn build_lattice(n_per_side: usize, epsilon: f64, kpm_box: Rect, eps0: f64) -> Result<PorousConfig> {
    if n_per_side == 0 {
        return Err(Error::InvalidConfig("lattice needs at least one hole per side".into()));
    }
    if !(epsilon >= 0.0 && 2.0 * epsilon < 1.0) {
        return Err(Error::InvalidConfig(format!("epsilon = {epsilon} must lie in [0, 1/2)")));
    }
    let n = n_per_side as f64;
    let (sx, sy) = (kpm_box.width() / n, kpm_box.height() / n);
    let d = sx.min(sy);
    let a = epsilon * d;
    let centers = (0..n_per_side)
        .flat_map(|j| {
            (0..n_per_side).map(move |i| {
                Vec2::new(kpm_box.x0 + (i as f64 + 0.5) * sx, kpm_box.y0 + (j as f64 + 0.5) * sy)
            })
        })
        .collect();
    PorousConfig::new(centers, a, d, eps0, kpm_box)
}

/// `count` holes placed uniformly at random in `kpm_box` by rejection sampling,
/// with centers at least `d` apart.
pub fn build_random(count: usize, a: f64, d: f64, kpm_box: Rect, eps0: f64, seed: u64) -> Result<PorousConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = Rect::new(kpm_box.x0 + a, kpm_box.y0 + a, kpm_box.x1 - a, kpm_box.y1 - a)?;
    let mut centers: Vec<Vec2> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..REJECTION_CAP {
            let p = Vec2::new(rng.random_range(inner.x0..inner.x1), rng.random_range(inner.y0..inner.y1));
            if centers.iter().all(|c| (c - p).norm() >= d) {
                centers.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidConfig(format!(
                "could not place hole {k} after {REJECTION_CAP} attempts"
            )));
        }
    }
    let d_decl = if count == 1 { kpm_box.diameter() } else { d };
    PorousConfig::new(centers, a, d_decl, eps0, kpm_box)
}

/// Volume fraction `k`, compactly supported in the porous box with
/// `|k| <= eps0^2`.
#[derive(Clone, Debug)]
pub struct VolumeFraction {
    pub field: ScalarGridField,
    pub eps0: f64,
}

impl VolumeFraction {
    pub fn new(field: ScalarGridField, eps0: f64, kpm_box: &Rect) -> Result<Self> {
        let sup = field.sup_norm();
        if sup > eps0 * eps0 * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "volume fraction sup {sup} exceeds eps0^2 = {}",
                eps0 * eps0
            )));
        }
        if let Some(supp) = field.support_rect() {
            let slack = 1e-9 * field.spec.h;
            if !kpm_box.expand(slack).contains(Vec2::new(supp.x0, supp.y0))
                || !kpm_box.expand(slack).contains(Vec2::new(supp.x1, supp.y1))
            {
                return Err(Error::InvalidConfig("volume fraction support leaves the porous box".into()));
            }
        }
        Ok(VolumeFraction { field, eps0 })
    }

    /// `value * 1_{rect}` with boundary cells weighted by their overlap.
    pub fn constant_on(spec: GridSpec, rect: &Rect, value: f64, eps0: f64) -> Result<Self> {
        let mut field = ScalarGridField::zeros(spec);
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let cell = spec.cell_rect(i, j);
                let frac = cell.overlap_area(rect) / spec.cell_area();
                field.values[spec.index(i, j)] = value * frac;
            }
        }
        VolumeFraction::new(field, eps0, rect)
    }

    pub fn sup_norm(&self) -> f64 {
        self.field.sup_norm()
    }

    pub fn spec(&self) -> GridSpec {
        self.field.spec
    }
}

/// Continuum density of a lattice: `N pi a^2 / |box|` on the porous box.
pub fn lattice_fraction(config: &PorousConfig, spec: GridSpec) -> Result<VolumeFraction> {
    let value = config.len() as f64 * std::f64::consts::PI * config.a * config.a / config.kpm_box.area();
    let eps0 = config.eps0.max(value.sqrt());
    VolumeFraction::constant_on(spec, &config.kpm_box, value, eps0)
}

/// Indicator `mu = sum 1_{B(x_l, a)}` as covered area fraction per cell.
pub fn rasterize_mu(config: &PorousConfig, spec: GridSpec) -> Result<ScalarGridField> {
    let mut field = ScalarGridField::zeros(spec);
    if config.is_empty() || config.a == 0.0 {
        return Ok(field);
    }
    let limit = config.a / 4.0;
    if spec.h > limit * (1.0 + 1e-12) {
        return Err(Error::Resolution { h: spec.h, limit });
    }
    let a = config.a;
    let half_diag = spec.h * std::f64::consts::FRAC_1_SQRT_2;
    let origin = spec.origin();
    for c in &config.centers {
        let lo_i = (((c.x - a - origin.x) / spec.h).floor().max(0.0)) as usize;
        let lo_j = (((c.y - a - origin.y) / spec.h).floor().max(0.0)) as usize;
        let hi_i = ((((c.x + a - origin.x) / spec.h).ceil()) as usize).min(spec.nx);
        let hi_j = ((((c.y + a - origin.y) / spec.h).ceil()) as usize).min(spec.ny);
        for j in lo_j..hi_j {
            for i in lo_i..hi_i {
                let center = spec.center(i, j);
                let dist = (center - c).norm();
                let frac = if dist + half_diag <= a {
                    1.0
                } else if dist - half_diag >= a {
                    0.0
                } else {
                    disk_cell_fraction(&spec.cell_rect(i, j), *c, a, 16)
                };
                field.values[spec.index(i, j)] += frac;
            }
        }
    }
    for v in &mut field.values {
        *v = v.min(1.0);
    }
    Ok(field)
}
