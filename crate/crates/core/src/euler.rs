//! Vortex-particle transport in the perforated and homogenized settings.
//!
//! Particles carry fixed circulations and move with RK4 along the velocity of
//! the current setting. Blobs use the kernel `z^perp / (2 pi (|z|^2 + delta^2))`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{PorousConfig, VolumeFraction};
use crate::grid::{perp, GridSpec, Rect, ScalarGridField, Vec2, VectorGridField};
use crate::homogenized::{self, projection_at, weighted_field, Backend, EffectiveMatrix};
use crate::potential::Source;
use crate::reflections::{run_reflections, StreamCorrection};

#[derive(Clone, Debug, PartialEq)]
pub struct VortexParticles {
    pub positions: Vec<Vec2>,
    pub weights: Vec<f64>,
    pub blob: f64,
    pub omega_max: f64,
}

impl VortexParticles {
    pub fn new(positions: Vec<Vec2>, weights: Vec<f64>, blob: f64) -> Result<Self> {
        if positions.len() != weights.len() {
            return Err(Error::InvalidInput("positions and weights differ in length".into()));
        }
        if !(blob > 0.0) {
            return Err(Error::InvalidInput("blob radius must be positive".into()));
        }
        if positions.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("particle data must be finite".into()));
        }
        Ok(VortexParticles { positions, weights, blob, omega_max: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn total_circulation(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn abs_circulation(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Circulation-weighted centroid.
    pub fn centroid(&self) -> Option<Vec2> {
        let total = self.total_circulation();
        (total != 0.0).then(|| self.positions.iter().zip(&self.weights).map(|(p, w)| p * *w).sum::<Vec2>() / total)
    }

    /// `sum w ln(|z|^2 + delta^2) / (4 pi)`.
    pub fn stream(&self, x: Vec2) -> f64 {
        let d2 = self.blob * self.blob;
        self.positions.iter().zip(&self.weights).map(|(p, w)| w * ((x - p).norm_squared() + d2).ln()).sum::<f64>() / (4.0 * PI)
    }

    pub fn stream_gradient(&self, x: Vec2) -> Vec2 {
        let d2 = self.blob * self.blob;
        let mut acc = Vec2::zeros();
        for (p, w) in self.positions.iter().zip(&self.weights) {
            let z = x - p;
            acc += z * (*w / (z.norm_squared() + d2));
        }
        acc / (2.0 * PI)
    }

    /// Free-space blob velocity.
    pub fn velocity(&self, x: Vec2) -> Vec2 {
        perp(self.stream_gradient(x))
    }

    /// Blob-smoothed vorticity `sum w delta^2 / (pi (|z|^2 + delta^2)^2)`.
    pub fn smoothed_vorticity(&self, x: Vec2) -> f64 {
        let d2 = self.blob * self.blob;
        self.positions
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                let q = (x - p).norm_squared() + d2;
                w * d2 / (PI * q * q)
            })
            .sum()
    }

    pub fn with_positions(&self, positions: Vec<Vec2>) -> Self {
        VortexParticles { positions, ..self.clone() }
    }

    /// Writes `t,x,y,w` rows.
    pub fn write_snapshot<W: Write>(&self, t: f64, out: &mut csv::Writer<W>) -> Result<()> {
        for (p, w) in self.positions.iter().zip(&self.weights) {
            out.write_record(&[fmt(t), fmt(p.x), fmt(p.y), fmt(*w)])?;
        }
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

/// One particle per cell of spacing `h_p` over the support of `omega0`, with
/// weight equal to the integral of `omega0` over that cell.
pub fn discretize_vorticity(omega0: &ScalarGridField, h_p: f64, blob: f64) -> Result<VortexParticles> {
    if !(h_p > 0.0) {
        return Err(Error::InvalidInput("particle spacing must be positive".into()));
    }
    if h_p < omega0.spec.h {
        return Err(Error::InvalidInput("particle spacing must not be finer than the vorticity grid".into()));
    }
    let Some(supp) = omega0.support_rect() else {
        return VortexParticles::new(Vec::new(), Vec::new(), blob);
    };
    let lattice = GridSpec::covering(&supp, h_p)?;
    let mut weights = vec![0.0; lattice.len()];
    let area = omega0.spec.cell_area();
    for (cell, v) in omega0.nonzero_cells() {
        // Split the cell mass over the particle cells it overlaps.
        let (i0, j0) = (((cell.x0 - lattice.origin[0]) / h_p).floor().max(0.0) as usize, ((cell.y0 - lattice.origin[1]) / h_p).floor().max(0.0) as usize);
        for j in j0..(j0 + 2).min(lattice.ny) {
            for i in i0..(i0 + 2).min(lattice.nx) {
                let frac = cell.overlap_area(&lattice.cell_rect(i, j)) / area;
                weights[lattice.index(i, j)] += v * area * frac;
            }
        }
    }
    let (positions, weights): (Vec<Vec2>, Vec<f64>) =
        weights.into_iter().enumerate().filter(|(_, w)| *w != 0.0).map(|(i, w)| (lattice.center_of(i), w)).unzip();
    let mut p = VortexParticles::new(positions, weights, blob)?;
    p.omega_max = omega0.sup_norm();
    Ok(p)
}

/// Velocity model used to advance particles.
#[derive(Clone, Debug)]
pub enum Setting {
    /// Blob Biot-Savart in the whole plane.
    Free,
    /// Reflections of depth `n_levels` rebuilt from the current particles.
    Perforated { config: PorousConfig, n_levels: usize },
    /// First-order homogenized field, or the full Neumann solve when `full` is set.
    Homogenized { k: VolumeFraction, m: EffectiveMatrix, full: Option<NeumannOptions> },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NeumannOptions {
    pub backend: Backend,
    pub tol: f64,
    pub max_iter: usize,
}

impl Setting {
    /// Smallest hole gap `d - 2a`, or infinity.
    fn gap(&self) -> f64 {
        match self {
            Setting::Perforated { config, .. } if config.len() > 1 => config.min_gap().unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        }
    }

    fn porous_box(&self) -> Option<Rect> {
        match self {
            Setting::Free => None,
            Setting::Perforated { config, .. } => Some(config.kpm_box),
            Setting::Homogenized { k, .. } => k.field.support_rect(),
        }
    }
}

/// Velocities of the setting at `targets` induced by `particles`.
pub fn velocities(particles: &VortexParticles, setting: &Setting, targets: &[Vec2]) -> Result<Vec<Vec2>> {
    let free: Vec<Vec2> = targets.par_iter().map(|x| particles.velocity(*x)).collect();
    match setting {
        Setting::Free => Ok(free),
        Setting::Perforated { config, n_levels } => {
            for x in targets {
                config.check_fluid(*x)?;
            }
            let hs = run_reflections(&Source::Particles(particles.clone()), config, *n_levels)?;
            Ok(targets.par_iter().zip(free).map(|(x, u)| u + perp(hs.correction_grad(*x))).collect())
        }
        Setting::Homogenized { k, m, full } => {
            let spec = k.field.spec;
            let g0 = homogenized::grad_psi0_on(&Source::Particles(particles.clone()), spec);
            let w = match full {
                None => weighted_field(&g0, k, m)?,
                Some(o) => {
                    let sol = homogenized::solve_psic(&g0, k, m, o.backend, o.tol, o.max_iter)?;
                    weighted_field(&sol.grad, k, m)?
                }
            };
            Ok(targets.par_iter().zip(free).map(|(x, u)| u - perp(projection_at(&w, *x))).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Status {
    Running,
    Halted(String),
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub particles: VortexParticles,
    /// Minimum particle distance to the porous box (infinity without one).
    pub support_distance: f64,
    /// Required clearance `delta` from the porous box.
    pub margin: f64,
    pub status: Status,
}

impl FlowState {
    /// Errors if the particles start closer than `margin` to the porous box.
    pub fn new(particles: VortexParticles, setting: &Setting, margin: f64) -> Result<Self> {
        let support_distance = support_distance(&particles, setting);
        if support_distance < margin {
            return Err(Error::SupportMargin { margin });
        }
        Ok(FlowState { t: 0.0, particles, support_distance, margin, status: Status::Running })
    }
}

fn support_distance(p: &VortexParticles, setting: &Setting) -> f64 {
    match setting.porous_box() {
        None => f64::INFINITY,
        Some(b) => p.positions.iter().map(|x| b.distance_to(*x)).fold(f64::INFINITY, f64::min),
    }
}

/// One classical RK4 step of size `dt` (any sign).
pub fn rk4_advance(p: &VortexParticles, dt: f64, setting: &Setting) -> Result<VortexParticles> {
    let shift = |base: &[Vec2], k: &[Vec2], s: f64| base.iter().zip(k).map(|(x, v)| x + v * s).collect::<Vec<_>>();
    let x0 = &p.positions;
    let k1 = velocities(p, setting, x0)?;
    let x1 = shift(x0, &k1, 0.5 * dt);
    let k2 = velocities(&p.with_positions(x1.clone()), setting, &x1)?;
    let x2 = shift(x0, &k2, 0.5 * dt);
    let k3 = velocities(&p.with_positions(x2.clone()), setting, &x2)?;
    let x3 = shift(x0, &k3, dt);
    let k4 = velocities(&p.with_positions(x3.clone()), setting, &x3)?;
    let next = (0..x0.len()).map(|i| x0[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (dt / 6.0)).collect();
    Ok(p.with_positions(next))
}

/// Advances by `dt > 0` under the CFL guard `dt max|u| <= 0.5 min(d - 2a, delta)`.
/// A particle coming within `delta/2` of the porous box halts the state.
pub fn step(state: &FlowState, dt: f64, setting: &Setting) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("time step must be positive".into()));
    }
    if state.status != Status::Running || state.particles.is_empty() {
        return Ok(FlowState { t: state.t + dt, ..state.clone() });
    }
    let u = velocities(&state.particles, setting, &state.particles.positions)?;
    let umax = u.iter().fold(0.0, |m: f64, v| m.max(v.norm()));
    let rhs = 0.5 * setting.gap().min(state.margin);
    if dt * umax > rhs {
        return Err(Error::Cfl { lhs: dt * umax, rhs });
    }
    let particles = rk4_advance(&state.particles, dt, setting)?;
    let dist = support_distance(&particles, setting);
    let status = if dist < 0.5 * state.margin {
        Status::Halted(format!("particle within {} of the porous box at t = {}", 0.5 * state.margin, state.t + dt))
    } else {
        Status::Running
    };
    Ok(FlowState { t: state.t + dt, particles, support_distance: dist, margin: state.margin, status })
}

/// Advances `steps` times; stops early (without error) if the state halts.
pub fn evolve(state: &FlowState, dt: f64, steps: usize, setting: &Setting) -> Result<FlowState> {
    let mut s = state.clone();
    for _ in 0..steps {
        if s.status != Status::Running {
            break;
        }
        s = step(&s, dt, setting)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub traj_div_max: f64,
    pub vel_diff_sup_o: f64,
    pub smoothed_omega_diff: f64,
    pub status: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonSeries {
    pub rows: Vec<ComparisonRow>,
    /// Time at which either run halted, if any.
    pub halted_at: Option<f64>,
}

impl ComparisonSeries {
    pub fn final_divergence(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.traj_div_max)
    }

    /// Writes `t,traj_div_max,vel_diff_sup_O,smoothed_omega_diff,status` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "traj_div_max", "vel_diff_sup_O", "smoothed_omega_diff", "status"])?;
        for r in &self.rows {
            out.write_record(&[fmt(r.t), fmt(r.traj_div_max), fmt(r.vel_diff_sup_o), fmt(r.smoothed_omega_diff), r.status.clone()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonSetup {
    pub perforated: Setting,
    pub homogenized: Setting,
    pub horizon: f64,
    pub dt: f64,
    /// Output every `every` steps.
    pub every: usize,
    pub margin: f64,
    /// Probe points for velocity differences.
    pub probes: Vec<Vec2>,
    /// Grid on which smoothed vorticities are compared.
    pub omega_probe: Option<GridSpec>,
}

/// Evolves both settings from the same particles and records their differences.
pub fn run_comparison(particles: &VortexParticles, setup: &ComparisonSetup) -> Result<ComparisonSeries> {
    let mut a = FlowState::new(particles.clone(), &setup.perforated, setup.margin)?;
    let mut b = FlowState::new(particles.clone(), &setup.homogenized, setup.margin)?;
    let steps = (setup.horizon / setup.dt).round() as usize;
    let every = setup.every.max(1);
    let mut rows = vec![compare(&a, &b, setup)?];
    let mut halted_at = None;
    for s in 1..=steps {
        a = step(&a, setup.dt, &setup.perforated)?;
        b = step(&b, setup.dt, &setup.homogenized)?;
        let halted = a.status != Status::Running || b.status != Status::Running;
        if s % every == 0 || s == steps || halted {
            rows.push(compare(&a, &b, setup)?);
        }
        if halted {
            halted_at = Some(a.t);
            break;
        }
    }
    Ok(ComparisonSeries { rows, halted_at })
}

fn compare(a: &FlowState, b: &FlowState, setup: &ComparisonSetup) -> Result<ComparisonRow> {
    let traj_div_max = a.particles.positions.iter().zip(&b.particles.positions).fold(0.0, |m: f64, (p, q)| m.max((p - q).norm()));
    let ua = velocities(&a.particles, &setup.perforated, &setup.probes)?;
    let ub = velocities(&b.particles, &setup.homogenized, &setup.probes)?;
    let vel_diff_sup_o = ua.iter().zip(&ub).fold(0.0, |m: f64, (p, q)| m.max((p - q).norm()));
    let smoothed_omega_diff = match &setup.omega_probe {
        None => 0.0,
        Some(spec) => spec
            .centers()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|x| (a.particles.smoothed_vorticity(*x) - b.particles.smoothed_vorticity(*x)).abs())
            .reduce(|| 0.0, f64::max),
    };
    let status = match (&a.status, &b.status) {
        (Status::Running, Status::Running) => "running".to_string(),
        (Status::Halted(_), _) => "halted_perforated".to_string(),
        _ => "halted_homogenized".to_string(),
    };
    Ok(ComparisonRow { t: a.t, traj_div_max, vel_diff_sup_o, smoothed_omega_diff, status })
}

/// Angular rate of two equal blobs of circulation `gamma` at distance `2 rho`.
pub fn pair_angular_rate(gamma: f64, rho: f64, blob: f64) -> f64 {
    gamma / (PI * (4.0 * rho * rho + blob * blob))
}

/// Point-vortex period `8 pi^2 rho^2 / gamma` of a co-rotating pair.
pub fn pair_period(gamma: f64, rho: f64) -> f64 {
    8.0 * PI * PI * rho * rho / gamma
}

/// Grid velocity field of the particles in the given setting.
pub fn velocity_grid(particles: &VortexParticles, setting: &Setting, spec: GridSpec) -> Result<VectorGridField> {
    let pts: Vec<Vec2> = spec.centers().collect();
    Ok(VectorGridField { spec, values: velocities(particles, setting, &pts)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_lattice, lattice_fraction};
    use proptest::prelude::*;

    fn pair(gamma: f64, rho: f64, blob: f64) -> VortexParticles {
        VortexParticles::new(vec![Vec2::new(rho, 0.0), Vec2::new(-rho, 0.0)], vec![gamma, gamma], blob).unwrap()
    }

    #[test]
    fn empty_particles() {
        let spec = GridSpec::covering(&Rect::unit(), 0.1).unwrap();
        let p = discretize_vorticity(&ScalarGridField::zeros(spec), 0.1, 0.1).unwrap();
        assert!(p.is_empty());
        assert_eq!(velocities(&p, &Setting::Free, &[Vec2::new(1.0, 2.0)]).unwrap()[0], Vec2::zeros());
    }

    #[test]
    fn discretization_conserves_mass() {
        let spec = GridSpec::covering(&Rect::new(-1.0, -1.0, 1.0, 1.0).unwrap(), 1.0 / 128.0).unwrap();
        let omega = ScalarGridField::disk_indicator(spec, Vec2::new(0.1, -0.2), 0.5, 1.0);
        let p = discretize_vorticity(&omega, 0.05, 0.05).unwrap();
        assert!((p.total_circulation() - PI * 0.25).abs() / (PI * 0.25) < 0.01);
        assert!((p.total_circulation() - omega.integral()).abs() < 1e-12);
        let (coarse, fine) = (discretize_vorticity(&omega, 0.05, 0.05).unwrap(), discretize_vorticity(&omega, 0.025, 0.025).unwrap());
        let x = Vec2::new(4.0, 3.0);
        let (uc, uf) = (coarse.velocity(x), fine.velocity(x));
        assert!((uc - uf).norm() / uf.norm() < 1e-3);
    }

    #[test]
    fn medium_free_settings_agree() {
        let p = VortexParticles::new(vec![Vec2::new(-3.0, 0.5)], vec![1.0], 0.05).unwrap();
        let box_ = Rect::new(5.0, 5.0, 6.0, 6.0).unwrap();
        let spec = GridSpec::covering(&box_, 0.1).unwrap();
        let k = VolumeFraction::new(ScalarGridField::zeros(spec), 0.25, &box_).unwrap();
        let x = [Vec2::new(-2.0, 0.0)];
        let u0 = velocities(&p, &Setting::Free, &x).unwrap()[0];
        let up = velocities(&p, &Setting::Perforated { config: PorousConfig::empty(box_), n_levels: 3 }, &x).unwrap()[0];
        let uh = velocities(&p, &Setting::Homogenized { k, m: EffectiveMatrix::disk(), full: None }, &x).unwrap()[0];
        assert!((u0 - up).norm() < 1e-12 && (u0 - uh).norm() < 1e-12);
    }

    #[test]
    fn two_vortex_period() {
        let (gamma, rho) = (1.0, 0.5);
        let blob = rho / 20.0;
        let t = pair_period(gamma, rho);
        let steps = 200;
        let s0 = FlowState::new(pair(gamma, rho, blob), &Setting::Free, 1.0).unwrap();
        let s = evolve(&s0, t / steps as f64, steps, &Setting::Free).unwrap();
        let p = s.particles.positions[0];
        let angle = p.y.atan2(p.x).rem_euclid(2.0 * PI);
        let turned = if angle > PI { angle } else { 2.0 * PI + angle };
        let measured = t * 2.0 * PI / turned;
        assert!((measured - t).abs() / t < 0.02);
        assert_eq!(s.particles.weights, s0.particles.weights);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let (gamma, rho, blob) = (1.0, 0.5, 0.025);
        let omega = pair_angular_rate(gamma, rho, blob);
        let period = 2.0 * PI / omega;
        let err = |steps: usize| {
            let s = (0..steps).try_fold(pair(gamma, rho, blob), |p, _| rk4_advance(&p, period / steps as f64, &Setting::Free)).unwrap();
            (s.positions[0] - Vec2::new(rho, 0.0)).norm()
        };
        let ratio = err(40) / err(80);
        assert!((ratio - 16.0).abs() < 4.0, "{ratio}");
    }

    #[test]
    fn time_reversal() {
        let p = VortexParticles::new(vec![Vec2::new(0.1, 0.0), Vec2::new(-0.2, 0.3), Vec2::new(0.0, -0.25)], vec![1.0, -0.5, 0.8], 0.05).unwrap();
        let back = |dt: f64| {
            let f = rk4_advance(&p, dt, &Setting::Free).unwrap();
            let b = rk4_advance(&f, -dt, &Setting::Free).unwrap();
            b.positions.iter().zip(&p.positions).fold(0.0, |m: f64, (x, y)| m.max((x - y).norm()))
        };
        let (e1, e2) = (back(0.04), back(0.02));
        assert!(e1 < 1e-6);
        assert!(e2 < e1 / 16.0, "{e1} {e2}");
    }

    #[test]
    fn symmetric_blob_is_stationary() {
        let cfg = build_lattice(2, 0.1, Rect::new(-0.5, -0.5, 0.5, 0.5).unwrap(), 0.25).unwrap();
        let p = VortexParticles::new(vec![Vec2::zeros()], vec![1.0], 0.05).unwrap();
        let setting = Setting::Perforated { config: cfg, n_levels: 3 };
        let u = velocities(&p, &setting, &p.positions).unwrap()[0];
        assert!(u.norm() < 1e-10);
    }

    #[test]
    fn cfl_and_margin_guards() {
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        let setting = Setting::Perforated { config: cfg, n_levels: 3 };
        let near = VortexParticles::new(vec![Vec2::new(-0.1, 0.5)], vec![1.0], 0.05).unwrap();
        assert!(matches!(FlowState::new(near, &setting, 0.5), Err(Error::SupportMargin { .. })));
        let p = VortexParticles::new(vec![Vec2::new(-1.0, 0.5), Vec2::new(-1.1, 0.5)], vec![1.0, 1.0], 0.01).unwrap();
        let s = FlowState::new(p, &setting, 0.5).unwrap();
        assert!(matches!(step(&s, 1.0, &setting), Err(Error::Cfl { .. })));
        assert!(step(&s, -0.01, &setting).is_err());
        assert!(step(&s, 1e-3, &setting).is_ok());
    }

    #[test]
    fn halts_near_porous_box() {
        let cfg = build_lattice(2, 0.1, Rect::unit(), 0.25).unwrap();
        let setting = Setting::Perforated { config: cfg, n_levels: 1 };
        let p = VortexParticles::new(vec![Vec2::new(-0.3, 0.5), Vec2::new(-0.3, 0.3)], vec![1.0, -1.0], 0.02).unwrap();
        let s = FlowState::new(p, &setting, 0.2).unwrap();
        let s = evolve(&s, 0.002, 5000, &setting).unwrap();
        assert!(matches!(s.status, Status::Halted(_)));
        assert!(s.support_distance < 0.1);
    }

    #[test]
    fn zero_medium_comparison_is_exact() {
        let box_ = Rect::unit();
        let spec = GridSpec::covering(&box_, 0.1).unwrap();
        let k = VolumeFraction::new(ScalarGridField::zeros(spec), 0.25, &box_).unwrap();
        let p = VortexParticles::new(vec![Vec2::new(-2.0, 0.5), Vec2::new(-2.2, 0.4)], vec![1.0, 0.5], 0.05).unwrap();
        let setup = ComparisonSetup {
            perforated: Setting::Perforated { config: PorousConfig::empty(box_), n_levels: 3 },
            homogenized: Setting::Homogenized { k, m: EffectiveMatrix::disk(), full: None },
            horizon: 0.5,
            dt: 0.05,
            every: 2,
            margin: 0.5,
            probes: vec![Vec2::new(-1.5, 0.5)],
            omega_probe: Some(GridSpec::covering(&Rect::new(-2.5, 0.0, -1.5, 1.0).unwrap(), 0.1).unwrap()),
        };
        let series = run_comparison(&p, &setup).unwrap();
        assert!(series.rows.iter().all(|r| r.traj_div_max == 0.0 && r.vel_diff_sup_o == 0.0 && r.smoothed_omega_diff == 0.0));
        assert!(series.halted_at.is_none());
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,traj_div_max"));
    }

    #[test]
    fn homogenized_setting_moves_slowly_near_medium() {
        let cfg = build_lattice(4, 0.1, Rect::unit(), 0.25).unwrap();
        let spec = GridSpec::covering(&Rect::unit(), 1.0 / 16.0).unwrap();
        let k = lattice_fraction(&cfg, spec).unwrap();
        let p = VortexParticles::new(vec![Vec2::new(-1.0, 0.5)], vec![1.0], 0.05).unwrap();
        let x = [Vec2::new(-0.5, 0.5)];
        let u0 = velocities(&p, &Setting::Free, &x).unwrap()[0];
        let uh = velocities(&p, &Setting::Homogenized { k: k.clone(), m: EffectiveMatrix::disk(), full: None }, &x).unwrap()[0];
        let full = NeumannOptions { backend: Backend::default(), tol: 1e-10, max_iter: 50 };
        let uf = velocities(&p, &Setting::Homogenized { k, m: EffectiveMatrix::disk(), full: Some(full) }, &x).unwrap()[0];
        let up = velocities(&p, &Setting::Perforated { config: cfg, n_levels: 3 }, &x).unwrap()[0];
        let (dh, dp) = ((uh - u0).norm(), (up - u0).norm());
        assert!(dh > 0.0 && (dh - dp).abs() < 0.5 * dp, "{dh} {dp}");
        assert!((uf - uh).norm() < 0.1 * dh);
    }

    proptest! {
        #[test]
        fn centroid_conserved(xs in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64), 2..6)) {
            let p = VortexParticles::new(xs.iter().map(|(x, y, _)| Vec2::new(*x, *y)).collect(), xs.iter().map(|t| t.2).collect(), 0.1).unwrap();
            let c0 = p.centroid().unwrap();
            let q = (0..10).try_fold(p, |p, _| rk4_advance(&p, 0.01, &Setting::Free)).unwrap();
            prop_assert!((q.centroid().unwrap() - c0).norm() < 1e-8 * 0.1 + 1e-12);
        }
    }
}
