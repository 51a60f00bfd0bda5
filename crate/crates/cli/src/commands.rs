//! Subcommand drivers. Each writes its CSV/JSON artifacts into the output
//! directory and returns the results block of the run summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use perforated::analysis::{fit_exponent, Fit};
use perforated::euler::{evolve, pair_period, FlowState, NeumannOptions, Setting};
use perforated::experiments::{
    backend_agreement, gamma_sweep, homogenized_rates, reflection_accuracy, stability_sweep_particles, AccuracySetup, BackendSetup, GammaSetup, HomogSetup,
    StabilitySetup,
};
use perforated::geometry::lattice_fraction;
use perforated::homogenized::{apply_l, grad_psi0_on, solve_psic, Backend, EffectiveMatrix};
use perforated::oracle::solve_collocation;
use perforated::potential::Source;
use perforated::reflections::{contraction_report, run_reflections};
use perforated::{Error, GridSpec, Result, Vec2};

use crate::config::{GeometryKind, RunConfig, Shape};

/// A pass/fail check recorded in the run summary.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        Check { name: name.to_string(), value, tolerance, passed: value <= tolerance }
    }
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
    pub artifacts: Vec<String>,
    pub checks: Vec<Check>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, out: &Path) -> Self {
        Run { cfg, out: out.to_path_buf(), artifacts: Vec::new(), checks: Vec::new() }
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.out.join(name))?);
        f(&mut w)?;
        w.flush()?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_rows(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(name, |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(header)?;
            for r in rows {
                out.write_record(r)?;
            }
            out.flush()?;
            Ok(())
        })
    }
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn suffix(multi: bool, n: usize) -> String {
    if multi {
        format!("_n{n}")
    } else {
        String::new()
    }
}

fn grid_shape_required(cfg: &RunConfig, command: &str) -> Result<perforated::experiments::VorticitySpec> {
    cfg.vorticity_spec()
        .ok_or_else(|| Error::InvalidConfig(format!("{command} needs a grid vorticity shape (disk or bump)")))
}

fn fit_json(f: &Option<Fit>) -> Value {
    f.as_ref().map_or(Value::Null, |f| json!(f))
}

fn fit_row(width: usize, first: &str, slope_col: usize, fit: &Option<Fit>) -> Vec<String> {
    let mut row = vec![String::new(); width];
    row[0] = first.to_string();
    if let Some(f) = fit {
        row[slope_col] = num(f.slope);
    }
    row
}

pub fn reflect(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let source = cfg.source()?;
    let configs = cfg.configs()?;
    let multi = configs.len() > 1;
    let depth = cfg.solver.depth;
    let mut entries = Vec::new();
    let mut table = Vec::new();
    for (n, pc) in &configs {
        let sfx = suffix(multi, *n);
        run.write(&format!("centers{sfx}.csv"), |w| pc.write_centers_csv(w))?;
        let hs = run_reflections(&source, pc, depth)?;
        run.write(&format!("dipoles{sfx}.csv"), |w| hs.write_dipoles_csv(w))?;
        run.write(&format!("norms{sfx}.csv"), |w| hs.write_norms_csv(w))?;
        let norms = hs.norms(2.0);
        let ratios: Vec<f64> = norms.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
        for (i, nm) in norms.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { num(ratios[i - 1]) };
            table.push(vec![n.to_string(), (i + 1).to_string(), num(*nm), ratio]);
        }
        let geometric = if norms.len() >= 3 { contraction_report(&norms).ok().map(|r| r.ratio) } else { None };
        let mut entry = json!({
            "label": n,
            "holes": pc.len(),
            "a": pc.a,
            "d": pc.d,
            "a_over_d": pc.a_over_d(),
            "config_hash": pc.hash_hex(),
            "norms_l2": norms,
            "ratios": ratios,
            "geometric_ratio": geometric,
            "boundary_residual": hs.boundary_residual(64),
        });
        let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
        if cfg.geometry().kind == GeometryKind::TwoHole {
            let expected = pc.a_over_d().powi(2);
            let err = ratios.iter().map(|r| (r - expected).abs() / expected).fold(0.0, f64::max);
            entry["expected_ratio"] = json!(expected);
            run.checks.push(Check::below("two_hole_ratio_rel_err", err, 1e-10));
        } else if pc.len() > 1 && pc.a_over_d() <= 0.1 && !ratios.is_empty() {
            run.checks.push(Check::below(&format!("contraction_ratio{sfx}"), max_ratio, 0.5));
        }
        if cfg.solver.oracle {
            let sol = solve_collocation(&source, pc, cfg.solver.order, cfg.solver.points)?;
            let json = sol.to_json()?;
            run.write(&format!("oracle{sfx}.json"), |w| Ok(w.write_all(json.as_bytes())?))?;
            let mut flux = 0.0f64;
            for l in 0..pc.len() {
                flux = flux.max(sol.flux(l, pc.a, 512)?.abs());
            }
            entry["oracle"] = json!({ "residual": sol.residual, "condition": sol.condition, "max_flux": flux });
            run.checks.push(Check::below(&format!("oracle_residual{sfx}"), sol.residual, 1e-6));
            run.checks.push(Check::below(&format!("oracle_flux{sfx}"), flux, 1e-8));
            if let (Source::Linear(g), 1) = (&source, pc.len()) {
                let err = (sol.dipole_moment(0) + g).norm() / g.norm();
                entry["oracle"]["dipole_rel_err"] = json!(err);
                run.checks.push(Check::below("oracle_dipole_rel_err", err, 1e-3));
            }
        }
        entries.push(entry);
    }
    run.write_rows("contraction.csv", &["label", "level", "norm_l2", "ratio"], &table)?;
    Ok(json!({ "depth": depth, "configs": entries }))
}

pub fn homog(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let s = &cfg.solver;
    let backend = cfg.backend();
    if let Some(kappas) = &s.kappa {
        let setup = HomogSetup {
            kappas: kappas.clone(),
            kpm_box: cfg.kpm_box(),
            h: s.h,
            backend,
            tol: s.tol,
            max_iter: s.max_iter,
            vorticity: grid_shape_required(cfg, "homog")?,
            h_source: cfg.vorticity().h,
            q: cfg.analysis.q,
        };
        let rep = homogenized_rates(&setup)?;
        let mut rows: Vec<Vec<String>> = rep
            .rows
            .iter()
            .map(|r| vec![num(r.knorm), num(r.err_psi0), num(r.err_tilde), r.iterations.to_string(), num(r.err_psi0_l2), num(r.err_tilde_l2)])
            .collect();
        if rep.fit_psi0.is_some() {
            rows.push(fit_row(6, "slope", 1, &rep.fit_psi0));
            rows.last_mut().unwrap()[2] = rep.fit_tilde.as_ref().map_or(String::new(), |f| num(f.slope));
        }
        run.write_rows("homog_sweep.csv", &["knorm", "err_psi0", "err_tilde", "iterations", "err_psi0_l2", "err_tilde_l2"], &rows)?;
        if let (Some(f1), Some(f2)) = (&rep.fit_psi0, &rep.fit_tilde) {
            run.checks.push(Check::below("slope_psi0_minus_1", (f1.slope - 1.0).abs(), 0.2));
            run.checks.push(Check::below("slope_tilde_minus_2", (f2.slope - 2.0).abs(), 0.2));
        }
        return Ok(json!({ "q": setup.q, "rows": rep.rows, "fit_psi0": fit_json(&rep.fit_psi0), "fit_tilde": fit_json(&rep.fit_tilde) }));
    }

    let source = cfg.source()?;
    let spec = GridSpec::covering(&cfg.kpm_box(), s.h)?;
    let g0 = grad_psi0_on(&source, spec);
    let m = EffectiveMatrix::disk();
    let configs = cfg.configs()?;
    let multi = configs.len() > 1;
    let mut entries = Vec::new();
    for (n, pc) in &configs {
        let sfx = suffix(multi, *n);
        let k = lattice_fraction(pc, spec)?;
        let sol = solve_psic(&g0, &k, &m, backend, s.tol, s.max_iter)?;
        run.write(&format!("homog_grad{sfx}.csv"), |w| sol.write_csv(w))?;
        let mut entry = json!({
            "label": n,
            "knorm": k.sup_norm(),
            "iterations": sol.iterations,
            "increments": sol.increments,
            "err_psi0_lq": (&sol.grad - &g0).lq_norm(cfg.analysis.q),
        });
        let a = apply_l(&g0, &k, &m, Backend::Spectral { pad: s.pad })?;
        let b = apply_l(&g0, &k, &m, Backend::Direct)?;
        let scale = b.l2_norm();
        entry["spectral_vs_direct_lattice"] = json!(if scale > 0.0 { (&a - &b).l2_norm() / scale } else { 0.0 });
        entries.push(entry);
    }
    let mut result = json!({ "configs": entries });
    if s.cross_check {
        let rep = backend_agreement(&BackendSetup { h: s.cross_check_h, pad: s.pad, ..BackendSetup::default() })?;
        run.checks.push(Check::below("spectral_vs_direct_bump", rep.spectral_vs_direct, 1e-3));
        run.checks.push(Check::below("velocity_vs_finite_differences", rep.velocity_vs_fd, 1e-4));
        result["cross_check"] = json!(rep);
    }
    Ok(result)
}

fn unwrap_angle(prev: f64, next: f64) -> f64 {
    let mut d = next - prev;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d < -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

pub fn euler(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let e = cfg.euler.as_ref().expect("validated euler block");
    let v = cfg.vorticity();
    let g = cfg.geometry();
    let particles = match v.shape {
        Shape::Pair => cfg.pair_particles()?,
        Shape::Linear => return Err(Error::InvalidConfig("euler needs a vorticity shape of disk, bump or pair".into())),
        _ => {
            let omega = grid_shape_required(cfg, "euler")?.field(v.h)?;
            perforated::euler::discretize_vorticity(&omega, e.h_p, e.blob)?
        }
    };

    if g.kind == GeometryKind::None {
        let steps = (e.horizon / e.dt).round() as usize;
        let mut state = FlowState::new(particles.clone(), &Setting::Free, e.margin)?;
        let c = Vec2::new(v.center[0], v.center[1]);
        let angle = |p: Vec2| (p.y - c.y).atan2(p.x - c.x);
        let mut turned = 0.0;
        let mut last = angle(state.particles.positions[0]);
        let mut rows = Vec::new();
        let snap = |s: &FlowState, rows: &mut Vec<Vec<String>>| {
            for (x, w) in s.particles.positions.iter().zip(&s.particles.weights) {
                rows.push(vec![num(s.t), num(x.x), num(x.y), num(*w)]);
            }
        };
        snap(&state, &mut rows);
        for i in 1..=steps {
            state = evolve(&state, e.dt, 1, &Setting::Free)?;
            let a = angle(state.particles.positions[0]);
            turned += unwrap_angle(last, a);
            last = a;
            if i % e.every == 0 || i == steps {
                snap(&state, &mut rows);
            }
        }
        run.write_rows("trajectory.csv", &["t", "x", "y", "w"], &rows)?;
        let conserved = state.particles.weights == particles.weights;
        run.checks.push(Check { name: "weights_conserved".into(), value: f64::from(u8::from(conserved)), tolerance: 1.0, passed: conserved });
        let mut result = json!({ "steps": steps, "t": state.t, "particles": particles.len(), "total_circulation": state.particles.total_circulation() });
        if v.shape == Shape::Pair && turned.abs() > 0.0 {
            let analytic = pair_period(v.amplitude, v.radius);
            let measured = 2.0 * std::f64::consts::PI * state.t / turned.abs();
            let err = (measured - analytic).abs() / analytic;
            result["analytic_period"] = json!(analytic);
            result["measured_period"] = json!(measured);
            run.checks.push(Check::below("pair_period_rel_err", err, 0.02));
        }
        return Ok(result);
    }

    if v.shape == Shape::Pair {
        return Err(Error::InvalidConfig("comparison runs need a grid vorticity shape (disk or bump)".into()));
    }
    let ns = g.n.as_ref().map(|n| n.to_vec()).unwrap_or_default();
    if g.kind != GeometryKind::Lattice || ns.len() != 1 {
        return Err(Error::InvalidConfig("comparison runs need a lattice geometry with a single n".into()));
    }
    let epsilons = e.epsilons.clone().unwrap_or_else(|| vec![g.epsilon.unwrap_or(0.0)]);
    let setup = StabilitySetup {
        n_per_side: ns[0],
        epsilons,
        kpm_box: cfg.kpm_box(),
        vorticity: grid_shape_required(cfg, "euler")?,
        h_omega: v.h,
        h_p: e.h_p,
        blob: e.blob,
        horizon: e.horizon,
        dt: e.dt,
        margin: e.margin,
        h_k: cfg.solver.h,
        depth: cfg.solver.depth,
        full: cfg.solver.full_neumann.then_some(NeumannOptions { backend: cfg.backend(), tol: cfg.solver.tol, max_iter: cfg.solver.max_iter }),
    };
    let rows = stability_sweep_particles(&particles, &setup)?;
    let mut entries = Vec::new();
    for r in &rows {
        run.write(&format!("timeseries_eps{}.csv", r.epsilon), |w| r.series.write_csv(w))?;
        entries.push(json!({ "epsilon": r.epsilon, "final_divergence": r.final_divergence, "halted_at": r.series.halted_at }));
        run.checks.push(Check { name: format!("no_halt_eps{}", r.epsilon), value: f64::from(u8::from(r.halted)), tolerance: 0.0, passed: !r.halted });
    }
    let mut sorted: Vec<_> = rows.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let mut result = json!({ "particles": particles.len(), "runs": entries });
    if sorted.len() >= 2 && sorted[0].final_divergence > 0.0 {
        let ratio = sorted.last().unwrap().final_divergence / sorted[0].final_divergence;
        result["divergence_reduction"] = json!(ratio);
        run.checks.push(Check { name: "divergence_reduction".into(), value: ratio, tolerance: 2.0, passed: ratio >= 2.0 });
    }
    Ok(result)
}

pub fn divcurl(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let g = cfg.geometry();
    let s = &cfg.solver;
    let setup = GammaSetup {
        ns: g.n.as_ref().map(|n| n.to_vec()).unwrap_or_default(),
        epsilon: g.epsilon.unwrap_or(0.0),
        kpm_box: cfg.kpm_box(),
        region: cfg.region(),
        h_region: cfg.analysis.h,
        h_k: s.h,
        vorticity: grid_shape_required(cfg, "divcurl")?,
        h_source: cfg.vorticity().h,
        order: s.order,
        pts: s.points,
        depth: s.depth,
        proxy_depth: s.depth.max(10),
        eta: cfg.analysis.eta,
        backend: cfg.backend(),
    };
    let rows = gamma_sweep(&setup)?;
    let mut table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_per_side.to_string(),
                num(r.report.grad_gamma1),
                num(r.report.gamma2),
                num(r.report.reference),
                num(r.report.normalized),
                r.report.budget.as_ref().map_or(String::new(), |b| num(b.f_value)),
                r.exact_from_oracle.to_string(),
            ]
        })
        .collect();
    let fit = if rows.len() >= 2 && rows.iter().all(|r| r.report.normalized > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| r.n_per_side as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.report.normalized).collect();
        fit_exponent(&xs, &ys).ok()
    } else {
        None
    };
    if fit.is_some() {
        table.push(fit_row(7, "slope", 4, &fit));
    }
    run.write_rows("gamma.csv", &["n_per_side", "grad_gamma1", "gamma2", "reference", "normalized", "predictor_f", "oracle"], &table)?;
    let vals: Vec<f64> = rows.iter().map(|r| r.report.normalized).collect();
    let increase = vals.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    if vals.len() >= 2 {
        run.checks.push(Check { name: "non_increasing_in_n".into(), value: increase, tolerance: 0.0, passed: increase <= 0.0 });
    }
    let bound = 0.5 * std::f64::consts::PI * setup.epsilon * setup.epsilon;
    if let Some(last) = vals.last() {
        run.checks.push(Check::below("final_below_half_k", *last, bound));
    }
    let out: Vec<Value> = rows.iter().map(|r| json!({ "n_per_side": r.n_per_side, "exact_from_oracle": r.exact_from_oracle, "report": r.report })).collect();
    Ok(json!({ "rows": out, "fit_vs_n": fit_json(&fit) }))
}

pub fn sweep(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let g = cfg.geometry();
    let s = &cfg.solver;
    let n = g.n.as_ref().map(|n| n.to_vec()).unwrap_or_default().first().copied().unwrap_or(4);
    let setup = AccuracySetup {
        n_per_side: n,
        cases: g.cases.clone().unwrap_or_default().iter().map(|c| (c[0], c[1])).collect(),
        center: cfg.kpm_box().center(),
        depth: s.depth,
        order: s.order,
        pts: s.points,
        vorticity: grid_shape_required(cfg, "sweep")?,
        h_source: cfg.vorticity().h,
        h_over_a: 1.0 / 8.0,
    };
    let rep = reflection_accuracy(&setup)?;
    let mut table: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| vec![num(r.d), num(r.a), num(r.a_over_d), num(r.error), num(r.relative), num(r.oracle_residual)])
        .collect();
    table.push(fit_row(6, "slope", 3, &Some(rep.fit)));
    run.write_rows("accuracy.csv", &["d", "a", "a_over_d", "error", "relative", "oracle_residual"], &table)?;
    let mut by_ratio: Vec<_> = rep.rows.iter().collect();
    by_ratio.sort_by(|a, b| a.a_over_d.total_cmp(&b.a_over_d));
    let worst = by_ratio.windows(2).map(|w| w[0].error - w[1].error).fold(f64::NEG_INFINITY, f64::max);
    if by_ratio.len() >= 2 {
        run.checks.push(Check { name: "error_decreases_with_a_over_d".into(), value: worst, tolerance: 0.0, passed: worst < 0.0 });
    }
    Ok(json!({ "n_per_side": n, "rows": rep.rows, "fit": rep.fit }))
}
