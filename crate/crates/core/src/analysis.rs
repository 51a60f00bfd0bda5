//! Error functionals, the error predictor and log-log rate fits.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::{smooth_size, Fft2};
use crate::geometry::{rasterize_mu, PorousConfig, VolumeFraction};
use crate::grid::{GridSpec, Rect, ScalarGridField, Vec2, VectorGridField};
use crate::homogenized::{potential_of_divergence, projection_at, weighted_field, EffectiveMatrix, HomogSolution};
use crate::reflections::{HybridStream, StreamCorrection};

/// Cells whose center lies at least `a + clearance` from every hole center.
pub fn fluid_mask(spec: &GridSpec, config: &PorousConfig, clearance: f64) -> Vec<bool> {
    let r2 = (config.a + clearance).powi(2);
    spec.centers().map(|p| config.a == 0.0 || config.centers.iter().all(|c| (p - c).norm_squared() >= r2)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskedNorm {
    pub value: f64,
    /// Set when no cell was selected.
    pub empty: bool,
}

/// `sqrt(sum |g|^2 h^2)` over masked cells whose centers lie in `region`.
pub fn h1dot_masked(g: &VectorGridField, mask: &[bool], region: &Rect) -> Result<MaskedNorm> {
    if mask.len() != g.values.len() {
        return Err(Error::InvalidInput(format!("mask has {} cells, field has {}", mask.len(), g.values.len())));
    }
    let mut sum = 0.0;
    let mut any = false;
    for (idx, (v, keep)) in g.values.iter().zip(mask).enumerate() {
        if *keep && region.contains(g.spec.center_of(idx)) {
            sum += v.norm_squared();
            any = true;
        }
    }
    Ok(MaskedNorm { value: (sum * g.spec.cell_area()).sqrt(), empty: !any })
}

/// `sqrt(|box| sum |c_m|^2 / (1 + |xi_m|^2))` treating the grid extent as a
/// periodic box, where `c_m` are the Fourier coefficients of `g`.
pub fn hminus1_periodic(g: &ScalarGridField) -> f64 {
    let s = g.spec;
    let (lx, ly) = (s.nx as f64 * s.h, s.ny as f64 * s.h);
    let fft = Fft2::new(s.nx, s.ny);
    let mut buf: Vec<Complex64> = g.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft.forward(&mut buf);
    let n = (s.nx * s.ny) as f64;
    let mut acc = 0.0;
    for jy in 0..s.ny {
        let ky = nyquist_free(jy, s.ny, ly);
        for ix in 0..s.nx {
            let kx = nyquist_free(ix, s.nx, lx);
            acc += (buf[jy * s.nx + ix] / n).norm_sqr() / (1.0 + kx * kx + ky * ky);
        }
    }
    (lx * ly * acc).sqrt()
}

/// Signed wavenumber, keeping the Nyquist index at `+pi/h`.
fn nyquist_free(i: usize, n: usize, len: f64) -> f64 {
    Fft2::wavenumber(i, n, len).unwrap_or(std::f64::consts::PI * n as f64 / len)
}

/// H^{-1} norm on a box `pad` times larger than the grid, zero-extended.
pub fn hminus1(g: &ScalarGridField, pad: usize) -> Result<f64> {
    if pad < 2 {
        return Err(Error::Padding(pad));
    }
    let s = g.spec;
    let (px, py) = (smooth_size(pad * s.nx), smooth_size(pad * s.ny));
    let big = GridSpec { origin: s.origin, h: s.h, nx: px, ny: py };
    let mut padded = ScalarGridField::zeros(big);
    for j in 0..s.ny {
        for i in 0..s.nx {
            padded.values[big.index(i, j)] = g.get(i, j);
        }
    }
    Ok(hminus1_periodic(&padded))
}

/// Grid on which `mu` and `k` are compared: the grid of `k`, refined until `h <= a/4`.
pub fn comparison_grid(config: &PorousConfig, k: &VolumeFraction) -> GridSpec {
    let spec = k.spec();
    if config.is_empty() || config.a == 0.0 {
        return spec;
    }
    let factor = (spec.h / (config.a / 4.0) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    spec.refined(factor)
}

/// `||mu - k||_{H^-1}` with `mu` the hole indicator.
pub fn mu_minus_k_hminus1(config: &PorousConfig, k: &VolumeFraction, pad: usize) -> Result<f64> {
    let fine = comparison_grid(config, k);
    let factor = (k.spec().h / fine.h).round() as usize;
    let mu = rasterize_mu(config, fine)?;
    let diff = ScalarGridField::from_values(
        fine,
        (0..fine.len()).map(|idx| mu.values[idx] - k.field.get((idx % fine.nx) / factor, (idx / fine.nx) / factor)).collect(),
    )?;
    hminus1(&diff, pad)
}

/// Terms of `F = (a/d)^(3-eta) + H^(p(1-eta)/(p+2)) + H^(1/2) + ||k||_inf^2`, `p = 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorBudget {
    pub a_over_d: f64,
    pub mu_minus_k_hm1: f64,
    pub k_inf: f64,
    pub eta: f64,
    pub p: f64,
    pub f_value: f64,
    /// `a / H^(p/(p+2))`; infinite when the weak norm vanishes.
    pub radius_ratio: f64,
}

pub const DEFAULT_ETA: f64 = 0.5;

impl ErrorBudget {
    pub fn from_parts(a: f64, a_over_d: f64, hm1: f64, k_inf: f64, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidInput(format!("eta = {eta} must lie in (0, 1)")));
        }
        let p = 2.0;
        let f_value = a_over_d.powf(3.0 - eta) + hm1.powf(p * (1.0 - eta) / (p + 2.0)) + hm1.sqrt() + k_inf * k_inf;
        let radius_ratio = if hm1 > 0.0 { a / hm1.powf(p / (p + 2.0)) } else if a == 0.0 { 0.0 } else { f64::INFINITY };
        Ok(ErrorBudget { a_over_d, mu_minus_k_hm1: hm1, k_inf, eta, p, f_value, radius_ratio })
    }

    pub fn terms(&self) -> [f64; 4] {
        let p = self.p;
        [
            self.a_over_d.powf(3.0 - self.eta),
            self.mu_minus_k_hm1.powf(p * (1.0 - self.eta) / (p + 2.0)),
            self.mu_minus_k_hm1.sqrt(),
            self.k_inf * self.k_inf,
        ]
    }
}

pub fn predictor_f(config: &PorousConfig, k: &VolumeFraction, eta: f64) -> Result<ErrorBudget> {
    let hm1 = mu_minus_k_hminus1(config, k, 2)?;
    ErrorBudget::from_parts(config.a, config.a_over_d(), hm1, k.sup_norm(), eta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<Fit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("need at least two (x, y) pairs of equal count".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("rate fits need positive finite data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("rate fits need distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(Fit { slope, intercept, r2 })
}

/// Fields of the homogenized solution needed off-grid.
#[derive(Clone, Debug)]
pub struct HomogenizedFields {
    /// `k M grad psi0`.
    pub w0: VectorGridField,
    /// `k M (grad psi_c - grad psi0)`.
    pub w_gap: VectorGridField,
}

impl HomogenizedFields {
    pub fn new(grad_psi0: &VectorGridField, sol: &HomogSolution, k: &VolumeFraction, m: &EffectiveMatrix) -> Result<Self> {
        let w0 = weighted_field(grad_psi0, k, m)?;
        let gap = sol.grad.zip_with(grad_psi0, |c, z| c - z);
        Ok(HomogenizedFields { w0, w_gap: weighted_field(&gap, k, m)? })
    }

    /// `psi~_c - psi0 = -Lap^{-1} div(k M grad psi0)`.
    pub fn first_order_correction(&self, x: Vec2) -> f64 {
        -potential_of_divergence(&self.w0, x)
    }

    /// `grad(psi~_c - psi_c) = L(grad psi_c - grad psi0)`.
    pub fn expansion_gap_grad(&self, x: Vec2) -> Vec2 {
        projection_at(&self.w_gap, x)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaReport {
    /// `||grad Gamma_1||_{L2(O cap F_N)}`.
    pub grad_gamma1: f64,
    /// `||Gamma_2||_{L2(O cap F_N)}`.
    pub gamma2: f64,
    /// `||grad psi0||_{L2(O cap F_N)}`.
    pub reference: f64,
    /// `(grad_gamma1 + gamma2) / reference`.
    pub normalized: f64,
    pub cells: usize,
    pub budget: Option<ErrorBudget>,
}

/// Norms of `Gamma_1 = psi_N - psibar_N + psi~_c - psi_c` and
/// `Gamma_2 = psibar_N - psi~_c` on the fluid cells of a grid over `region`.
pub fn gamma_decomposition_report(
    exact: &dyn StreamCorrection,
    reflections: &HybridStream,
    homog: &HomogenizedFields,
    region: &Rect,
    h: f64,
) -> Result<GammaReport> {
    let spec = GridSpec::covering(region, h)?;
    let mask = fluid_mask(&spec, &reflections.config, h * std::f64::consts::FRAC_1_SQRT_2);
    let pts: Vec<Vec2> = spec.centers().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| p).collect();
    let rows: Vec<(f64, f64, f64)> = pts
        .par_iter()
        .map(|x| {
            let g1 = exact.correction_grad(*x) - reflections.correction_grad(*x) + homog.expansion_gap_grad(*x);
            let g2 = reflections.correction(*x) - homog.first_order_correction(*x);
            let g0 = reflections.source.grad_psi0(*x);
            (g1.norm_squared(), g2 * g2, g0.norm_squared())
        })
        .collect();
    let area = spec.cell_area();
    let sum = |f: fn(&(f64, f64, f64)) -> f64| (rows.iter().map(f).sum::<f64>() * area).sqrt();
    let (grad_gamma1, gamma2, reference) = (sum(|r| r.0), sum(|r| r.1), sum(|r| r.2));
    let normalized = if reference > 0.0 { (grad_gamma1 + gamma2) / reference } else { 0.0 };
    Ok(GammaReport { grad_gamma1, gamma2, reference, normalized, cells: pts.len(), budget: None })
}
