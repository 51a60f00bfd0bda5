//! Two-dimensional complex FFTs on row-major arrays.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

/// Row-major `nx * ny` complex array with forward and inverse transforms.
pub struct Fft2 {
    pub nx: usize,
    pub ny: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            nx,
            ny,
            fwd_x: p.plan_fft_forward(nx),
            inv_x: p.plan_fft_inverse(nx),
            fwd_y: p.plan_fft_forward(ny),
            inv_y: p.plan_fft_inverse(ny),
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(data, &self.fwd_x, &self.fwd_y);
    }

    /// Inverse transform including the `1/(nx ny)` normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(data, &self.inv_x, &self.inv_y);
        let s = 1.0 / (self.nx * self.ny) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    fn apply(&self, data: &mut [Complex64], fx: &Arc<dyn Fft<f64>>, fy: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.nx * self.ny);
        fx.process(data);
        let mut t = transpose(data, self.nx, self.ny);
        fy.process(&mut t);
        data.copy_from_slice(&transpose(&t, self.ny, self.nx));
    }

    /// Angular wavenumber of index `i` along an axis of `n` points and length `len`,
    /// with the Nyquist index mapped to `None`.
    pub fn wavenumber(i: usize, n: usize, len: f64) -> Option<f64> {
        if n.is_multiple_of(2) && i == n / 2 && n > 1 {
            return None;
        }
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        Some(2.0 * PI * k / len)
    }
}

fn transpose(data: &[Complex64], nx: usize, ny: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for j in 0..ny {
        for i in 0..nx {
            out[i * ny + j] = data[j * nx + i];
        }
    }
    out
}

/// Smallest `m >= n` whose prime factors are 2, 3 and 5.
pub fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}
