//! Planar vectors, rectangles and uniform cell-centered grid fields.
//!
//! A grid with origin `o`, spacing `h` and `nx * ny` cells has cell `(i, j)`
//! covering `[o.x + i h, o.x + (i+1) h] x [o.y + j h, o.y + (j+1) h]`; samples
//! live at cell centers and are stored row-major (`j * nx + i`).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;

/// Perpendicular vector `(-v_y, v_x)`, so that `perp(grad psi)` is the velocity.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let all_finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !all_finite || x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidInput(format!(
                "degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn unit() -> Self {
        Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_disk(&self, c: Vec2, r: f64) -> bool {
        c.x - r >= self.x0 && c.x + r <= self.x1 && c.y - r >= self.y0 && c.y + r <= self.y1
    }

    /// Euclidean distance from `p` to the rectangle (zero inside).
    pub fn distance_to(&self, p: Vec2) -> f64 {
        let dx = (self.x0 - p.x).max(0.0).max(p.x - self.x1);
        let dy = (self.y0 - p.y).max(0.0).max(p.y - self.y1);
        dx.hypot(dy)
    }

    pub fn expand(&self, margin: f64) -> Rect {
        Rect {
            x0: self.x0 - margin,
            y0: self.y0 - margin,
            x1: self.x1 + margin,
            y1: self.y1 + margin,
        }
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Area of the intersection with `other`.
    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }
}

/// Geometry of a uniform cell-centered grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(origin: Vec2, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) || nx == 0 || ny == 0 {
            return Err(Error::InvalidInput(format!(
                "invalid grid: h = {h}, nx = {nx}, ny = {ny}"
            )));
        }
        Ok(GridSpec { origin: [origin.x, origin.y], h, nx, ny })
    }

    /// Smallest grid with spacing `h` and lower-left corner at `rect`'s corner
    /// covering `rect`.
    pub fn covering(rect: &Rect, h: f64) -> Result<Self> {
        // Tolerate rounding so that e.g. a unit box at h = 1/64 gets exactly 64 cells.
        let nx = ((rect.width() / h) - 1e-9).ceil().max(1.0) as usize;
        let ny = ((rect.height() / h) - 1e-9).ceil().max(1.0) as usize;
        GridSpec::new(Vec2::new(rect.x0, rect.y0), h, nx, ny)
    }

    pub fn origin(&self) -> Vec2 {
        Vec2::new(self.origin[0], self.origin[1])
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin[0] + (i as f64 + 0.5) * self.h,
            self.origin[1] + (j as f64 + 0.5) * self.h,
        )
    }

    /// Center of the cell with flat index `idx`.
    #[inline]
    pub fn center_of(&self, idx: usize) -> Vec2 {
        self.center(idx % self.nx, idx / self.nx)
    }

    pub fn cell_rect(&self, i: usize, j: usize) -> Rect {
        let x0 = self.origin[0] + i as f64 * self.h;
        let y0 = self.origin[1] + j as f64 * self.h;
        Rect { x0, y0, x1: x0 + self.h, y1: y0 + self.h }
    }

    pub fn extent(&self) -> Rect {
        Rect {
            x0: self.origin[0],
            y0: self.origin[1],
            x1: self.origin[0] + self.nx as f64 * self.h,
            y1: self.origin[1] + self.ny as f64 * self.h,
        }
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Cell containing `p`, if any.
    pub fn locate(&self, p: Vec2) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin[0]) / self.h;
        let fy = (p.y - self.origin[1]) / self.h;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Same extent, spacing divided by `factor`.
    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec {
            origin: self.origin,
            h: self.h / factor as f64,
            nx: self.nx * factor,
            ny: self.ny * factor,
        }
    }

    pub fn centers(&self) -> impl Iterator<Item = Vec2> + '_ {
        (0..self.len()).map(move |idx| self.center_of(idx))
    }
}

/// Cell-centered samples of a scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGridField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

/// Summary written into run JSON files.
#[derive(Clone, Debug, Serialize)]
pub struct GridDescriptor {
    pub spec: GridSpec,
    pub integral: f64,
    pub l1: f64,
    pub sup: f64,
    pub support: Option<Rect>,
}

impl ScalarGridField {
    pub fn zeros(spec: GridSpec) -> Self {
        ScalarGridField { spec, values: vec![0.0; spec.len()] }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::InvalidInput(format!(
                "grid expects {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite grid value".into()));
        }
        Ok(ScalarGridField { spec, values })
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(spec: GridSpec, f: impl Fn(Vec2) -> f64) -> Self {
        let values = spec.centers().map(f).collect();
        ScalarGridField { spec, values }
    }

    /// Cell averages of `f` estimated from `sub x sub` interior samples per cell.
    pub fn from_fn_averaged(spec: GridSpec, sub: usize, f: impl Fn(Vec2) -> f64) -> Self {
        let sub = sub.max(1);
        let step = spec.h / sub as f64;
        let weight = 1.0 / (sub * sub) as f64;
        let values = (0..spec.len())
            .map(|idx| {
                let (i, j) = (idx % spec.nx, idx / spec.nx);
                let corner = spec.cell_rect(i, j);
                let mut acc = 0.0;
                for q in 0..sub {
                    for p in 0..sub {
                        let x = Vec2::new(
                            corner.x0 + (p as f64 + 0.5) * step,
                            corner.y0 + (q as f64 + 0.5) * step,
                        );
                        acc += f(x);
                    }
                }
                acc * weight
            })
            .collect();
        ScalarGridField { spec, values }
    }

    /// `amplitude * 1_{B(center, radius)}` with cell values equal to the covered
    /// area fraction (16 x 16 subsamples on cells cut by the circle).
    pub fn disk_indicator(spec: GridSpec, center: Vec2, radius: f64, amplitude: f64) -> Self {
        let mut field = ScalarGridField::zeros(spec);
        let half_diag = spec.h * std::f64::consts::FRAC_1_SQRT_2;
        for idx in 0..spec.len() {
            let c = spec.center_of(idx);
            let dist = (c - center).norm();
            field.values[idx] = if dist + half_diag <= radius {
                amplitude
            } else if dist - half_diag >= radius {
                0.0
            } else {
                let (i, j) = (idx % spec.nx, idx / spec.nx);
                amplitude * disk_cell_fraction(&spec.cell_rect(i, j), center, radius, 16)
            };
        }
        field
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.spec.cell_area()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bounding rectangle of the cells carrying nonzero values.
    pub fn support_rect(&self) -> Option<Rect> {
        let mut out: Option<Rect> = None;
        for (idx, v) in self.values.iter().enumerate() {
            if *v != 0.0 {
                let cell = self.spec.cell_rect(idx % self.spec.nx, idx / self.spec.nx);
                out = Some(match out {
                    None => cell,
                    Some(r) => r.union(&cell),
                });
            }
        }
        out
    }

    /// `(cell rectangle, value)` for every nonzero cell.
    pub fn nonzero_cells(&self) -> impl Iterator<Item = (Rect, f64)> + '_ {
        self.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(idx, v)| {
            (self.spec.cell_rect(idx % self.spec.nx, idx / self.spec.nx), *v)
        })
    }

    pub fn descriptor(&self) -> GridDescriptor {
        GridDescriptor {
            spec: self.spec,
            integral: self.integral(),
            l1: self.l1_norm(),
            sup: self.sup_norm(),
            support: self.support_rect(),
        }
    }

    /// Writes `origin_x,origin_y,h,nx,ny` followed by `ny` rows of `nx` values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        wtr.write_record(["origin_x", "origin_y", "h", "nx", "ny"])?;
        let s = &self.spec;
        wtr.write_record(&[
            s.origin[0].to_string(),
            s.origin[1].to_string(),
            s.h.to_string(),
            s.nx.to_string(),
            s.ny.to_string(),
        ])?;
        for row in self.values.chunks(s.nx) {
            wtr.write_record(row.iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(r);
        let mut records = rdr.records();
        let bad = |m: &str| Error::InvalidInput(format!("grid csv: {m}"));
        let head = records.next().ok_or_else(|| bad("missing descriptor row"))??;
        let num = |k: usize| -> Result<f64> {
            head.get(k)
                .ok_or_else(|| bad("short descriptor row"))?
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(&e.to_string()))
        };
        let origin = Vec2::new(num(0)?, num(1)?);
        let (h, nx, ny) = (num(2)?, num(3)? as usize, num(4)? as usize);
        let spec = GridSpec::new(origin, h, nx, ny)?;
        let mut values = Vec::with_capacity(spec.len());
        for rec in records {
            let rec = rec?;
            for field in rec.iter() {
                values.push(field.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))?);
            }
        }
        ScalarGridField::from_values(spec, values)
    }
}

impl std::ops::Sub for &ScalarGridField {
    type Output = ScalarGridField;

    fn sub(self, rhs: &ScalarGridField) -> ScalarGridField {
        assert_eq!(self.spec, rhs.spec, "grid mismatch");
        ScalarGridField {
            spec: self.spec,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Fraction of `cell` covered by the disk `B(center, radius)`, by subsampling.
pub fn disk_cell_fraction(cell: &Rect, center: Vec2, radius: f64, sub: usize) -> f64 {
    let step_x = cell.width() / sub as f64;
    let step_y = cell.height() / sub as f64;
    let r2 = radius * radius;
    let mut hits = 0usize;
    for q in 0..sub {
        let y = cell.y0 + (q as f64 + 0.5) * step_y - center.y;
        for p in 0..sub {
            let x = cell.x0 + (p as f64 + 0.5) * step_x - center.x;
            if x * x + y * y <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (sub * sub) as f64
}

/// Cell-centered samples of a planar vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorGridField {
    pub spec: GridSpec,
    pub values: Vec<Vec2>,
}

impl VectorGridField {
    pub fn zeros(spec: GridSpec) -> Self {
        VectorGridField { spec, values: vec![Vec2::zeros(); spec.len()] }
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(Vec2) -> Vec2) -> Self {
        let values = spec.centers().map(f).collect();
        VectorGridField { spec, values }
    }

    pub fn map(&self, f: impl Fn(Vec2) -> Vec2) -> Self {
        VectorGridField { spec: self.spec, values: self.values.iter().map(|v| f(*v)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(Vec2, Vec2) -> Vec2) -> Self {
        assert_eq!(self.spec, other.spec, "grid mismatch");
        VectorGridField {
            spec: self.spec,
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// `(sum |v|^q h^2)^(1/q)`, or the max norm for `q = inf`.
    pub fn lq_norm(&self, q: f64) -> f64 {
        if q.is_infinite() {
            return self.values.iter().fold(0.0, |m, v| m.max(v.norm()));
        }
        let s: f64 = self.values.iter().map(|v| v.norm().powf(q)).sum();
        (s * self.spec.cell_area()).powf(1.0 / q)
    }

    pub fn l2_norm(&self) -> f64 {
        self.lq_norm(2.0)
    }

    /// Bilinear interpolation between cell centers.
    pub fn interpolate(&self, p: Vec2) -> Result<Vec2> {
        let s = &self.spec;
        let fx = (p.x - s.origin[0]) / s.h - 0.5;
        let fy = (p.y - s.origin[1]) / s.h - 0.5;
        let outside = || Error::OutOfGrid { x: p.x, y: p.y };
        if !(fx >= 0.0 && fy >= 0.0) || s.nx < 2 || s.ny < 2 {
            return Err(outside());
        }
        let (mut i, mut j) = (fx.floor() as usize, fy.floor() as usize);
        // Points on the last center line interpolate inside the final cell pair.
        if i == s.nx - 1 && fx == (s.nx - 1) as f64 {
            i -= 1;
        }
        if j == s.ny - 1 && fy == (s.ny - 1) as f64 {
            j -= 1;
        }
        if i + 1 >= s.nx || j + 1 >= s.ny {
            return Err(outside());
        }
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let v = |i, j| self.values[s.index(i, j)];
        Ok(v(i, j) * (1.0 - tx) * (1.0 - ty)
            + v(i + 1, j) * tx * (1.0 - ty)
            + v(i, j + 1) * (1.0 - tx) * ty
            + v(i + 1, j + 1) * tx * ty)
    }

    pub fn component(&self, axis: usize) -> ScalarGridField {
        ScalarGridField { spec: self.spec, values: self.values.iter().map(|v| v[axis]).collect() }
    }

    /// Rows `x,y,vx,vy` at cell centers.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x", "y", "vx", "vy"])?;
        for (idx, v) in self.values.iter().enumerate() {
            let c = self.spec.center_of(idx);
            wtr.write_record(&[c.x.to_string(), c.y.to_string(), v.x.to_string(), v.y.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl std::ops::Sub for &VectorGridField {
    type Output = VectorGridField;

    fn sub(self, rhs: &VectorGridField) -> VectorGridField {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// Integrates a gradient field to a scalar, anchored to zero at cell `anchor`:
/// first along the anchor row, then up and down each column (trapezoid rule).
pub fn integrate_gradient(grad: &VectorGridField, anchor: (usize, usize)) -> ScalarGridField {
    let s = grad.spec;
    let (ia, ja) = anchor;
    let mut out = ScalarGridField::zeros(s);
    let g = |i: usize, j: usize| grad.values[s.index(i, j)];
    let mut row = vec![0.0; s.nx];
    for i in ia + 1..s.nx {
        row[i] = row[i - 1] + 0.5 * s.h * (g(i - 1, ja).x + g(i, ja).x);
    }
    for i in (0..ia).rev() {
        row[i] = row[i + 1] - 0.5 * s.h * (g(i, ja).x + g(i + 1, ja).x);
    }
    for (i, r) in row.iter().enumerate() {
        out.values[s.index(i, ja)] = *r;
        for j in ja + 1..s.ny {
            out.values[s.index(i, j)] =
                out.values[s.index(i, j - 1)] + 0.5 * s.h * (g(i, j - 1).y + g(i, j).y);
        }
        for j in (0..ja).rev() {
            out.values[s.index(i, j)] =
                out.values[s.index(i, j + 1)] - 0.5 * s.h * (g(i, j).y + g(i, j + 1).y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_grid_counts_cells_exactly() {
        let spec = GridSpec::covering(&Rect::unit(), 1.0 / 64.0).unwrap();
        assert_eq!((spec.nx, spec.ny), (64, 64));
        assert_eq!(spec.extent(), Rect::unit());
    }

    #[test]
    fn disk_indicator_mass() {
        let spec = GridSpec::covering(&Rect::new(-1.5, -1.5, 1.5, 1.5).unwrap(), 1.0 / 64.0).unwrap();
        let f = ScalarGridField::disk_indicator(spec, Vec2::zeros(), 1.0, 1.0);
        let rel = (f.integral() - std::f64::consts::PI).abs() / std::f64::consts::PI;
        assert!(rel < 1e-4, "rel = {rel}");
    }

    #[test]
    fn bilinear_interpolation_is_exact_for_affine_fields() {
        let spec = GridSpec::new(Vec2::new(-1.0, 0.5), 0.1, 20, 15).unwrap();
        let f = VectorGridField::from_fn(spec, |p| Vec2::new(2.0 * p.x - p.y, 0.5 + p.y));
        let p = Vec2::new(-0.33, 1.27);
        let v = f.interpolate(p).unwrap();
        assert!((v - Vec2::new(2.0 * p.x - p.y, 0.5 + p.y)).norm() < 1e-12);
        assert!(matches!(f.interpolate(Vec2::new(-0.99, 1.0)), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn grid_csv_round_trip() {
        let spec = GridSpec::new(Vec2::new(0.25, -1.0), 0.125, 3, 2).unwrap();
        let f = ScalarGridField::from_fn(spec, |p| p.x * p.y + 0.1);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = ScalarGridField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn integrate_gradient_recovers_potential() {
        let spec = GridSpec::new(Vec2::zeros(), 0.05, 30, 20).unwrap();
        let grad = VectorGridField::from_fn(spec, |p| Vec2::new(2.0 * p.x, 3.0));
        let psi = integrate_gradient(&grad, (0, 0));
        let c0 = spec.center(0, 0);
        for idx in [0, 17, 255, 599] {
            let c = spec.center_of(idx);
            let exact = (c.x * c.x + 3.0 * c.y) - (c0.x * c0.x + 3.0 * c0.y);
            assert!((psi.values[idx] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn rect_distance() {
        let r = Rect::unit();
        assert_eq!(r.distance_to(Vec2::new(0.5, 0.5)), 0.0);
        assert!((r.distance_to(Vec2::new(4.0, 5.0)) - 5.0).abs() < 1e-15);
        assert!(Rect::new(1.0, 0.0, 0.0, 1.0).is_err());
    }
}
