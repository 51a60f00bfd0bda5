//! Run configuration: a sectioned TOML file validated at load.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use perforated::experiments::VorticitySpec;
use perforated::geometry::{build_lattice, build_random, PorousConfig};
use perforated::homogenized::{Backend, DEFAULT_MAX_ITER, DEFAULT_TOL};
use perforated::potential::Source;
use perforated::{Rect, Vec2};

/// A configuration problem found before any computation starts.
#[derive(Debug)]
pub struct ConfigError {
    pub invariant: String,
    pub message: String,
}

impl ConfigError {
    fn new(invariant: &str, message: impl Into<String>) -> Self {
        ConfigError { invariant: invariant.to_string(), message: message.into() }
    }
}

pub type ConfigResult<T> = Result<T, ConfigError>;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Lattice,
    Random,
    TwoHole,
    Single,
    None,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub kind: GeometryKind,
    #[serde(default)]
    pub n: Option<OneOrMany<usize>>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub center: Option<[f64; 2]>,
    #[serde(default = "unit_box", rename = "box")]
    pub kpm_box: [f64; 4],
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    /// `(d, a)` pairs for accuracy sweeps.
    #[serde(default)]
    pub cases: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Bump,
    Pair,
    Linear,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VorticityBlock {
    pub shape: Shape,
    #[serde(default)]
    pub center: [f64; 2],
    #[serde(default)]
    pub radius: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default)]
    pub gradient: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Spectral,
    Direct,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_pad")]
    pub pad: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_backend")]
    pub backend: BackendName,
    #[serde(default)]
    pub kappa: Option<Vec<f64>>,
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub cross_check: bool,
    /// Grid spacing of the smooth-bump backend comparison.
    #[serde(default = "default_cross_check_h")]
    pub cross_check_h: f64,
    #[serde(default)]
    pub full_neumann: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        toml::from_str("").expect("solver defaults")
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EulerBlock {
    pub dt: f64,
    pub horizon: f64,
    pub blob: f64,
    #[serde(default = "default_h_p")]
    pub h_p: f64,
    #[serde(default = "one")]
    pub margin: f64,
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default = "default_every")]
    pub every: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_region")]
    pub region: [f64; 4],
    #[serde(default = "default_region_h")]
    pub h: f64,
    #[serde(default = "default_q")]
    pub q: f64,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        toml::from_str("").expect("analysis defaults")
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: Option<GeometryBlock>,
    #[serde(default)]
    pub vorticity: Option<VorticityBlock>,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub euler: Option<EulerBlock>,
    #[serde(default)]
    pub analysis: AnalysisBlock,
}

fn unit_box() -> [f64; 4] {
    [0.0, 0.0, 1.0, 1.0]
}
fn default_eps0() -> f64 {
    0.25
}
fn one() -> f64 {
    1.0
}
fn default_h() -> f64 {
    1.0 / 32.0
}
fn default_cross_check_h() -> f64 {
    1.0 / 128.0
}
fn default_depth() -> usize {
    3
}
fn default_order() -> usize {
    perforated::oracle::DEFAULT_ORDER
}
fn default_points() -> usize {
    perforated::oracle::DEFAULT_POINTS
}
fn default_pad() -> usize {
    perforated::homogenized::DEFAULT_PAD
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_backend() -> BackendName {
    BackendName::Spectral
}
fn default_h_p() -> f64 {
    0.1
}
fn default_every() -> usize {
    1
}
fn default_eta() -> f64 {
    perforated::analysis::DEFAULT_ETA
}
fn default_region() -> [f64; 4] {
    [-0.45, 0.2, -0.15, 0.8]
}
fn default_region_h() -> f64 {
    0.01
}
fn default_q() -> f64 {
    4.0
}

fn positive(name: &str, v: f64) -> ConfigResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(&format!("{name} > 0"), format!("{name} = {v} must be positive and finite")))
    }
}

fn rect_of(name: &str, r: [f64; 4]) -> ConfigResult<Rect> {
    Rect::new(r[0], r[1], r[2], r[3]).map_err(|e| ConfigError::new(&format!("{name} is a non-degenerate rectangle"), e.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> ConfigResult<Self> {
        toml::from_str(text).map_err(|e| ConfigError::new("config grammar", e.to_string()))
    }

    /// Checks numeric ranges and that every block the command needs is present.
    pub fn validate(&self, command: &str) -> ConfigResult<()> {
        if let Some(exp) = &self.experiment {
            if exp != command {
                return Err(ConfigError::new("experiment matches subcommand", format!("config is for '{exp}' but '{command}' was requested")));
            }
        }
        let s = &self.solver;
        positive("solver.h", s.h)?;
        positive("solver.tol", s.tol)?;
        positive("solver.cross_check_h", s.cross_check_h)?;
        if s.pad < 2 {
            return Err(ConfigError::new("solver.pad >= 2", format!("pad = {}", s.pad)));
        }
        if s.depth == 0 || s.order == 0 || s.max_iter == 0 {
            return Err(ConfigError::new("solver.depth, order, max_iter >= 1", "a solver count is zero"));
        }
        if s.points < 4 * s.order {
            return Err(ConfigError::new("solver.points >= 4 * order", format!("points = {}, order = {}", s.points, s.order)));
        }
        if let Some(k) = &s.kappa {
            if k.is_empty() || k.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(ConfigError::new("solver.kappa >= 0", "kappa values must be finite and non-negative"));
            }
        }
        let an = &self.analysis;
        positive("analysis.h", an.h)?;
        positive("analysis.q", an.q)?;
        if !(0.0..=1.0).contains(&an.eta) {
            return Err(ConfigError::new("analysis.eta in [0, 1]", format!("eta = {}", an.eta)));
        }
        rect_of("analysis.region", an.region)?;

        if let Some(g) = &self.geometry {
            self.validate_geometry(g)?;
        }
        if let Some(v) = &self.vorticity {
            positive("vorticity.h", v.h)?;
            match v.shape {
                Shape::Linear => {
                    if v.gradient.is_none() {
                        return Err(ConfigError::new("vorticity.gradient present for linear shape", "missing gradient"));
                    }
                }
                _ => positive("vorticity.radius", v.radius)?,
            }
            if !v.amplitude.is_finite() {
                return Err(ConfigError::new("vorticity.amplitude finite", "amplitude is not finite"));
            }
        }
        if let Some(e) = &self.euler {
            positive("euler.dt", e.dt)?;
            positive("euler.horizon", e.horizon)?;
            positive("euler.blob", e.blob)?;
            positive("euler.h_p", e.h_p)?;
            positive("euler.margin", e.margin)?;
            if e.every == 0 {
                return Err(ConfigError::new("euler.every >= 1", "every = 0"));
            }
        }

        let need = |present: bool, block: &str| -> ConfigResult<()> {
            if present {
                Ok(())
            } else {
                Err(ConfigError::new(&format!("[{block}] present for {command}"), format!("the {command} command needs a [{block}] block")))
            }
        };
        match command {
            "reflect" | "divcurl" | "sweep" => {
                need(self.geometry.is_some(), "geometry")?;
                need(self.vorticity.is_some(), "vorticity")?;
            }
            "homog" => {
                need(self.vorticity.is_some(), "vorticity")?;
                need(self.geometry.is_some() || s.kappa.is_some(), "geometry")?;
            }
            "euler" => {
                need(self.geometry.is_some(), "geometry")?;
                need(self.vorticity.is_some(), "vorticity")?;
                need(self.euler.is_some(), "euler")?;
            }
            other => return Err(ConfigError::new("known subcommand", format!("unknown command '{other}'"))),
        }
        if command == "sweep" && self.geometry.as_ref().and_then(|g| g.cases.as_ref()).is_none() {
            return Err(ConfigError::new("geometry.cases present for sweep", "sweep needs a list of [d, a] cases"));
        }
        if command == "divcurl" && self.geometry.as_ref().map(|g| g.kind) != Some(GeometryKind::Lattice) {
            return Err(ConfigError::new("geometry.kind = lattice for divcurl", "divcurl runs on lattices"));
        }
        Ok(())
    }

    fn validate_geometry(&self, g: &GeometryBlock) -> ConfigResult<()> {
        rect_of("geometry.box", g.kpm_box)?;
        if !(g.eps0 > 0.0 && g.eps0 < 0.5) {
            return Err(ConfigError::new("geometry.eps0 in (0, 1/2)", format!("eps0 = {}", g.eps0)));
        }
        let require = |v: bool, inv: &str| if v { Ok(()) } else { Err(ConfigError::new(inv, format!("missing or invalid {inv}"))) };
        match g.kind {
            GeometryKind::Lattice => {
                let ns = g.n.as_ref().map(|n| n.to_vec()).unwrap_or_default();
                require(!ns.is_empty() && ns.iter().all(|n| *n > 0), "geometry.n >= 1")?;
                if g.cases.is_none() {
                    require(g.epsilon.is_some_and(|e| e.is_finite() && e >= 0.0), "geometry.epsilon >= 0")?;
                }
            }
            GeometryKind::Random => {
                require(g.count.is_some_and(|c| c > 0), "geometry.count >= 1")?;
                require(g.a.is_some_and(|a| a > 0.0) && g.d.is_some_and(|d| d > 0.0), "geometry.a, geometry.d > 0")?;
            }
            GeometryKind::TwoHole => {
                require(g.a.is_some_and(|a| a > 0.0) && g.d.is_some_and(|d| d > 0.0), "geometry.a, geometry.d > 0")?;
            }
            GeometryKind::Single => {
                require(g.a.is_some_and(|a| a > 0.0), "geometry.a > 0")?;
            }
            GeometryKind::None => {}
        }
        if let Some(cases) = &g.cases {
            require(!cases.is_empty() && cases.iter().all(|c| c[0] > 0.0 && c[1] > 0.0), "geometry.cases positive")?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the parsed configuration.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn backend(&self) -> Backend {
        match self.solver.backend {
            BackendName::Spectral => Backend::Spectral { pad: self.solver.pad },
            BackendName::Direct => Backend::Direct,
        }
    }

    pub fn geometry(&self) -> &GeometryBlock {
        self.geometry.as_ref().expect("validated geometry block")
    }

    pub fn vorticity(&self) -> &VorticityBlock {
        self.vorticity.as_ref().expect("validated vorticity block")
    }

    pub fn kpm_box(&self) -> Rect {
        let b = self.geometry.as_ref().map(|g| g.kpm_box).unwrap_or_else(unit_box);
        Rect { x0: b[0], y0: b[1], x1: b[2], y1: b[3] }
    }

    pub fn region(&self) -> Rect {
        let r = self.analysis.region;
        Rect { x0: r[0], y0: r[1], x1: r[2], y1: r[3] }
    }

    /// Porous configurations described by the geometry block, labelled by lattice size.
    pub fn configs(&self) -> perforated::Result<Vec<(usize, PorousConfig)>> {
        let g = self.geometry();
        let b = self.kpm_box();
        match g.kind {
            GeometryKind::Lattice => {
                let eps = g.epsilon.unwrap_or(0.0);
                g.n.as_ref().map(|n| n.to_vec()).unwrap_or_default().into_iter().map(|n| Ok((n, build_lattice(n, eps, b, g.eps0)?))).collect()
            }
            GeometryKind::Random => {
                let cfg = build_random(g.count.unwrap_or(0), g.a.unwrap_or(0.0), g.d.unwrap_or(0.0), b, g.eps0, self.seed)?;
                Ok(vec![(cfg.len(), cfg)])
            }
            GeometryKind::TwoHole => {
                let (a, d) = (g.a.unwrap_or(0.0), g.d.unwrap_or(0.0));
                let c = g.center.map(|c| Vec2::new(c[0], c[1])).unwrap_or_else(|| b.center());
                let centers = vec![c - Vec2::new(0.5 * d, 0.0), c + Vec2::new(0.5 * d, 0.0)];
                Ok(vec![(2, PorousConfig::new(centers, a, d, g.eps0, b)?)])
            }
            GeometryKind::Single => {
                let c = g.center.map(|c| Vec2::new(c[0], c[1])).unwrap_or_else(|| b.center());
                Ok(vec![(1, PorousConfig::single(c, g.a.unwrap_or(0.0), g.eps0, b)?)])
            }
            GeometryKind::None => Ok(vec![(0, PorousConfig::empty(b))]),
        }
    }

    pub fn vorticity_spec(&self) -> Option<VorticitySpec> {
        let v = self.vorticity();
        let center = Vec2::new(v.center[0], v.center[1]);
        match v.shape {
            Shape::Disk => Some(VorticitySpec::Disk { center, radius: v.radius, amplitude: v.amplitude }),
            Shape::Bump => Some(VorticitySpec::Bump { center, radius: v.radius, amplitude: v.amplitude }),
            _ => None,
        }
    }

    pub fn source(&self) -> perforated::Result<Source> {
        let v = self.vorticity();
        match v.shape {
            Shape::Linear => {
                let g = v.gradient.unwrap_or([0.0, 0.0]);
                Ok(Source::Linear(Vec2::new(g[0], g[1])))
            }
            Shape::Pair => Ok(Source::Particles(self.pair_particles()?)),
            _ => self.vorticity_spec().expect("grid shape").source(v.h),
        }
    }

    /// Two co-rotating vortices of strength `amplitude` at `center +- (radius, 0)`.
    pub fn pair_particles(&self) -> perforated::Result<perforated::euler::VortexParticles> {
        let v = self.vorticity();
        let blob = self.euler.as_ref().map(|e| e.blob).unwrap_or(0.05 * v.radius);
        let c = Vec2::new(v.center[0], v.center[1]);
        let off = Vec2::new(v.radius, 0.0);
        perforated::euler::VortexParticles::new(vec![c + off, c - off], vec![v.amplitude, v.amplitude], blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_optional_blocks() {
        let cfg = RunConfig::parse("[geometry]\nkind = \"lattice\"\nn = 4\nepsilon = 0.1\n[vorticity]\nshape = \"disk\"\ncenter = [-1.0, 0.5]\nradius = 0.3\n").unwrap();
        assert_eq!(cfg.solver.depth, 3);
        assert_eq!(cfg.solver.order, 8);
        assert_eq!(cfg.solver.pad, 4);
        assert_eq!(cfg.analysis.eta, 0.5);
        cfg.validate("reflect").unwrap();
        assert_eq!(cfg.configs().unwrap()[0].1.len(), 16);
    }

    #[test]
    fn list_or_scalar_sizes() {
        let cfg = RunConfig::parse("[geometry]\nkind = \"lattice\"\nn = [4, 8]\nepsilon = 0.1\n").unwrap();
        let ns: Vec<usize> = cfg.configs().unwrap().iter().map(|c| c.0).collect();
        assert_eq!(ns, vec![4, 8]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[solver]\ndepht = 3\n").is_err());
    }

    #[test]
    fn range_violations_name_the_invariant() {
        let cfg = RunConfig::parse("[solver]\npad = 1\n[vorticity]\nshape = \"disk\"\nradius = 0.2\n[geometry]\nkind = \"none\"\n").unwrap();
        assert_eq!(cfg.validate("homog").unwrap_err().invariant, "solver.pad >= 2");
        let cfg = RunConfig::parse("[geometry]\nkind = \"lattice\"\nn = 4\nepsilon = 0.1\neps0 = 0.7\n[vorticity]\nshape = \"disk\"\nradius = 0.2\n").unwrap();
        assert_eq!(cfg.validate("reflect").unwrap_err().invariant, "geometry.eps0 in (0, 1/2)");
    }

    #[test]
    fn missing_blocks_are_reported() {
        let cfg = RunConfig::parse("[geometry]\nkind = \"lattice\"\nn = 4\nepsilon = 0.1\n").unwrap();
        assert_eq!(cfg.validate("reflect").unwrap_err().invariant, "[vorticity] present for reflect");
        assert_eq!(cfg.validate("bogus").unwrap_err().invariant, "known subcommand");
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::parse("seed = 3\n[solver]\ndepth = 4\n").unwrap();
        let b = RunConfig::parse("seed=3\n\n[solver]\n  depth = 4  # comment\n").unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        let c = RunConfig::parse("seed = 4\n[solver]\ndepth = 4\n").unwrap();
        assert_ne!(a.hash_hex(), c.hash_hex());
    }
}
