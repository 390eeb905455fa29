//! Flat `key = value` run configuration: parsing, validation with aggregated
//! errors, defaults, and the resolved-config echo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{NldError, Result};
use crate::evolution::Integrator;
use crate::kernel::KernelFamily;
use crate::lattice::{HolePrimitive, HoleSet};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialKind {
    /// params: center (N numbers), width.
    Gaussian,
    /// params: center (N numbers), radius.
    BallIndicator,
    /// params: inner radius, outer radius (centered at the origin).
    Shell,
}

impl InitialKind {
    fn parse(s: &str) -> Result<InitialKind> {
        match s {
            "gaussian" => Ok(InitialKind::Gaussian),
            "ball_indicator" => Ok(InitialKind::BallIndicator),
            "shell" => Ok(InitialKind::Shell),
            other => Err(NldError::Config(format!(
                "unknown initial.kind `{other}` (expected gaussian, ball_indicator, or shell)"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            InitialKind::Gaussian => "gaussian",
            InitialKind::BallIndicator => "ball_indicator",
            InitialKind::Shell => "shell",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kernel_family: KernelFamily,
    pub kernel_radius: f64,
    pub grid_dimension: usize,
    pub grid_points: usize,
    pub grid_extent: f64,
    pub holes: HoleSet,
    pub integrator: Integrator,
    pub dt: f64,
    pub tmax: f64,
    pub snapshot_times: Vec<f64>,
    pub metric_ratio: f64,
    pub initial_kind: InitialKind,
    pub initial_params: Vec<f64>,
    pub initial_mass: f64,
    pub stationary_tol: f64,
    /// Empty = derive from the geometry.
    pub stationary_radii: Vec<f64>,
    /// Zero = derive from the geometry.
    pub fit_rlo: f64,
    pub fit_rhi: f64,
    pub omega_times: Vec<f64>,
    pub omega_series_tol: f64,
    pub delta: f64,
    pub delta_sweep: Vec<f64>,
    pub kappa: f64,
    pub gamma: f64,
    pub kplus: f64,
    pub barrier_times: Vec<f64>,
    pub barrier_deltas: Vec<f64>,
    /// Zero = derive from the hole geometry.
    pub barrier_inner_radius: f64,
    pub elliptic_gammas: Vec<f64>,
    pub elliptic_radii: Vec<f64>,
    pub output_dir: String,
    pub seed: u64,
    pub threads: usize,
    pub oracle_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kernel_family: KernelFamily::SmoothBump,
            kernel_radius: 1.0,
            grid_dimension: 3,
            grid_points: 129,
            grid_extent: 24.0,
            holes: HoleSet {
                primitives: vec![HolePrimitive::Ball {
                    center: vec![0.0, 0.0, 0.0],
                    radius: 2.0,
                }],
            },
            integrator: Integrator::Rk4,
            dt: 0.25,
            tmax: 100.0,
            snapshot_times: vec![25.0, 50.0, 100.0],
            metric_ratio: 2f64.powf(0.25),
            initial_kind: InitialKind::Gaussian,
            initial_params: vec![4.0, 0.0, 0.0, 1.0],
            initial_mass: 1.0,
            stationary_tol: crate::stationary::DEFAULT_TOL,
            stationary_radii: Vec::new(),
            fit_rlo: 0.0,
            fit_rhi: 0.0,
            omega_times: vec![25.0, 50.0, 100.0],
            omega_series_tol: 1e-12,
            delta: 0.25,
            delta_sweep: vec![0.0625, 0.25, 1.0],
            kappa: 0.5,
            gamma: 0.2,
            kplus: 1.0,
            barrier_times: vec![800.0, 1600.0, 3200.0],
            barrier_deltas: vec![0.0025, 0.005, 0.01, 0.02, 0.04, 0.08],
            barrier_inner_radius: 0.0,
            elliptic_gammas: vec![0.2, 0.5],
            elliptic_radii: Vec::new(),
            output_dir: "out".into(),
            seed: 0,
            threads: 0,
            oracle_cap: 4096,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "kernel.family",
    "kernel.radius",
    "grid.dimension",
    "grid.points",
    "grid.extent",
    "evolution.integrator",
    "evolution.dt",
    "evolution.tmax",
    "evolution.snapshot_times",
    "evolution.metric_ratio",
    "initial.kind",
    "initial.params",
    "initial.mass",
    "stationary.tol",
    "stationary.radii",
    "stationary.fit_rlo",
    "stationary.fit_rhi",
    "omega.times",
    "omega.series_tol",
    "asymptotics.delta",
    "asymptotics.delta_sweep",
    "asymptotics.kappa",
    "asymptotics.gamma",
    "asymptotics.kplus",
    "asymptotics.barrier_times",
    "asymptotics.barrier_deltas",
    "asymptotics.barrier_inner_radius",
    "asymptotics.elliptic_gammas",
    "asymptotics.elliptic_radii",
    "output_dir",
    "seed",
    "threads",
    "oracle.cap",
    "precision",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KNOWN_KEYS
        .iter()
        .min_by_key(|k| levenshtein(key, k))
        .unwrap()
}

fn parse_numbers(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| format!("`{s}` is not a number"))
        })
        .collect()
}

/// A hole key looks like `holes.<i>.<field>`.
fn hole_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("holes.")?;
    let mut it = rest.splitn(2, '.');
    let idx = it.next()?.parse::<usize>().ok()?;
    let field = it.next()?;
    Some((idx, field))
}

#[derive(Default, Clone)]
struct HoleDraft {
    shape: Option<String>,
    center: Option<Vec<f64>>,
    size: Option<Vec<f64>>,
}

/// Parse and validate a config file. All problems are collected and reported
/// in one aggregated error.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NldError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut problems: Vec<String> = Vec::new();
    let mut hole_drafts: BTreeMap<usize, HoleDraft> = BTreeMap::new();
    let mut holes_given = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            problems.push(format!("line {}: expected `key = value`", lineno + 1));
            continue;
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();

        if let Some((idx, field)) = hole_key(key) {
            holes_given = true;
            let draft = hole_drafts.entry(idx).or_default();
            match field {
                "shape" => draft.shape = Some(value.to_string()),
                "center" => match parse_numbers(value) {
                    Ok(v) => draft.center = Some(v),
                    Err(e) => problems.push(format!("{key}: {e}")),
                },
                "size" => match parse_numbers(value) {
                    Ok(v) => draft.size = Some(v),
                    Err(e) => problems.push(format!("{key}: {e}")),
                },
                other => problems.push(format!(
                    "unknown hole field `{other}` in `{key}` (expected shape, center, or size)"
                )),
            }
            continue;
        }

        let num = |problems: &mut Vec<String>| -> Option<f64> {
            match value.parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    problems.push(format!("{key}: `{value}` is not a number"));
                    None
                }
            }
        };
        let nums = |problems: &mut Vec<String>| -> Option<Vec<f64>> {
            match parse_numbers(value) {
                Ok(v) => Some(v),
                Err(e) => {
                    problems.push(format!("{key}: {e}"));
                    None
                }
            }
        };

        match key {
            "kernel.family" => match KernelFamily::parse(value) {
                Ok(f) => cfg.kernel_family = f,
                Err(e) => problems.push(e.to_string()),
            },
            "kernel.radius" => {
                if let Some(v) = num(&mut problems) {
                    cfg.kernel_radius = v;
                }
            }
            "grid.dimension" => match value.parse::<usize>() {
                Ok(v) => cfg.grid_dimension = v,
                Err(_) => problems.push(format!("{key}: `{value}` is not an integer")),
            },
            "grid.points" => match value.parse::<usize>() {
                Ok(v) => cfg.grid_points = v,
                Err(_) => problems.push(format!("{key}: `{value}` is not an integer")),
            },
            "grid.extent" => {
                if let Some(v) = num(&mut problems) {
                    cfg.grid_extent = v;
                }
            }
            "evolution.integrator" => match Integrator::parse(value) {
                Ok(i) => cfg.integrator = i,
                Err(e) => problems.push(e.to_string()),
            },
            "evolution.dt" => {
                if let Some(v) = num(&mut problems) {
                    cfg.dt = v;
                }
            }
            "evolution.tmax" => {
                if let Some(v) = num(&mut problems) {
                    cfg.tmax = v;
                }
            }
            "evolution.snapshot_times" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.snapshot_times = v;
                }
            }
            "evolution.metric_ratio" => {
                if let Some(v) = num(&mut problems) {
                    cfg.metric_ratio = v;
                }
            }
            "initial.kind" => match InitialKind::parse(value) {
                Ok(k) => cfg.initial_kind = k,
                Err(e) => problems.push(e.to_string()),
            },
            "initial.params" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.initial_params = v;
                }
            }
            "initial.mass" => {
                if let Some(v) = num(&mut problems) {
                    cfg.initial_mass = v;
                }
            }
            "stationary.tol" => {
                if let Some(v) = num(&mut problems) {
                    cfg.stationary_tol = v;
                }
            }
            "stationary.radii" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.stationary_radii = v;
                }
            }
            "stationary.fit_rlo" => {
                if let Some(v) = num(&mut problems) {
                    cfg.fit_rlo = v;
                }
            }
            "stationary.fit_rhi" => {
                if let Some(v) = num(&mut problems) {
                    cfg.fit_rhi = v;
                }
            }
            "omega.times" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.omega_times = v;
                }
            }
            "omega.series_tol" => {
                if let Some(v) = num(&mut problems) {
                    cfg.omega_series_tol = v;
                }
            }
            "asymptotics.delta" => {
                if let Some(v) = num(&mut problems) {
                    cfg.delta = v;
                }
            }
            "asymptotics.delta_sweep" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.delta_sweep = v;
                }
            }
            "asymptotics.kappa" => {
                if let Some(v) = num(&mut problems) {
                    cfg.kappa = v;
                }
            }
            "asymptotics.gamma" => {
                if let Some(v) = num(&mut problems) {
                    cfg.gamma = v;
                }
            }
            "asymptotics.kplus" => {
                if let Some(v) = num(&mut problems) {
                    cfg.kplus = v;
                }
            }
            "asymptotics.barrier_times" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.barrier_times = v;
                }
            }
            "asymptotics.barrier_deltas" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.barrier_deltas = v;
                }
            }
            "asymptotics.barrier_inner_radius" => {
                if let Some(v) = num(&mut problems) {
                    cfg.barrier_inner_radius = v;
                }
            }
            "asymptotics.elliptic_gammas" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.elliptic_gammas = v;
                }
            }
            "asymptotics.elliptic_radii" => {
                if let Some(v) = nums(&mut problems) {
                    cfg.elliptic_radii = v;
                }
            }
            "output_dir" => cfg.output_dir = value.to_string(),
            "seed" => match value.parse::<u64>() {
                Ok(v) => cfg.seed = v,
                Err(_) => problems.push(format!("{key}: `{value}` is not an integer")),
            },
            "threads" => match value.parse::<usize>() {
                Ok(v) => cfg.threads = v,
                Err(_) => problems.push(format!("{key}: `{value}` is not an integer")),
            },
            "oracle.cap" => match value.parse::<usize>() {
                Ok(v) => cfg.oracle_cap = v,
                Err(_) => problems.push(format!("{key}: `{value}` is not an integer")),
            },
            "precision" => {
                if value != "f64" {
                    problems.push(format!(
                        "precision: only `f64` is supported (got `{value}`)"
                    ));
                }
            }
            unknown => problems.push(format!(
                "unknown key `{unknown}` (did you mean `{}`?)",
                nearest_key(unknown)
            )),
        }
    }

    // Assemble holes, replacing the default when any hole key appeared.
    if holes_given {
        let mut primitives = Vec::new();
        for (idx, draft) in &hole_drafts {
            let shape = draft.shape.clone().unwrap_or_else(|| {
                problems.push(format!("holes.{idx}.shape missing"));
                "ball".into()
            });
            let center = draft.center.clone().unwrap_or_else(|| {
                problems.push(format!("holes.{idx}.center missing"));
                vec![0.0; cfg.grid_dimension]
            });
            let size = draft.size.clone().unwrap_or_else(|| {
                problems.push(format!("holes.{idx}.size missing"));
                vec![1.0]
            });
            if center.len() != cfg.grid_dimension {
                problems.push(format!(
                    "holes.{idx}.center needs {} coordinates (got {})",
                    cfg.grid_dimension,
                    center.len()
                ));
                continue;
            }
            match shape.as_str() {
                "ball" => {
                    if size.len() != 1 {
                        problems.push(format!("holes.{idx}.size: a ball takes one radius"));
                    } else if size[0] <= 0.0 {
                        problems.push(format!("holes.{idx}.size: radius must be positive"));
                    } else {
                        primitives.push(HolePrimitive::Ball {
                            center,
                            radius: size[0],
                        });
                    }
                }
                "box" => {
                    if size.len() != cfg.grid_dimension {
                        problems.push(format!(
                            "holes.{idx}.size: a box takes {} half-widths",
                            cfg.grid_dimension
                        ));
                    } else if size.iter().any(|v| *v <= 0.0) {
                        problems.push(format!("holes.{idx}.size: half-widths must be positive"));
                    } else {
                        primitives.push(HolePrimitive::Box {
                            center,
                            half_widths: size,
                        });
                    }
                }
                other => problems.push(format!(
                    "holes.{idx}.shape: unknown shape `{other}` (expected ball or box)"
                )),
            }
        }
        cfg.holes = HoleSet { primitives };
    }

    validate(&cfg, &mut problems);
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(NldError::Config(problems.join("; ")))
    }
}

fn validate(cfg: &RunConfig, problems: &mut Vec<String>) {
    if cfg.grid_points % 2 == 0 {
        problems.push(format!(
            "grid.points must be odd so the origin is a node (got {})",
            cfg.grid_points
        ));
    } else if cfg.grid_points < 17 {
        problems.push(format!(
            "grid.points must be >= 17 (got {})",
            cfg.grid_points
        ));
    }
    if cfg.grid_dimension < 3 {
        problems.push(format!(
            "grid.dimension must be >= 3 for physics runs (got {})",
            cfg.grid_dimension
        ));
    }
    if !(cfg.grid_extent > 0.0) {
        problems.push(format!(
            "grid.extent must be positive (got {})",
            cfg.grid_extent
        ));
    }
    if !(cfg.kernel_radius > 0.0) {
        problems.push(format!(
            "kernel.radius must be positive (got {})",
            cfg.kernel_radius
        ));
    }
    if cfg.grid_points > 1 && cfg.grid_extent > 0.0 {
        let h = 2.0 * cfg.grid_extent / (cfg.grid_points - 1) as f64;
        if h >= cfg.kernel_radius / 2.0 {
            problems.push(format!(
                "grid spacing {h:.4} under-resolves the kernel (needs h < radius/2 = {:.4})",
                cfg.kernel_radius / 2.0
            ));
        }
    }
    if !(cfg.dt > 0.0) {
        problems.push(format!("evolution.dt must be positive (got {})", cfg.dt));
    }
    if !(cfg.tmax > 0.0) {
        problems.push(format!(
            "evolution.tmax must be positive (got {})",
            cfg.tmax
        ));
    }
    if !(cfg.metric_ratio > 1.0) {
        problems.push(format!(
            "evolution.metric_ratio must exceed 1 (got {})",
            cfg.metric_ratio
        ));
    }
    if !(cfg.stationary_tol > 0.0) {
        problems.push(format!(
            "stationary.tol must be positive (got {})",
            cfg.stationary_tol
        ));
    }
    if !(cfg.initial_mass > 0.0) {
        problems.push(format!(
            "initial.mass must be positive (got {})",
            cfg.initial_mass
        ));
    }
    let expected_params = match cfg.initial_kind {
        InitialKind::Gaussian | InitialKind::BallIndicator => cfg.grid_dimension + 1,
        InitialKind::Shell => 2,
    };
    if cfg.initial_params.len() != expected_params {
        problems.push(format!(
            "initial.params: kind `{}` takes {} numbers (got {})",
            cfg.initial_kind.name(),
            expected_params,
            cfg.initial_params.len()
        ));
    }
}

fn fmt_nums(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render the fully resolved configuration; parsing the output reproduces
/// the same `RunConfig` (defaulting fixpoint).
pub fn render_resolved(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# resolved configuration (all defaults filled)");
    let _ = writeln!(s, "kernel.family = {}", cfg.kernel_family.name());
    let _ = writeln!(s, "kernel.radius = {}", cfg.kernel_radius);
    let _ = writeln!(s, "grid.dimension = {}", cfg.grid_dimension);
    let _ = writeln!(s, "grid.points = {}", cfg.grid_points);
    let _ = writeln!(s, "grid.extent = {}", cfg.grid_extent);
    for (i, p) in cfg.holes.primitives.iter().enumerate() {
        match p {
            HolePrimitive::Ball { center, radius } => {
                let _ = writeln!(s, "holes.{i}.shape = ball");
                let _ = writeln!(s, "holes.{i}.center = {}", fmt_nums(center));
                let _ = writeln!(s, "holes.{i}.size = {radius}");
            }
            HolePrimitive::Box {
                center,
                half_widths,
            } => {
                let _ = writeln!(s, "holes.{i}.shape = box");
                let _ = writeln!(s, "holes.{i}.center = {}", fmt_nums(center));
                let _ = writeln!(s, "holes.{i}.size = {}", fmt_nums(half_widths));
            }
        }
    }
    let _ = writeln!(s, "evolution.integrator = {}", cfg.integrator.name());
    let _ = writeln!(s, "evolution.dt = {}", cfg.dt);
    let _ = writeln!(s, "evolution.tmax = {}", cfg.tmax);
    let _ = writeln!(
        s,
        "evolution.snapshot_times = {}",
        fmt_nums(&cfg.snapshot_times)
    );
    let _ = writeln!(s, "evolution.metric_ratio = {}", cfg.metric_ratio);
    let _ = writeln!(s, "initial.kind = {}", cfg.initial_kind.name());
    let _ = writeln!(s, "initial.params = {}", fmt_nums(&cfg.initial_params));
    let _ = writeln!(s, "initial.mass = {}", cfg.initial_mass);
    let _ = writeln!(s, "stationary.tol = {}", cfg.stationary_tol);
    let _ = writeln!(s, "stationary.radii = {}", fmt_nums(&cfg.stationary_radii));
    let _ = writeln!(s, "stationary.fit_rlo = {}", cfg.fit_rlo);
    let _ = writeln!(s, "stationary.fit_rhi = {}", cfg.fit_rhi);
    let _ = writeln!(s, "omega.times = {}", fmt_nums(&cfg.omega_times));
    let _ = writeln!(s, "omega.series_tol = {}", cfg.omega_series_tol);
    let _ = writeln!(s, "asymptotics.delta = {}", cfg.delta);
    let _ = writeln!(
        s,
        "asymptotics.delta_sweep = {}",
        fmt_nums(&cfg.delta_sweep)
    );
    let _ = writeln!(s, "asymptotics.kappa = {}", cfg.kappa);
    let _ = writeln!(s, "asymptotics.gamma = {}", cfg.gamma);
    let _ = writeln!(s, "asymptotics.kplus = {}", cfg.kplus);
    let _ = writeln!(
        s,
        "asymptotics.barrier_times = {}",
        fmt_nums(&cfg.barrier_times)
    );
    let _ = writeln!(
        s,
        "asymptotics.barrier_deltas = {}",
        fmt_nums(&cfg.barrier_deltas)
    );
    let _ = writeln!(
        s,
        "asymptotics.barrier_inner_radius = {}",
        cfg.barrier_inner_radius
    );
    let _ = writeln!(
        s,
        "asymptotics.elliptic_gammas = {}",
        fmt_nums(&cfg.elliptic_gammas)
    );
    let _ = writeln!(
        s,
        "asymptotics.elliptic_radii = {}",
        fmt_nums(&cfg.elliptic_radii)
    );
    let _ = writeln!(s, "output_dir = {}", cfg.output_dir);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "threads = {}", cfg.threads);
    let _ = writeln!(s, "oracle.cap = {}", cfg.oracle_cap);
    let _ = writeln!(s, "precision = f64");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(
            "kernel.family = smooth_bump\n\
             grid.points = 65\n\
             grid.extent = 12 # comment\n\
             holes.0.shape = ball\n\
             holes.0.center = 0 0 0\n\
             holes.0.size = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.grid_points, 65);
        assert_eq!(cfg.dt, 0.25);
        assert_eq!(cfg.holes.primitives.len(), 1);
    }

    #[test]
    fn even_points_rejected() {
        let err = parse_config_str("grid.points = 64\n").unwrap_err();
        assert!(err.to_string().contains("odd"), "{err}");
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = parse_config_str("gird.points = 65\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gird.points"), "{msg}");
        assert!(msg.contains("grid.points"), "{msg}");
    }

    #[test]
    fn problems_are_aggregated() {
        let err = parse_config_str(
            "grid.points = 64\n\
             evolution.dt = trouble\n\
             gird.extent = 3\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("odd"));
        assert!(msg.contains("not a number"));
        assert!(msg.contains("grid.extent"));
    }

    #[test]
    fn resolved_roundtrip_is_fixpoint() {
        let cfg = parse_config_str(
            "grid.points = 65\ngrid.extent = 12\nholes.0.shape = box\n\
             holes.0.center = 1 0 0\nholes.0.size = 1 2 1.5\nseed = 42\n",
        )
        .unwrap();
        let rendered = render_resolved(&cfg);
        let reparsed = parse_config_str(&rendered).unwrap();
        assert_eq!(cfg, reparsed);
        // And rendering again is byte-identical.
        assert_eq!(rendered, render_resolved(&reparsed));
    }

    #[test]
    fn shell_hole_via_boxes() {
        let mut text = String::from("grid.points = 97\ngrid.extent = 12\nkernel.radius = 1\n");
        // Hollow cube from six slabs.
        let slabs = [
            ("4 0 0", "1 5 5"),
            ("-4 0 0", "1 5 5"),
            ("0 4 0", "5 1 5"),
            ("0 -4 0", "5 1 5"),
            ("0 0 4", "5 5 1"),
            ("0 0 -4", "5 5 1"),
        ];
        for (i, (c, s)) in slabs.iter().enumerate() {
            text.push_str(&format!(
                "holes.{i}.shape = box\nholes.{i}.center = {c}\nholes.{i}.size = {s}\n"
            ));
        }
        let cfg = parse_config_str(&text).unwrap();
        assert_eq!(cfg.holes.primitives.len(), 6);
    }
}
