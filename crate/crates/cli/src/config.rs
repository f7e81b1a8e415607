//! Run configuration: a plain TOML file with nested sections and typed
//! scalars. Unknown keys are rejected; every section has defaults, so a
//! minimal config only names the wavefunction. CLI flags override file
//! values.

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vortexline::dynamics::IntegratorOptions;
use vortexline::nodal::{NodalParams, ScanBox};
use vortexline::wavefield::{QuantumNumbers, SpecError, WavefunctionSpec};
use vortexline::xstruct::ManifoldParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid wavefunction: {0}")]
    Spec(#[from] SpecError),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
    pub n: [u32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavefunctionConfig {
    pub omega: [f64; 3],
    pub modes: Vec<ModeConfig>,
}

impl Default for WavefunctionConfig {
    fn default() -> Self {
        let c = 1.0 / 3.0_f64.sqrt();
        Self {
            omega: default_omega(),
            modes: vec![
                ModeConfig {
                    re: c,
                    im: 0.0,
                    n: [0, 0, 0],
                },
                ModeConfig {
                    re: c,
                    im: 0.0,
                    n: [1, 0, 1],
                },
                ModeConfig {
                    re: c,
                    im: 0.0,
                    n: [0, 1, 2],
                },
            ],
        }
    }
}

/// Default oscillator frequencies: incommensurate, with the two mode energy
/// gaps close to the golden ratio so the superposition never comes near a
/// periodic recurrence over the runs of interest.
pub fn default_omega() -> [f64; 3] {
    [1.0, 1.121, 1.3]
}

fn default_time() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub grid: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            box_min: [-4.0; 3],
            box_max: [4.0; 3],
            grid: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NodalConfig {
    pub ds: f64,
    pub node_tol: f64,
    pub max_points: usize,
    pub max_iter: usize,
}

impl Default for NodalConfig {
    fn default() -> Self {
        let p = NodalParams::default();
        Self {
            ds: p.ds,
            node_tol: p.node_tol,
            max_points: p.max_points,
            max_iter: p.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XPointConfig {
    pub x_tol: f64,
}

impl Default for XPointConfig {
    fn default() -> Self {
        Self { x_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub node_guard: f64,
    pub sample_dt: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let o = IntegratorOptions::default();
        Self {
            abs_tol: o.abs_tol,
            rel_tol: o.rel_tol,
            max_step: o.max_step,
            node_guard: o.node_guard,
            sample_dt: o.sample_dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub x0: [f64; 3],
    pub t_span: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            x0: [-0.7, -1.1, 1.3],
            t_span: [0.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosConfig {
    pub line_dt: f64,
    /// Absolute |alpha| jump threshold; 0 = automatic (see report output).
    pub jump_threshold: f64,
    /// Matching window; 0 = two sampling intervals.
    pub window: f64,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            line_dt: 0.1,
            jump_threshold: 0.0,
            window: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldConfig {
    pub eps_frac: f64,
    pub arc_budget_frac: f64,
    pub domain_frac: f64,
    /// How many X-points along the line get manifold branches.
    pub n_samples: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        let p = ManifoldParams::default();
        Self {
            eps_frac: p.eps_frac,
            arc_budget_frac: p.arc_budget_frac,
            domain_frac: p.domain_frac,
            n_samples: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopfConfig {
    /// "space" scans along the line at fixed t; "time" scans a node in time.
    pub kind: String,
    pub t_span: [f64; 2],
    pub n_samples: usize,
}

impl Default for HopfConfig {
    fn default() -> Self {
        Self {
            kind: "space".into(),
            t_span: [0.0, 10.0],
            n_samples: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub resolution: usize,
    /// Slice axis for 2-d field dumps ("x", "y" or "z") and its offset.
    pub slice_axis: String,
    pub slice_offset: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: 41,
            slice_axis: "z".into(),
            slice_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub wavefunction: WavefunctionConfig,
    /// Time for the structural commands (field, nodal, npxpc, xline, ...).
    pub t: f64,
    pub scan: ScanConfig,
    pub nodal: NodalConfig,
    pub xpoint: XPointConfig,
    pub integrator: IntegratorConfig,
    pub trajectory: TrajectoryConfig,
    pub chaos: ChaosConfig,
    pub manifolds: ManifoldConfig,
    pub hopf: HopfConfig,
    pub field: FieldConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            wavefunction: WavefunctionConfig::default(),
            t: default_time(),
            scan: ScanConfig::default(),
            nodal: NodalConfig::default(),
            xpoint: XPointConfig::default(),
            integrator: IntegratorConfig::default(),
            trajectory: TrajectoryConfig::default(),
            chaos: ChaosConfig::default(),
            manifolds: ManifoldConfig::default(),
            hopf: HopfConfig::default(),
            field: FieldConfig::default(),
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (lo, hi) in self.scan.box_min.iter().zip(&self.scan.box_max) {
            if lo >= hi {
                return Err(ConfigError::Invalid("scan box is empty".into()));
            }
        }
        for v in [
            self.nodal.ds,
            self.nodal.node_tol,
            self.xpoint.x_tol,
            self.integrator.abs_tol,
            self.integrator.rel_tol,
            self.integrator.sample_dt,
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "tolerances and steps must be positive, got {v}"
                )));
            }
        }
        if self.scan.grid < 2 {
            return Err(ConfigError::Invalid("scan.grid must be >= 2".into()));
        }
        match self.hopf.kind.as_str() {
            "space" | "time" => {}
            k => {
                return Err(ConfigError::Invalid(format!(
                    "hopf.kind must be \"space\" or \"time\", got {k:?}"
                )))
            }
        }
        match self.field.slice_axis.as_str() {
            "x" | "y" | "z" => {}
            a => {
                return Err(ConfigError::Invalid(format!(
                    "field.slice_axis must be x, y or z, got {a:?}"
                )))
            }
        }
        // Wavefunction constraints checked by the spec constructor.
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<WavefunctionSpec, SpecError> {
        let modes = self
            .wavefunction
            .modes
            .iter()
            .map(|m| {
                (
                    Complex64::new(m.re, m.im),
                    QuantumNumbers::new(m.n[0], m.n[1], m.n[2]),
                )
            })
            .collect();
        WavefunctionSpec::new(modes, self.wavefunction.omega)
    }

    pub fn nodal_params(&self) -> NodalParams {
        NodalParams {
            node_tol: self.nodal.node_tol,
            ds: self.nodal.ds,
            max_iter: self.nodal.max_iter,
            max_points: self.nodal.max_points,
            scan_box: ScanBox {
                min: self.scan.box_min,
                max: self.scan.box_max,
            },
            scan_grid: self.scan.grid,
            ..NodalParams::default()
        }
    }

    pub fn integrator_options(&self) -> IntegratorOptions {
        IntegratorOptions {
            abs_tol: self.integrator.abs_tol,
            rel_tol: self.integrator.rel_tol,
            max_step: self.integrator.max_step,
            node_guard: self.integrator.node_guard,
            sample_dt: self.integrator.sample_dt,
            ..IntegratorOptions::default()
        }
    }

    pub fn manifold_params(&self) -> ManifoldParams {
        ManifoldParams {
            eps_frac: self.manifolds.eps_frac,
            arc_budget_frac: self.manifolds.arc_budget_frac,
            domain_frac: self.manifolds.domain_frac,
        }
    }

    pub fn x0(&self) -> Vector3<f64> {
        Vector3::from(self.trajectory.x0)
    }

    /// Canonical serialization (field order fixed by the struct) and its
    /// SHA-256 hash, used by the manifest and the determinism contract.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.spec().unwrap().modes().len(), 3);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[wavefunction]\nomega = [1.0, 1.0, 1.0]\nmodes = []\nbogus = 3\n";
        let r: Result<RunConfig, _> = toml::from_str(text);
        assert!(r.is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let text = r#"
[wavefunction]
omega = [1.0, 1.2, 1.4]

[[wavefunction.modes]]
re = 1.0
n = [0, 0, 0]

[[wavefunction.modes]]
re = 0.5
im = -0.25
n = [1, 0, 1]
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.t, 4.0);
        assert_eq!(cfg.nodal.ds, 0.02);
        assert_eq!(cfg.wavefunction.modes[1].im, -0.25);
    }
}
