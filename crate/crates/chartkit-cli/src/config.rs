//! Config schema: one TOML file with typed sections, each section feeding
//! one subcommand. Every section is optional so small experiments stay
//! small; commands reject a config that lacks the sections they need. The
//! resolved config round-trips through JSON, which lets chart bundles
//! embed the exact inputs they were built from and lets the driver hash
//! the effective configuration after flag overrides.

use chartkit::chart::ChartCfg;
use chartkit::densities::VolumeCfg;
use chartkit::fieldspec::{Ball, FieldSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fields: Option<FieldsSection>,
    pub chart: Option<ChartSection>,
    pub verify: Option<VerifySection>,
    pub density: Option<DensitySection>,
    pub volume: Option<VolumeSection>,
    pub norm: Option<NormSection>,
    pub flow: Option<FlowSection>,
    pub distance: Option<DistanceSection>,
    pub bracket: Option<BracketSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Vector-field family: one row of coefficient expressions per field on a
/// Euclidean ball domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSection {
    pub rows: Vec<Vec<String>>,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl FieldsSection {
    pub fn to_field_set(&self) -> Result<FieldSet, CliError> {
        let rows: Vec<Vec<&str>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(String::as_str).collect())
            .collect();
        FieldSet::parse(&rows, Ball::new(self.center.clone(), self.radius))
            .map_err(|e| CliError::Config(format!("field family: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSection {
    /// Base point of the chart.
    pub x0: Vec<f64>,
    /// Bundle name; falls back to the config file stem.
    pub name: Option<String>,
    /// Build knobs; omitted keys keep their library defaults.
    #[serde(default)]
    pub cfg: ChartCfg,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub samples: Option<usize>,
    pub pairs: Option<usize>,
    pub det_res: Option<usize>,
    pub exponent_res: Option<usize>,
    pub exponent_scales: Option<usize>,
    pub equiv_res: Option<usize>,
    pub seed: Option<u64>,
    /// Smoothness orders the verification tables are computed at; the
    /// chart's working order when omitted.
    pub s_list: Option<Vec<f64>>,
}

impl VerifySection {
    pub fn to_cfg(&self) -> chartkit::chart::VerifyCfg {
        let mut c = chartkit::chart::VerifyCfg::default();
        if let Some(v) = self.samples {
            c.samples = v;
        }
        if let Some(v) = self.pairs {
            c.pairs = v;
        }
        if let Some(v) = self.det_res {
            c.det_res = v;
        }
        if let Some(v) = self.exponent_res {
            c.exponent_res = v;
        }
        if let Some(v) = self.exponent_scales {
            c.exponent_scales = v;
        }
        if let Some(v) = self.equiv_res {
            c.equiv_res = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c
    }
}

fn default_weight() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySection {
    /// Density weight against Lebesgue measure.
    #[serde(default = "default_weight")]
    pub weight: String,
    /// Pullback grid resolution per axis.
    pub res: Option<usize>,
    /// Smoothness order for the fitted exponent of h.
    pub s: Option<f64>,
    /// Also compute the ball-mass table.
    #[serde(default)]
    pub volumes: bool,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            weight: default_weight(),
            res: None,
            s: None,
            volumes: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSection {
    /// Ball radius in control units; required by the volume subcommand,
    /// taken from the chart radii by the density subcommand.
    pub delta: Option<f64>,
    /// Ball center; the domain center when omitted.
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_weight")]
    pub weight: String,
    #[serde(flatten)]
    pub cfg: VolumeCfg,
}

impl Default for VolumeSection {
    fn default() -> Self {
        VolumeSection {
            delta: None,
            x0: None,
            weight: default_weight(),
            cfg: VolumeCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSection {
    pub expr: String,
    pub s: f64,
    /// Ball radius the norm is measured on.
    pub radius: Option<f64>,
    /// Sampling resolution per axis.
    pub res: Option<usize>,
    pub k_min: Option<usize>,
    pub max_scales: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub start: Vec<f64>,
    pub controls: Vec<f64>,
    /// Flow duration; 1 when omitted.
    pub time: Option<f64>,
    pub tol: Option<f64>,
    pub checkpoints: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSection {
    /// Endpoint pairs, each a two-point array.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Net cell width; domain radius / 20 when omitted.
    pub cell: Option<f64>,
    pub shell: Option<usize>,
    pub flow_tol: Option<f64>,
    pub shoot_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BracketSection {
    /// Sample points; the domain center when omitted.
    pub points: Option<Vec<Vec<f64>>>,
    /// "minimal-norm" (default) or "exact-frame".
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
}

/// Hex digest of the effective configuration; recorded in every artifact
/// so reruns are attributable to their exact inputs.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
