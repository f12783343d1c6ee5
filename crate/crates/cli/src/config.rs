//! Run configuration read from a TOML file. Every key is optional; flags on the
//! command line take precedence.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub mhe: MheSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: Option<String>,
    pub x0: Option<Vec<f64>>,
    pub xhat0: Option<Vec<f64>>,
    /// Half-width of the disturbance box.
    pub w_bound: Option<f64>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    pub rho2: Option<Rho2>,
    /// Zames-Falb order, 0 leaves the family out.
    pub zf_order: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub symmetric: Option<bool>,
    #[serde(rename = "static")]
    pub with_static: Option<bool>,
    /// Parametric family: sector `[a, b]` with a memoryless filter.
    pub parametric: Option<[f64; 2]>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheSection {
    pub estimator: Option<String>,
    pub epsilon: Option<f64>,
    pub xi: Option<f64>,
    pub horizon: Option<Horizon>,
    pub d_max: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub seeds: Option<u64>,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub log_scale: Option<bool>,
}

/// A single `ρ²` or a grid of them.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Rho2 {
    One(f64),
    Grid(Vec<f64>),
}

impl Rho2 {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Rho2::One(r) => vec![*r],
            Rho2::Grid(g) => g.clone(),
        }
    }
}

/// `N` as a number or `auto` (`N_min + 3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for Horizon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Horizon::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Horizon::Fixed(n)),
            _ => Err(format!("horizon must be a positive integer or `auto`, got `{s}`")),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) if n >= 1 => Ok(Horizon::Fixed(n as usize)),
            Raw::Num(n) => Err(serde::de::Error::custom(format!("horizon must be positive, got {n}"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Comma-separated floats, e.g. `2,-2`.
pub fn parse_vector(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("not a number: `{t}`")))
        .collect()
}
