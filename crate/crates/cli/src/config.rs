//! Simulation config file: flat typed keys mirroring the study
//! configuration. Unknown keys are errors to protect reproducibility.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mscp_core::criteria::{Criterion, Regime};
use mscp_core::study::{MisspecToggles, StudyConfig};

/// A key that accepts either a scalar or a list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecFile {
    #[serde(default)]
    pub outcome_drop_z: bool,
    #[serde(default)]
    pub propensity_wrong: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    #[serde(rename = "H")]
    pub h: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<OneOrMany<usize>>,
    pub b: Option<OneOrMany<f64>>,
    pub alpha_true: Option<Vec<f64>>,
    pub sigma2: Option<f64>,
    pub replications: Option<usize>,
    pub orders: Option<Vec<usize>>,
    pub regimes: Option<Vec<String>>,
    pub criteria: Option<Vec<String>>,
    #[serde(default)]
    pub misspec: MisspecFile,
    pub master_seed: Option<u64>,
    pub out_dir: Option<String>,
    pub threads: Option<usize>,
}

pub fn parse_regime(name: &str) -> Result<Regime> {
    Ok(match name {
        "ipw_known" => Regime::IpwKnown,
        "ipw_estimated" => Regime::IpwEstimated,
        "dr" | "dr_estimated" => Regime::DrEstimated,
        "dr_known" => Regime::DrKnown,
        other => bail!(
            "unknown regime `{other}` (expected ipw_known, ipw_estimated, dr or dr_known)"
        ),
    })
}

pub fn parse_criterion(name: &str) -> Result<Criterion> {
    Ok(match name {
        "qicw" => Criterion::Qicw,
        "wcp" => Criterion::Wcp,
        "ucp" => Criterion::Ucp,
        "wcp_conditional" => Criterion::WcpConditional,
        other => bail!(
            "unknown criterion `{other}` (expected qicw, wcp, ucp or wcp_conditional)"
        ),
    })
}

/// The fully resolved run description written into the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub study: StudyConfig,
    pub out_dir: String,
    pub threads: usize,
}

pub fn resolve(file: SimulateFile) -> Result<ResolvedConfig> {
    let defaults = StudyConfig::default();
    let regimes = match file.regimes {
        None => defaults.regimes.clone(),
        Some(names) => names
            .iter()
            .map(|s| parse_regime(s))
            .collect::<Result<Vec<_>>>()?,
    };
    let criteria = match file.criteria {
        None => defaults.criteria.clone(),
        Some(names) => names
            .iter()
            .map(|s| parse_criterion(s))
            .collect::<Result<Vec<_>>>()?,
    };
    let study = StudyConfig {
        n_treatments: file.h.unwrap_or(defaults.n_treatments),
        sample_sizes: file
            .n
            .map(OneOrMany::into_vec)
            .unwrap_or_else(|| defaults.sample_sizes.clone()),
        curvatures: file
            .b
            .map(OneOrMany::into_vec)
            .unwrap_or_else(|| defaults.curvatures.clone()),
        alpha_true: file.alpha_true.unwrap_or_else(|| defaults.alpha_true.clone()),
        sigma2: file.sigma2.unwrap_or(defaults.sigma2),
        replications: file.replications.unwrap_or(defaults.replications),
        candidate_orders: file.orders.unwrap_or_else(|| defaults.candidate_orders.clone()),
        regimes,
        criteria,
        misspec: MisspecToggles {
            outcome_drop_z: file.misspec.outcome_drop_z,
            propensity_wrong: file.misspec.propensity_wrong,
        },
        master_seed: file.master_seed.unwrap_or(defaults.master_seed),
    };
    study.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(ResolvedConfig {
        study,
        out_dir: file.out_dir.unwrap_or_else(|| "out".into()),
        threads: file.threads.unwrap_or(0),
    })
}

pub fn load(path: &std::path::Path) -> Result<SimulateFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
}

/// Content hash of the resolved configuration.
pub fn config_hash(resolved: &ResolvedConfig) -> String {
    let canonical = serde_json::to_string(&resolved.study).expect("serializable config");
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..16])
}
