//! The experiment variant grid and its TOML config format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::features::FeatureSpec;
use crate::forecaster::ForecastConfig;
use crate::{Error, Result};

/// One named experiment configuration. `subgraph = 0` in TOML means the full
/// graph (no BFS truncation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    /// feature count F (prefix of [maxspeed, amenities, lanes, x, y])
    pub features: usize,
    /// cluster pruning radius ε in coordinate degrees
    pub epsilon: f64,
    /// BFS subgraph size N; `None` = full graph
    pub subgraph: Option<usize>,
    /// encoder hidden width
    pub hidden: usize,
    /// learning rate for both phases
    pub lr: f64,
    pub graphnorm: bool,
}

impl VariantConfig {
    pub fn baseline() -> Self {
        VariantConfig {
            name: "lr-0003".into(),
            features: 2,
            epsilon: 0.01,
            subgraph: Some(64),
            hidden: 320,
            lr: 0.0003,
            graphnorm: true,
        }
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        FeatureSpec::with_count(self.features)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_f: self.features,
            hidden_dim: self.hidden,
            use_graphnorm: self.graphnorm,
            learning_rate: self.lr,
            n_max: self.subgraph,
            ..EncoderConfig::default()
        }
    }

    pub fn forecast_config(&self) -> ForecastConfig {
        ForecastConfig {
            learning_rate: self.lr,
            ..ForecastConfig::default()
        }
    }
}

/// Every tested variant: the feature-count ablation (including the
/// features-4 arm reported only with the headline numbers), the larger
/// pruning radius, the untruncated subgraph, the narrow hidden width, the
/// learning-rate sweep and the GraphNorm removal.
pub fn variant_grid() -> Vec<VariantConfig> {
    let base = VariantConfig::baseline();
    let named = |name: &str| VariantConfig {
        name: name.into(),
        ..base.clone()
    };
    let mut grid = Vec::new();
    for f in [1usize, 2, 3, 4, 5] {
        grid.push(VariantConfig {
            features: f,
            ..named(&format!("features-{f}"))
        });
    }
    grid.push(VariantConfig {
        epsilon: 0.1,
        ..named("larger-radius")
    });
    grid.push(VariantConfig {
        subgraph: None,
        ..named("larger-subgraph")
    });
    grid.push(VariantConfig {
        hidden: 64,
        ..named("less-hidden")
    });
    grid.push(VariantConfig {
        lr: 0.0001,
        ..named("lr-0001")
    });
    grid.push(named("lr-0003"));
    grid.push(VariantConfig {
        lr: 0.0010,
        ..named("lr-0010")
    });
    grid.push(VariantConfig {
        graphnorm: false,
        ..named("no-graph-norm")
    });
    grid
}

#[derive(Serialize, Deserialize)]
struct VariantToml {
    name: String,
    features: usize,
    epsilon: f64,
    /// 0 encodes "full graph"
    subgraph: usize,
    hidden: usize,
    lr: f64,
    graphnorm: bool,
}

pub fn load_variant(path: &Path) -> Result<VariantConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let raw: VariantToml = toml::from_str(&text)
        .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
    let cfg = VariantConfig {
        name: raw.name,
        features: raw.features,
        epsilon: raw.epsilon,
        subgraph: (raw.subgraph > 0).then_some(raw.subgraph),
        hidden: raw.hidden,
        lr: raw.lr,
        graphnorm: raw.graphnorm,
    };
    validate(&cfg)?;
    Ok(cfg)
}

pub fn save_variant(cfg: &VariantConfig, path: &Path) -> Result<()> {
    let raw = VariantToml {
        name: cfg.name.clone(),
        features: cfg.features,
        epsilon: cfg.epsilon,
        subgraph: cfg.subgraph.unwrap_or(0),
        hidden: cfg.hidden,
        lr: cfg.lr,
        graphnorm: cfg.graphnorm,
    };
    let text = toml::to_string(&raw).expect("variant serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn validate(cfg: &VariantConfig) -> Result<()> {
    if cfg.features == 0 || cfg.features > 5 {
        return Err(Error::BadConfig(format!(
            "features must be 1..=5, got {}",
            cfg.features
        )));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::BadConfig("epsilon must be positive".into()));
    }
    if cfg.hidden == 0 || cfg.lr <= 0.0 {
        return Err(Error::BadConfig("hidden and lr must be positive".into()));
    }
    Ok(())
}
