use std::path::{Path, PathBuf};

use clap::ValueEnum;
use errlab_core::approximation::{make_scheme, SchemeParams};
use errlab_core::fisher::FisherMethod;
use serde::{Deserialize, Serialize};

use crate::commands::{map_by_name, model_by_name, scheme_kind, structure_kind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Propagate,
    GaussDemo,
    NaiveDemo,
    Simulate,
    BiasOps,
    Fisher,
    StructureCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Propagate => "propagate",
            Self::GaussDemo => "gauss-demo",
            Self::NaiveDemo => "naive-demo",
            Self::Simulate => "simulate",
            Self::BiasOps => "bias-ops",
            Self::Fisher => "fisher",
            Self::StructureCheck => "structure-check",
        }
    }

    fn samples(self) -> bool {
        matches!(
            self,
            Self::Simulate | Self::BiasOps | Self::Fisher | Self::StructureCheck
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Everything a run depends on. Read from a JSON file and/or flags; flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    /// Approximation scheme (binary, polya, series, integral, wiener or full names).
    #[arg(long, visible_alias = "scheme")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Error structure (ou, unit_interval, lebesgue).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
    /// Parametric model (bernoulli, bernoulli_odds, normal_mean, normal_mean_sd, exponential, flat).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Map for `propagate` (identity, first, square, sum, product, rotation45, rotation45_inverse, exp, sin).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ns: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long = "n-samples")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    /// Falls back to ERRLAB_SEED.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Model parameter.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    /// Row-major covariance, or error bounds for `naive-demo`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Fisher method (analytic, quadrature, monte_carlo).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Pólya urn horizon; omitted means the exact limit law.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Fields set in `flags` replace those of `self`.
    pub fn overlay(mut self, flags: &ExperimentConfig) -> Self {
        overlay!(
            self, flags, command, kind, structure, model, map, ns, n, n_samples, seed, x, value,
            bias, covariance, sigma, method, horizon, threads, out, format
        );
        self
    }

    /// The part of the configuration that determines the results: output
    /// location and thread count are dropped.
    pub fn echo(&self) -> Self {
        Self {
            out: None,
            threads: None,
            format: None,
            ..self.clone()
        }
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or_else(|| match &self.out {
            Some(p) if p.extension().is_some_and(|e| e == "csv") => Format::Csv,
            _ => Format::Json,
        })
    }

    pub fn fisher_method(&self) -> Option<FisherMethod> {
        match &self.method {
            None => Some(FisherMethod::Analytic),
            Some(m) => FisherMethod::parse(m),
        }
    }
}

/// Every reason `config` cannot be run; empty when it can.
pub fn validate(config: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    let Some(command) = config.command else {
        v.push("no command given".to_string());
        return v;
    };
    if command.samples() {
        match config.n_samples {
            None => v.push("n_samples is required".into()),
            Some(0) => v.push("n_samples must be at least 1".into()),
            Some(_) => {}
        }
        if config.seed.is_none() {
            v.push("seed is required (flag, config file or ERRLAB_SEED)".into());
        }
    }
    if config.threads == Some(0) {
        v.push("threads must be at least 1".into());
    }
    if config.format() == Format::Csv && command != Command::Simulate {
        v.push(format!(
            "csv output is only available for simulate, not {}",
            command.name()
        ));
    }
    match command {
        Command::Simulate | Command::BiasOps => validate_scheme(config, command, &mut v),
        Command::Fisher => validate_fisher(config, &mut v),
        Command::StructureCheck => match &config.structure {
            None => v.push("structure is required".into()),
            Some(s) if structure_kind(s).is_none() => v.push(format!("unknown structure '{s}'")),
            _ => {}
        },
        Command::Propagate => validate_propagate(config, &mut v),
        Command::GaussDemo | Command::NaiveDemo => {
            if let Some(value) = &config.value {
                if value.len() != 2 {
                    v.push("demo values are two-dimensional".into());
                }
            }
        }
    }
    v
}

fn validate_scheme(config: &ExperimentConfig, command: Command, v: &mut Vec<String>) {
    let Some(name) = &config.kind else {
        v.push("scheme kind is required".into());
        return;
    };
    let Some(kind) = scheme_kind(name) else {
        v.push(format!("unknown scheme kind '{name}'"));
        return;
    };
    let params = crate::commands::scheme_params(kind, config.horizon);
    if config.horizon.is_some() && !matches!(params, SchemeParams::PolyaUrn { .. }) {
        v.push("horizon only applies to the Pólya urn".into());
    }
    let scheme = match make_scheme(kind, params) {
        Ok(s) => s,
        Err(e) => {
            v.push(e.to_string());
            return;
        }
    };
    let ns: Vec<usize> = match command {
        Command::Simulate => match &config.ns {
            Some(ns) if !ns.is_empty() => ns.clone(),
            _ => {
                v.push("ns is required".into());
                return;
            }
        },
        _ => match config.n {
            Some(n) => vec![n, 2 * n],
            None => {
                v.push("n is required".into());
                return;
            }
        },
    };
    if let Err(e) = scheme.check_indices(&ns) {
        v.push(e.to_string());
    }
}

fn validate_fisher(config: &ExperimentConfig, v: &mut Vec<String>) {
    if config.fisher_method().is_none() {
        v.push(format!(
            "unknown method '{}'",
            config.method.as_deref().unwrap_or_default()
        ));
    }
    let Some(name) = &config.model else {
        v.push("model is required".into());
        return;
    };
    let model = match model_by_name(name, config.sigma) {
        Ok(m) => m,
        Err(e) => {
            v.push(e);
            return;
        }
    };
    match &config.x {
        None => v.push("x is required".into()),
        Some(x) if x.len() != model.param_dim() => v.push(format!(
            "model {} takes {} parameter(s), got {}",
            model.name(),
            model.param_dim(),
            x.len()
        )),
        Some(x) if !x.iter().all(|t| t.is_finite()) || !model.in_domain(x) => v.push(format!(
            "x = {x:?} is outside the domain of {}",
            model.name()
        )),
        _ => {}
    }
}

fn validate_propagate(config: &ExperimentConfig, v: &mut Vec<String>) {
    let Some(value) = &config.value else {
        v.push("value is required".into());
        return;
    };
    let d = value.len();
    if d == 0 {
        v.push("value is empty".into());
        return;
    }
    match &config.map {
        None => v.push("map is required".into()),
        Some(name) => match map_by_name(name, d) {
            Ok(m) if m.d_in() != d => v.push(format!(
                "map {name} takes {} inputs, value has {d}",
                m.d_in()
            )),
            Ok(_) => {}
            Err(e) => v.push(e),
        },
    }
    if config.bias.as_ref().is_some_and(|b| b.len() != d) {
        v.push(format!("bias must have {d} entries"));
    }
    match &config.covariance {
        None => v.push("covariance is required".into()),
        Some(c) if c.len() != d * d => v.push(format!(
            "covariance must have {} entries (row-major)",
            d * d
        )),
        _ => {}
    }
}
