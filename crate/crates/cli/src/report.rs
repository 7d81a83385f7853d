use std::fmt::Write as _;

use errlab_core::approximation::MomentReport;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Outcome of one declared contract.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub contract: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(contract: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            contract: contract.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} [{}] {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.contract,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: ExperimentConfig,
    /// `sha256("blob <len>\0" + config)`, the git object hash of the echoed configuration.
    pub input_hash: String,
    pub results: serde_json::Value,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub csv: Option<String>,
}

impl Report {
    pub fn new(config: &ExperimentConfig, results: serde_json::Value, checks: Vec<Check>) -> Self {
        let echo = config.echo();
        Self {
            tool: "errlab",
            version: env!("CARGO_PKG_VERSION"),
            command: echo.command.map_or("none", |c| c.name()),
            input_hash: content_hash(&echo),
            config: echo,
            results,
            checks,
            csv: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks.iter().map(Check::line).collect()
    }
}

pub fn content_hash(config: &ExperimentConfig) -> String {
    let body = serde_json::to_string(config).expect("configs serialize");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

pub const MOMENT_HEADER: &str = "n,b_hat,b_se,d_hat,d_se,v_hat,v_se,m4_hat,m4_se";

pub fn moments_csv(r: &MomentReport) -> String {
    let mut s = String::from(MOMENT_HEADER);
    s.push('\n');
    for row in &r.rows {
        let _ = write!(s, "{}", row.n);
        for e in [row.b, row.d, row.v, row.m4] {
            let _ = write!(s, ",{:.16e},{:.16e}", e.mean, e.stderr);
        }
        s.push('\n');
    }
    s
}
