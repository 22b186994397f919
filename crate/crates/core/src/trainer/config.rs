use serde::{Deserialize, Serialize};

use crate::backbone::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Normalization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Each block trains on its own sequences only.
    FineTune,
    /// Each block also replays the training sequences of all earlier blocks.
    FullBatch,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine_tune" => Ok(Regime::FineTune),
            "full_batch" => Ok(Regime::FullBatch),
            other => Err(Error::Usage(format!(
                "unknown regime {other:?} (expected fine_tune or full_batch)"
            ))),
        }
    }
}

/// Component switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Cauchy-Schwarz normalization of the attention denominator.
    pub csn: bool,
    /// Enrichment from the historical interest pool.
    pub cie_h: bool,
    /// Enrichment from the current interest pool.
    pub cie_c: bool,
    /// Pseudo-historical memories for new users.
    pub pka: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            csn: true,
            cie_h: true,
            cie_c: true,
            pka: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 4] = ["csn", "cie_h", "cie_c", "pka"];

    pub fn none() -> Self {
        Self {
            csn: false,
            cie_h: false,
            cie_c: false,
            pka: false,
        }
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "csn" => Some(self.csn),
            "cie_h" => Some(self.cie_h),
            "cie_c" => Some(self.cie_c),
            "pka" => Some(self.pka),
            _ => None,
        }
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "csn" => &mut self.csn,
            "cie_h" => &mut self.cie_h,
            "cie_c" => &mut self.cie_c,
            "pka" => &mut self.pka,
            other => return Err(Error::Usage(format!("unknown component {other:?}"))),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub historical_size: usize,
    pub historical_len: usize,
    pub current_size: usize,
    pub current_len: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            historical_size: 4,
            historical_len: 4,
            current_size: 8,
            current_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_match: f64,
    /// Contexts, pseudo memories and pool matches are refreshed every
    /// `refresh_interval` epochs.
    pub refresh_interval: usize,
    pub n_neg: usize,
    /// Neighbors used for pseudo-historical memories; 0 disables them.
    pub top_k: usize,
    pub temperature: f64,
    pub pools: PoolConfig,
    pub toggles: Toggles,
    pub regime: Regime,
    pub seed: u64,
    /// Cutoffs reported per block.
    pub eval_ks: Vec<usize>,
    /// Cutoff for RA, LA, H-mean and user-group slices.
    pub primary_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lambda_match: 0.1,
            refresh_interval: 5,
            n_neg: 1,
            top_k: 5,
            temperature: 1.0,
            pools: PoolConfig::default(),
            toggles: Toggles::default(),
            regime: Regime::FineTune,
            seed: 0,
            eval_ks: vec![10, 20],
            primary_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be at least 1");
        }
        if !(self.lambda_match >= 0.0) || !self.lambda_match.is_finite() {
            return bad("lambda_match must be non-negative");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.primary_k == 0 || self.eval_ks.contains(&0) {
            return bad("metric cutoffs must be positive");
        }
        let p = &self.pools;
        if p.historical_size == 0 || p.historical_len == 0 || p.current_size == 0 || p.current_len == 0 {
            return bad("pool sizes must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn normalization(&self) -> Normalization {
        if self.toggles.csn {
            Normalization::CauchySchwarz
        } else {
            Normalization::Plain
        }
    }

    fn csa(&self) -> bool {
        self.model.head_kind == HeadKind::Csa
    }

    pub fn memories_enabled(&self) -> bool {
        self.csa()
    }

    pub fn cie_h(&self) -> bool {
        self.csa() && self.toggles.cie_h
    }

    pub fn cie_c(&self) -> bool {
        self.csa() && self.toggles.cie_c
    }

    pub fn pka(&self) -> bool {
        self.csa() && self.toggles.pka && self.top_k > 0
    }
}
