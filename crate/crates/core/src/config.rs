//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::oracle::{FoldCriteria, DEFAULT_L_MAX, HARD_L_MAX};
use crate::policy::{Architecture, PolicyConfig};
use crate::prefdata::{Pairing, PairingOptions};
use crate::seqcore::Alphabet;
use crate::trainer::{ObjectiveConfig, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub alphabet: String,
    pub length: usize,
    pub arch: Architecture,
    pub embed_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            alphabet: "HP2".into(),
            length: 12,
            arch: Architecture::default(),
            embed_dim: 8,
            init_scale: 0.1,
        }
    }
}

/// How the frozen reference is fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub corpus_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            corpus_size: 20_000,
            steps: 1500,
            batch: 64,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub kind: String,
    pub l_max: usize,
    pub g_max: u64,
    pub e_thresh: Option<i32>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            kind: "lattice".into(),
            l_max: DEFAULT_L_MAX,
            g_max: 4,
            e_thresh: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub pool_size: usize,
    pub pairs: usize,
    pub pairing: String,
    pub q_conf: f64,
    pub prefer_hard: bool,
    pub keep_zero_gap: bool,
    /// Unset: 1.0 for HP2, 0.30 for AA20.
    pub identity_threshold: Option<f64>,
    pub fractions: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            pool_size: 2000,
            pairs: 5000,
            pairing: "max_gap".into(),
            q_conf: 0.75,
            prefer_hard: true,
            keep_zero_gap: false,
            identity_threshold: None,
            fractions: [0.9, 0.05, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub temperature: f64,
    pub plane_samples: usize,
    /// Largest acceptable KL to the reference over a run, in nats.
    pub kl_cap: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 2000,
            temperature: 0.5,
            plane_samples: 1000,
            kl_cap: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingSection {
    /// Write elapsed seconds into training logs; zero keeps logs reproducible.
    pub wall_clock: bool,
}

impl Default for LoggingSection {
    fn default() -> Self {
        LoggingSection { wall_clock: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub reference: ReferenceSection,
    pub oracle: OracleSection,
    pub data: DataSection,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamConfig,
    pub train: TrainSettings,
    pub eval: EvalSection,
    pub logging: LoggingSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSection::default(),
            reference: ReferenceSection::default(),
            oracle: OracleSection::default(),
            data: DataSection::default(),
            objective: ObjectiveConfig::default(),
            optimizer: AdamConfig {
                lr: 1e-5,
                ..AdamConfig::default()
            },
            train: TrainSettings::default(),
            eval: EvalSection::default(),
            logging: LoggingSection::default(),
        }
    }
}

fn range(key: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, what))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let span = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!(" (line {line})")
                })
                .unwrap_or_default();
            Error::config(origin, format!("{msg}{span}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::from_name(&self.model.alphabet)
            .ok_or_else(|| Error::config("model.alphabet", "must be HP2 or AA20"))
    }

    pub fn policy_config(&self, seed: u64) -> Result<PolicyConfig> {
        let c = PolicyConfig {
            alphabet: self.alphabet()?,
            length: self.model.length,
            arch: self.model.arch,
            embed_dim: self.model.embed_dim,
            seed,
            init_scale: self.model.init_scale,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn criteria(&self) -> FoldCriteria {
        FoldCriteria {
            g_max: self.oracle.g_max,
            e_thresh: self.oracle.e_thresh,
        }
    }

    pub fn identity_threshold(&self) -> Result<f64> {
        Ok(match self.data.identity_threshold {
            Some(t) => t,
            None => match self.alphabet()? {
                Alphabet::Hp2 => 1.0,
                Alphabet::Aa20 => 0.30,
            },
        })
    }

    pub fn pairing(&self) -> Result<Pairing> {
        Pairing::from_name(&self.data.pairing)
            .ok_or_else(|| Error::config("data.pairing", "must be max_gap or random"))
    }

    pub fn pairing_options(&self) -> PairingOptions {
        PairingOptions {
            prefer_hard: self.data.prefer_hard,
            keep_zero_gap: self.data.keep_zero_gap,
        }
    }

    /// Checks every section, reporting the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.policy_config(self.seed)?;
        range("reference.batch", self.reference.batch >= 1, "must be at least 1")?;
        range("reference.corpus_size", self.reference.corpus_size >= 1, "must be at least 1")?;
        range("reference.lr", self.reference.lr > 0.0, "must be positive")?;
        match self.oracle.kind.as_str() {
            "lattice" | "surrogate" => {}
            _ => return Err(Error::config("oracle.kind", "must be lattice or surrogate")),
        }
        range(
            "oracle.l_max",
            (2..=HARD_L_MAX).contains(&self.oracle.l_max),
            "must lie in 2..=18",
        )?;
        if self.oracle.kind == "lattice" {
            range(
                "model.length",
                self.model.length <= self.oracle.l_max,
                "exceeds oracle.l_max",
            )?;
        }
        range("oracle.g_max", self.oracle.g_max >= 1, "must be at least 1")?;
        range("data.pool_size", self.data.pool_size >= 2, "must be at least 2")?;
        range("data.pairs", self.data.pairs >= 1, "must be at least 1")?;
        self.pairing()?;
        range(
            "data.q_conf",
            self.data.q_conf > 0.0 && self.data.q_conf < 1.0,
            "must lie in (0, 1)",
        )?;
        let t = self.identity_threshold()?;
        range("data.identity_threshold", t > 0.0 && t <= 1.0, "must lie in (0, 1]")?;
        let f = self.data.fractions;
        range(
            "data.fractions",
            f.iter().all(|x| *x >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9 && f[0] > 0.0,
            "must be nonnegative, sum to 1, with a positive train share",
        )?;
        self.objective.validate(&self.oracle.kind)?;
        let o = self.optimizer;
        range("optimizer.lr", o.lr > 0.0 && o.lr.is_finite(), "must be positive")?;
        range("optimizer.beta1", (0.0..1.0).contains(&o.beta1), "must lie in [0, 1)")?;
        range("optimizer.beta2", (0.0..1.0).contains(&o.beta2), "must lie in [0, 1)")?;
        range("optimizer.eps", o.eps > 0.0, "must be positive")?;
        self.train.validate()?;
        range("eval.samples", self.eval.samples >= 1, "must be at least 1")?;
        range("eval.plane_samples", self.eval.plane_samples >= 4, "must be at least 4")?;
        range("eval.temperature", self.eval.temperature > 0.0, "must be positive")?;
        range("eval.kl_cap", self.eval.kl_cap > 0.0, "must be positive")?;
        Ok(())
    }
}
