//! Short model descriptions (`seq`, `ple` + `input_plug`, ...) resolved
//! against default widths and a feature layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BaselineConfig, BaselineKind, FeatureLayout, MdConfig, MdPlacement, ModelConfig, ModelError, SeqModelConfig};
use crate::datasets::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Seq,
    SharedBottom,
    Mlmmoe,
    Ple,
    AdattSp,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::SharedBottom,
        Architecture::Mlmmoe,
        Architecture::Ple,
        Architecture::AdattSp,
        Architecture::Seq,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Seq => "seq",
            Architecture::SharedBottom => "shared_bottom",
            Architecture::Mlmmoe => "mlmmoe",
            Architecture::Ple => "ple",
            Architecture::AdattSp => "adatt_sp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Architecture::Seq => None,
            Architecture::SharedBottom => Some(BaselineKind::SharedBottom),
            Architecture::Mlmmoe => Some(BaselineKind::Mlmmoe),
            Architecture::Ple => Some(BaselineKind::Ple),
            Architecture::AdattSp => Some(BaselineKind::AdattSp),
        }
    }

    pub fn names() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Width and layer defaults every spec is resolved against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDefaults {
    pub seq: SeqModelConfig,
    pub baseline: BaselineConfig,
    pub md: MdConfig,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        Self {
            seq: SeqModelConfig::default(),
            baseline: BaselineConfig::default(),
            md: MdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    #[serde(default)]
    pub md: Option<MdPlacement>,
    pub tasks: Vec<Task>,
    #[serde(default = "yes")]
    pub regularizer: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn new(arch: Architecture, md: Option<MdPlacement>, tasks: Vec<Task>) -> Self {
        Self {
            arch,
            md,
            tasks,
            regularizer: true,
        }
    }

    pub fn without_regularizer(mut self) -> Self {
        self.regularizer = false;
        self
    }

    /// The adaptor placement `+md` means for `arch`.
    pub fn default_placement(arch: Architecture) -> MdPlacement {
        if arch == Architecture::Seq {
            MdPlacement::InSequence
        } else {
            MdPlacement::InputPlug
        }
    }

    /// Name used in reports, e.g. `seq+md`, `ple+md`, `seq+md-noreg`.
    /// A non-default placement is spelled out: `seq+md@input_plug`.
    pub fn label(&self) -> String {
        let mut s = self.arch.as_str().to_string();
        if let Some(p) = self.md {
            s.push_str("+md");
            if p != Self::default_placement(self.arch) {
                s.push('@');
                s.push_str(p.as_str());
            }
        }
        if self.arch == Architecture::Seq && !self.regularizer {
            s.push_str("-noreg");
        }
        s
    }

    /// Inverse of [`ModelSpec::label`].
    pub fn parse(label: &str, tasks: Vec<Task>) -> Result<Self, ModelError> {
        let bad = || {
            ModelError::Config(format!(
                "unknown model '{label}'; expected <arch>[+md[@placement]][-noreg] with arch one of {}",
                Architecture::names()
            ))
        };
        let (rest, regularizer) = match label.strip_suffix("-noreg") {
            Some(r) => (r, false),
            None => (label, true),
        };
        let (arch, md) = match rest.split_once("+md") {
            None => (rest, None),
            Some((a, "")) => (a, Some(None)),
            Some((a, p)) => (a, Some(Some(p.strip_prefix('@').and_then(MdPlacement::parse).ok_or_else(bad)?))),
        };
        let arch = Architecture::parse(arch).ok_or_else(bad)?;
        if !regularizer && arch != Architecture::Seq {
            return Err(bad());
        }
        let md = md.map(|p| p.unwrap_or_else(|| Self::default_placement(arch)));
        Ok(Self {
            arch,
            md,
            tasks,
            regularizer,
        })
    }

    pub fn resolve(
        &self,
        defaults: &ModelDefaults,
        input_dim: usize,
        layout: Option<&FeatureLayout>,
    ) -> Result<ModelConfig, ModelError> {
        let md = match self.md {
            None => None,
            Some(placement) => {
                let layout = layout.ok_or_else(|| {
                    ModelError::MdMode(format!("{} needs a feature split", self.label()))
                })?;
                Some(MdConfig {
                    placement,
                    layout: layout.clone(),
                    ..defaults.md.clone()
                })
            }
        };
        Ok(match self.arch.baseline() {
            None => ModelConfig::Seq(SeqModelConfig {
                tasks: self.tasks.clone(),
                input_dim,
                regularizer: self.regularizer,
                md,
                ..defaults.seq.clone()
            }),
            Some(kind) => {
                if self.md == Some(MdPlacement::InSequence) {
                    return Err(ModelError::MdMode(format!(
                        "{} takes the adaptor only as input_plug",
                        self.arch
                    )));
                }
                ModelConfig::Baseline {
                    baseline: BaselineConfig {
                        kind,
                        tasks: self.tasks.clone(),
                        input_dim,
                        ..defaults.baseline.clone()
                    },
                    md,
                }
            }
        })
    }
}
