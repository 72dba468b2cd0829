//! Run configuration: optional JSON config file merged with command-line
//! flags (flags win), resolved into one struct that is echoed into every
//! output artifact together with its fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fewtreat::design::GenericWeights;
use fewtreat::montecarlo::{DgpConfig, SchemeChoice};
use fewtreat::{Error, HeteroKind, NormalizerKind, Result, SchemeKind};

/// Contents of a `--config` JSON file; every field optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub scheme: Option<SchemeKind>,
    pub weights: Option<PathBuf>,
    pub hetero: Option<HeteroKind>,
    pub alpha: Option<f64>,
    pub b: Option<usize>,
    pub seed: Option<u64>,
    pub normalizer: Option<NormalizerKind>,
    pub output: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub sv_floor: Option<f64>,
    pub replications: Option<usize>,
    pub dgp: Option<DgpConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("bad config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Flag values shared by the subcommands; `None` falls through to the
/// config file and then to defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// Panel CSV file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Target: att | event_study | pretrends | generic.
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Weight file (JSON) for the generic scheme.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Scale model: identity | panel_agg | repeated_cs.
    #[arg(long, value_enum)]
    pub hetero: Option<HeteroArg>,
    /// Miscoverage level in (0, 1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of resample draws.
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Seed for every random stage.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Band normalizer: constant | studentized.
    #[arg(long, value_enum)]
    pub normalizer: Option<NormalizerArg>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    /// Floor for the smallest singular value of fitted scale matrices.
    #[arg(long)]
    pub sv_floor: Option<f64>,
    /// JSON config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SchemeArg {
    Att,
    #[value(name = "event_study")]
    EventStudy,
    Pretrends,
    Generic,
}

impl From<SchemeArg> for SchemeKind {
    fn from(v: SchemeArg) -> Self {
        match v {
            SchemeArg::Att => SchemeKind::Att,
            SchemeArg::EventStudy => SchemeKind::EventStudy,
            SchemeArg::Pretrends => SchemeKind::Pretrends,
            SchemeArg::Generic => SchemeKind::Generic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HeteroArg {
    Identity,
    #[value(name = "panel_agg")]
    PanelAgg,
    #[value(name = "repeated_cs")]
    RepeatedCs,
}

impl From<HeteroArg> for HeteroKind {
    fn from(v: HeteroArg) -> Self {
        match v {
            HeteroArg::Identity => HeteroKind::Identity,
            HeteroArg::PanelAgg => HeteroKind::PanelAgg,
            HeteroArg::RepeatedCs => HeteroKind::RepeatedCs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NormalizerArg {
    Constant,
    Studentized,
}

impl From<NormalizerArg> for NormalizerKind {
    fn from(v: NormalizerArg) -> Self {
        match v {
            NormalizerArg::Constant => NormalizerKind::Constant,
            NormalizerArg::Studentized => NormalizerKind::Studentized,
        }
    }
}

/// Resolved settings plus the output destination. Only `config` is
/// fingerprinted and echoed: output bytes must not depend on where they are
/// written.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub config: ResolvedConfig,
    pub output: Option<PathBuf>,
}

/// Fully resolved run settings; serialized into every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub subcommand: String,
    pub input: Option<PathBuf>,
    pub scheme: SchemeKind,
    pub weights: Option<PathBuf>,
    pub hetero: HeteroKind,
    pub alpha: f64,
    pub b: usize,
    pub seed: u64,
    pub normalizer: NormalizerKind,
    pub format: OutputFormat,
    pub sv_floor: Option<f64>,
    pub replications: usize,
    pub dgp: Option<DgpConfig>,
}

impl RunPlan {
    /// Merge flags over the config file over defaults. `default_b` differs
    /// between inference (10 000) and coverage (2 000).
    pub fn resolve(subcommand: &str, args: &CommonArgs, default_b: usize) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let config = ResolvedConfig {
            subcommand: subcommand.to_string(),
            input: args.input.clone().or(file.input),
            scheme: args.scheme.map(SchemeKind::from).or(file.scheme).unwrap_or(SchemeKind::Att),
            weights: args.weights.clone().or(file.weights),
            hetero: args
                .hetero
                .map(HeteroKind::from)
                .or(file.hetero)
                .unwrap_or(HeteroKind::Identity),
            alpha: args.alpha.or(file.alpha).unwrap_or(0.05),
            b: args.b.or(file.b).unwrap_or(default_b),
            seed: args.seed.or(file.seed).unwrap_or(0),
            normalizer: args
                .normalizer
                .map(NormalizerKind::from)
                .or(file.normalizer)
                .unwrap_or(NormalizerKind::Studentized),
            format: args.format.or(file.format).unwrap_or(OutputFormat::Csv),
            sv_floor: args.sv_floor.or(file.sv_floor),
            replications: file.replications.unwrap_or(2000),
            dgp: file.dgp,
        };
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(Error::validation(format!(
                "alpha must be in (0, 1), got {}",
                config.alpha
            )));
        }
        if config.b < 1 {
            return Err(Error::validation("B must be at least 1"));
        }
        Ok(RunPlan { config, output: args.output.clone().or(file.output) })
    }
}

impl ResolvedConfig {

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// The scheme choice, loading the weight file when the scheme is generic.
    pub fn scheme_choice(&self) -> Result<SchemeChoice> {
        match self.scheme {
            SchemeKind::Att => Ok(SchemeChoice::Att),
            SchemeKind::EventStudy => Ok(SchemeChoice::EventStudy),
            SchemeKind::Pretrends => Ok(SchemeChoice::Pretrends),
            SchemeKind::Generic => {
                let path = self.weights.as_ref().ok_or_else(|| {
                    Error::validation("--scheme generic requires --weights <file>")
                })?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::validation(format!("cannot read weights {}: {e}", path.display()))
                })?;
                let weights: GenericWeights = serde_json::from_str(&text).map_err(|e| {
                    Error::validation(format!("bad weights {}: {e}", path.display()))
                })?;
                Ok(SchemeChoice::Generic(weights))
            }
        }
    }

    pub fn require_input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::validation("an input panel is required (--input <csv>)"))
    }

    pub fn require_dgp(&self) -> Result<&DgpConfig> {
        self.dgp.as_ref().ok_or_else(|| {
            Error::validation(
                "this subcommand needs a data-generating process: pass --config <json> \
                 with a `dgp` entry",
            )
        })
    }
}
