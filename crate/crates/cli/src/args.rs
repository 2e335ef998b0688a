use std::path::{Path, PathBuf};

use aofl::data::SynthSpec;
use aofl::losses::Constraint;
use aofl::model::OprMode;
use aofl::train::{TrainConfig, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "aofl", version, about = "Angle-optimized partial disentanglement for multimodal fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal conversation dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and test every ablation variant across several seeds.
    Ablate(AblateArgs),
    /// Export per-utterance angles and a 2D projection of the features.
    Angles(EvalArgs),
    /// Print checkpoint dimensions and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_conversations: Option<usize>,
    #[arg(long)]
    pub utterances_per_conversation: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub shared_strength: Option<f64>,
    #[arg(long)]
    pub specific_strength: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Which part of the seeded train/valid/test split to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Train/valid/test ratios, drawn with the config seed.
    #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
    pub split: [f64; 3],
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub part: Part,
    #[arg(long)]
    pub out: PathBuf,
    // Without --config, the resolved_config.json beside the checkpoint is used.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant keys; all nine when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// `--config` plus one override flag per `TrainConfig` field.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat JSON object of training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "BOOL")]
    pub cen_enabled: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub cen_normalize: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub are_enabled: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub aac_enabled: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub csr_enabled: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub opr_enabled: Option<bool>,
    #[arg(long)]
    pub opr_mode: Option<OprMode>,
    #[arg(long)]
    pub constraint: Option<Constraint>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub d_c: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| format!("expected three ratios, got {}", p.len()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

macro_rules! overlay {
    ($target:expr, $src:expr; some $($field:ident),*) => {
        $(if let Some(v) = $src.$field { $target.$field = Some(v); })*
    };
    ($target:expr, $src:expr; $($field:ident),*) => {
        $(if let Some(v) = $src.$field { $target.$field = v; })*
    };
}

impl ConfigArgs {
    /// Config file (or `fallback`, or defaults) with flags applied on top.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<TrainConfig, CliError> {
        let mut cfg = match self.config.as_deref().or(fallback) {
            Some(path) => read_json::<TrainConfig>(path)?,
            None => TrainConfig::default(),
        };
        overlay!(cfg, self; alpha, beta, gamma, mu, eta, learning_rate, epochs, warmup_epochs, seed,
            cen_enabled, cen_normalize, are_enabled, aac_enabled, csr_enabled, opr_enabled, opr_mode,
            constraint, layers);
        overlay!(cfg, self; some d, heads, d_ff, d_c, num_classes);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthSpec, CliError> {
        let mut spec = match &self.config {
            Some(path) => read_json::<SynthSpec>(path)?,
            None => SynthSpec::default(),
        };
        overlay!(spec, self; num_conversations, utterances_per_conversation, d, num_classes,
            shared_strength, specific_strength, noise_std, seed);
        spec.validate()?;
        Ok(spec)
    }
}
