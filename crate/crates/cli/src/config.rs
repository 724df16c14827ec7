use std::path::{Path, PathBuf};

use clap::Args;
use prunenet::model::{InputShape, NetworkSpec};
use prunenet::trainer::{PruneConfig, TrainConfig};
use prunenet::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Arch {
    #[serde(rename = "vgg-mini")]
    #[value(name = "vgg-mini")]
    VggMini,
    #[serde(rename = "res-mini")]
    #[value(name = "res-mini")]
    ResMini,
}

impl Arch {
    pub fn spec(self, input: InputShape, num_classes: usize) -> NetworkSpec {
        match self {
            Arch::VggMini => NetworkSpec::vgg_mini(input, num_classes),
            Arch::ResMini => NetworkSpec::res_mini(input, num_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub timing: bool,
    pub format: ReportFormat,
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            timing: false,
            format: ReportFormat::Table,
            batch_sizes: vec![1, 8, 64],
            repeats: 5,
        }
    }
}

/// Everything a command needs, after merging defaults, the config file
/// and command-line flags (in increasing precedence).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    /// Single seed for every random stream; copied into each section.
    pub seed: u64,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test records.
    pub test_limit: Option<usize>,
    pub eval_batch_size: usize,
    /// Random batches used to check the rewritten network.
    pub probe_batches: usize,
    pub pretrain: TrainConfig,
    pub prune: PruneConfig,
    pub finetune: TrainConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::VggMini,
            data_dir: None,
            out: PathBuf::from("runs/default"),
            seed: 0,
            train_limit: None,
            test_limit: None,
            eval_batch_size: 256,
            probe_batches: 4,
            pretrain: TrainConfig::default(),
            prune: PruneConfig::default(),
            finetune: TrainConfig {
                epochs: 2,
                lr: 0.005,
                ..TrainConfig::default()
            },
            analyze: AnalyzeConfig::default(),
        }
    }
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Directory holding MNIST IDX or CIFAR-10 binary files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// ℓ1 weight of the pruning objective.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Epochs of the command being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Channels with weight below this are removed.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub scale_final: Option<f64>,
    #[arg(long)]
    pub scale_switch_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input checkpoint; defaults to the previous stage's file in --out.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Learning rate of the command being run (both rates for prune).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Also time both networks (analyze only).
    #[arg(long)]
    pub timing: bool,
    /// Report format printed by analyze.
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Prune,
    Rewrite,
    Finetune,
    Eval,
    Analyze,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &CommonArgs, stage: Stage) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = args.arch {
            cfg.arch = a;
        }
        if let Some(d) = &args.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(n) = args.train_limit {
            cfg.train_limit = Some(n);
        }
        if let Some(n) = args.test_limit {
            cfg.test_limit = Some(n);
        }
        if let Some(l) = args.lambda {
            cfg.prune.lambda = l;
        }
        if let Some(t) = args.threshold {
            cfg.prune.threshold = t;
        }
        if let Some(s) = args.scale_final {
            cfg.prune.sigmoid_scale_final = s;
        }
        if let Some(e) = args.scale_switch_epoch {
            cfg.prune.scale_switch_epoch = e;
        }
        if args.timing {
            cfg.analyze.timing = true;
        }
        if let Some(f) = args.format {
            cfg.analyze.format = f;
        }
        match stage {
            Stage::Pretrain => apply_train_flags(&mut cfg.pretrain, args),
            Stage::Finetune => apply_train_flags(&mut cfg.finetune, args),
            Stage::Prune => {
                if let Some(e) = args.epochs {
                    cfg.prune.epochs = e;
                }
                if let Some(lr) = args.lr {
                    cfg.prune.lr_pruner = lr;
                    cfg.prune.lr_joint = lr;
                }
                if let Some(b) = args.batch_size {
                    cfg.prune.batch_size = b;
                }
            }
            Stage::Rewrite | Stage::Eval | Stage::Analyze => {}
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.prune.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.prune.validate()?;
        self.finetune.validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if self.probe_batches == 0 {
            return Err(Error::Config("probe_batches must be positive".into()));
        }
        if self.analyze.repeats == 0 || self.analyze.batch_sizes.contains(&0) {
            return Err(Error::Config("analyze repeats and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let d = self
            .data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("--data-dir (or data_dir in the config file) is required".into()))?;
        if !d.is_dir() {
            return Err(Error::Config(format!("data directory {} does not exist", d.display())));
        }
        Ok(d)
    }
}

fn apply_train_flags(t: &mut TrainConfig, args: &CommonArgs) {
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(lr) = args.lr {
        t.lr = lr;
    }
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
}
