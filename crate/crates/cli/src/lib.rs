//! The `t2l` command line.
//!
//! Every subcommand resolves a [`DeskConfig`](t2l_core::experiment::DeskConfig),
//! writes its artifacts under `--out`, and records a `manifest.toml` holding
//! the invocation, the resolved config and the completed stages. A manifest
//! can be replayed with `t2l rerun`, and `--resume` skips stages that a
//! previous run of the same invocation already finished.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use t2l_core::experiment::DeskConfig;

#[derive(Parser, Debug)]
#[command(name = "t2l", version, about = "Train and evaluate text-to-LoRA hypernetworks on toy tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand that trains or evaluates.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Common {
    /// TOML config file; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    #[serde(default)]
    pub set: Vec<String>,
    /// Run seed; falls back to the file, then to `T2L_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multiplies every stage's peak learning rate.
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip stages already completed by an identical earlier invocation.
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,
    #[arg(skip)]
    #[serde(skip)]
    pub resolved: Option<DeskConfig>,
}

/// Inputs for commands that need a task suite and a base model. Missing
/// ones are produced in the run directory.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// Task suite file written by `make-suite`.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Base model checkpoint written by `pretrain-base`.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Similarity,
    Compression,
    ZeroShot,
    Alignment,
    Activations,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the task suite.
    MakeSuite {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base model on every task with instruction codes.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Train one task-specific LoRA.
    TrainLora {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Task id from the suite.
        #[arg(long)]
        task: String,
    },
    /// Train one LoRA per task and write a library manifest.
    BuildLibrary {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a hypernetwork to reproduce a LoRA library.
    TrainT2lRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value = "M")]
        arch: String,
        /// onehot, learned, hashed or table:PATH.
        #[arg(long, default_value = "onehot")]
        embeddings: String,
    },
    /// Train a hypernetwork end to end through the base model.
    TrainT2lSft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "M")]
        arch: String,
        /// hashed or table:PATH.
        #[arg(long, default_value = "hashed")]
        embeddings: String,
    },
    /// Generate an adapter from a description or task index.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "task_index")]
        describe: Option<String>,
        #[arg(long)]
        task_index: Option<usize>,
        /// onehot, learned, hashed or table:PATH.
        #[arg(long, default_value = "hashed")]
        embeddings: String,
        /// Adapter file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy of the base model and any given adapters.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "held-out")]
        split: Split,
        /// Adapter applied to every task.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Library whose adapters are matched to tasks by id.
        #[arg(long)]
        library: Option<PathBuf>,
        /// Hypernetwork scored over each task's eval-split descriptions.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "hashed")]
        embeddings: String,
    },
    /// Run one of the analysis studies.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "M")]
        arch: String,
        /// Library sizes for the compression sweep.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        sizes: Vec<usize>,
        /// Hypernetwork for the activation export.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Training descriptions per task in the alignment study.
        #[arg(long, default_value_t = 4)]
        descriptions: usize,
    },
    /// FLOPs accounting.
    Flops {
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay the invocation recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output location; defaults to the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MakeSuite { .. } => "make-suite",
            Self::PretrainBase { .. } => "pretrain-base",
            Self::TrainLora { .. } => "train-lora",
            Self::BuildLibrary { .. } => "build-library",
            Self::TrainT2lRecon { .. } => "train-t2l-recon",
            Self::TrainT2lSft { .. } => "train-t2l-sft",
            Self::Generate { .. } => "generate",
            Self::Eval { .. } => "eval",
            Self::Study { .. } => "study",
            Self::Flops { .. } => "flops",
            Self::Rerun { .. } => "rerun",
        }
    }

    pub fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Self::MakeSuite { common }
            | Self::PretrainBase { common, .. }
            | Self::TrainLora { common, .. }
            | Self::BuildLibrary { common, .. }
            | Self::TrainT2lRecon { common, .. }
            | Self::TrainT2lSft { common, .. }
            | Self::Eval { common, .. }
            | Self::Study { common, .. } => Some(common),
            Self::Generate { .. } | Self::Flops { .. } | Self::Rerun { .. } => None,
        }
    }

    /// Rewrites every relative path against `cwd` so the invocation can be
    /// replayed from anywhere.
    pub fn absolutize(&mut self, cwd: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = cwd.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        let fix_emb = |e: &mut String| {
            if let Some(path) = e.strip_prefix("table:") {
                let p = Path::new(path);
                if p.is_relative() {
                    *e = format!("table:{}", cwd.join(p).display());
                }
            }
        };
        if let Some(c) = self.common_mut() {
            fix_opt(&mut c.config);
            fix(&mut c.out);
        }
        match self {
            Self::PretrainBase { suite, .. } => fix_opt(suite),
            Self::TrainLora { inputs, .. } | Self::BuildLibrary { inputs, .. } => {
                fix_opt(&mut inputs.suite);
                fix_opt(&mut inputs.base);
            }
            Self::TrainT2lRecon { library, embeddings, .. } => {
                fix(library);
                fix_emb(embeddings);
            }
            Self::TrainT2lSft { inputs, embeddings, .. } => {
                fix_opt(&mut inputs.suite);
                fix_opt(&mut inputs.base);
                fix_emb(embeddings);
            }
            Self::Generate { ckpt, embeddings, out, .. } => {
                fix(ckpt);
                fix(out);
                fix_emb(embeddings);
            }
            Self::Eval {
                inputs,
                adapter,
                library,
                ckpt,
                embeddings,
                ..
            } => {
                fix_opt(&mut inputs.suite);
                fix_opt(&mut inputs.base);
                fix_opt(adapter);
                fix_opt(library);
                fix_opt(ckpt);
                fix_emb(embeddings);
            }
            Self::Study { inputs, ckpt, .. } => {
                fix_opt(&mut inputs.suite);
                fix_opt(&mut inputs.base);
                fix_opt(ckpt);
            }
            Self::Flops { out, .. } => fix_opt(out),
            Self::Rerun { manifest, out } => {
                fix(manifest);
                fix_opt(out);
            }
            Self::MakeSuite { .. } => {}
        }
    }
}

/// Parses `argv` and runs it, returning the process exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
