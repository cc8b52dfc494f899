use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use elastic_core::elastic::{
    cost_report, iterative_pipeline, reapply, CostReport, ElasticModel, LayerSelection, LevelStack, PipelineConfig,
};
use elastic_core::graph::{zoo, ArchSpec, ModelGraph, NodeId};
use elastic_core::importance::{Method, Scope};
use elastic_core::trainer::{evaluate_loss, fit, Dataset, History, Optimizer, Split, SynthDataset, TrainConfig};
use elastic_core::{Error, Result};

use crate::checkpoint::{Checkpoint, RunConfig};

type Ck = Checkpoint<f32>;

/// Prune-and-grow lifecycle for elastic CNNs.
#[derive(Debug, Parser)]
#[command(name = "ecnn", version)]
pub struct Cli {
    /// Seed for weight init, data generation and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print metrics as one JSON object per line instead of tables.
    #[arg(long, global = true)]
    pub json_lines: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataSource {
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    /// SGD with momentum 0.9.
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DataSource::Synth)]
    pub data: DataSource,
    /// Number of synthetic samples (default: as stored, else 2048).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Pixel noise of the synthetic task (default: as stored, else 2.5).
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an architecture and train it.
    Train {
        #[arg(long)]
        arch: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// 0 stores the freshly initialized model.
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
    },
    /// Iteratively remove channels and store the core with its records.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value = "l1")]
        method: Method,
        #[arg(long, default_value = "local")]
        scope: Scope,
        #[arg(long, default_value = "all")]
        layers: LayerSelection,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Fine-tune after every step rather than only after the last.
        #[arg(long)]
        finetune_each: bool,
        #[arg(long, default_value_t = 3)]
        finetune_epochs: usize,
        /// Node ids whose channels must not be pruned.
        #[arg(long, value_delimiter = ',')]
        protect: Vec<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reinsert pruned channels level by level, fine-tuning only them.
    Rebuild {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        /// Verify after each level that the inner model is embedded bitwise.
        #[arg(long)]
        check_nesting: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize another stored capacity level.
    Switch {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and loss on held-out synthetic samples.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Parameters, FLOPs and size of every level.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// 2 for usage problems, 3 for data, shape and file problems, 4 for
/// numeric divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownArch { .. } | Error::InvalidArgument(_) | Error::LevelUnavailable { .. } => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn line(&self, text: impl AsRef<str>) {
        if !self.json {
            println!("{}", text.as_ref());
        }
    }

    fn record(&self, value: serde_json::Value) {
        if self.json {
            println!("{}", value);
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let out = Out { json: cli.json_lines };
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            arch,
            data,
            out: path,
            epochs,
            lr,
            batch_size,
            optimizer,
        } => train(&out, seed, &arch, &data, &path, epochs, lr, batch_size, optimizer),
        Command::Prune {
            input,
            ratio,
            method,
            scope,
            layers,
            steps,
            finetune_each,
            finetune_epochs,
            protect,
            data,
            out: path,
        } => {
            let cfg = PipelineConfig {
                steps,
                ratio,
                method,
                scope,
                layers,
                finetune_each,
                protected: protect.into_iter().map(NodeId).collect(),
            };
            prune(&out, seed, &input, cfg, finetune_epochs, &data, &path)
        }
        Command::Rebuild {
            input,
            levels,
            epochs,
            check_nesting,
            data,
            out: path,
        } => rebuild(&out, seed, &input, levels, epochs, check_nesting, &data, &path),
        Command::Switch {
            input,
            level,
            out: path,
        } => {
            let mut ck = Ck::load(&input)?;
            ck.elastic.set_level(level)?;
            ck.save(&path)?;
            out.line(format!("stored level {} of {}", level, ck.elastic.stack.depth()));
            report_levels(&out, &ck);
            Ok(())
        }
        Command::Eval { input, data } => {
            let ck = Ck::load(&input)?;
            let synth = synth_for(&ck.config, &data, seed, ck.elastic.model().classes());
            let test = SynthDataset {
                seed: synth.seed ^ HELD_OUT,
                ..synth
            }
            .generate()?;
            let (loss, acc) = evaluate_loss(ck.elastic.model(), &test)?;
            out.line(format!(
                "level {}: accuracy {:.4}, loss {:.4} on {} held-out samples",
                ck.elastic.level(),
                acc,
                loss,
                test.len()
            ));
            out.record(json!({"level": ck.elastic.level(), "accuracy": acc, "loss": loss, "samples": test.len()}));
            Ok(())
        }
        Command::Report { input } => {
            let ck = Ck::load(&input)?;
            report_levels(&out, &ck);
            Ok(())
        }
    }
}

/// Seed offset of the evaluation samples.
const HELD_OUT: u64 = 0x7e57;

fn synth_for(stored: &RunConfig, args: &DataArgs, seed: u64, classes: usize) -> SynthDataset {
    let mut s = stored.data.unwrap_or_else(|| SynthDataset::new(2048, classes, seed));
    if let Some(n) = args.samples {
        s.samples = n;
    }
    if let Some(noise) = args.noise {
        s.noise = noise;
    }
    s
}

fn load_data(synth: &SynthDataset) -> Result<Dataset<f32>> {
    synth.generate()
}

fn print_history(out: &Out, h: &History) {
    if out.json {
        print!("{}", h.to_json_lines());
        return;
    }
    println!("{:>5} {:>5} {:>9} {:>8} {:>10}", "epoch", "split", "loss", "acc", "lr");
    for r in &h.records {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        println!(
            "{:>5} {:>5} {:>9.4} {:>8.4} {:>10.2e}",
            r.epoch, split, r.loss, r.accuracy, r.lr
        );
    }
    if h.stopped_early {
        println!("stopped early after {} epochs", h.epochs_run());
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    out: &Out,
    seed: u64,
    arch: &str,
    data: &DataArgs,
    path: &Path,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    optimizer: OptimizerArg,
) -> Result<()> {
    let spec = ArchSpec::named(arch)?;
    let mut model: ModelGraph<f32> = zoo::build(&spec, seed)?;
    let synth = synth_for(&RunConfig::default(), data, seed, spec.classes);
    let mut config = RunConfig {
        data: Some(synth),
        ..Default::default()
    };
    if epochs > 0 {
        let cfg = TrainConfig {
            lr_max: lr,
            lr_min: (lr * 1e-2).min(1e-5),
            epochs,
            batch_size,
            seed,
            optimizer: match optimizer {
                OptimizerArg::Adam => TrainConfig::default().optimizer,
                OptimizerArg::Sgd => Optimizer::Sgd { momentum: 0.9 },
            },
            ..TrainConfig::default()
        };
        let dataset = load_data(&synth)?;
        let history = fit(&mut model, &dataset, &cfg, None)?;
        print_history(out, &history);
        let (_, acc) = evaluate_loss(&model, &dataset)?;
        out.line(format!("final train accuracy {:.4}", acc));
        out.record(json!({"final_train_accuracy": acc}));
        config.metrics.insert("train_accuracy".into(), acc);
        config.train = Some(cfg);
    }
    let ck = Ck::single(model, config)?;
    ck.save(path)?;
    report_levels(out, &ck);
    Ok(())
}

fn finetune_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn prune(
    out: &Out,
    seed: u64,
    input: &Path,
    cfg: PipelineConfig,
    finetune_epochs: usize,
    data: &DataArgs,
    path: &Path,
) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(Error::InvalidArgument(format!("ratio {} outside [0, 1)", cfg.ratio)));
    }
    let ck = Ck::load(input)?;
    if cfg.ratio == 0.0 {
        ck.save(path)?;
        out.line("ratio 0: nothing removed");
        report_levels(out, &ck);
        return Ok(());
    }
    let (stack, model, level) = ck.elastic.into_parts();
    if level != stack.depth() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint stores level {} of {}; switch to the smallest level before pruning further",
            level,
            stack.depth()
        )));
    }
    let synth = synth_for(&ck.config, data, seed, model.classes());
    let needs_data = cfg.method.needs_data() || finetune_epochs > 0;
    let dataset = if needs_data { Some(load_data(&synth)?) } else { None };
    let batches = match &dataset {
        Some(d) if cfg.method.needs_data() => {
            let idx: Vec<usize> = (0..d.len().min(256)).collect();
            d.subset(&idx).batches(64)
        }
        _ => Vec::new(),
    };
    let ft = finetune_cfg(finetune_epochs, seed);
    let mut tune = |m: &mut ModelGraph<f32>, step: usize| -> Result<()> {
        match &dataset {
            Some(d) if finetune_epochs > 0 => {
                let h = fit(m, d, &ft, None)?;
                let acc = h.last(Split::Train).map_or(0.0, |r| r.accuracy);
                out.line(format!(
                    "step {}: fine-tuned {} epochs, train accuracy {:.4}",
                    step,
                    h.epochs_run(),
                    acc
                ));
                out.record(json!({"step": step, "finetune_epochs": h.epochs_run(), "train_accuracy": acc}));
                Ok(())
            }
            _ => Ok(()),
        }
    };
    let result = iterative_pipeline(&model, &cfg, &batches, &mut tune)?;
    let offset = stack.depth();
    let mut records = stack.records;
    let mut costs = stack.costs;
    for mut r in result.stack.records {
        r.step += offset;
        records.push(r);
    }
    costs.extend(result.stack.costs.into_iter().skip(1));
    let core = result.levels.into_iter().last().expect("pipeline returns levels");
    let depth = records.len();
    let new_stack = LevelStack {
        arch: stack.arch,
        records,
        costs,
    };
    let mut config = ck.config;
    config.data = Some(synth);
    config.prune = Some(cfg);
    let out_ck = Checkpoint {
        elastic: ElasticModel::new(new_stack, core, depth)?,
        config,
    };
    out_ck.save(path)?;
    report_levels(out, &out_ck);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn rebuild(
    out: &Out,
    seed: u64,
    input: &Path,
    levels: usize,
    epochs: usize,
    check_nesting: bool,
    data: &DataArgs,
    path: &Path,
) -> Result<()> {
    let mut ck = Ck::load(input)?;
    let current = ck.elastic.level();
    if levels > current {
        return Err(Error::InvalidArgument(format!(
            "cannot rebuild {} levels from level {} (stack depth {})",
            levels,
            current,
            ck.elastic.stack.depth()
        )));
    }
    let synth = synth_for(&ck.config, data, seed, ck.elastic.model().classes());
    let dataset = if epochs > 0 { Some(load_data(&synth)?) } else { None };
    let ft = finetune_cfg(epochs.max(1), seed);
    let mut all_nested = true;
    for _ in 0..levels {
        let inner = ck.elastic.model().clone();
        let mut tune = |m: &mut ModelGraph<f32>, mask: &elastic_core::elastic::FreezeMask| -> Result<()> {
            if let Some(d) = &dataset {
                fit(m, d, &ft, Some(mask))?;
            }
            Ok(())
        };
        ck.elastic.grow(&mut tune)?;
        let level = ck.elastic.level();
        let report = cost_report(ck.elastic.model())?;
        let mut line = format!("rebuilt level {}: {} params", level, report.params);
        let mut rec = json!({"level": level, "params": report.params});
        if let Some(d) = &dataset {
            let (_, acc) = evaluate_loss(ck.elastic.model(), d)?;
            line += &format!(", train accuracy {:.4}", acc);
            rec["train_accuracy"] = json!(acc);
        }
        if check_nesting {
            let record = &ck.elastic.stack.records[level];
            let nested = reapply(ck.elastic.model(), record)?.bit_eq(&inner);
            all_nested &= nested;
            line += &format!(", nesting check {}", if nested { "PASS" } else { "FAIL" });
            rec["nesting"] = json!(nested);
        }
        out.line(line);
        out.record(rec);
    }
    ck.config.data = Some(synth);
    ck.config.rebuild_epochs = Some(epochs);
    ck.save(path)?;
    report_levels(out, &ck);
    if !all_nested {
        return Err(Error::RecordMismatch(
            "a rebuilt level does not embed its inner model bitwise".into(),
        ));
    }
    Ok(())
}

fn cost_json(level: usize, c: &CostReport, stored: bool) -> serde_json::Value {
    json!({
        "level": level,
        "params": c.params,
        "buffers": c.buffers,
        "flops": c.flops,
        "megabytes": c.megabytes(),
        "stored": stored,
    })
}

fn report_levels(out: &Out, ck: &Ck) {
    let stack = &ck.elastic.stack;
    let stored = ck.elastic.level();
    if out.json {
        for (i, c) in stack.costs.iter().enumerate() {
            out.record(cost_json(i, c, i == stored));
        }
        for (key, widths) in stack.group_widths() {
            let name: Vec<String> = key.iter().map(|s| s.to_string()).collect();
            out.record(json!({"group": name.join(" "), "widths": widths}));
        }
        return;
    }
    let arch = stack.arch.as_ref().map_or("custom", |a| a.name.as_str());
    println!("{} ({} levels, stored level {})", arch, stack.depth() + 1, stored);
    println!(
        "{:>5} {:>12} {:>10} {:>14} {:>10}",
        "level", "params", "buffers", "FLOPs", "MB"
    );
    for (i, c) in stack.costs.iter().enumerate() {
        println!(
            "{:>5} {:>12} {:>10} {:>14} {:>10.3}{}",
            i,
            c.params,
            c.buffers,
            c.flops,
            c.megabytes(),
            if i == stored { "  *" } else { "" }
        );
    }
    let widths = stack.group_widths();
    if !widths.is_empty() {
        println!("group widths by level:");
        for (key, w) in widths {
            let lead = key.first().map(|s| s.to_string()).unwrap_or_default();
            let ws: Vec<String> = w.iter().map(|x| x.to_string()).collect();
            println!("  {:<16} {}", lead, ws.join(" "));
        }
    }
}
