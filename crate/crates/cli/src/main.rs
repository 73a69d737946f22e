use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use permres::train::{
    dump_feature_maps, evaluate_checkpoint, prepare_mini_cifar10, read_checkpoint, run_ablation, train, TrainConfig,
};
use permres::{Error, Result};

#[derive(Parser)]
#[command(name = "permres", version, about = "Train and analyse patch-permutation ResNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build mini-CIFAR-10 (a per-class training subset plus the test batch)
    /// from the raw CIFAR-10 binaries.
    PrepareData {
        /// Directory holding data_batch_{1..5}.bin and test_batch.bin.
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train(RunArgs),
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Train every ablation cell and write ablation_summary.csv.
    Ablate(RunArgs),
    /// Dump one stage's feature maps for an image as PGMs plus report.json.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM (P6) image.
        #[arg(long)]
        image: PathBuf,
        /// Residual stage, 1..=4.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus per-field overrides; flags win over the file.
#[derive(Args)]
struct RunArgs {
    /// TOML config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_drop_epochs: Option<Vec<usize>>,
    #[arg(long)]
    total_epochs: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// online_uniform or identity_only.
    #[arg(long)]
    augmentation: Option<String>,
    #[arg(long)]
    photometric: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    record_wall_clock: Option<bool>,
    #[arg(long)]
    save_checkpoints: Option<bool>,
    /// baseline or improved.
    #[arg(long)]
    variant: Option<String>,
    /// Also toggles the permutation head.
    #[arg(long)]
    permutation_loss: Option<bool>,
    #[arg(long)]
    feature_loss: Option<bool>,
    /// Any other field as a dotted key, e.g. `--set loss.feature_weight=0.25`
    /// or `--set dataset.kind="synthetic"`. Values are TOML; bare words are
    /// taken as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut table = root;
    for part in parts {
        table = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        let text = base.to_toml_string()?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;

        let mut overrides: Vec<(&str, toml::Value)> = Vec::new();
        let mut put = |key: &'static str, v: Option<toml::Value>| {
            if let Some(v) = v {
                overrides.push((key, v));
            }
        };
        let int = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
        put("batch_size", int(self.batch_size));
        put("lr_initial", self.lr_initial.map(toml::Value::Float));
        put(
            "lr_drop_epochs",
            self.lr_drop_epochs
                .as_ref()
                .map(|v| toml::Value::Array(v.iter().map(|&e| toml::Value::Integer(e as i64)).collect())),
        );
        put("total_epochs", int(self.total_epochs));
        put("momentum", self.momentum.map(toml::Value::Float));
        put("weight_decay", self.weight_decay.map(toml::Value::Float));
        put("master_seed", self.master_seed.map(|s| toml::Value::Integer(s as i64)));
        put("output_dir", self.output_dir.as_ref().map(|p| toml::Value::String(p.display().to_string())));
        put("augmentation", self.augmentation.clone().map(toml::Value::String));
        put("photometric", self.photometric.map(toml::Value::Boolean));
        put("eval_every", int(self.eval_every));
        put("record_wall_clock", self.record_wall_clock.map(toml::Value::Boolean));
        put("save_checkpoints", self.save_checkpoints.map(toml::Value::Boolean));
        put("model.variant", self.variant.clone().map(toml::Value::String));
        put("model.permutation_head", self.permutation_loss.map(toml::Value::Boolean));
        put("loss.use_permutation_loss", self.permutation_loss.map(toml::Value::Boolean));
        put("loss.use_feature_loss", self.feature_loss.map(toml::Value::Boolean));
        for (key, value) in overrides {
            set_path(&mut table, key, value)?;
        }
        for s in &self.sets {
            let (key, value) =
                s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            let key = key.trim();
            if key == "dataset.kind" {
                // A new dataset kind starts from an empty table; the old
                // kind's fields would not parse.
                table.insert("dataset".into(), toml::Value::Table(toml::Table::new()));
            }
            set_path(&mut table, key, parse_value(value.trim()))?;
        }

        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        TrainConfig::from_toml_str(&text)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData { raw, out, per_class, seed } => {
            let (train, test) = prepare_mini_cifar10(&raw, &out, per_class, seed)?;
            println!("wrote {train} training and {test} test images to {}", out.display());
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            if args.print_config {
                print!("{}", config.to_toml_string()?);
                return Ok(());
            }
            let outcome = train(&config)?;
            let r = &outcome.report;
            let acc = |a: Option<f64>| a.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "trained {} epochs ({} steps, {} parameters): final test_acc {}, best {} at epoch {}",
                r.epochs,
                r.steps,
                r.param_count,
                acc(r.final_metrics.test_acc),
                acc(r.best_test_acc),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            );
            println!("metrics: {}", r.metrics_path.display());
            if let Some(p) = &r.checkpoint_path {
                println!("checkpoint: {}", p.display());
            }
        }
        Command::Eval { checkpoint, config, batch_size } => {
            let dataset = match config {
                Some(path) => TrainConfig::from_file(&path)?.dataset,
                None => {
                    read_checkpoint(&checkpoint)?
                        .0
                        .training
                        .ok_or_else(|| Error::Config("checkpoint carries no training config; pass --config".into()))?
                        .dataset
                }
            };
            let (_, test) = dataset.load()?;
            let acc = evaluate_checkpoint(&checkpoint, &test, batch_size)?;
            println!("test_acc {acc:.6} on {} images", test.len());
        }
        Command::Ablate(args) => {
            let config = args.resolve()?;
            if args.print_config {
                print!("{}", config.to_toml_string()?);
                return Ok(());
            }
            let rows = run_ablation(&config)?;
            for row in &rows {
                let acc = |a: Option<f64>| a.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<36} params {:>9} final {} best {} {}",
                    row.cell.name(),
                    row.param_count.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                    acc(row.final_test_acc),
                    acc(row.best_test_acc),
                    row.status
                );
            }
            println!("summary: {}", config.output_dir.join("ablation_summary.csv").display());
        }
        Command::Inspect { checkpoint, image, stage, out } => {
            let report = dump_feature_maps(&checkpoint, &image, stage, &out)?;
            println!(
                "stage {}: {} channels of {}x{}, channel-mean std {:.6}, active fraction {:.4}; written to {}",
                report.stage,
                report.channels,
                report.height,
                report.width,
                report.channel_mean_std,
                report.active_fraction,
                out.display()
            );
        }
    }
    Ok(())
}


fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; help and version are not errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
