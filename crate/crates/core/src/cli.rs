//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Splits, TrainConfig};
use crate::csr::{build, cost_report, Density, DressCsr};
use crate::data::{read_idx_images, Dataset};
use crate::error::{DressError, Result};
use crate::infer::SparseExecPlan;
use crate::net::params::{BnParams, BnState, ParamStore};
use crate::net::spec::NetworkSpec;
use crate::sampling::MaskSet;
use crate::tensor::Tensor;
use crate::train::{
    bn_posttrain, dress_train, evaluate, iterative_decreased, iterative_increased, pretrain, RunMetadata, RunRecord,
};

pub const BACKBONE: &str = "backbone.ckpt";
pub const MASKS: &str = "masks.drsm";
pub const BN_TRAIN: &str = "bn_train.json";
pub const BN_POST: &str = "bn_variants.json";
pub const MODEL: &str = "model.drs";
pub const RUN_CSV: &str = "run.csv";
pub const METADATA: &str = "metadata.json";

#[derive(Parser, Debug)]
#[command(name = "dress", version, about = "Nested sparse subnets: training, export, sparse inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set epochs=5` or `--set data.spread=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Dense checkpoint to start from; pre-trains first when absent.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dense training of the backbone.
    Pretrain(RunArgs),
    /// Joint training of all subnets.
    TrainDress(TrainArgs),
    /// Iterative pruning with increasing sparsity.
    TrainIterInc(TrainArgs),
    /// Iterative training with decreasing sparsity.
    TrainIterDec(TrainArgs),
    /// Per-subnet BN fine-tuning of a trained run directory.
    BnPosttrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory holding the backbone and masks.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the nested CSR model file of a run directory.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/model.drs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparse inference of one subnet; writes logits as CSV.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        level: usize,
        /// CSV with one sample per row, or an IDX image file.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Test accuracy of every subnet (or one) from a model file or run directory.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        model: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        level: Option<usize>,
    },
    /// Memory and FLOPs report.
    Cost {
        /// Preset architecture, dense weights.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        arch: Option<String>,
        /// Model file; reports the subnet at `--level`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long)]
        json: bool,
    },
    /// Gradient cosine similarity of every subnet against subnet 1.
    DiagCosine(TrainArgs),
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let out = out_dir(&cli.command);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            if let (DressError::Numeric { layer, detail }, Some(dir)) = (&e, &out) {
                let dump = dir.join("nonfinite.json");
                let body = serde_json::json!({ "layer": layer, "detail": detail });
                if std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&dump, body.to_string())).is_ok() {
                    eprintln!("diagnostics written to {}", dump.display());
                }
            }
            match e {
                DressError::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn out_dir(cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::Pretrain(r) => Some(r.out.clone()),
        Command::TrainDress(a) | Command::TrainIterInc(a) | Command::TrainIterDec(a) | Command::DiagCosine(a) => {
            Some(a.run.out.clone())
        }
        Command::BnPosttrain { run, .. } => Some(run.clone()),
        _ => None,
    }
}

fn prepare(run: &RunArgs) -> Result<(TrainConfig, Splits, NetworkSpec)> {
    let cfg = TrainConfig::load(&run.config, &run.overrides)?;
    std::fs::create_dir_all(&run.out)?;
    let splits = cfg.load_data()?;
    let net = cfg.network(&splits.train)?;
    Ok((cfg, splits, net))
}

fn save_params(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    params.write_checkpoint(&mut w)
}

fn load_params(path: &Path, net: &NetworkSpec) -> Result<ParamStore<f32>> {
    ParamStore::read_checkpoint(&mut BufReader::new(File::open(path)?), net)
}

fn save_masks(masks: &MaskSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    masks.write_to(&mut w)
}

fn load_masks(path: &Path) -> Result<MaskSet> {
    MaskSet::read_from(&mut BufReader::new(File::open(path)?))
}

type BnJson = Vec<Vec<[Vec<f32>; 4]>>;

fn save_bn(states: &[BnState<f32>], path: &Path) -> Result<()> {
    let j: BnJson = states
        .iter()
        .map(|s| {
            s.iter()
                .map(|b| [b.gamma.clone(), b.beta.clone(), b.running_mean.clone(), b.running_var.clone()])
                .collect()
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&j)?)?;
    Ok(())
}

fn load_bn(path: &Path) -> Result<Vec<BnState<f32>>> {
    let j: BnJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(j.into_iter()
        .map(|s| {
            s.into_iter()
                .map(|[gamma, beta, running_mean, running_var]| BnParams {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                })
                .collect()
        })
        .collect())
}

/// Run-directory contents shared by the post-training commands.
struct RunDir {
    net: NetworkSpec,
    config: TrainConfig,
    params: ParamStore<f32>,
    masks: MaskSet,
}

fn open_run(dir: &Path) -> Result<RunDir> {
    let meta: RunMetadata = serde_json::from_str(&std::fs::read_to_string(dir.join(METADATA))?)?;
    let net: NetworkSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("network.json"))?)?;
    let params = load_params(&dir.join(BACKBONE), &net)?;
    let masks = load_masks(&dir.join(MASKS))?;
    for m in masks.levels() {
        m.check_shapes(&net)?;
    }
    Ok(RunDir {
        net,
        config: meta.config,
        params,
        masks,
    })
}

fn write_run(
    dir: &Path,
    command: &str,
    cfg: &TrainConfig,
    splits: &Splits,
    net: &NetworkSpec,
    record: &RunRecord,
) -> Result<RunMetadata> {
    record.write_csv(dir.join(RUN_CSV))?;
    std::fs::write(dir.join("network.json"), serde_json::to_string_pretty(net)?)?;
    let meta = RunMetadata::new(command, cfg, splits.train.content_hash(), record);
    meta.write(dir.join(METADATA))?;
    Ok(meta)
}

fn initial_params(args: &TrainArgs, cfg: &TrainConfig, splits: &Splits, net: &NetworkSpec) -> Result<ParamStore<f32>> {
    match &args.init {
        Some(path) => load_params(path, net),
        None => {
            let p = ParamStore::init(net, cfg.seed)?;
            let (p, _) = pretrain(net, p, &splits.train, &splits.val, cfg, cfg.pretrain_epochs)?;
            Ok(p)
        }
    }
}

fn print_levels(label: &str, accs: &[f64]) {
    for (k, a) in accs.iter().enumerate() {
        println!("{} level {} accuracy {:.4}", label, k + 1, a);
    }
}

fn test_accuracies(net: &NetworkSpec, params: &ParamStore<f32>, masks: &MaskSet, bn: &[BnState<f32>], test: &Dataset) -> Result<Vec<f64>> {
    masks
        .levels()
        .iter()
        .zip(bn)
        .map(|(m, b)| evaluate(net, &params.with_bn_state(b)?, Some(m), test))
        .collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(run) => {
            let (cfg, splits, net) = prepare(&run)?;
            let p = ParamStore::init(&net, cfg.seed)?;
            let (p, record) = pretrain(&net, p, &splits.train, &splits.val, &cfg, cfg.pretrain_epochs)?;
            save_params(&p, &run.out.join(BACKBONE))?;
            let mut meta = write_run(&run.out, "pretrain", &cfg, &splits, &net, &record)?;
            meta.test_accuracy = vec![evaluate(&net, &p, None, &splits.test)?];
            meta.write(run.out.join(METADATA))?;
            println!("dense accuracy {:.4}", meta.test_accuracy[0]);
        }
        Command::TrainDress(args) => {
            let (cfg, splits, net) = prepare(&args.run)?;
            let p = initial_params(&args, &cfg, &splits, &net)?;
            let out = dress_train(&net, p, &splits.train, &splits.val, &cfg)?;
            let dir = &args.run.out;
            save_params(&out.params, &dir.join(BACKBONE))?;
            save_masks(&out.masks, &dir.join(MASKS))?;
            std::fs::write(dir.join("ladder.json"), serde_json::to_string_pretty(&out.ladder)?)?;
            let bn = out.bn_states();
            save_bn(&bn, &dir.join(BN_TRAIN))?;
            let mut meta = write_run(dir, "train-dress", &cfg, &splits, &net, &out.record)?;
            meta.test_accuracy = test_accuracies(&net, &out.params, &out.masks, &bn, &splits.test)?;
            meta.write(dir.join(METADATA))?;
            print_levels("dress", &meta.test_accuracy);
        }
        Command::TrainIterInc(args) => iterative_command(&args, "train-iter-inc")?,
        Command::TrainIterDec(args) => iterative_command(&args, "train-iter-dec")?,
        Command::BnPosttrain { config, overrides, run } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let r = open_run(&run)?;
            let splits = cfg.load_data()?;
            let start = load_bn(&run.join(BN_TRAIN))?;
            let mut variants = Vec::with_capacity(r.masks.len());
            for (m, s) in r.masks.levels().iter().zip(&start) {
                let p = r.params.with_bn_state(s)?;
                variants.push(bn_posttrain(&r.net, &p, m, &splits.train, &cfg, cfg.bn_epochs)?);
            }
            save_bn(&variants, &run.join(BN_POST))?;
            let accs = test_accuracies(&r.net, &r.params, &r.masks, &variants, &splits.test)?;
            print_levels("bn-posttrain", &accs);
        }
        Command::Export { run, out } => {
            let r = open_run(&run)?;
            let bn_path = if run.join(BN_POST).exists() { run.join(BN_POST) } else { run.join(BN_TRAIN) };
            let bn = load_bn(&bn_path)?;
            let t = build(&r.net, &r.params, &r.masks, &r.config.levels, bn)?;
            let path = out.unwrap_or_else(|| run.join(MODEL));
            t.save(&path)?;
            println!("wrote {} ({} levels)", path.display(), t.k());
        }
        Command::Infer { model, level, input, output } => {
            let t = DressCsr::load(&model)?;
            let plan = SparseExecPlan::new(&t, level)?;
            let x = read_input(&input, &t.network.input_shape)?;
            let out = plan.infer(&x)?;
            let mut w: csv::Writer<Box<dyn std::io::Write>> = csv::Writer::from_writer(match output {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::stdout()),
            });
            for i in 0..out.logits.rows() {
                w.write_record(out.logits.row(i).iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
            eprintln!("multiply-accumulates: {}", out.macs);
        }
        Command::Eval { config, overrides, model, run, level } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let splits = cfg.load_data()?;
            let test = &splits.test;
            match (model, run) {
                (Some(model), _) => {
                    let t = DressCsr::load(&model)?;
                    for k in levels_to_eval(level, t.k())? {
                        let plan = SparseExecPlan::new(&t, k)?;
                        let acc = crate::data::eval_accuracy(test, t.network.classes, &t.network.input_shape, 500, |x| {
                            plan.infer(x).map(|o| o.logits)
                        })?;
                        println!("level {} accuracy {:.4}", k, acc);
                    }
                }
                (None, Some(run)) => {
                    let r = open_run(&run)?;
                    let bn_path = if run.join(BN_POST).exists() { run.join(BN_POST) } else { run.join(BN_TRAIN) };
                    let bn = load_bn(&bn_path)?;
                    for k in levels_to_eval(level, r.masks.len())? {
                        let p = r.params.with_bn_state(&bn[k - 1])?;
                        let acc = evaluate(&r.net, &p, Some(r.masks.level(k)?), test)?;
                        println!("level {} accuracy {:.4}", k, acc);
                    }
                }
                (None, None) => return Err(DressError::config("eval needs --model or --run")),
            }
        }
        Command::Cost { arch, model, level, json } => {
            let report = match (arch, model) {
                (Some(a), _) => cost_report(&NetworkSpec::preset(&a)?, Density::Dense)?,
                (None, Some(m)) => DressCsr::load(&m)?.cost(level)?,
                (None, None) => return Err(DressError::config("cost needs --arch or --model")),
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report);
            }
        }
        Command::DiagCosine(args) => {
            let (mut cfg, splits, net) = prepare(&args.run)?;
            cfg.gamma = 0.0;
            if cfg.cosine_every == 0 {
                cfg.cosine_every = 10;
            }
            let p = initial_params(&args, &cfg, &splits, &net)?;
            let out = dress_train(&net, p, &splits.train, &splits.val, &cfg)?;
            let trace = out.cosine.expect("cosine logging enabled");
            trace.write_csv(args.run.out.join("cosine.csv"))?;
            write_run(&args.run.out, "diag-cosine", &cfg, &splits, &net, &out.record)?;
            for (layer, level, m) in trace.medians() {
                match m {
                    Some(v) => println!("{} level {} median cosine {:.4}", layer, level, v),
                    None => println!("{} level {} median cosine undefined", layer, level),
                }
            }
        }
    }
    Ok(())
}

fn levels_to_eval(level: Option<usize>, k: usize) -> Result<Vec<usize>> {
    match level {
        Some(l) if l == 0 || l > k => Err(DressError::LevelOutOfRange { level: l, levels: k }),
        Some(l) => Ok(vec![l]),
        None => Ok((1..=k).collect()),
    }
}

fn iterative_command(args: &TrainArgs, command: &str) -> Result<()> {
    let (cfg, splits, net) = prepare(&args.run)?;
    let p = initial_params(args, &cfg, &splits, &net)?;
    let out = if command == "train-iter-inc" {
        iterative_increased(&net, p, &splits.train, &splits.val, &cfg)?
    } else {
        iterative_decreased(&net, p, &splits.train, &splits.val, &cfg)?
    };
    let dir = &args.run.out;
    save_params(&out.params, &dir.join(BACKBONE))?;
    save_masks(&out.masks, &dir.join(MASKS))?;
    let bn = vec![out.params.bn_state(); out.masks.len()];
    save_bn(&bn, &dir.join(BN_TRAIN))?;
    let mut meta = write_run(dir, command, &cfg, &splits, &net, &out.record)?;
    meta.test_accuracy = test_accuracies(&net, &out.params, &out.masks, &bn, &splits.test)?;
    meta.write(dir.join(METADATA))?;
    print_levels(command, &meta.test_accuracy);
    Ok(())
}

/// Reads inference input: an IDX image file, or CSV with one sample per row.
fn read_input(path: &Path, input_shape: &[usize]) -> Result<Tensor<f32>> {
    let d: usize = input_shape.iter().product();
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut File::open(path)?, &mut bytes)?;
    let values: Vec<f32> = if bytes.starts_with(&[0, 0, 8, 3]) {
        let (_, _, _, pixels) = read_idx_images(&mut bytes.as_slice())?;
        let (mean, std) = (crate::data::MNIST_MEAN, crate::data::MNIST_STD);
        pixels.iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect()
    } else {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
        let mut v = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d {
                return Err(DressError::shape(format!("input row of {} values, expected {}", rec.len(), d)));
            }
            for f in rec.iter() {
                v.push(f.trim().parse::<f32>().map_err(|e| DressError::format(format!("bad number '{}': {}", f, e)))?);
            }
        }
        v
    };
    if values.len() % d != 0 {
        return Err(DressError::shape("input size is not a multiple of the sample size"));
    }
    let mut shape = vec![values.len() / d];
    shape.extend_from_slice(input_shape);
    Tensor::from_vec(&shape, values)
}
