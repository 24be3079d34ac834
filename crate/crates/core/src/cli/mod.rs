//! The `gape` executable: theory verification, data generation, training,
//! evaluation, analysis and reporting.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis;
use crate::model::checkpoint;
use crate::model::{Metadata, ModelConfig, Network};
use crate::niah::{generate_batch, needle_count, write_dataset, DatasetHeader, Regime};
use crate::posenc::EncodingKind;
use crate::theory::suites::{run_suite, Suite};
use crate::theory::reports_to_csv;
use crate::train::{eval_csv, evaluate_extrapolation, metrics_csv, metrics_header, metrics_row, train, TrainConfig};
use crate::{Error, Result};
use config::{Resolver, Source};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gape", version, about = "Gated positional encoding: bound checks, retrieval training and analysis")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Master seed (falls back to GAPE_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// key=value file; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for independent trials and samples.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the brute-force theorem suites.
    Verify {
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Synthetic retrieval data.
    Niah {
        #[command(subcommand)]
        action: NiahAction,
    },
    /// Train a model on the retrieval task.
    Train(TrainArgs),
    /// Accuracy of a checkpoint at multiples of its training length.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated length multipliers.
        #[arg(long)]
        multipliers: Option<String>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
        /// Also record mean attention entropy per layer.
        #[arg(long)]
        entropy: bool,
    },
    /// Attention and gate instrumentation of a checkpoint.
    Analyze {
        what: AnalysisKind,
        #[arg(long)]
        ckpt: PathBuf,
        /// Second checkpoint for entropy deltas (ΔH = ckpt - baseline).
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
    },
    /// Collect evaluation CSVs of the output directory into one table.
    Report,
}

#[derive(Subcommand, Debug)]
pub enum NiahAction {
    /// Write a dataset file.
    Gen {
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    Entropy,
    Gates,
    Channels,
    Landmarks,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// nope | rope | prope | alibi
    #[arg(long)]
    pub pe: Option<String>,
    /// on | off
    #[arg(long)]
    pub gape: Option<String>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub l_train: Option<usize>,
    #[arg(long)]
    pub n_layer: Option<usize>,
    #[arg(long)]
    pub n_head: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Output file stem (default `<pe>[+gape]_<regime>`).
    #[arg(long)]
    pub name: Option<String>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

struct Ctx {
    out_dir: PathBuf,
    seed: u64,
    verbose: bool,
    resolver: Resolver,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn finish(&self, command: &str) -> Result<()> {
        let unused = self.resolver.unused_file_keys();
        if !unused.is_empty() && self.verbose {
            eprintln!("config keys not used by `{command}`: {}", unused.join(", "));
        }
        fs::write(self.out_dir.join(format!("resolved_{command}.txt")), self.resolver.render())?;
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut log = fs::read_to_string(self.out_dir.join("run.log")).unwrap_or_default();
        let _ = writeln!(log, "{stamp} {command} seed={}", self.seed);
        fs::write(self.out_dir.join("run.log"), log)?;
        Ok(())
    }
}

fn parse_gape_flag(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("--gape expects on|off, got `{s}`"))),
    }
}

pub fn parse_multipliers(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .ok()
                .filter(|&m| m > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("bad multiplier `{x}`")))
        })
        .collect()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut resolver = Resolver::from_path(cli.config.as_deref())?;
    if let Some(p) = &cli.config {
        resolver.record("config", p.display(), Source::Flag);
    }
    let env_seed = match std::env::var("GAPE_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::Config(format!("GAPE_SEED=`{v}` is not a u64")))?),
        Err(_) => None,
    };
    let seed = resolver.resolve("seed", cli.seed, env_seed, 0u64)?;
    let out_dir = resolver.get("out-dir", cli.out_dir.map(|p| p.display().to_string()), "out".to_string())?;
    let threads = resolver.get("threads", cli.threads, 1usize)?;
    // a global pool can only be installed once per process; later calls keep the first
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    let out_dir = PathBuf::from(out_dir);
    fs::create_dir_all(&out_dir)?;
    let mut ctx = Ctx { out_dir, seed, verbose: cli.verbose, resolver };

    let (name, code) = match cli.command {
        Command::Verify { suite, trials } => ("verify", cmd_verify(&mut ctx, suite, trials)?),
        Command::Niah { action: NiahAction::Gen { len, regime, count, out } } => {
            ("niah-gen", cmd_niah_gen(&mut ctx, len, regime, count, out)?)
        }
        Command::Train(args) => ("train", cmd_train(&mut ctx, args)?),
        Command::Eval { ckpt, multipliers, n_eval, regime, entropy } => {
            ("eval", cmd_eval(&mut ctx, &ckpt, multipliers, n_eval, regime, entropy)?)
        }
        Command::Analyze { what, ckpt, baseline_ckpt, samples, len, regime } => {
            ("analyze", cmd_analyze(&mut ctx, what, &ckpt, baseline_ckpt.as_deref(), samples, len, regime)?)
        }
        Command::Report => ("report", cmd_report(&mut ctx)?),
    };
    ctx.finish(name)?;
    Ok(code)
}

fn cmd_verify(ctx: &mut Ctx, suite: Option<String>, trials: Option<usize>) -> Result<i32> {
    let suite: Suite = ctx.resolver.get("suite", suite, "all".to_string())?.parse()?;
    let trials = ctx.resolver.get("trials", trials, 500usize)?;
    let reports = run_suite(suite, trials, ctx.seed)?;
    ctx.write("verify.csv", &reports_to_csv(&reports))?;
    let mut failed = false;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed |= !r.passed();
        println!("{status:4} {:40} trials={:6} violations={}", r.name, r.trials, r.violations);
    }
    Ok(if failed { EXIT_FAILED } else { EXIT_OK })
}

fn cmd_niah_gen(
    ctx: &mut Ctx,
    len: Option<usize>,
    regime: Option<String>,
    count: Option<usize>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let len = ctx.resolver.get("len", len, 256usize)?;
    let regime: Regime = ctx.resolver.get("regime", regime, "first".to_string())?.parse()?;
    let count = ctx.resolver.get("count", count, 10usize)?;
    let samples = generate_batch(len, regime, ctx.seed, 0, count)?;
    let header = DatasetHeader { len, n: needle_count(len), regime, seed: ctx.seed, count };
    let mut buf = Vec::new();
    write_dataset(&mut buf, &header, &samples)?;
    let text = String::from_utf8(buf).expect("ascii dataset");
    match out {
        Some(path) => {
            ctx.resolver.record("out", path.display(), Source::Flag);
            fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
        None => {
            ctx.write(&format!("niah_{regime}_L{len}.txt"), &text)?;
        }
    }
    Ok(EXIT_OK)
}

/// Resolves model and optimisation settings with flag > config > default.
pub fn resolve_train(resolver: &mut Resolver, args: TrainArgs, seed: u64) -> Result<(ModelConfig, TrainConfig, String)> {
    let d = TrainConfig::default();
    let pe: EncodingKind = resolver.get("pe", args.pe, "nope".to_string())?.parse()?;
    let gape = parse_gape_flag(&resolver.get("gape", args.gape, "on".to_string())?)?;
    let regime: Regime = resolver.get("regime", args.regime, "first".to_string())?.parse()?;
    let l_train = resolver.get("l-train", args.l_train, d.l_train)?;
    let n_layer = resolver.get("n-layer", args.n_layer, 2usize)?;
    let n_head = resolver.get("n-head", args.n_head, 2usize)?;
    let d_model = resolver.get("d-model", args.d_model, 64usize)?;
    let model = ModelConfig::new(n_layer, n_head, d_model, pe, gape, l_train);
    model.validate()?;
    let cfg = TrainConfig {
        steps_max: resolver.get("steps", args.steps, d.steps_max)?,
        batch: resolver.get("batch", args.batch, d.batch)?,
        lr: resolver.get("lr", args.lr, d.lr)?,
        lr_min: resolver.get("lr-min", args.lr_min, d.lr_min)?,
        weight_decay: resolver.get("weight-decay", args.weight_decay, d.weight_decay)?,
        beta1: resolver.get("beta1", args.beta1, d.beta1)?,
        beta2: resolver.get("beta2", args.beta2, d.beta2)?,
        eps: d.eps,
        grad_clip: resolver.get("grad-clip", args.grad_clip, d.grad_clip)?,
        warmup: resolver.get("warmup", args.warmup, d.warmup)?,
        val_every: resolver.get("val-every", args.val_every, d.val_every)?,
        val_size: resolver.get("val-size", args.val_size, d.val_size)?,
        early_stop_patience: resolver.get("patience", args.patience, d.early_stop_patience)?,
        seed,
        l_train,
        regime,
    };
    resolver.record("adamw-eps", cfg.eps, Source::Default);
    cfg.validate()?;
    let name = resolver.get("name", args.name, format!("{}_{}", model.label(), regime))?;
    Ok((model, cfg, name))
}

fn cmd_train(ctx: &mut Ctx, args: TrainArgs) -> Result<i32> {
    let (model, cfg, name) = resolve_train(&mut ctx.resolver, args, ctx.seed)?;
    let verbose = ctx.verbose;
    if verbose {
        eprint!("{}", metrics_header(model.n_layer, &cfg));
    }
    let outcome = train(&model, &cfg, |row| {
        if verbose {
            eprint!("{}", metrics_row(row, model.n_layer));
        }
    })?;
    ctx.write(&format!("{name}_metrics.csv"), &metrics_csv(&outcome.metrics, model.n_layer, &cfg))?;
    let mut meta = Metadata::new();
    meta.insert("regime".into(), cfg.regime.to_string());
    meta.insert("l_train".into(), cfg.l_train.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("precision".into(), "f32".into());
    meta.insert("steps_run".into(), outcome.steps_run.to_string());
    meta.insert("stopped_early".into(), outcome.stopped_early.to_string());
    let path = ctx.out_dir.join(format!("{name}.ckpt"));
    checkpoint::save(&path, &model, &outcome.params, &meta)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn ckpt_defaults(meta: &Metadata, cfg: &ModelConfig) -> (String, usize) {
    let regime = meta.get("regime").cloned().unwrap_or_else(|| "first".into());
    let l_train = meta.get("l_train").and_then(|s| s.parse().ok()).unwrap_or(cfg.t_train);
    (regime, l_train)
}

fn cmd_eval(
    ctx: &mut Ctx,
    ckpt: &Path,
    multipliers: Option<String>,
    n_eval: Option<usize>,
    regime: Option<String>,
    entropy: bool,
) -> Result<i32> {
    ctx.resolver.record("ckpt", ckpt.display(), Source::Flag);
    let (cfg, params, meta) = checkpoint::load(ckpt)?;
    let (default_regime, l_train) = ckpt_defaults(&meta, &cfg);
    let multipliers = parse_multipliers(&ctx.resolver.get("multipliers", multipliers, "1,2,4".to_string())?)?;
    let n_eval = ctx.resolver.get("n-eval", n_eval, 500usize)?;
    let regime: Regime = ctx.resolver.get("regime", regime, default_regime)?.parse()?;
    ctx.resolver.record("entropy", entropy, if entropy { Source::Flag } else { Source::Default });
    let results = evaluate_extrapolation(&cfg, &params, l_train, regime, &multipliers, n_eval, ctx.seed, entropy)?;
    for r in &results {
        println!("L={:6} ({}x)  accuracy={:.4}  ({}/{})", r.length, r.multiplier, r.accuracy, r.correct, r.n_eval);
    }
    ctx.write(&format!("eval_{}.csv", file_stem(ckpt)), &eval_csv(&results))?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    ctx: &mut Ctx,
    what: AnalysisKind,
    ckpt: &Path,
    baseline: Option<&Path>,
    samples: Option<usize>,
    len: Option<usize>,
    regime: Option<String>,
) -> Result<i32> {
    ctx.resolver.record("ckpt", ckpt.display(), Source::Flag);
    let (cfg, params, meta) = checkpoint::load(ckpt)?;
    let (default_regime, l_train) = ckpt_defaults(&meta, &cfg);
    let n = ctx.resolver.get("samples", samples, 16usize)?;
    let len = ctx.resolver.get("len", len, l_train)?;
    let regime: Regime = ctx.resolver.get("regime", regime, default_regime)?.parse()?;
    let batch = generate_batch(len, regime, ctx.seed, 0, n)?;
    let net = Network::<f32>::new(&cfg, &params)?;
    let stem = file_stem(ckpt);
    match what {
        AnalysisKind::Entropy => {
            let profile = analysis::entropy_profile(&net, &batch)?;
            ctx.write(&format!("entropy_{stem}.csv"), &profile.to_csv())?;
            if let Some(b) = baseline {
                ctx.resolver.record("baseline-ckpt", b.display(), Source::Flag);
                let (bcfg, bparams, _) = checkpoint::load(b)?;
                let bnet = Network::<f32>::new(&bcfg, &bparams)?;
                let base = analysis::entropy_profile(&bnet, &batch)?;
                let delta = analysis::entropy_delta(&profile, &base)?;
                for l in 0..delta.delta.len() {
                    println!("layer {l}: mean ΔH = {:+.6}", delta.layer_mean(l));
                }
                ctx.write(&format!("delta_entropy_{stem}_vs_{}.csv", file_stem(b)), &delta.to_csv())?;
            }
        }
        AnalysisKind::Gates => {
            let stats = analysis::gate_stats(&net, &batch)?;
            ctx.write(&format!("gates_{stem}.csv"), &stats.to_csv())?;
            if let Some(r) = analysis::gate_entropy_correlation(&net, &batch)? {
                println!("pearson(g, H) over (sample, layer) means = {r:+.4}");
            }
        }
        AnalysisKind::Channels => {
            let rows = analysis::channel_norms(&net, &batch)?;
            ctx.write(&format!("channels_{stem}.csv"), &analysis::channels_csv(&rows))?;
        }
        AnalysisKind::Landmarks => {
            let rows = analysis::landmark_by_class(&net, &batch)?;
            ctx.write(&format!("landmarks_{stem}.csv"), &analysis::landmark_csv(&rows))?;
        }
    }
    Ok(EXIT_OK)
}

/// Concatenates every `eval_*.csv` of `dir` (sorted by name) into rows of
/// `model,length,multiplier,n_eval,accuracy`.
pub fn summarize_evals(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with("eval_") && name.ends_with(".csv")
        })
        .collect();
    files.sort();
    let mut out = String::from("model,length,multiplier,n_eval,accuracy\n");
    for f in files {
        let model = file_stem(&f).trim_start_matches("eval_").to_string();
        let text = fs::read_to_string(&f)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let (Some(cl), Some(cm), Some(cn), Some(ca)) = (col("length"), col("multiplier"), col("n_eval"), col("accuracy"))
        else {
            return Err(Error::Config(format!("{} is not an evaluation table", f.display())));
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let v: Vec<&str> = line.split(',').collect();
            let _ = writeln!(out, "{model},{},{},{},{}", v[cl], v[cm], v[cn], v[ca]);
        }
    }
    Ok(out)
}

fn cmd_report(ctx: &mut Ctx) -> Result<i32> {
    let summary = summarize_evals(&ctx.out_dir)?;
    print!("{summary}");
    ctx.write("summary.csv", &summary)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_usage_error() {
        assert_eq!(run(["gape"]), EXIT_USAGE);
        assert_eq!(run(["gape", "verify", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn multipliers_parse() {
        assert_eq!(parse_multipliers("1,2,4").unwrap(), vec![1, 2, 4]);
        assert!(parse_multipliers("1,0").is_err());
        assert!(parse_multipliers("x").is_err());
    }

    #[test]
    fn resolve_train_precedence() {
        let mut r = Resolver::new(config::parse_kv("lr=0.002\nsteps=10\nwarmup=5\npe=alibi\ngape=off\n").unwrap());
        let args = TrainArgs { steps: Some(20), ..Default::default() };
        let (model, cfg, name) = resolve_train(&mut r, args, 4).unwrap();
        assert_eq!(cfg.steps_max, 20);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(model.kind, EncodingKind::alibi(2));
        assert_eq!(name, "alibi_first");
        assert!(r.render().contains("steps=20  # flag"));
    }
}
