//! Command-line front end. Every subcommand reads the optional JSON config,
//! writes its artefacts under the output directory and maps failures to the
//! exit codes below.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::AttentionKernel;
use crate::bench::{scaling_bench, write_bench_csv, Method};
use crate::config::Config;
use crate::data::{gen_dataset, gen_rds, load_sample, save_sample, StereoSample};
use crate::error::{Error, Result};
use crate::metrics::{d1_rate, epe, rank_experiment, RankReport};
use crate::model::StereoModel;
use crate::suite::{equivalence_suite, gradient_suite};
use crate::train::{train_toy, TrainReport};

pub const EXIT_OK: i32 = 0;
/// Bad usage, invalid config or input files.
pub const EXIT_INVALID: i32 = 1;
/// A numerical check ran and failed.
pub const EXIT_CHECK_FAILED: i32 = 2;

/// Environment variable that takes precedence over `--out-dir`.
pub const OUT_DIR_ENV: &str = "HAL_OUT_DIR";

pub const EQUIV_TOLERANCE: f64 = 1e-12;
pub const HPSA_SLOPE: (f64, f64) = (0.9, 1.1);
pub const VANILLA_SLOPE: (f64, f64) = (1.9, 2.1);

#[derive(Debug, Parser)]
#[command(name = "hart", version, about = "Hadamard linear attention and a toy stereo matcher")]
struct Cli {
    /// JSON config; missing keys take their defaults, unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all outputs. Overridden by HAL_OUT_DIR.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write random-dot stereo samples as PFM directories.
    GenData(GenDataArgs),
    /// Train the stereo model on generated random-dot pairs.
    TrainToy(TrainArgs),
    /// Evaluate a saved model on the validation split or a sample directory.
    Eval(EvalArgs),
    /// Operation counts and timings of Hadamard vs softmax attention.
    Bench(BenchArgs),
    /// Finite-difference gradient checks of every differentiable stage.
    Gradcheck(GradcheckArgs),
    /// Rank ratio of kernelised attention maps, DAK against softmax.
    Rank(RankArgs),
    /// DAK product against its ELU residual form, elementwise and through MKOI.
    Equiv(EquivArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KernelArg {
    Dak,
    Softmax,
}

impl From<KernelArg> for AttentionKernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Dak => AttentionKernel::Dak,
            KernelArg::Softmax => AttentionKernel::Softmax,
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// Number of samples; defaults to the split size in the config.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "data")]
    name: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    #[arg(long, default_value = "train_report.json")]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of sample directories written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    px_thresh: f64,
    /// Relative threshold; 0 gives a pure pixel threshold.
    #[arg(long, default_value_t = 0.05)]
    rel_thresh: f64,
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = crate::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "gradcheck.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "rank.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "equiv.json")]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs one command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => EXIT_CHECK_FAILED,
                _ => EXIT_INVALID,
            }
        }
    }
}

struct Ctx {
    config: Config,
    out_dir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn write_json<T: Serialize>(&self, name: &Path, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `Ok(false)` means a numerical check failed.
fn execute(cli: Cli) -> Result<bool> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let out_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or(cli.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ctx = Ctx { config, out_dir };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::TrainToy(a) => train(ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Rank(a) => rank(&ctx, a),
        Command::Equiv(a) => equiv(&ctx, a),
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<bool> {
    let c = &ctx.config;
    let (n, base) = match a.split {
        Split::Train => (a.n.unwrap_or(c.toy.n_train), c.seed),
        Split::Val => (a.n.unwrap_or(c.toy.n_val), c.seed + c.toy.val_seed_offset),
    };
    let root = ctx.path(&a.name);
    for i in 0..n {
        let s = gen_rds(c.crop_h, c.crop_w, c.synthetic_max_disp(), base + i as u64)?;
        save_sample(&s, &root.join(format!("{i:05}")))?;
    }
    println!("wrote {n} samples to {}", root.display());
    Ok(true)
}

fn train(mut ctx: Ctx, a: TrainArgs) -> Result<bool> {
    if let Some(k) = a.kernel {
        ctx.config.encoder.kernel = k.into();
    }
    if let Some(s) = a.seed {
        ctx.config.seed = s;
    }
    if let Some(s) = a.steps {
        ctx.config.train_steps = s;
    }
    let start = std::time::Instant::now();
    let (model, report) = train_toy(&ctx.config, a.log_every, |step, loss| println!("step {step:>6}  loss {loss:.5}"))?;
    model.save(&ctx.path(&a.model))?;
    let path = ctx.write_json(&a.report, &report)?;
    print_train(&report);
    println!("wall {:.1}s, report {}", start.elapsed().as_secs_f64(), path.display());
    Ok(true)
}

fn print_train(r: &TrainReport) {
    println!(
        "kernel {} seed {} steps {}: val EPE {:.4} px, D1 {:.2}% on {} samples",
        r.kernel, r.seed, r.steps, r.val.epe, r.val.d1, r.val.samples
    );
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    samples: usize,
    iters: usize,
    px_thresh: f64,
    rel_thresh: f64,
    epe: f64,
    d1: f64,
}

fn load_dir(dir: &Path) -> Result<Vec<StereoSample>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sample(d)).collect()
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<bool> {
    if !(a.px_thresh >= 0.0 && a.rel_thresh >= 0.0) {
        return Err(Error::Config("thresholds must be non-negative".into()));
    }
    let model = StereoModel::load(&a.model)?;
    let samples = match &a.data {
        Some(d) => load_dir(d)?,
        None => {
            let c = &ctx.config;
            gen_dataset(c.toy.n_val, c.crop_h, c.crop_w, c.synthetic_max_disp(), c.seed + c.toy.val_seed_offset)?
        }
    };
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let iters = a.iters.unwrap_or(ctx.config.eval_iters);
    let (mut e, mut d) = (0.0, 0.0);
    for s in &samples {
        let pred = model.predict(&s.left, &s.right, iters)?;
        e += epe(&pred, &s.gt_disp)?;
        d += d1_rate(&pred, &s.gt_disp, a.px_thresh, a.rel_thresh)?;
    }
    let n = samples.len() as f64;
    let out = EvalOutput {
        samples: samples.len(),
        iters,
        px_thresh: a.px_thresh,
        rel_thresh: a.rel_thresh,
        epe: e / n,
        d1: d / n,
    };
    ctx.write_json(&a.out, &out)?;
    println!("EPE {:.4} px, D1 {:.2}% over {} samples", out.epe, out.d1, out.samples);
    Ok(true)
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

fn bench(ctx: &Ctx, a: BenchArgs) -> Result<bool> {
    let seed = ctx.config.seed;
    let h = scaling_bench(Method::Hpsa, &a.sizes, a.channels, a.reps, seed)?;
    let v = scaling_bench(Method::VanillaSa, &a.sizes, a.channels, a.reps, seed)?;
    let records: Vec<_> = h.records.iter().chain(&v.records).cloned().collect();
    let path = ctx.path(&a.out);
    write_bench_csv(&records, &path)?;
    println!("{:<12} {:>8} {:>14} {:>14}", "method", "n", "flops", "wall_ns");
    for r in &records {
        println!("{:<12} {:>8} {:>14} {:>14}", r.method.to_string(), r.n, r.flops, r.wall_ns);
    }
    println!("flop slope: hpsa {:.4}, vanilla_sa {:.4}", h.flop_slope, v.flop_slope);
    println!("wall slope: hpsa {:.4}, vanilla_sa {:.4}", h.wall_slope, v.wall_slope);
    Ok(within(h.flop_slope, HPSA_SLOPE) && within(v.flop_slope, VANILLA_SLOPE))
}

fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<bool> {
    if !(a.tolerance > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let reports = gradient_suite(a.tolerance, a.seed.unwrap_or(ctx.config.seed))?;
    println!("{:<36} {:>12} {:>10} {:>8}  result", "op", "max rel err", "tolerance", "checked");
    for r in &reports {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        println!("{:<36} {:>12.3e} {:>10.1e} {:>8}  {verdict}", r.op_name, r.max_rel_error, r.tolerance, r.checked);
    }
    ctx.write_json(&a.out, &reports)?;
    Ok(reports.iter().all(|r| r.passed))
}

#[derive(Debug, Serialize)]
struct RankOutput {
    dak: RankReport,
    softmax: RankReport,
}

fn rank(ctx: &Ctx, a: RankArgs) -> Result<bool> {
    let seed = a.seed.unwrap_or(ctx.config.seed);
    let out = RankOutput {
        dak: rank_experiment(AttentionKernel::Dak, a.trials, a.channels, a.tokens, seed)?,
        softmax: rank_experiment(AttentionKernel::Softmax, a.trials, a.channels, a.tokens, seed)?,
    };
    for r in [&out.dak, &out.softmax] {
        println!(
            "{:<8} mean rank ratio {:.4}, min {:.4}, full rank in {}/{} trials",
            format!("{:?}", r.kernel).to_lowercase(),
            r.mean_rank_ratio,
            r.min_rank_ratio,
            r.full_rank_trials,
            r.trials
        );
    }
    ctx.write_json(&a.out, &out)?;
    Ok(out.dak.mean_rank_ratio >= out.softmax.mean_rank_ratio)
}

fn equiv(ctx: &Ctx, a: EquivArgs) -> Result<bool> {
    let r = equivalence_suite(a.trials, a.seed.unwrap_or(ctx.config.seed))?;
    println!(
        "{} trials: elementwise max dev {:.3e}, through MKOI {:.3e} (tolerance {EQUIV_TOLERANCE:e})",
        r.trials, r.pointwise_max_dev, r.mkoi_max_dev
    );
    ctx.write_json(&a.out, &r)?;
    Ok(r.passed(EQUIV_TOLERANCE))
}
