use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stale_tr::env::read_jsonl;
use stale_tr::experiment::{train_to_dir, SweepRow, METRICS_FILE};
use stale_tr::svg::metrics_charts;
use stale_tr::telemetry::{
    analyze_rollouts, read_metrics_file, write_csv, write_divergence_csv, DEFAULT_BIN_EDGES,
};
use stale_tr::trust_region::{chi2_bound_check, pointwise_bound_slack, sample_log_uniform_ratios};
use stale_tr::{config_hash, Error, ObjectiveKind, PolicySnapshot, TrainConfig};

const SEED_VAR: &str = "STALE_TR_SEED";
const OUT_VAR: &str = "STALE_TR_OUT";

/// Off-policy staleness experiments on toy softmax policies.
#[derive(Parser)]
#[command(name = "stale-tr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Divergence reports and entropy binning over a rollout log.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo check of chi2 <= R^2 * M2 on log-uniform ratios.
    VerifyBound(VerifyArgs),
    /// Train a grid over staleness, objectives and thresholds.
    Sweep(SweepArgs),
    /// Render SVG charts from metrics CSV files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file; defaults are used for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set lr=0.05 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed (also via STALE_TR_SEED)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (also via STALE_TR_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Rollout log in JSONL form
    rollouts: PathBuf,
    /// Policy checkpoint for logs without current log-probs
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Lower bin edges over |r - 1|, starting at 0
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
    /// Also write the per-update divergences as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long = "R", default_value_t = 2.0)]
    r_bound: f64,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,32,64,128,256")]
    staleness: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "m2po")]
    objective: Vec<ObjectiveKind>,
    /// Masking thresholds for m2po runs
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV files; the parent directory name labels each series
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    for o in &args.overrides {
        if !o.contains('=') {
            bail!(Error::Config(format!("--set {o}: expected KEY=VALUE")));
        }
        text.push('\n');
        text.push_str(o);
    }
    let mut cfg = TrainConfig::parse(&text)?;
    let env_seed = match std::env::var(SEED_VAR) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_VAR}: not an integer: {v}")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = args.seed.or(env_seed) {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(flag: Option<&Path>, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_VAR).map(PathBuf::from))
        .unwrap_or_else(fallback)
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let dir = out_dir(args.out.as_deref(), || {
        PathBuf::from("runs").join(&config_hash(&cfg)[..12])
    });
    let (outcome, manifest) = train_to_dir(&cfg, &dir)?;
    let last = outcome.evals.last();
    println!("run:       {}", dir.display());
    println!("config:    {}", manifest.config_hash);
    println!("status:    {}", manifest.status.label());
    println!("updates:   {}", manifest.updates);
    if let Some(e) = last {
        println!(
            "eval:      reward {:.4} accuracy {:.4}",
            e.mean_reward, e.accuracy
        );
    }
    if let stale_tr::RunStatus::Collapsed { update, reason } = &manifest.status {
        println!("collapsed at update {update}: {reason}");
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let records = read_jsonl(BufReader::new(
        File::open(&args.rollouts)
            .with_context(|| format!("opening {}", args.rollouts.display()))?,
    ))?;
    let ckpt = match &args.checkpoint {
        Some(p) => Some(PolicySnapshot::read_checkpoint(BufReader::new(
            File::open(p)?,
        ))?),
        None => None,
    };
    let edges = args
        .edges
        .clone()
        .unwrap_or_else(|| DEFAULT_BIN_EDGES.to_vec());
    let a = analyze_rollouts(&records, ckpt.as_ref(), args.temperature, &edges)?;

    println!(
        "{:>8} {:>8} {:>12} {:>12} {:>12} {:>12}",
        "update", "tokens", "kl_hat", "m2_hat", "abs_kl_hat", "chi2_hat"
    );
    for u in &a.per_update {
        let label = u.update.map_or("-".to_string(), |v| v.to_string());
        let r = &u.report;
        println!(
            "{label:>8} {:>8} {:>12.6e} {:>12.6e} {:>12.6e} {:>12.6e}",
            r.token_count, r.kl_hat, r.m2_hat, r.abs_kl_hat, r.chi2_hat
        );
    }
    println!();
    println!(
        "{:>16} {:>10} {:>14}",
        "|r-1| bin", "tokens", "mean entropy"
    );
    for (i, lo) in a.bins.edges.iter().enumerate() {
        let range = match a.bins.edges.get(i + 1) {
            Some(hi) => format!("[{lo}, {hi})"),
            None => format!("[{lo}, inf)"),
        };
        let ent = a.bins.mean_entropy[i].map_or("-".to_string(), |e| format!("{e:.4}"));
        println!("{range:>16} {:>10} {ent:>14}", a.bins.counts[i]);
    }
    if let Some(path) = &args.csv {
        write_divergence_csv(File::create(path)?, &a.per_update)?;
    }
    Ok(())
}

fn verify_bound(args: &VerifyArgs) -> anyhow::Result<()> {
    if args.samples == 0 {
        bail!(Error::Config("samples: must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ratios = sample_log_uniform_ratios(args.r_bound, args.samples, &mut rng);
    let check = chi2_bound_check(&ratios, args.r_bound)?;
    println!("R = {}, samples = {}", args.r_bound, args.samples);
    println!("chi2      = {:.9e}", check.chi2);
    println!("R^2 * M2  = {:.9e}", args.r_bound * args.r_bound * check.m2);
    println!("slack     = {:.9e}", check.slack);
    println!("bound holds: {}", check.holds);
    println!(
        "pointwise holds: {} (min slack {:.3e})",
        check.pointwise_holds, check.min_pointwise_slack
    );

    // decades of the pointwise slack z^2 e^{2|z|} - (e^z - 1)^2
    let decades: Vec<i32> = (-12..=2).collect();
    let mut counts = vec![0u64; decades.len() + 2];
    for &r in &ratios {
        let s = pointwise_bound_slack(r.ln());
        let slot = if s < 0.0 {
            0
        } else {
            1 + decades.partition_point(|&d| 10f64.powi(d) <= s)
        };
        counts[slot] += 1;
    }
    println!();
    println!("{:>20} {:>10}", "pointwise slack", "samples");
    println!("{:>20} {:>10}", "< 0", counts[0]);
    for (i, c) in counts.iter().enumerate().skip(1) {
        let lo = if i == 1 {
            "0".to_string()
        } else {
            format!("1e{}", decades[i - 2])
        };
        let hi = decades
            .get(i - 1)
            .map_or("inf".to_string(), |d| format!("1e{d}"));
        println!("{:>20} {:>10}", format!("[{lo}, {hi})"), c);
    }
    if !(check.holds && check.pointwise_holds) {
        bail!("bound violated");
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let base = load_config(&args.config)?;
    let out = out_dir(args.out.as_deref(), || PathBuf::from("sweep"));
    let taus = args.tau.clone().unwrap_or_else(|| vec![base.tau_m2]);
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let mut rows = Vec::new();
    for &objective in &args.objective {
        let run_taus: &[f64] = if objective == ObjectiveKind::M2po {
            &taus
        } else {
            &taus[..1]
        };
        for &k in &args.staleness {
            for &tau in run_taus {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.objective = objective;
                    cfg.k = k;
                    cfg.seed = seed;
                    let name = if objective == ObjectiveKind::M2po {
                        cfg.tau_m2 = tau;
                        format!("{objective}_k{k}_tau{tau}_s{seed}")
                    } else {
                        format!("{objective}_k{k}_s{seed}")
                    };
                    cfg.validate()?;
                    let (outcome, _) = train_to_dir(&cfg, &out.join(&name))?;
                    let row = SweepRow::new(&cfg, &outcome)?;
                    println!(
                        "{name:<32} {:<9} final reward {:.4} clip {:.4} masked {:.4}",
                        row.status,
                        row.final_eval_reward,
                        row.avg_clipping_ratio,
                        row.avg_masked_ratio
                    );
                    rows.push(row);
                }
            }
        }
    }
    let path = out.join("sweep.csv");
    write_csv(File::create(&path)?, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn plot(args: &PlotArgs) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for p in &args.metrics {
        let label = p
            .parent()
            .and_then(Path::file_name)
            .filter(|_| p.file_name().is_some_and(|f| f == METRICS_FILE))
            .or_else(|| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        let metrics = read_metrics_file(p).with_context(|| format!("reading {}", p.display()))?;
        runs.push((label, metrics));
    }
    fs::create_dir_all(&args.out)?;
    for (stem, svg) in metrics_charts(&runs) {
        let path = args.out.join(format!("{stem}.svg"));
        fs::write(&path, svg)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::VerifyBound(a) => verify_bound(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
