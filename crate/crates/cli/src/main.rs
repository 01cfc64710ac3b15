use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use spseg::config::ExperimentConfig;
use spseg::head::{HeadConfig, HeadVariant};
use spseg::hypercolumn::FeatureNetConfig;
use spseg::metrics::cost_report;
use spseg::pipeline;

/// Superpixel-sampled hypercolumn segmentation: training, evaluation,
/// control-chart diagnosis and cost reports.
#[derive(Parser)]
#[command(name = "spseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; evaluates on the held-out split when there is one.
    Train(RunArgs),
    /// Score a checkpoint and write label-map PNGs.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired all-low / all-high short runs; writes chart CSVs and the derived policy.
    DiagnoseSpc(RunArgs),
    /// Write every training image's superpixel map as PNG and CSV.
    ExportSuperpixels(RunArgs),
    /// Multiply-accumulate counts of dense versus sampled head inference.
    Cost(CostArgs),
    /// Write the synthetic-shapes dataset as PNG pairs with a list file.
    MakeSynthetic(RunArgs),
    /// Print the default configuration file.
    DefaultConfig,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides sampler.budget (pixels sampled per training image).
    #[arg(long)]
    budget: Option<usize>,
    /// Overrides sampler.superpixels (SLIC target count).
    #[arg(long)]
    superpixels: Option<usize>,
    /// Overrides head.variant.
    #[arg(long, value_parser = ["resblock", "fc"])]
    head: Option<String>,
    /// Overrides policy.kind.
    #[arg(long, value_parser = ["all-low", "all-high", "hybrid1", "hybrid2", "auto"])]
    policy: Option<String>,
    /// Output directory; the resolved config is echoed there.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 448)]
    height: usize,
    #[arg(long, default_value_t = 448)]
    width: usize,
    /// Use the full-size backbone and head widths instead of the configured ones.
    #[arg(long)]
    full_scale: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(b) = self.budget {
            cfg.sampler.budget = b;
        }
        if let Some(n) = self.superpixels {
            cfg.sampler.superpixels = n;
        }
        if let Some(h) = &self.head {
            cfg.head.variant = h.parse()?;
        }
        if let Some(p) = &self.policy {
            cfg.policy.kind = p.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_required(&self, command: &str) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("`{command}` needs --out DIR"),
        }
    }
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = pipeline::train_run_with(&cfg, args.out.as_deref(), &mut |r| {
                eprintln!("epoch {:>3}  loss {:.5}", r.epoch, r.mean_loss);
            })?;
            #[derive(Serialize)]
            struct Summary<'a> {
                final_loss: f64,
                policy: &'a spseg::spc::LearningRatePolicy,
                eval: &'a Option<spseg::metrics::EvalReport>,
            }
            print_json(&Summary {
                final_loss: outcome.final_loss(),
                policy: &outcome.policy,
                eval: &outcome.eval,
            })
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let report = pipeline::eval_run(&cfg, &checkpoint, run.out.as_deref())?;
            print_json(&report)
        }
        Command::DiagnoseSpc(args) => {
            let cfg = args.resolve()?;
            let outcome = pipeline::diagnose_spc(&cfg, args.out.as_deref())?;
            print_json(&outcome)
        }
        Command::ExportSuperpixels(args) => {
            let cfg = args.resolve()?;
            let out = args.out_required("export-superpixels")?;
            let written = pipeline::export_superpixels(&cfg, out)?;
            println!("wrote {} superpixel maps to {}", written.len(), out.display());
            Ok(())
        }
        Command::MakeSynthetic(args) => {
            let cfg = args.resolve()?;
            let out = args.out_required("make-synthetic")?;
            let data = spseg::data::synthetic_shapes(&cfg.data.shapes)?;
            let list = data.write_png(out)?;
            println!("{}", list.display());
            Ok(())
        }
        Command::Cost(args) => cost(&args),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn cost(args: &CostArgs) -> Result<()> {
    let mut run = args.run.clone();
    let budget = run.budget.take().unwrap_or(750);
    let cfg = run.resolve()?;
    let (net, width_factor) = if args.full_scale {
        (FeatureNetConfig::full_scale(), 1.0)
    } else {
        (cfg.net.clone(), cfg.head.width_factor)
    };
    let in_dim = net
        .plan(args.height, args.width)
        .with_context(|| format!("backbone does not fit {}×{}", args.height, args.width))?
        .hypercolumn_len();
    let classes = cfg.data.class_count.unwrap_or(cfg.data.shapes.classes);
    let head = HeadConfig::new(cfg.head.variant, in_dim, classes, width_factor);
    let r = cost_report(args.height, args.width, budget, &head, cfg.sampler.slic_iters)?;
    if args.json {
        return print_json(&r);
    }
    let pct = |x: f64| format!("{:.3}%", 100.0 * x);
    let fraction = *r.sample_fraction.numer() as f64 / *r.sample_fraction.denom() as f64;
    let variant = match cfg.head.variant {
        HeadVariant::Fc => "fc",
        HeadVariant::Resblock => "resblock",
    };
    println!("image              {}×{}", r.height, r.width);
    println!("head               {variant}, input {in_dim}, {classes} classes");
    println!("budget             {}", r.budget);
    println!(
        "sampled fraction   {}/{} = {}/{} = {}",
        r.budget,
        r.height * r.width,
        r.sample_fraction.numer(),
        r.sample_fraction.denom(),
        pct(fraction)
    );
    println!("head MACs/pixel    {}", r.head_macs_per_pixel);
    println!("dense head MACs    {}", r.dense_head_macs);
    println!("sampled head MACs  {}", r.sampled_head_macs);
    println!("SLIC MACs (est.)   {}", r.slic_macs);
    println!("sampled total MACs {}", r.sampled_total_macs);
    println!("cost ratio         {}", pct(r.cost_ratio));
    Ok(())
}

fn main() -> ExitCode {
    let defaults = ExperimentConfig::default()
        .to_toml()
        .unwrap_or_else(|e| format!("(could not render defaults: {e})\n"));
    let note = format!(
        "Config file sections and their defaults (print with `spseg default-config`):\n\n{defaults}\n\
         Policy kinds: all-low (1×), all-high (spc.high_multiplier), hybrid1 / hybrid2 \
         (spc.high_multiplier before the flagged layer nearest the loss, spc.hybrid1/2_multiplier from it on), \
         auto (runs diagnose-spc first)."
    );
    let mut cmd = Cli::command().after_long_help(note.clone());
    for name in ["train", "eval", "diagnose-spc", "export-superpixels", "cost", "make-synthetic"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(note.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
