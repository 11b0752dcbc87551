//! Command-line front end: training, evaluation, ablation sweeps, the
//! text-noise benchmark, synthetic data export and plotting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use anprompt::ablation::{run_ablation, to_csv, to_markdown, Study};
use anprompt::config::RunConfig;
use anprompt::data::generate_synthetic;
use anprompt::metrics::{evaluate_base_novel, EvalReport};
use anprompt::plot::plot_files;
use anprompt::run::{
    load_model, record_noise_bench, run_seed, seed_dir, write_noise_csv, JsonlWriter, MetricsRecord, CHECKPOINT,
    METRICS,
};
use anprompt::train::RunContext;

#[derive(Parser, Debug)]
#[command(name = "anprompt", version, about = "Noise-robust prompt tuning on a miniature dual encoder")]
struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run only this seed instead of the configured list.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed and write one run directory per seed.
    Train,
    /// Re-evaluate saved checkpoints on the base and novel classes.
    Eval,
    /// Run one ablation study over the configured seeds.
    Ablate {
        #[arg(long, value_parser = parse_study)]
        study: Study,
    },
    /// Text shift, logit preservation and accuracy shift per perturbation.
    NoiseBench {
        /// Use the untrained prompts instead of saved checkpoints.
        #[arg(long)]
        frozen: bool,
    },
    /// Write the synthetic dataset as images plus caption files.
    SynthData,
    /// Render loss curves and bar charts from JSON-lines records.
    Plot {
        #[arg(required = true, num_args = 1.., value_name = "FILE")]
        files: Vec<PathBuf>,
    },
}

fn parse_study(s: &str) -> std::result::Result<Study, String> {
    s.parse().map_err(|e: anprompt::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
    }
    Ok(config)
}

fn print_eval(r: &EvalReport) {
    println!(
        "seed {:>3}  base {:6.2}  novel {:6.2}  hm {:6.2}",
        r.seed, r.base_acc, r.novel_acc, r.hm
    );
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(ctx: &RunContext, out: &Path) -> Result<()> {
    for &seed in &ctx.config.seeds {
        log::info!("training seed {seed}");
        let run = run_seed(ctx, seed, out)?;
        print_eval(&run.eval);
    }
    Ok(())
}

fn eval(ctx: &RunContext, out: &Path) -> Result<()> {
    for &seed in &ctx.config.seeds {
        let dir = seed_dir(out, seed);
        if !dir.join(CHECKPOINT).is_file() {
            bail!("no checkpoint at {}; run `train` first", dir.join(CHECKPOINT).display());
        }
        let model = load_model(&dir)?;
        let report = evaluate_base_novel(ctx, &model, seed)?;
        let mut w = JsonlWriter::append(&dir.join(METRICS))?;
        w.write(&MetricsRecord::Eval(report.clone()))?;
        w.flush()?;
        print_eval(&report);
    }
    Ok(())
}

fn ablate(ctx: &RunContext, study: Study, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stem = out.join(format!("ablation_{study}"));
    let mut records = JsonlWriter::create(&stem.with_extension("jsonl"))?;
    let rows = run_ablation(ctx, study, |row| {
        println!("{:<32} base {:6.2}  novel {:6.2}  hm {:6.2}", row.label, row.base, row.novel, row.hm);
        records.write(&MetricsRecord::Ablation(row.clone()))?;
        records.flush()
    })?;
    write(&stem.with_extension("csv"), &to_csv(&rows))?;
    let table = to_markdown(&rows);
    write(&stem.with_extension("md"), &table)?;
    print!("{table}");
    Ok(())
}

fn noise_bench(ctx: &RunContext, out: &Path, frozen: bool) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &ctx.config.seeds {
        let dir = seed_dir(out, seed);
        let model = if frozen {
            ctx.fresh_model(seed)?
        } else {
            let path = dir.join(CHECKPOINT);
            if !path.is_file() {
                bail!(
                    "no checkpoint at {}; run `train` first or pass --frozen",
                    path.display()
                );
            }
            load_model(&dir)?
        };
        let seed_value = ctx.config.noise_bench.seed ^ seed;
        for r in record_noise_bench(ctx, &model, seed_value, &dir)? {
            println!(
                "seed {seed:>3}  {:<28} ts {:.6}  lpr {:.4}  as {:6.2}",
                r.label, r.ts, r.lpr, r.as_
            );
            rows.push((seed, r));
        }
        plot_files(&[dir.join(METRICS)], &dir)?;
    }
    let csv = out.join("noise_bench.csv");
    write_noise_csv(&csv, &rows)?;
    Ok(())
}

fn synth_data(config: &RunConfig, out: &Path) -> Result<()> {
    let bundle = generate_synthetic(
        &config.dataset.synthetic,
        config.encoder.image_size,
        config.dataset.synthetic_seed,
    )?;
    bundle.write(out)?;
    println!(
        "wrote {} classes, {} train and {} test images to {}",
        bundle.num_classes(),
        bundle.train.len(),
        bundle.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Plot { files } => {
            for path in plot_files(files, &cli.out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::SynthData => synth_data(&load_config(&cli)?, &cli.out),
        command => {
            let ctx = RunContext::new(load_config(&cli)?)?;
            match command {
                Command::Train => train(&ctx, &cli.out),
                Command::Eval => eval(&ctx, &cli.out),
                Command::Ablate { study } => ablate(&ctx, *study, &cli.out),
                Command::NoiseBench { frozen } => noise_bench(&ctx, &cli.out, *frozen),
                Command::Plot { .. } | Command::SynthData => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
