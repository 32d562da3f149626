use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transtee::datagen::{save_csv, true_response};
use transtee::error::Result;
use transtee::experiment::{
    count_params, fit, make_data, run_experiment, ExperimentConfig, Fitted,
};
use transtee::model::TransTee;
use transtee::Tensor;

#[derive(Parser)]
#[command(name = "transtee", about = "Treatment effect estimation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override run.seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured train/test datasets as CSV
    Generate(Common),
    /// Train a single model, writing history.csv (and a checkpoint)
    Train(Common),
    /// Run the full repeated experiment with aggregated results
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Override run.n_repeats
        #[arg(long)]
        repeats: Option<usize>,
        /// Override run.jobs
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-render the ADRF plot from a saved checkpoint
    Plot(Common),
    /// Print the trainable parameter count for the configured model
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, hash) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    Ok((cfg, hash))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let (cfg, _) = load(common)?;
    std::fs::create_dir_all(&common.out)?;
    let (train_ds, test_ds) = make_data(&cfg.generator, cfg.train_interval(), cfg.run.seed)?;
    save_csv(&train_ds, &common.out.join("train.csv"))?;
    save_csv(&test_ds, &common.out.join("test.csv"))?;
    println!(
        "wrote {} train / {} test rows to {}",
        train_ds.len(),
        test_ds.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let (cfg, _) = load(common)?;
    std::fs::create_dir_all(&common.out)?;
    let seed = cfg.run.seed;
    let (train_ds, test_ds) = make_data(&cfg.generator, cfg.train_interval(), seed)?;
    let (mut fitted, history) = fit(&cfg, &train_ds, seed)?;
    std::fs::write(common.out.join("history.csv"), history.to_csv())?;
    if let Fitted::TransTee(model) = &fitted {
        model.save(&common.out.join("model.ckpt"))?;
    }
    let (name, value) = transtee::experiment::evaluate(&cfg, &mut fitted, &test_ds)?;
    println!("{name} = {value:.6}");
    Ok(())
}

fn cmd_experiment(common: &Common, repeats: Option<usize>, jobs: Option<usize>) -> Result<bool> {
    let (mut cfg, hash) = load(common)?;
    if let Some(r) = repeats {
        cfg.run.n_repeats = r;
    }
    if let Some(j) = jobs {
        cfg.run.jobs = j;
    }
    let out = cfg
        .run
        .out_dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| common.out.clone());
    let summary = run_experiment(&cfg, &hash, &out)?;
    for rep in &summary.reports {
        match rep.std {
            Some(sd) => println!(
                "{}: {:.6} +/- {:.6} over {} repeats",
                rep.metric, rep.value, sd, rep.n_repeats
            ),
            None => println!("{}: {:.6} ({} repeat)", rep.metric, rep.value, rep.n_repeats),
        }
    }
    for (r, msg) in &summary.failures {
        eprintln!("repeat {r} aborted: {msg}");
    }
    println!("artifacts in {}", out.display());
    Ok(summary.too_many_failures())
}

fn cmd_plot(common: &Common) -> Result<()> {
    let (cfg, _) = load(common)?;
    let ckpt = common.out.join("model.ckpt");
    let mut model = TransTee::load(&ckpt)?;
    // the data is regenerated deterministically from config + seed
    let (_, test_ds) = make_data(&cfg.generator, cfg.train_interval(), cfg.run.seed)?;
    let h = cfg.generator.h;
    let grid: Vec<f64> = (0..cfg.run.grid_size.max(2))
        .map(|i| h * i as f64 / (cfg.run.grid_size.max(2) - 1) as f64)
        .collect();
    if cfg.generator.name == "tcga_dosage" {
        transtee::plot::plot_adrf_with(
            |x: &Tensor, s| {
                let n = x.shape()[0];
                model.predict(x, &Tensor::zeros(&[n, 1]), Some(&Tensor::full(&[n, 1], s)))
            },
            |row, s| true_response(&test_ds, row, 0.0, Some(s)),
            &test_ds,
            100,
            &grid,
            &common.out.join("adrf.svg"),
        )?;
    } else {
        transtee::plot::plot_adrf(
            |x: &Tensor, t| {
                let n = x.shape()[0];
                model.predict(x, &Tensor::full(&[n, 1], t), None)
            },
            &test_ds,
            100,
            &grid,
            &common.out.join("adrf.svg"),
        )?;
    }
    println!("wrote {}", common.out.join("adrf.svg").display());
    Ok(())
}

fn cmd_params(config: &PathBuf) -> Result<()> {
    let (cfg, _) = ExperimentConfig::load(config)?;
    println!("{}", count_params(&cfg)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TRANSTEE_LOG")).init();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Generate(c) => cmd_generate(c).map(|_| false),
        Cmd::Train(c) => cmd_train(c).map(|_| false),
        Cmd::Experiment {
            common,
            repeats,
            jobs,
        } => cmd_experiment(common, *repeats, *jobs),
        Cmd::Plot(c) => cmd_plot(c).map(|_| false),
        Cmd::Params { config } => cmd_params(config).map(|_| false),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: more than 20% of repeats aborted");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
