use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wedgefill::error::{Error, Result};
use wedgefill::pipeline::Stage;
use wedgefill::workbench::{cmd_eval, cmd_gen_dataset, cmd_infer, cmd_train, CommandOptions, RunConfig, Workspace};

/// Limited-angle CT: diffusion sinogram inpainting with one-step distillation.
#[derive(Parser, Debug)]
#[command(name = "wedgefill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// gen-dataset/train: overrides [dataset] seed. infer/eval: sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Use checkpoints produced under a different config.
    #[arg(long)]
    allow_config_mismatch: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantoms (or import raw slices), sinograms and masks.
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage: score, distill or postproc.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
        /// Continue from the stage's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once the optimiser step count reaches this value.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Restore one test phantom or an input sinogram container.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "input")]
        phantom: Option<usize>,
        /// SINOTN01 file with a `sinogram` entry in pipeline units.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Comparison and ablation tables.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, seed_into_config: bool) -> Result<(RunConfig, Workspace, CommandOptions)> {
    let mut cfg = RunConfig::load(&common.config)?;
    let mut opts = CommandOptions { allow_config_mismatch: common.allow_config_mismatch, ..Default::default() };
    match (common.seed, seed_into_config) {
        (Some(s), true) => cfg.set_seed(s),
        (s, false) => opts.seed = s,
        (None, true) => {}
    }
    Ok((cfg, Workspace::new(&common.out), opts))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset { common } => {
            let (cfg, ws, _) = load(&common, true)?;
            let s = cmd_gen_dataset(&cfg, &ws)?;
            println!(
                "dataset: {} train, {} test, sinograms {}x{} in {}",
                s.train,
                s.test,
                s.sinogram_shape.0,
                s.sinogram_shape.1,
                ws.dataset().display()
            );
        }
        Command::Train { common, stage, resume, stop_at } => {
            let stage = Stage::parse(&stage)?;
            let (cfg, ws, mut opts) = load(&common, true)?;
            opts.resume = resume;
            opts.stop_at = stop_at;
            let s = cmd_train(stage, &cfg, &ws, &opts)?;
            print!("{}: {} steps run, step count {}", stage.name(), s.steps_run, s.step_count);
            match s.loss_ends {
                Some((a, b)) => println!(", smoothed loss {a:.5} -> {b:.5}"),
                None => println!(),
            }
        }
        Command::Infer { common, phantom, input } => {
            let (cfg, ws, mut opts) = load(&common, false)?;
            opts.phantom = phantom;
            opts.input = input;
            let s = cmd_infer(&cfg, &ws, &opts)?;
            println!("wrote {}", s.dir.display());
            if let (Some(f), Some(m)) = (s.psnr_final, s.psnr_masked_fbp) {
                println!("PSNR: restored {f:.2} dB, masked FBP {m:.2} dB");
            }
        }
        Command::Eval { common } => {
            let (cfg, ws, opts) = load(&common, false)?;
            let s = cmd_eval(&cfg, &ws, &opts)?;
            println!("wrote {}", s.comparison.display());
            if let Some(a) = s.ablations {
                println!("wrote {}", a.display());
            }
            for w in &s.warnings {
                println!("warning: {w}");
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("WEDGEFILL_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("WEDGEFILL_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
