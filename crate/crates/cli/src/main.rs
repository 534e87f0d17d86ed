use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcdiag::{exit, Failure};

#[derive(Parser)]
#[command(name = "kcdiag", version, about = "Keratoconus screening from Placido reflection images")]
struct Cli {
    /// TOML configuration file; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for every random choice.
    #[arg(long, global = true, env = "KC_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    Synth {
        #[arg(long)]
        n_control: Option<usize>,
        #[arg(long)]
        n_kc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train only the pixel classifier.
    TrainSegmenter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmenter, k-means and logistic models.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose one image or every scene of a corpus.
    Diagnose(DiagnoseArgs),
    /// Aggregate corpus diagnoses into a report.
    Report {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "input")]
struct Input {
    #[arg(long, requires = "out")]
    image: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    models: PathBuf,
    /// Output directory for a single image.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump intermediate masks as PBM.
    #[arg(long)]
    debug: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = kcdiag::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let seed = config.seed;
    let jobs = cli.jobs;
    match cli.command {
        Command::Synth { n_control, n_kc, out } => {
            let m = kcdiag::cmd_synth(
                n_control.unwrap_or(config.corpus.n_control),
                n_kc.unwrap_or(config.corpus.n_kc),
                seed,
                &out,
                &config,
                jobs,
            )?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::TrainSegmenter { corpus, out } => {
            kcdiag::require_manifest(&corpus)?;
            let m = kcdiag::cmd_train_segmenter(&corpus, &out, &config, seed, jobs)?;
            for (label, acc) in &m.pixel_accuracy {
                println!("held-out pixel accuracy ({label}): {acc:.4}");
            }
        }
        Command::Train { corpus, out } => {
            kcdiag::require_manifest(&corpus)?;
            let m = kcdiag::cmd_train(&corpus, &out, &config, seed, jobs)?;
            println!("clustering accuracy: {:.4}", m.clustering_accuracy);
            println!("held-out cell accuracy: {:.4}", m.heldout_cell_accuracy);
            println!("p = {}", m.stats.p_display);
        }
        Command::Diagnose(args) => match (args.input.image, args.input.corpus) {
            (Some(image), _) => {
                let out = args.out.expect("clap requires --out with --image");
                let r = kcdiag::cmd_diagnose(&image, &args.models, &out, &config, args.debug)?;
                println!("{}: {}", r.scene, r.stage1.label);
                if let Some(angle) = r.stage2.and_then(|s| s.hotspot.peak_angle) {
                    println!("hotspot at {angle:.0}°");
                }
            }
            (None, Some(corpus)) => {
                kcdiag::require_manifest(&corpus)?;
                let rs = kcdiag::cmd_diagnose_corpus(&corpus, &args.models, &config, jobs)?;
                println!("diagnosed {} scenes", rs.len());
            }
            (None, None) => unreachable!("clap enforces one input"),
        },
        Command::Report { corpus, models, out } => {
            kcdiag::require_manifest(&corpus)?;
            let r = kcdiag::cmd_report(&corpus, &models, &out)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
