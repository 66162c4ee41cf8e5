use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uwnr_cli::{evalcmd, gridcmd, manifestcmd, rendercmd, synthcmd, traincmd};
use uwnr_cli::{parse_rgb, parse_sigmas};
use uwnr_core::Result;

/// Underwater neural rendering pipeline.
#[derive(Parser)]
#[command(name = "uwnr", version, about)]
struct Cli {
    /// Root seed for every random decision; omitted = random, logged.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the row-parallel kernels (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Chatty progress on stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract the light field map of an underwater exemplar.
    ExtractLf {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Gaussian scales, comma separated.
        #[arg(long, default_value = "15,60,90")]
        sigmas: String,
        /// Optional lossless float sidecar.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Render a clean image into an exemplar's underwater scene.
    Render {
        #[arg(long)]
        clean: PathBuf,
        /// Depth map file; omitted = synthetic vertical gradient.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "15,60,90")]
        sigmas: String,
        /// Reflect-pad to a renderable size and crop the output back.
        #[arg(long)]
        pad: bool,
    },
    /// Physical-model baseline renderer.
    RenderPhysical {
        #[arg(long)]
        clean: PathBuf,
        /// Depth map file; omitted = synthetic vertical gradient.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Per-channel scattering coefficients r,g,b.
        #[arg(long)]
        beta: String,
        /// Background light r,g,b in [0,1].
        #[arg(long)]
        background: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the generator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a prediction directory against a reference directory.
    EvalMetrics {
        #[arg(long = "pred-dir")]
        pred_dir: PathBuf,
        #[arg(long = "ref-dir")]
        ref_dir: PathBuf,
        /// Also compute set-level FID over the built-in embedding.
        #[arg(long)]
        fid: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render an underwater dataset from clean images and an exemplar pool.
    SynthDataset {
        #[arg(long = "clean-manifest")]
        clean_manifest: PathBuf,
        #[arg(long = "exemplar-dir")]
        exemplar_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// random | round-robin | fixed
        #[arg(long, default_value = "random")]
        policy: String,
        /// Pool file name used by the fixed policy.
        #[arg(long)]
        exemplar: Option<String>,
        #[arg(long, default_value = "15,60,90")]
        sigmas: String,
        #[arg(long)]
        pad: bool,
    },
    /// Scan a uw/, ref/, depth/ tree into a manifest.
    MakeManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labeled comparison montage.
    Grid {
        /// Input images, left to right.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_seed(cli_seed: Option<u64>, verbose: bool) -> u64 {
    match cli_seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed: {s}");
            let _ = verbose;
            s
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
        uwnr_core::runtime::set_parallel(true);
    }

    match cli.cmd {
        Cmd::ExtractLf {
            input,
            output,
            sigmas,
            sidecar,
        } => {
            let sigmas = parse_sigmas(&sigmas)?;
            rendercmd::extract_lf_cmd(&input, &output, &sigmas, sidecar.as_deref())?;
            if cli.verbose {
                eprintln!("wrote {}", output.display());
            }
        }
        Cmd::Render {
            clean,
            depth,
            exemplar,
            checkpoint,
            out,
            sigmas,
            pad,
        } => {
            let sigmas = parse_sigmas(&sigmas)?;
            rendercmd::render_cmd(
                &clean,
                depth.as_deref(),
                &exemplar,
                &checkpoint,
                &out,
                &sigmas,
                pad,
            )?;
            if cli.verbose {
                eprintln!("wrote {}", out.display());
            }
        }
        Cmd::RenderPhysical {
            clean,
            depth,
            beta,
            background,
            output,
        } => {
            rendercmd::render_physical_cmd(
                &clean,
                depth.as_deref(),
                parse_rgb(&beta)?,
                parse_rgb(&background)?,
                &output,
            )?;
            if cli.verbose {
                eprintln!("wrote {}", output.display());
            }
        }
        Cmd::Train {
            config,
            manifest,
            out,
            resume,
        } => {
            let outcome =
                traincmd::train_cmd(&config, &manifest, &out, resume.as_deref(), cli.seed)?;
            match outcome.log.last() {
                Some(last) => println!(
                    "trained through step {}; final loss {}",
                    last.step, last.total
                ),
                None => println!("nothing to do: checkpoint is already at the schedule's end"),
            }
            println!("final checkpoint: {}", outcome.final_path.display());
            println!("state checkpoint: {}", outcome.state_path.display());
            println!("loss log: {}", outcome.log_path.display());
        }
        Cmd::EvalMetrics {
            pred_dir,
            ref_dir,
            fid,
            report,
        } => {
            let (_, table) = evalcmd::eval_metrics_cmd(&pred_dir, &ref_dir, fid, &report)?;
            print!("{table}");
            if cli.verbose {
                eprintln!("report written to {}", report.display());
            }
        }
        Cmd::SynthDataset {
            clean_manifest,
            exemplar_dir,
            checkpoint,
            out,
            policy,
            exemplar,
            sigmas,
            pad,
        } => {
            let job = synthcmd::SynthJob {
                clean_manifest,
                exemplar_dir,
                checkpoint,
                out_dir: out,
                policy: policy.parse()?,
                fixed_exemplar: exemplar,
                sigmas: parse_sigmas(&sigmas)?,
                seed: resolve_seed(cli.seed, cli.verbose),
                pad,
            };
            let rendered = synthcmd::synth_dataset_cmd(&job)?;
            println!("rendered {rendered} images into {}", job.out_dir.display());
        }
        Cmd::MakeManifest { root, out } => {
            let n = manifestcmd::make_manifest_cmd(&root, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Cmd::Grid { inputs, out } => {
            let resized = gridcmd::grid_cmd(&inputs, &out)?;
            if !resized.is_empty() {
                eprintln!("resized to common cell size: {}", resized.join(", "));
            }
            if cli.verbose {
                eprintln!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single machine-parsable failure line
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
