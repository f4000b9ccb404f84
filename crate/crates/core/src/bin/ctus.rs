use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctus_core::config::LoadedConfig;
use ctus_core::dataset::{
    resolve_workers, run_evaluate, run_register, run_screw_eval, simulate, write_evaluation, write_output_json,
    write_phantom, write_press_preview, RegisterJob,
};
use ctus_core::phantom::PhantomSpec;
use ctus_core::registration::IcpParams;
use ctus_core::Result;

#[derive(Parser)]
#[command(name = "ctus", version, about = "CT-based ultrasound simulation and CT-US registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset from a simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Frame workers (overridden by CTUS_THREADS).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Unwarped and warped HU slice side by side for one pose.
    PressPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pose_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register tracked masks against a CT surface cloud.
    Register {
        /// Directory with pred_%06d.png or label_%06d.png masks.
        #[arg(long)]
        masks: PathBuf,
        /// Directory with frame_%06d.json; defaults to the mask directory.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        calib: PathBuf,
        /// CT surface cloud (.ply or JSON).
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source cloud after the global transform, as PLY.
        #[arg(long)]
        cloud_out: Option<PathBuf>,
        #[arg(long, default_value_t = IcpParams::default().trim_fraction)]
        trim: f64,
        #[arg(long, default_value_t = IcpParams::default().max_iter)]
        max_iter: usize,
        #[arg(long, default_value_t = IcpParams::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = 50)]
        min_segment_points: usize,
    },
    /// Dice and Chamfer distances of predicted masks against labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        spacing_mm: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Screw tip and axis error between an estimated and a true transform.
    ScrewEval {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic spine phantom and a sweep config.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = PhantomSpec::default().vertebrae)]
        vertebrae: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, workers } => {
            let cfg = LoadedConfig::load(&config)?;
            let n = resolve_workers(workers, &cfg.config)?;
            let m = simulate(&cfg, n)?;
            println!("{} frames written to {}", m.frame_count, cfg.output_dir().display());
        }
        Command::PressPreview {
            config,
            pose_index,
            out,
        } => {
            let cfg = LoadedConfig::load(&config)?;
            write_press_preview(&cfg, pose_index, &out)?;
        }
        Command::Register {
            masks,
            meta,
            calib,
            ct,
            out,
            cloud_out,
            trim,
            max_iter,
            tol,
            min_segment_points,
        } => {
            let meta = meta.unwrap_or_else(|| masks.clone());
            let job = RegisterJob {
                masks: &masks,
                meta: &meta,
                calibration: &calib,
                ct_cloud: &ct,
                params: IcpParams {
                    max_iter,
                    trim_fraction: trim,
                    tol,
                    ..IcpParams::default()
                },
                min_segment_points,
            };
            let (result, cloud) = run_register(&job)?;
            if let Some(w) = &result.warning {
                eprintln!("warning: {w}");
            }
            write_output_json(&out, &result)?;
            if let Some(p) = cloud_out {
                cloud.save(&p)?;
            }
            println!("rms {:.4} mm over {} points", result.global.rms_mm, result.source_points);
        }
        Command::Evaluate {
            pred,
            gt,
            spacing_mm,
            out,
        } => {
            let (eval, rep) = run_evaluate(&pred, &gt, spacing_mm)?;
            write_evaluation(&out, &eval, &rep)?;
            println!("dice mean {:.4} over {} frames", eval.summary.dice.mean, eval.summary.frames);
        }
        Command::ScrewEval { plan, est, gt, out } => {
            let err = run_screw_eval(&plan, &est, &gt)?;
            match out {
                Some(p) => write_output_json(&p, &err)?,
                None => println!("{}", serde_json::to_string_pretty(&err).expect("serialisable")),
            }
        }
        Command::Phantom {
            out,
            frames,
            vertebrae,
        } => {
            let spec = PhantomSpec {
                vertebrae,
                ..PhantomSpec::default()
            };
            write_phantom(&out, &spec, frames)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
