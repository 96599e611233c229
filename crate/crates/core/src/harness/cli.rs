use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{load_config, parse_config, ExperimentConfig};
use super::pgm::{read_pgm, write_pgm};
use super::pipeline::{
    attack_record, attack_stage, check_compatible, export_dataset, load_victim, robustness_sweep, save_victim,
    sweep_json, train_victim_stage, victim_records, Lab, Suite,
};
use super::report::emit_results;
use crate::attack::curve_ends;
use crate::dgs::{invert_reorient, reorient};
use crate::error::{Error, Result};
use crate::nn::Arch;

/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when a required artifact is missing or unreadable.
pub const EXIT_ARTIFACT: i32 = 3;
/// Exit status for numerical divergence.
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "gradshield",
    version,
    about = "Watermark removal attacks against a shielded decoder API"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set attack.steps=500` (value parsed as JSON, else as a string).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the dataset and write it as PGM images.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the watermark encoder/decoder and save them to a directory.
    TrainVictim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a remover against the victim's decoder API.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep post-processing attacks on the shielded API.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        victim: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        /// Families to sweep, comma-separated or repeated; all by default.
        #[arg(long = "suite", value_enum, value_delimiter = ',')]
        suites: Vec<Suite>,
    },
    /// Evaluate a victim and optionally a trained remover on the eval split.
    Eval {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        remover: Option<PathBuf>,
        /// Output prefix; `.json` is appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the shield's reorientation (or its inverse) to a PGM mark.
    Reorient {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        invert: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::MissingArtifact(_) | Error::Format { .. } => EXIT_ARTIFACT,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => 1,
    }
}

fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut value = serde_json::to_value(&cfg)?;
    for o in overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| Error::Config {
            path: o.clone(),
            message: "override must look like PATH=VALUE".into(),
        })?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        let mut slot = &mut value;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Config {
                    path: path.into(),
                    message: "no such field".into(),
                })?;
        }
        *slot = parsed;
    }
    parse_config(&value.to_string())
}

fn resolve(args: &ConfigArgs, base: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    let cfg = match (&args.config, base) {
        (Some(p), _) => load_config(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => ExperimentConfig::default(),
    };
    let cfg = apply_overrides(cfg, &args.overrides)?;
    if let Some(b) = base {
        check_compatible(&cfg, b)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let lab = Lab::new(resolve(&cfg, None)?)?;
            let n = export_dataset(&lab, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::TrainVictim { cfg, out } => {
            let lab = Lab::new(resolve(&cfg, None)?)?;
            let (model, losses, report) = train_victim_stage(&lab)?;
            save_victim(&out, &lab, &model, &losses, &report)?;
            println!(
                "victim: psnr {:.2} dB, nc marked {:.4}, sr {:.3}, nc unmarked {:.4}",
                report.psnr_yx, report.nc_marked, report.sr_marked, report.nc_unmarked
            );
        }
        Command::Attack { cfg, victim, out } => {
            let (model, vcfg) = load_victim(&victim)?;
            let lab = Lab::new(resolve(&cfg, Some(&vcfg))?)?;
            let (run, eval, record) = attack_stage(&lab, &model)?;
            fs::create_dir_all(&out)?;
            save_checkpoint(&run.remover, &out.join("remover.ckpt"))?;
            emit_results(
                &[record],
                Some((&run.attacker_view, &run.defender_view)),
                &out.join("attack"),
            )?;
            let (a0, a1) = curve_ends(&run.attacker_view)?;
            let (d0, d1) = curve_ends(&run.defender_view)?;
            println!("attacker view {a0:.6} -> {a1:.6}, defender view {d0:.6} -> {d1:.6}");
            println!(
                "eval: sr {:.3}, nc {:.4}, psnr(RY, Y) {:.2} dB",
                eval.sr, eval.nc, eval.psnr_ry_y
            );
        }
        Command::Robustness {
            cfg,
            victim,
            out,
            suites,
        } => {
            let (model, vcfg) = load_victim(&victim)?;
            let lab = Lab::new(resolve(&cfg, Some(&vcfg))?)?;
            let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites };
            let cells = robustness_sweep(&lab, &model, &suites)?;
            fs::write(&out, sweep_json(&lab.cfg, &cells))?;
            for c in &cells {
                println!(
                    "{}: psnr {:.2} dB, ms-ssim {:.4}, sr {:.3}",
                    c.post_process, c.psnr_db, c.ms_ssim, c.sr
                );
            }
        }
        Command::Eval { victim, remover, out } => {
            let (model, vcfg) = load_victim(&victim)?;
            let lab = Lab::new(vcfg)?;
            let mut records = victim_records(&lab, &model)?;
            if let Some(path) = remover {
                let r = load_checkpoint(&path)?;
                r.validate(Arch::Remover)?;
                records.push(attack_record(&lab, &model, &r, None)?.1);
            }
            emit_results(&records, None, &out)?;
            for r in &records {
                println!("{}: psnr {:.2} dB, nc {:.4}, sr {:.3}", r.name, r.psnr_db, r.nc, r.sr);
            }
        }
        Command::Reorient {
            cfg,
            input,
            output,
            invert,
        } => {
            let cfg = resolve(&cfg, None)?;
            let wspec = cfg.wspec()?;
            let mut dgs_cfg = cfg.clone();
            dgs_cfg.dgs.enabled = true;
            let dgs = dgs_cfg.dgs_config(&wspec)?;
            let z = read_pgm(&input)?;
            let z = z.reshape(wspec.w.shape().to_vec())?;
            let out = if invert {
                invert_reorient(&z, &dgs)?
            } else {
                reorient(&z, &dgs)?
            };
            write_pgm(&output, &out)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

/// Parses arguments, runs one command and returns the process exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
