//! End-to-end stages: data, victim, attack, robustness sweep, evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{parse_config, ExperimentConfig};
use super::pgm::write_pgm;
use crate::attack::{
    curve_ends, evaluate_attack, train_remover, watermarked_pool, AttackEval, AttackRun, Countermeasure, PostProcess,
};
use crate::dgs::{query_api, DgsConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_nc, mean_psnr, ms_ssim, success_rate, MetricsRecord, MS_SSIM_SCALES};
use crate::nn::{run_remover, Arch, ModelParams};
use crate::tasks::{make_dataset, Dataset, ImagePair, WatermarkSpec};
use crate::tensor::Tensor;
use crate::watermark::{evaluate_victim, extract, train_victim, TrainMeta, VictimModel, VictimReport};

pub const VICTIM_FORMAT: &str = "gradshield-victim/1";
pub const SWEEP_FORMAT: &str = "gradshield-sweep/1";
/// Environment variable capping sweep worker threads.
pub const THREADS_ENV: &str = "GRADSHIELD_THREADS";

/// A validated config with its dataset and watermark materialized.
#[derive(Clone, Debug)]
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub wspec: WatermarkSpec,
    pub dgs: DgsConfig,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = make_dataset(cfg.task, cfg.dataset_count, cfg.seed, cfg.image_size)?;
        let wspec = cfg.wspec()?;
        let dgs = cfg.dgs_config(&wspec)?;
        Ok(Self {
            cfg,
            dataset,
            wspec,
            dgs,
        })
    }
}

fn stack_x(pairs: &[ImagePair]) -> Result<Tensor> {
    Tensor::stack(&pairs.iter().map(|p| p.x.clone()).collect::<Vec<_>>())
}

/// Writes every pair as `<split>/<index>_src.pgm` and `<split>/<index>_dst.pgm`,
/// plus the two marks.
pub fn export_dataset(lab: &Lab, dir: &Path) -> Result<usize> {
    let mut written = 0;
    for (split, pairs) in [
        ("victim", &lab.dataset.victim),
        ("attacker", &lab.dataset.attacker),
        ("eval", &lab.dataset.eval),
    ] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub)?;
        for (i, p) in pairs.iter().enumerate() {
            write_pgm(&sub.join(format!("{i:04}_src.pgm")), &p.x0)?;
            write_pgm(&sub.join(format!("{i:04}_dst.pgm")), &p.x)?;
            written += 2;
        }
    }
    write_pgm(&dir.join("watermark.pgm"), &lab.wspec.w)?;
    write_pgm(&dir.join("blank.pgm"), &lab.wspec.w0)?;
    Ok(written + 2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VictimManifest {
    format_version: String,
    config: ExperimentConfig,
    train_meta: TrainMeta,
    report: VictimReport,
}

/// Trains the victim on the victim split and evaluates it on the eval split.
pub fn train_victim_stage(lab: &Lab) -> Result<(VictimModel, Vec<f64>, VictimReport)> {
    let (model, losses) = train_victim(&lab.dataset.victim, &lab.wspec, &lab.cfg.victim)?;
    let report = evaluate_victim(&model, &lab.dataset.eval)?;
    Ok((model, losses, report))
}

/// Victim directory layout: `encoder.ckpt`, `decoder.ckpt`, `victim.json`
/// (config snapshot, training summary, evaluation) and `loss.csv`.
pub fn save_victim(dir: &Path, lab: &Lab, model: &VictimModel, losses: &[f64], report: &VictimReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&model.encoder, &dir.join("encoder.ckpt"))?;
    save_checkpoint(&model.decoder, &dir.join("decoder.ckpt"))?;
    let manifest = VictimManifest {
        format_version: VICTIM_FORMAT.into(),
        config: lab.cfg.clone(),
        train_meta: model.train_meta.clone(),
        report: report.clone(),
    };
    fs::write(dir.join("victim.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.serialize((i, l))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a victim directory and the config it was trained under.
pub fn load_victim(dir: &Path) -> Result<(VictimModel, ExperimentConfig)> {
    let manifest_path = dir.join("victim.json");
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(manifest_path)),
        Err(e) => return Err(e.into()),
    };
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("format_version").and_then(|v| v.as_str()) != Some(VICTIM_FORMAT) {
        return Err(Error::invalid(format!(
            "{} is not a {VICTIM_FORMAT} manifest",
            manifest_path.display()
        )));
    }
    let config = parse_config(&value["config"].to_string())?;
    let manifest: VictimManifest = serde_json::from_value(value)?;
    let encoder = load_checkpoint(&dir.join("encoder.ckpt"))?;
    let decoder = load_checkpoint(&dir.join("decoder.ckpt"))?;
    encoder.validate(Arch::Encoder)?;
    decoder.validate(Arch::Decoder)?;
    let model = VictimModel {
        encoder,
        decoder,
        wspec: config.wspec()?,
        train_meta: manifest.train_meta,
    };
    Ok((model, config))
}

/// Rejects a config whose data or mark differ from the victim's.
pub fn check_compatible(cfg: &ExperimentConfig, victim_cfg: &ExperimentConfig) -> Result<()> {
    let fields: [(&str, bool); 5] = [
        ("seed", cfg.seed == victim_cfg.seed),
        ("task", cfg.task == victim_cfg.task),
        ("image_size", cfg.image_size == victim_cfg.image_size),
        ("dataset_count", cfg.dataset_count == victim_cfg.dataset_count),
        (
            "dgs.watermark_pattern",
            cfg.dgs.watermark_pattern == victim_cfg.dgs.watermark_pattern,
        ),
    ];
    match fields.iter().find(|(_, same)| !same) {
        Some((path, _)) => Err(Error::Config {
            path: (*path).into(),
            message: "differs from the value the victim was trained with".into(),
        }),
        None => Ok(()),
    }
}

/// Victim fidelity and extraction on the eval split as table rows.
pub fn victim_records(lab: &Lab, model: &VictimModel) -> Result<Vec<MetricsRecord>> {
    let x = stack_x(&lab.dataset.eval)?;
    let y = model.embed(&x)?;
    let w = &model.wspec.w;
    let zy = extract(&model.decoder, &y)?;
    let zx = extract(&model.decoder, &x)?;
    let context = json!({ "config": lab.cfg, "split": "eval", "count": x.batch_len() });
    Ok(vec![
        MetricsRecord {
            name: "victim".into(),
            psnr_db: mean_psnr(&y, &x)?,
            ms_ssim: ms_ssim(&y, &x, MS_SSIM_SCALES)?,
            nc: mean_nc(&zy, w)?,
            sr: success_rate(&zy, w, lab.dgs.nc_threshold())?,
            context: context.clone(),
        },
        MetricsRecord {
            name: "unmarked".into(),
            psnr_db: mean_psnr(&x, &x)?,
            ms_ssim: 1.0,
            nc: mean_nc(&zx, w)?,
            sr: success_rate(&zx, w, lab.dgs.nc_threshold())?,
            context,
        },
    ])
}

/// Attack metrics on the eval split, judged on the true decoder output.
pub fn attack_record(
    lab: &Lab,
    model: &VictimModel,
    remover: &ModelParams,
    run: Option<&AttackRun>,
) -> Result<(AttackEval, MetricsRecord)> {
    let eval = evaluate_attack(model, remover, &lab.dataset.eval, lab.dgs.nc_threshold())?;
    let y = Tensor::stack(&watermarked_pool(model, &lab.dataset.eval)?)?;
    let ry = run_remover(remover, &y)?;
    let mut context = json!({ "config": lab.cfg, "split": "eval" });
    if let Some(run) = run {
        let (a0, a1) = curve_ends(&run.attacker_view)?;
        let (d0, d1) = curve_ends(&run.defender_view)?;
        let pf = &run.meta.protected_fraction;
        context["curves"] = json!({
            "attacker_initial": a0, "attacker_final": a1,
            "defender_initial": d0, "defender_final": d1,
            "mean_protected_fraction": pf.iter().sum::<f64>() / pf.len().max(1) as f64,
        });
    }
    let record = MetricsRecord {
        name: "attack".into(),
        psnr_db: eval.psnr_ry_y,
        ms_ssim: ms_ssim(&ry, &y, MS_SSIM_SCALES)?,
        nc: eval.nc,
        sr: eval.sr,
        context,
    };
    Ok((eval, record))
}

/// Trains a remover on the attacker split under the lab's shield settings.
pub fn attack_stage(lab: &Lab, model: &VictimModel) -> Result<(AttackRun, AttackEval, MetricsRecord)> {
    let run = train_remover(model, &lab.dgs, &lab.cfg.attack, &lab.dataset.attacker)?;
    let (eval, record) = attack_record(lab, model, &run.remover, Some(&run))?;
    Ok((run, eval, record))
}

/// Post-processing families of the robustness sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Jpeg,
    Noise,
    Lattice,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Jpeg, Suite::Noise, Suite::Lattice];

    /// The four strengths swept per family.
    pub fn grid(self) -> Vec<PostProcess> {
        match self {
            Suite::Jpeg => [10, 20, 30, 40].map(|quality| PostProcess::Jpeg { quality }).to_vec(),
            Suite::Noise => [0.0, 10.0, 20.0, 30.0]
                .map(|level_db| PostProcess::Noise { level_db })
                .to_vec(),
            Suite::Lattice => [2, 6, 11, 16].map(|step| PostProcess::Lattice { step }).to_vec(),
        }
    }
}

/// One cell of the robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub suite: Suite,
    pub post_process: PostProcess,
    /// PSNR between the clipped returned mark and its post-processed version.
    pub psnr_db: f64,
    pub ms_ssim: f64,
    /// Success rate of the true decoder on the remover's eval outputs.
    pub sr: f64,
    /// Success rate measured on the post-processed API answers instead.
    pub sr_returned: f64,
    pub nc: f64,
    pub attacker_final: f64,
    pub defender_final: f64,
}

fn sweep_cell(lab: &Lab, model: &VictimModel, suite: Suite, pp: PostProcess) -> Result<SweepCell> {
    let mut acfg = lab.cfg.attack.clone();
    acfg.post_process = Some(pp);
    acfg.countermeasure = Countermeasure::None;
    let run = train_remover(model, &lab.dgs, &acfg, &lab.dataset.attacker)?;

    let y = Tensor::stack(&watermarked_pool(model, &lab.dataset.eval)?)?;
    let ry = run_remover(&run.remover, &y)?;
    let w = &model.wspec.w;
    let thr = lab.dgs.nc_threshold();
    let z = extract(&model.decoder, &ry)?;
    let zstar = query_api(&model.decoder, &lab.dgs, &ry)?;
    let returned = zstar.map(|v| v.clamp(0.0, 1.0));
    let post = pp.apply(&zstar, acfg.seed ^ 0xE7A1)?;
    Ok(SweepCell {
        suite,
        post_process: pp,
        psnr_db: mean_psnr(&returned, &post)?,
        ms_ssim: ms_ssim(&returned, &post, MS_SSIM_SCALES)?,
        sr: success_rate(&z, w, thr)?,
        sr_returned: success_rate(&post, w, thr)?,
        nc: mean_nc(&z, w)?,
        attacker_final: curve_ends(&run.attacker_view)?.1,
        defender_final: curve_ends(&run.defender_view)?.1,
    })
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config {
                path: THREADS_ENV.into(),
                message: format!("expected a positive integer, got {s:?}"),
            }),
        },
    }
}

#[cfg(feature = "parallel")]
fn run_cells<T, F>(cells: &[(Suite, PostProcess)], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Suite, PostProcess) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| cells.par_iter().map(|&(s, p)| f(s, p)).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_cells<T, F>(cells: &[(Suite, PostProcess)], f: F) -> Result<Vec<T>>
where
    F: Fn(Suite, PostProcess) -> Result<T>,
{
    thread_cap()?;
    cells.iter().map(|&(s, p)| f(s, p)).collect()
}

/// Runs a shielded attack per post-processing cell. Cells are independent
/// and run in parallel; results come back in grid order.
pub fn robustness_sweep(lab: &Lab, model: &VictimModel, suites: &[Suite]) -> Result<Vec<SweepCell>> {
    let cells: Vec<(Suite, PostProcess)> = suites
        .iter()
        .flat_map(|&s| s.grid().into_iter().map(move |p| (s, p)))
        .collect();
    run_cells(&cells, |s, p| sweep_cell(lab, model, s, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<SweepCell>,
}

pub fn sweep_json(cfg: &ExperimentConfig, cells: &[SweepCell]) -> String {
    let report = SweepReport {
        format_version: SWEEP_FORMAT.into(),
        config: cfg.clone(),
        cells: cells.to_vec(),
    };
    serde_json::to_string_pretty(&report).expect("sweep serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            dataset_count: 12,
            ..Default::default()
        };
        cfg.victim.steps = 3;
        cfg.victim.batch = 2;
        cfg.attack.steps = 2;
        cfg.attack.batch = 2;
        cfg
    }

    #[test]
    fn victim_dir_round_trip() {
        let lab = Lab::new(tiny_cfg()).unwrap();
        let (model, losses, report) = train_victim_stage(&lab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_victim(dir.path(), &lab, &model, &losses, &report).unwrap();
        let (back, cfg) = load_victim(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(cfg, lab.cfg);
        fs::remove_file(dir.path().join("decoder.ckpt")).unwrap();
        assert!(matches!(load_victim(dir.path()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn compatibility_names_field() {
        let a = tiny_cfg();
        let mut b = a.clone();
        check_compatible(&a, &b).unwrap();
        b.attack.steps = 99;
        check_compatible(&a, &b).unwrap();
        b.image_size = 48;
        match check_compatible(&b, &a) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "image_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sweep_grid_shape() {
        assert_eq!(Suite::ALL.iter().map(|s| s.grid().len()).sum::<usize>(), 12);
        assert_eq!(Suite::Lattice.grid()[3], PostProcess::Lattice { step: 16 });
    }

    #[test]
    fn sweep_cells_in_order() {
        let lab = Lab::new(tiny_cfg()).unwrap();
        let (model, _, _) = train_victim_stage(&lab).unwrap();
        let cells = robustness_sweep(&lab, &model, &[Suite::Lattice]).unwrap();
        assert_eq!(cells.len(), 4);
        for (c, p) in cells.iter().zip(Suite::Lattice.grid()) {
            assert_eq!(c.post_process, p);
            assert!((0.0..=1.0).contains(&c.sr));
        }
    }
}
