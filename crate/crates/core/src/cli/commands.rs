use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    attention_skew, evaluate, probe_csv, run_ablation, run_mask_sweep, run_probe, GridTable, LossCombo,
    MetricsReport, SplitData,
};
use crate::graph::{
    assign_splits, generate_synthetic_dataset, load_dataset, save_bag, write_manifest, ManifestEntry, BAG_EXTENSION,
};
use crate::model::{checkpoint_kind, decode_checkpoint, save_checkpoint, AbmilState, ModelState};
use crate::rng::{stream, Stream};
use crate::train::{fit_with, EpochRecord, MilModel, TrainLog};

use super::config::{Arch, RunConfig};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CHECKPOINT: &str = "checkpoint.srmc";
pub const LOG: &str = "log.jsonl";
pub const TIMINGS: &str = "timings.jsonl";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out or `out`)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Generates a synthetic dataset with a seeded train/val/test split.
pub fn synth(cfg: &mut RunConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out or `out`)".into()))?;
    if is_nonempty_dir(&dir)? && !force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    let bags = generate_synthetic_dataset(&cfg.synth, cfg.seed)?;
    let splits = assign_splits(bags.len(), &cfg.splits, &mut stream(cfg.seed, Stream::Split))?;
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, split) in bags.iter().zip(splits) {
        let rel = format!("bags/{}.{BAG_EXTENSION}", bag.bag_id);
        save_bag(bag, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: bag.bag_id.clone(),
            path: rel,
            label: bag.label,
            split,
        });
    }
    let manifest = dir.join(MANIFEST);
    write_manifest(&manifest, &entries)?;
    cfg.manifest = Some(manifest.clone());
    cfg.write(&dir)?;
    eprintln!("wrote {} bags to {}", entries.len(), dir.display());
    Ok(manifest)
}

/// Loads the configured dataset and checks it against the model widths.
pub fn load_data(cfg: &RunConfig) -> Result<SplitData> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("a dataset manifest is required (`manifest`)".into()))?;
    if !manifest.is_file() {
        return Err(Error::Config(format!("dataset manifest {} does not exist", manifest.display())));
    }
    let ds = load_dataset(manifest)?;
    let data = SplitData::from_dataset(&ds)?;
    for g in data.train.iter().chain(&data.val).chain(&data.test) {
        if g.dim() != cfg.model.input_dim {
            return Err(Error::Config(format!(
                "bag {} has {} features but model.input_dim is {}",
                g.bag_id,
                g.dim(),
                cfg.model.input_dim
            )));
        }
        if g.label >= cfg.model.classes {
            return Err(Error::Config(format!(
                "bag {} has label {} but model.classes is {}",
                g.bag_id, g.label, cfg.model.classes
            )));
        }
    }
    Ok(data)
}

fn progress(tag: &'static str) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        let auc = r.val.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        eprintln!(
            "[{tag}] epoch {:>3} lr {:.2e} train {:.4} val loss {:.4} auc {auc} acc {:.3}",
            r.epoch, r.lr, r.train.total, r.val.loss, r.val.accuracy
        );
    }
}

fn train_model<M: MilModel>(init: M, data: &SplitData, cfg: &RunConfig, tag: &'static str) -> Result<(M, TrainLog)> {
    fit_with(init, &data.train, &data.val, &cfg.train, &mut progress(tag))
}

fn train_srmil(data: &SplitData, cfg: &RunConfig) -> Result<(ModelState, TrainLog)> {
    train_model(ModelState::init(cfg.model, cfg.seed)?, data, cfg, "srmil")
}

fn train_abmil(data: &SplitData, cfg: &RunConfig) -> Result<(AbmilState, TrainLog)> {
    train_model(AbmilState::init(cfg.abmil_dims(), cfg.seed)?, data, cfg, "abmil")
}

/// Trains the configured architecture and writes the best checkpoint and logs.
pub fn train(cfg: &mut RunConfig) -> Result<PathBuf> {
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let ckpt = dir.join(CHECKPOINT);
    let log = match cfg.arch {
        Arch::Srmil => {
            let (model, log) = train_srmil(&data, cfg)?;
            save_checkpoint(&model, &ckpt)?;
            log
        }
        Arch::Abmil => {
            let (model, log) = train_abmil(&data, cfg)?;
            save_checkpoint(&model, &ckpt)?;
            log
        }
    };
    log.write(&dir.join(LOG))?;
    write_text(&dir.join(TIMINGS), &log.timings_jsonl())?;
    cfg.checkpoint = Some(ckpt.clone());
    cfg.write(&dir)?;
    if let Some(best) = log.best() {
        eprintln!(
            "best epoch {} val accuracy {:.4} auc {}",
            best.epoch,
            best.val.accuracy,
            best.val.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(ckpt)
}

#[allow(clippy::large_enum_variant)]
enum Loaded {
    Srmil(ModelState),
    Abmil(AbmilState),
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mismatch = |what: String| {
        Error::Config(format!(
            "checkpoint {} does not match the config: {what}",
            path.display()
        ))
    };
    match checkpoint_kind(&bytes)?.as_str() {
        "srmil" => {
            let m: ModelState = decode_checkpoint(&bytes)?;
            if m.dims != cfg.model {
                return Err(mismatch(format!("{:?} vs {:?}", m.dims, cfg.model)));
            }
            Ok(Loaded::Srmil(m))
        }
        "abmil" => {
            let m: AbmilState = decode_checkpoint(&bytes)?;
            if m.dims != cfg.abmil_dims() {
                return Err(mismatch(format!("{:?} vs {:?}", m.dims, cfg.abmil_dims())));
            }
            Ok(Loaded::Abmil(m))
        }
        other => Err(mismatch(format!("unknown model kind {other}"))),
    }
}

fn required_checkpoint(cfg: &RunConfig) -> Result<&PathBuf> {
    cfg.checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint or `checkpoint`)".into()))
}

#[derive(Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub arch: Arch,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Scores a checkpoint on the validation and test splits.
pub fn eval(cfg: &mut RunConfig) -> Result<EvalReport> {
    let ckpt = required_checkpoint(cfg)?.clone();
    let data = load_data(cfg)?;
    let model = load_model(&ckpt, cfg)?;
    let arch = match model {
        Loaded::Srmil(_) => Arch::Srmil,
        Loaded::Abmil(_) => Arch::Abmil,
    };
    if arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model but the config selects {}",
            arch.name(),
            cfg.arch.name()
        )));
    }
    let (val, test) = match &model {
        Loaded::Srmil(m) => (evaluate(m, &data.val)?, evaluate(m, &data.test)?),
        Loaded::Abmil(m) => (evaluate(m, &data.val)?, evaluate(m, &data.test)?),
    };
    let dir = out_dir(cfg)?;
    let report = EvalReport {
        checkpoint: ckpt,
        arch,
        val,
        test,
    };
    write_json(&dir.join("eval.json"), &report)?;
    cfg.write(&dir)?;
    Ok(report)
}

/// Instance-level KNN probe and attention-skew report for both models.
pub fn probe(cfg: &mut RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let srmil = match &cfg.checkpoint {
        Some(path) => match load_model(path, cfg)? {
            Loaded::Srmil(m) => m,
            Loaded::Abmil(_) => return Err(Error::Config(format!("{} is not an SRMIL checkpoint", path.display()))),
        },
        None => {
            let (m, _) = train_srmil(&data, cfg)?;
            save_checkpoint(&m, &dir.join("srmil.srmc"))?;
            m
        }
    };
    let abmil = match &cfg.abmil.checkpoint {
        Some(path) => match load_model(path, cfg)? {
            Loaded::Abmil(m) => m,
            Loaded::Srmil(_) => return Err(Error::Config(format!("{} is not an ABMIL checkpoint", path.display()))),
        },
        None => {
            let (m, _) = train_abmil(&data, cfg)?;
            save_checkpoint(&m, &dir.join("abmil.srmc"))?;
            m
        }
    };
    let rows = run_probe(&data, &srmil, &abmil, &cfg.probe, cfg.seed)?;
    write_text(&dir.join("probe.csv"), &probe_csv(&rows))?;
    write_json(&dir.join("probe.json"), &rows)?;
    let skew = attention_skew(&data.test, &srmil, &abmil)?;
    write_json(&dir.join("attention_skew.json"), &skew)?;
    write_text(&dir.join("attention_hist_abmil.csv"), &skew.abmil.histogram_csv())?;
    write_text(&dir.join("attention_hist_srmil.csv"), &skew.srmil.histogram_csv())?;
    cfg.write(&dir)?;
    print!("{}", probe_csv(&rows));
    println!(
        "median max attention: abmil {:.4} srmil {:.4}",
        skew.abmil.median_max, skew.srmil.median_max
    );
    Ok(())
}

fn write_grid(dir: &Path, stem: &str, table: &GridTable) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &table.to_csv())?;
    write_json(&dir.join(format!("{stem}.json")), table)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn require_srmil(cfg: &RunConfig, what: &str) -> Result<()> {
    if cfg.arch != Arch::Srmil {
        return Err(Error::Config(format!("{what} applies to the srmil architecture only")));
    }
    Ok(())
}

/// Five-row loss-combination grid.
pub fn ablate(cfg: &mut RunConfig) -> Result<GridTable> {
    require_srmil(cfg, "ablate")?;
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let table = run_ablation(&data, cfg.model, &cfg.train, &LossCombo::GRID, &cfg.ablate.seeds)?;
    write_grid(&dir, "ablation", &table)?;
    cfg.write(&dir)?;
    Ok(table)
}

/// Accuracy across mask ratios.
pub fn sweep(cfg: &mut RunConfig) -> Result<GridTable> {
    require_srmil(cfg, "sweep")?;
    let data = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let table = run_mask_sweep(&data, cfg.model, &cfg.train, &cfg.sweep.ratios, &cfg.sweep.seeds)?;
    write_grid(&dir, "sweep", &table)?;
    cfg.write(&dir)?;
    Ok(table)
}
