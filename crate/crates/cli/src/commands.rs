use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use mbse3_core::checks::{run_all, CheckOptions};
use mbse3_core::diffcore::ParamStore;
use mbse3_core::pipeline::{aggregate, evaluate_all, evaluate_oracle, prepare_all, AggregateEval, SceneEval};
use mbse3_core::scenegen::{generate_scene, load_split, save_scene, scene_path, SceneSample};
use mbse3_core::trainer::{TrainState, Trainer};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// First scene index of each split, so splits never overlap and changing
/// one split's count leaves the others untouched.
pub const SPLIT_OFFSETS: [(&str, u64); 3] = [("train", 0), ("val", 1_000_000), ("test", 2_000_000)];

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn split_count(cfg: &RunConfig, split: &str) -> u64 {
    match split {
        "train" => cfg.counts.train,
        "val" => cfg.counts.val,
        _ => cfg.counts.test,
    }
}

pub fn gen(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    for (split, offset) in SPLIT_OFFSETS {
        let n = split_count(cfg, split);
        let scenes: Vec<SceneSample> = (offset..offset + n)
            .into_par_iter()
            .map(|i| generate_scene(&cfg.scene, i))
            .collect::<Result<_, _>>()?;
        let dir = cfg.paths.data_root.join(split);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for s in &scenes {
            save_scene(s, &scene_path(&cfg.paths.data_root, split, &s.id))?;
        }
        if !quiet {
            println!("{split}: {n} scenes -> {}", dir.display());
        }
    }
    Ok(())
}

fn load_nonempty(root: &Path, split: &str) -> Result<Vec<SceneSample>, CliError> {
    let scenes = load_split(root, split)?;
    if scenes.is_empty() {
        return Err(CliError::Io(format!("no scenes in {}", root.join(split).display())));
    }
    Ok(scenes)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<ParamStore, CliError> {
    let path = &cfg.paths.checkpoint;
    let store = ParamStore::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let expected = cfg.model.init_params(0)?;
    expected
        .check_compatible(&store)
        .map_err(|e| CliError::Mismatch(format!("{} does not fit the model config: {e}", path.display())))?;
    Ok(store)
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let root = &cfg.paths.data_root;
    let train = prepare_all(load_nonempty(root, "train")?, &cfg.model.backbone)?;
    let val = if root.join("val").is_dir() {
        prepare_all(load_split(root, "val")?, &cfg.model.backbone)?
    } else {
        Vec::new()
    };
    let p = &cfg.paths;
    for path in [&p.checkpoint, &p.train_state, &p.record] {
        ensure_parent(path)?;
    }
    let resume = cfg.modes.resume && p.checkpoint.is_file() && p.train_state.is_file();
    let mut trainer = if resume {
        let store = load_checkpoint(cfg)?;
        let mut t = Trainer::new(cfg.model.clone(), cfg.trainer.clone(), store, train, val)?;
        t.restore(TrainState::load(&p.train_state)?)
            .map_err(|e| CliError::Mismatch(e.to_string()))?;
        t
    } else {
        fs::write(&p.record, "").map_err(|e| io_err(&p.record, e))?;
        let store = cfg.model.init_params(cfg.trainer.seed)?;
        Trainer::new(cfg.model.clone(), cfg.trainer.clone(), store, train, val)?
    };
    if !quiet {
        println!(
            "training {} scenes from epoch {} to {} ({} parameters)",
            trainer.train_scenes().len(),
            trainer.epochs_done(),
            cfg.trainer.epochs,
            trainer.store().scalar_count()
        );
    }
    while trainer.epochs_done() < cfg.trainer.epochs {
        let rec = trainer.run_epoch()?;
        let mut f = OpenOptions::new()
            .append(true)
            .open(&p.record)
            .map_err(|e| io_err(&p.record, e))?;
        writeln!(f, "{}", rec.to_json_line()).map_err(|e| io_err(&p.record, e))?;
        trainer.store().save(&p.checkpoint).map_err(|e| CliError::Io(e.to_string()))?;
        trainer.state().save(&p.train_state)?;
        if !quiet {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "epoch {:>3}  seg {:.5}  motion {:.4}  consensus {:.3}  flow epe {:.4} (initial {:.4})  val ap {}  val epe {}",
                rec.epoch,
                rec.seg_loss,
                rec.motion_loss,
                rec.consensus,
                rec.train_flow_epe,
                rec.initial_flow_epe,
                fmt(rec.val_ap),
                fmt(rec.val_epe3d)
            );
        }
    }
    trainer.store().save(&p.checkpoint).map_err(|e| CliError::Io(e.to_string()))?;
    trainer.state().save(&p.train_state)?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    oracle: bool,
    per_scene: &'a [SceneEval],
    aggregate: &'a AggregateEval,
}

pub const CSV_HEADER: &str = "scene_id,AP,PQ,F1,Pre,Rec,mIoU,RI,EPE3D,angular_error";

fn csv_row(r: &SceneEval) -> String {
    let s = &r.segmentation;
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.scene_id,
        s.ap,
        s.pq,
        s.f1,
        s.precision,
        s.recall,
        s.miou,
        s.ri,
        r.epe3d,
        r.angular_error.map_or(String::new(), |a| a.to_string())
    )
}

pub fn eval(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let scenes = load_nonempty(&cfg.paths.data_root, "test")?;
    let rows: Vec<SceneEval> = if cfg.modes.oracle {
        scenes
            .par_iter()
            .map(|s| evaluate_oracle(s, cfg.model.slots))
            .collect::<Result<_, _>>()?
    } else {
        let store = load_checkpoint(cfg)?;
        let prepared = prepare_all(scenes, &cfg.model.backbone)?;
        evaluate_all(&store, &cfg.model, &prepared)?
    };
    let agg = aggregate(&rows);
    let p = &cfg.paths;
    ensure_parent(&p.report)?;
    ensure_parent(&p.csv)?;
    let report = Report {
        oracle: cfg.modes.oracle,
        per_scene: &rows,
        aggregate: &agg,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&p.report, text + "\n").map_err(|e| io_err(&p.report, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    fs::write(&p.csv, csv).map_err(|e| io_err(&p.csv, e))?;
    if !quiet {
        let s = &agg.segmentation;
        println!(
            "{} scenes  AP {:.4}  PQ {:.4}  F1 {:.4}  Pre {:.4}  Rec {:.4}  mIoU {:.4}  RI {:.4}  EPE3D {:.4}  angular {}",
            agg.scenes,
            s.ap,
            s.pq,
            s.f1,
            s.precision,
            s.recall,
            s.miou,
            s.ri,
            agg.epe3d,
            agg.angular_error.map_or("-".to_string(), |a| format!("{a:.2}"))
        );
    }
    Ok(())
}

pub fn check(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let results = run_all(CheckOptions {
        seed: cfg.trainer.seed,
        reflection_fix: !cfg.modes.fault_reflection,
    });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        if !quiet || !r.passed {
            println!(
                "{}  {:<width$}  {:>7.2}s  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.detail
            );
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Properties(format!("failed properties: {}", failed.join(", "))))
    }
}
