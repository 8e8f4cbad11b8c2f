use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use seqrec::checkpoint::Checkpoint;
use seqrec::data::{
    build_sequences, core_filter, generate_synthetic, ingest_csv, leave_one_out_split, planted_rule_frequency, CoreMode,
    CsvFormat, DatasetStats, SyntheticSpec, Target,
};
use seqrec::eval::{evaluate, format_table, MetricsReport};
use seqrec::train::{valid_ndcg5, EpochRecord};
use seqrec::{Model, Trainer};
use seqrec_bench::{run_suite, SuiteOptions};

use crate::artifacts::{write_atomic, write_json, DatasetFile, RunDir, RunInfo, TrainerSnapshot, DATASET_FORMAT};
use crate::error::{CliError, CliResult};
use crate::run_config::RunConfig;
use crate::{BenchArgs, EvalArgs, ExportArgs, PrepareArgs, TableArgs, TrainArgs};

#[derive(Serialize)]
struct PrepareStats {
    #[serde(flatten)]
    dataset: DatasetStats,
    malformed_rows: usize,
    duplicates_removed: usize,
    /// Users with fewer than three items after filtering.
    unsplittable_users: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    order2_strength: Option<f64>,
    /// Share of positions following the planted rule, before filtering.
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_rule_frequency: Option<f64>,
}

pub fn prepare(a: &PrepareArgs) -> CliResult<()> {
    let (log, malformed, duplicates, planted) = if a.synthetic {
        let spec = SyntheticSpec {
            num_users: a.users,
            num_items: a.items,
            seq_len: a.seq_len,
            order2_strength: a.strength,
            seed: a.seed,
        };
        let syn = generate_synthetic(&spec)?;
        let freq = planted_rule_frequency(&syn.log, &syn.rule);
        (syn.log, 0, 0, Some(freq))
    } else {
        let path = a.input.as_ref().expect("clap requires --input without --synthetic");
        if !path.is_file() {
            return Err(CliError::user(format!("input file {} does not exist", path.display())));
        }
        let format = CsvFormat {
            user_column: a.user_column.clone(),
            item_column: a.item_column.clone(),
            timestamp_column: a.timestamp_column.clone(),
            max_malformed_fraction: a.max_malformed,
        };
        let ing = ingest_csv(path, &format)?;
        (ing.log, ing.malformed, ing.duplicates, None)
    };
    let filtered = core_filter(&log, a.min_core, CoreMode::UsersAndItems)?;
    let ds = build_sequences(&filtered, a.max_len)?;
    let (split, dropped) = leave_one_out_split(&ds);
    if split.num_users() == 0 {
        return Err(CliError::user("no user survives filtering and splitting"));
    }
    let stats = PrepareStats {
        dataset: DatasetStats::of(&ds),
        malformed_rows: malformed,
        duplicates_removed: duplicates,
        unsplittable_users: dropped.len(),
        order2_strength: a.synthetic.then_some(a.strength),
        planted_rule_frequency: planted,
    };
    fs::create_dir_all(&a.output)?;
    let file = DatasetFile {
        format: DATASET_FORMAT.into(),
        items: ds.items,
        split,
    };
    write_json(&a.output.join("dataset.json"), &file)?;
    write_json(&a.output.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let (ds, hash) = DatasetFile::load(&cfg.dataset)?;
    let split = &ds.split;
    let dataset_path = fs::canonicalize(&cfg.dataset)?;
    let run = RunDir::new(&cfg.run_dir);
    let resolved = cfg.to_toml()?;
    let info = RunInfo {
        seed: cfg.model.seed,
        dataset: dataset_path.clone(),
        dataset_sha256: hash,
        seqrec_version: env!("CARGO_PKG_VERSION").into(),
    };

    let mut trainer = if run.trainer().exists() {
        if !a.resume {
            return Err(CliError::user(format!(
                "{} already holds a run; pass --resume to continue it",
                run.root.display()
            )));
        }
        check_same_run(&run, &resolved, &info)?;
        let snap: TrainerSnapshot = serde_json::from_slice(&fs::read(run.trainer())?)?;
        let model: Model = snap.current.to_model()?;
        info!("resuming after epoch {}", snap.state.epoch);
        rewrite_log(&run.log(), &snap.state.history)?;
        Trainer::resume(model, cfg.train.clone(), split, snap.state)?
    } else {
        if a.resume {
            info!("nothing to resume in {}, starting fresh", run.root.display());
        }
        fs::create_dir_all(&run.root)?;
        write_atomic(&run.config(), resolved.as_bytes())?;
        write_json(&run.info(), &info)?;
        rewrite_log(&run.log(), &[])?;
        Trainer::new(Model::new(cfg.model.clone(), split.num_items)?, cfg.train.clone(), split)?
    };

    let dataset_ref = Some(dataset_path.display().to_string());
    let train_cfg = cfg.train.clone();
    let mut validate = |m: &Model| valid_ndcg5(m, split, &train_cfg);
    while !trainer.is_finished() {
        let rec = trainer.run_epoch(&mut validate)?;
        info!(
            "epoch {:>3}  loss {:.5}  valid NDCG@5 {:.5}  grad norm {:.4}  ({:.1}s)",
            rec.epoch, rec.train_loss, rec.valid_ndcg5, rec.grad_norm, rec.seconds
        );
        append_log(&run.log(), &rec)?;
        let snap = TrainerSnapshot {
            state: trainer.state().clone(),
            current: Checkpoint::from_model(trainer.model(), dataset_ref.clone()),
        };
        write_json(&run.trainer(), &snap)?;
    }
    let (best, state) = trainer.into_best()?;
    info!("best epoch {} (valid NDCG@5 {:.5})", state.best_epoch, state.best_valid_ndcg5.unwrap_or(0.0));
    Checkpoint::from_model(&best, dataset_ref).save(run.best())?;
    let report = evaluate(&best, split, Target::Test, &cfg.eval.topn, cfg.eval.mode, cfg.model.seed)?;
    write_json(&run.metrics(), &report)?;
    println!("{}", format_table(&[(cfg.model.mechanism.to_string(), report)]));
    Ok(())
}

fn check_same_run(run: &RunDir, resolved: &str, info: &RunInfo) -> CliResult<()> {
    let saved = fs::read_to_string(run.config())?;
    if saved != resolved {
        return Err(CliError::user(format!(
            "config differs from the one recorded in {}; refusing to resume",
            run.config().display()
        )));
    }
    let saved: RunInfo = serde_json::from_slice(&fs::read(run.info())?)?;
    if saved.dataset_sha256 != info.dataset_sha256 {
        return Err(CliError::user("dataset changed since the run started; refusing to resume"));
    }
    Ok(())
}

fn rewrite_log(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let mut text = Vec::new();
    for r in history {
        serde_json::to_writer(&mut text, r)?;
        text.push(b'\n');
    }
    write_atomic(path, &text)
}

fn append_log(path: &Path, rec: &EpochRecord) -> CliResult<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    let mut line = serde_json::to_vec(rec)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

fn load_model(checkpoint: &Path, dataset: Option<&PathBuf>) -> CliResult<(Model, DatasetFile)> {
    if !checkpoint.is_file() {
        return Err(CliError::user(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let path = match (dataset, &ck.dataset) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(CliError::user("checkpoint records no dataset; pass --dataset")),
    };
    let (ds, _) = DatasetFile::load(&path)?;
    let model: Model = ck.to_model()?;
    if model.num_items() != ds.split.num_items {
        return Err(CliError::user(format!(
            "checkpoint has {} items but {} has {}",
            model.num_items(),
            path.display(),
            ds.split.num_items
        )));
    }
    Ok((model, ds))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let (model, ds) = load_model(&a.checkpoint, a.dataset.as_ref())?;
    let target: Target = a.split.into();
    let report = evaluate(&model, &ds.split, target, &a.topn, a.mode, a.seed)?;
    let out = a.output.clone().unwrap_or_else(|| {
        let name = match target {
            Target::Valid => "metrics-valid.json",
            Target::Test => "metrics-test.json",
        };
        a.checkpoint.with_file_name(name)
    });
    write_json(&out, &report)?;
    let label = model.config().mechanism.to_string();
    println!("{}", format_table(&[(label, report)]));
    info!("metrics written to {}", out.display());
    Ok(())
}

pub fn export_attention(a: &ExportArgs) -> CliResult<()> {
    let (model, ds) = load_model(&a.checkpoint, a.dataset.as_ref())?;
    let user = ds
        .split
        .user_index(&a.user)
        .ok_or_else(|| CliError::user(format!("user `{}` is not in the dataset", a.user)))?;
    let history = ds.split.history(user, Target::Test);
    if history.len() < a.last {
        warn!("user `{}` has {} items; the first rows are padding", a.user, history.len());
    }
    let record = seqrec::export::attention_block(&model, &history, a.layer, a.head, a.last)?;
    for p in seqrec::export::write_record(&a.output, &record)? {
        println!("{}", p.display());
    }
    let shown = &history[history.len().saturating_sub(a.last)..];
    let items: Vec<&str> = shown.iter().map(|&i| ds.items[i - 1].as_str()).collect();
    write_json(&a.output.join("items.json"), &items)?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let opts = SuiteOptions {
        tamper_gradient: a.tamper_gradient,
        only: a.only.clone(),
        work_dir: None,
    };
    let results = run_suite(&opts, |r| println!("{r}"));
    if results.is_empty() {
        return Err(CliError::user("no criteria selected"));
    }
    if let Some(path) = &a.report {
        write_json(path, &results)?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Internal(format!("acceptance criteria failed: {}", failed.join(", "))))
    }
}

pub fn table(a: &TableArgs) -> CliResult<()> {
    if !a.label.is_empty() && a.label.len() != a.metrics.len() {
        return Err(CliError::user("give one --label per metrics file"));
    }
    let mut rows = Vec::new();
    for (i, path) in a.metrics.iter().enumerate() {
        let bytes = fs::read(path).map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))?;
        let report: MetricsReport = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::user(format!("{}: not a metrics file: {e}", path.display())))?;
        let label = a.label.get(i).cloned().unwrap_or_else(|| default_label(path));
        rows.push((label, report));
    }
    println!("{}", format_table(&rows));
    Ok(())
}

/// `runs/simp/metrics.json` -> `simp`; `x/foo.json` -> `foo`.
fn default_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(default_label(Path::new("runs/simp/metrics.json")), "simp");
        assert_eq!(default_label(Path::new("a/b.json")), "b");
    }
}
