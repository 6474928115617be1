//! Sweep execution: one cell per (mean skill, seed), every method run on the
//! identical annotation table, evaluated on a clean held-out test set.
//! Results land in an append-only manifest (the source of truth for
//! `--resume`) and are rendered to deterministic CSV tables at the end.
//!
//! Cells are independent, so the layout is parallel-friendly: each cell
//! writes only under its own directory, and the manifest has a single
//! writer. This runner executes them sequentially.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotator_sim::{
    AnnotationTable, AnnotatorKind, AnnotatorPopulation, ConfusionMatrix,
};
use crate::cli_runner::config::{
    DatasetSpec, ExperimentConfig, IdxSpec, Method, PopulationSpec,
};
use crate::datasets::{gen_blobs, load_idx_pair, save_annotations, BlobConfig, LabeledDataset};
use crate::em_baselines::{
    annotate_rounds, run_generalized_em, run_majority_vote, run_mbem, save_em_history_csv,
    EmConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::noisy_model::save_checkpoint;
use crate::numkit::RngState;
use crate::trainer::{build_report, save_history_csv, to_noisy_model, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Skipped because the cell's wall-clock budget was already spent.
    Capped,
    Error,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Capped => "capped",
            RunStatus::Error => "error",
        })
    }
}

impl std::str::FromStr for RunStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(RunStatus::Ok),
            "capped" => Ok(RunStatus::Capped),
            "error" => Ok(RunStatus::Error),
            other => Err(Error::Format(format!("unknown run status `{other}`"))),
        }
    }
}

/// One (method, mean skill, seed) cell outcome. `seconds` is kept out of
/// results.csv (it lives in timings.csv) so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub mean_p: f64,
    pub k: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub cm_error: Option<f64>,
    /// Whether the population's mean confusion matrix is diagonally
    /// dominant — a property of the cell, shared by all its methods.
    pub dominant: bool,
    pub seconds: f64,
    pub status: RunStatus,
    /// Failure detail for `status == Error`; recorded in the manifest only.
    pub message: Option<String>,
    /// Gradient-update count for the budget-parity check.
    pub grad_updates: Option<u64>,
    /// Hash of the annotation table every method in the cell consumed.
    pub table_hash: u64,
    /// Hash of the config fields that determine this row's content; resume
    /// refuses rows recorded under a different value.
    pub config_hash: u64,
}

/// FNV-1a over the table's shape and labels; missing entries hash as 0 and
/// label c as c+1.
pub fn table_hash(table: &AnnotationTable) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(table.num_examples() as u64);
    eat(table.num_annotators() as u64);
    eat(table.num_classes() as u64);
    for n in 0..table.num_examples() {
        for &slot in table.row(n) {
            eat(match slot {
                Some(label) => label as u64 + 1,
                None => 0,
            });
        }
    }
    h
}

/// FNV-1a over the canonical JSON of the config fields that determine a
/// row's content: dataset, population, labels_per_example, train (seed
/// zeroed — every cell overrides it), and the EM schedule. Methods and seeds
/// key the rows themselves, and output/time-limit settings never change what
/// a finished row holds, so none of those invalidate a resume.
pub fn semantic_config_hash(config: &ExperimentConfig) -> Result<u64> {
    let mut train = config.train.clone();
    train.seed = 0;
    let canon = serde_json::to_string(&(
        &config.dataset,
        &config.population,
        config.labels_per_example,
        &train,
        &config.em,
    ))
    .map_err(|e| Error::Format(format!("config hash serialization: {e}")))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canon.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(h)
}

/// Everything a cell's methods share.
struct CellData {
    train: LabeledDataset,
    test: LabeledDataset,
    population: AnnotatorPopulation,
    table: AnnotationTable,
    mean_p: f64,
    dominant: bool,
}

fn load_idx_datasets(spec: &IdxSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_idx_pair(&spec.train_images, &spec.train_labels)?;
    let test = load_idx_pair(&spec.test_images, &spec.test_labels)?;
    if train.num_classes() != test.num_classes() {
        return Err(Error::Format(format!(
            "train split has {} classes but test split has {}",
            train.num_classes(),
            test.num_classes()
        )));
    }
    let take = |d: LabeledDataset, n: Option<usize>| -> Result<LabeledDataset> {
        match n {
            Some(n) => d.subset(&(0..n.min(d.len())).collect::<Vec<_>>()),
            None => Ok(d),
        }
    };
    Ok((take(train, spec.train_subset)?, take(test, spec.test_subset)?))
}

/// Builds the cell's data. The seed drives the dataset draw (blobs), the
/// population draw, and the annotation assignment through independent
/// substreams; `point` is the mean-skill sweep value (None for explicit
/// populations, whose skill is computed from the loaded matrices).
fn build_cell(
    config: &ExperimentConfig,
    idx: Option<&(LabeledDataset, LabeledDataset)>,
    point: Option<f64>,
    seed: u64,
) -> Result<CellData> {
    let (train, test) = match (&config.dataset, idx) {
        (DatasetSpec::Blobs(spec), _) => {
            let all = gen_blobs(&BlobConfig {
                num_classes: spec.num_classes,
                dim: spec.dim,
                separation: spec.separation,
                std: spec.std,
                examples_per_class: spec.train_per_class + spec.test_per_class,
                seed,
            })?;
            // Generation interleaves classes, so the first train_per_class
            // repetitions are an exactly balanced training pool.
            let n_train = spec.train_per_class * spec.num_classes;
            let train = all.subset(&(0..n_train).collect::<Vec<_>>())?;
            let test = all.subset(&(n_train..all.len()).collect::<Vec<_>>())?;
            (train, test)
        }
        (DatasetSpec::Idx(_), Some((train, test))) => (train.clone(), test.clone()),
        (DatasetSpec::Idx(spec), None) => load_idx_datasets(spec)?,
    };
    let l = train.num_classes();
    let population = match &config.population {
        PopulationSpec::PairwiseFlipper {
            num_annotators,
            skill_noise_std,
            ..
        } => AnnotatorPopulation::make_population(
            AnnotatorKind::PairwiseFlipper,
            l,
            point.expect("parametric population has a sweep point"),
            *num_annotators,
            *skill_noise_std,
            &mut RngState::new(seed).substream("population"),
        )?,
        PopulationSpec::HammerSpammer {
            num_annotators,
            skill_noise_std,
            ..
        } => AnnotatorPopulation::make_population(
            AnnotatorKind::HammerSpammer,
            l,
            point.expect("parametric population has a sweep point"),
            *num_annotators,
            *skill_noise_std,
            &mut RngState::new(seed).substream("population"),
        )?,
        PopulationSpec::Explicit { files } => {
            let cms = files
                .iter()
                .map(|p| ConfusionMatrix::load_csv(p))
                .collect::<Result<Vec<_>>>()?;
            if let Some(bad) = cms.iter().find(|c| c.num_classes() != l) {
                return Err(Error::Config(format!(
                    "explicit matrix has {} classes, dataset has {l}",
                    bad.num_classes()
                )));
            }
            AnnotatorPopulation::from_explicit(cms)?
        }
    };
    let table = population.annotate(
        train.labels(),
        config.labels_per_example,
        &mut RngState::new(seed).substream("annotate"),
    )?;
    let mean_cm = population.mean_cm();
    let mean_p = point.unwrap_or_else(|| metrics::skill_level(&mean_cm));
    let dominant = mean_cm.is_diagonally_dominant();
    Ok(CellData {
        train,
        test,
        population,
        table,
        mean_p,
        dominant,
    })
}

/// Runs one method on the cell and writes its artifacts (history CSV,
/// learned CM CSVs, evaluation report, and a checkpoint for methods with raw
/// confusion parameters) under `cell_dir/<method>/`.
fn execute_method(
    config: &ExperimentConfig,
    method: Method,
    cell: &CellData,
    cell_dir: &Path,
    seed: u64,
) -> Result<(EvalReport, u64)> {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let truths = Some(cell.population.annotators());
    let model = match method {
        Method::Ours => train(&train_cfg, &cell.train, &cell.table, truths)?,
        Method::OursNoTrace => {
            let mut cfg = train_cfg.clone();
            cfg.lambda = 0.0;
            train(&cfg, &cell.train, &cell.table, truths)?
        }
        Method::Gem | Method::Mbem => {
            let em = config.em.expect("validated: em schedule present");
            let em_cfg = EmConfig {
                rounds: em.rounds,
                epochs_per_round: em.epochs_per_round,
                base: train_cfg.clone(),
            };
            if method == Method::Gem {
                run_generalized_em(&em_cfg, &cell.train, &cell.table, truths)?
            } else {
                run_mbem(&em_cfg, &cell.train, &cell.table, truths)?
            }
        }
        Method::VanillaMv => run_majority_vote(&train_cfg, &cell.train, &cell.table, truths)?,
    };

    let dir = cell_dir.join(method.as_str());
    std::fs::create_dir_all(&dir)?;
    match (method, config.em) {
        (Method::Gem | Method::Mbem, Some(em)) => save_em_history_csv(
            &annotate_rounds(&model.history, em.epochs_per_round),
            &dir.join("history.csv"),
        )?,
        _ => save_history_csv(&model.history, &dir.join("history.csv"))?,
    }
    let cms_dir = dir.join("cms");
    std::fs::create_dir_all(&cms_dir)?;
    for (r, cm) in model.cms.iter().enumerate() {
        cm.save_csv(&cms_dir.join(format!("annotator_{r}.csv")))?;
    }
    if let Some(noisy) = to_noisy_model(&model) {
        save_checkpoint(&dir.join("checkpoint.json"), &noisy, seed)?;
    }
    let report = build_report(&model, &cell.population, &cell.test, seed)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    Ok((report, model.grad_updates))
}

fn method_row(
    config: &ExperimentConfig,
    method: Method,
    cell: &CellData,
    cell_dir: &Path,
    seed: u64,
    hash: u64,
    cfg_hash: u64,
) -> ResultRow {
    let started = Instant::now();
    let base = ResultRow {
        method,
        mean_p: cell.mean_p,
        k: config.labels_per_example,
        seed,
        accuracy: None,
        cm_error: None,
        dominant: cell.dominant,
        seconds: 0.0,
        status: RunStatus::Error,
        message: None,
        grad_updates: None,
        table_hash: hash,
        config_hash: cfg_hash,
    };
    match execute_method(config, method, cell, cell_dir, seed) {
        Ok((report, grad_updates)) => ResultRow {
            accuracy: Some(report.accuracy),
            cm_error: Some(report.cm_error),
            seconds: started.elapsed().as_secs_f64(),
            status: RunStatus::Ok,
            grad_updates: Some(grad_updates),
            ..base
        },
        Err(e) => ResultRow {
            seconds: started.elapsed().as_secs_f64(),
            message: Some(e.to_string()),
            ..base
        },
    }
}

fn append_manifest(path: &Path, row: &ResultRow) -> Result<()> {
    let line = serde_json::to_string(row)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(lineno, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{}: line {}: {e}", path.display(), lineno + 1))
            })
        })
        .collect()
}

type DoneKey = (Method, u64, u64);

fn done_key(row: &ResultRow) -> DoneKey {
    (row.method, row.mean_p.to_bits(), row.seed)
}

fn run_cell(
    config: &ExperimentConfig,
    out: &Path,
    done: &HashMap<DoneKey, ResultRow>,
    manifest_path: &Path,
    idx: Option<&(LabeledDataset, LabeledDataset)>,
    point: Option<f64>,
    seed: u64,
    cfg_hash: u64,
) -> Result<Vec<ResultRow>> {
    let cell = build_cell(config, idx, point, seed)?;
    let hash = table_hash(&cell.table);
    let cell_dir = out.join("cells").join(format!("p{}_s{}", cell.mean_p, seed));
    std::fs::create_dir_all(&cell_dir)?;
    let ann_path = cell_dir.join("annotations.csv");
    if !ann_path.exists() {
        save_annotations(&cell.table, &ann_path)?;
    }
    let true_dir = cell_dir.join("true_cms");
    std::fs::create_dir_all(&true_dir)?;
    for (r, cm) in cell.population.annotators().iter().enumerate() {
        let path = true_dir.join(format!("annotator_{r}.csv"));
        if !path.exists() {
            cm.save_csv(&path)?;
        }
    }

    let started = Instant::now();
    let mut rows = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        if let Some(prev) = done.get(&(method, cell.mean_p.to_bits(), seed)) {
            if prev.config_hash != cfg_hash {
                return Err(Error::invalid(format!(
                    "resume: the manifest row for {method} in cell p{}_s{seed} was \
                     recorded under a different config; rerun without --resume or \
                     into a fresh output directory",
                    cell.mean_p
                )));
            }
            if prev.table_hash != hash {
                return Err(Error::invalid(format!(
                    "resume: cell p{}_s{seed} now produces a different annotation table \
                     than the manifest recorded; the config or data changed, so delete \
                     the output directory and rerun",
                    cell.mean_p
                )));
            }
            rows.push(prev.clone());
            continue;
        }
        let row = if started.elapsed().as_secs_f64() > config.cell_time_limit_secs {
            ResultRow {
                method,
                mean_p: cell.mean_p,
                k: config.labels_per_example,
                seed,
                accuracy: None,
                cm_error: None,
                dominant: cell.dominant,
                seconds: 0.0,
                status: RunStatus::Capped,
                message: Some("cell wall-clock budget exhausted".to_string()),
                grad_updates: None,
                table_hash: hash,
                config_hash: cfg_hash,
            }
        } else {
            method_row(config, method, &cell, &cell_dir, seed, hash, cfg_hash)
        };
        if table_hash(&cell.table) != hash {
            return Err(Error::invalid(format!(
                "annotation table mutated while running {method} in cell p{}_s{seed}",
                cell.mean_p
            )));
        }
        append_manifest(manifest_path, &row)?;
        rows.push(row);
    }

    // Budget parity: every successfully trained method must have spent the
    // same number of gradient updates on this cell.
    let updates: Vec<u64> = rows
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .filter_map(|r| r.grad_updates)
        .collect();
    if updates.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::invalid(format!(
            "budget parity violated in cell p{}_s{seed}: gradient updates {updates:?}",
            cell.mean_p
        )));
    }
    Ok(rows)
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// results.csv: the sweep table, deterministic across reruns (no timings).
pub fn save_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "method,mean_p,k,seed,accuracy,cm_error,dominant,status").expect("string write");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.method,
            row.mean_p,
            row.k,
            row.seed,
            format_opt(row.accuracy),
            format_opt(row.cm_error),
            row.dominant,
            row.status
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Wall-clock per cell-method, split out of results.csv so those stay
/// byte-identical across reruns.
pub fn save_timings_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "method,mean_p,k,seed,seconds").expect("string write");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.method, row.mean_p, row.k, row.seed, row.seconds
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads results.csv back into rows (manifest-only fields are defaulted).
pub fn load_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    if header != "method,mean_p,k,seed,accuracy,cm_error,dominant,status" {
        return Err(Error::Format(format!(
            "{}: unexpected header `{header}`",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 8 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str, e: String| {
            Error::Format(format!("{}: line {}: {what}: {e}", path.display(), lineno + 1))
        };
        let parse_opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| bad(what, e.to_string()))
            }
        };
        rows.push(ResultRow {
            method: fields[0].parse()?,
            mean_p: fields[1].parse().map_err(|e: std::num::ParseFloatError| {
                bad("mean_p", e.to_string())
            })?,
            k: fields[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad("k", e.to_string()))?,
            seed: fields[3]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad("seed", e.to_string()))?,
            accuracy: parse_opt(fields[4], "accuracy")?,
            cm_error: parse_opt(fields[5], "cm_error")?,
            dominant: fields[6]
                .parse()
                .map_err(|e: std::str::ParseBoolError| bad("dominant", e.to_string()))?,
            seconds: 0.0,
            status: fields[7].parse()?,
            message: None,
            grad_updates: None,
            table_hash: 0,
            config_hash: 0,
        });
    }
    Ok(rows)
}

/// Runs the full sweep. With `resume`, finished rows in the manifest are
/// reused after checking they were recorded under the same config and
/// annotation table; capped or failed attempts are retried. Without
/// `resume`, any previous manifest is discarded.
pub fn run_sweep(config: &ExperimentConfig, out: &Path, resume: bool) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let cfg_hash = semantic_config_hash(config)?;
    std::fs::create_dir_all(out.join("cells"))?;
    let manifest_path = out.join("manifest.jsonl");
    let mut done: HashMap<DoneKey, ResultRow> = HashMap::new();
    if resume {
        if manifest_path.exists() {
            for row in read_manifest(&manifest_path)? {
                if row.status == RunStatus::Ok {
                    done.insert(done_key(&row), row);
                }
            }
        }
    } else if manifest_path.exists() {
        std::fs::remove_file(&manifest_path)?;
    }

    let idx = match &config.dataset {
        DatasetSpec::Idx(spec) => Some(load_idx_datasets(spec)?),
        DatasetSpec::Blobs(_) => None,
    };
    let points: Vec<Option<f64>> = match config.population.mean_skills() {
        Some(skills) => skills.iter().map(|&p| Some(p)).collect(),
        None => vec![None],
    };

    let mut rows = Vec::new();
    for &point in &points {
        for &seed in &config.seeds {
            rows.extend(run_cell(
                config,
                out,
                &done,
                &manifest_path,
                idx.as_ref(),
                point,
                seed,
                cfg_hash,
            )?);
        }
    }
    save_results_csv(&rows, &out.join("results.csv"))?;
    save_timings_csv(&rows, &out.join("timings.csv"))?;
    Ok(rows)
}

fn save_ground_truth_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "example_id,label").expect("string write");
    for n in 0..dataset.len() {
        writeln!(out, "{n},{}", dataset.label(n)).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `simulate` verb: population and annotations only (plus features and
/// ground truth for synthetic data), using the first sweep point.
pub fn run_simulate(
    config: &ExperimentConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    config.validate()?;
    let seed = seed_override.unwrap_or(config.seeds[0]);
    let point = config.population.mean_skills().map(|s| s[0]);
    let cell = build_cell(config, None, point, seed)?;
    std::fs::create_dir_all(out)?;
    save_annotations(&cell.table, &out.join("annotations.csv"))?;
    save_ground_truth_csv(&cell.train, &out.join("ground_truth.csv"))?;
    if matches!(config.dataset, DatasetSpec::Blobs(_)) {
        cell.train.save_features_csv(&out.join("features.csv"))?;
    }
    let true_dir = out.join("true_cms");
    std::fs::create_dir_all(&true_dir)?;
    for (r, cm) in cell.population.annotators().iter().enumerate() {
        cm.save_csv(&true_dir.join(format!("annotator_{r}.csv")))?;
    }
    Ok(())
}

/// `train` verb: one method (the config must list exactly one) on one cell,
/// artifacts under `out/<method>/`. Returns the evaluation report.
pub fn run_train_single(
    config: &ExperimentConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<EvalReport> {
    config.validate()?;
    let method = match config.methods.as_slice() {
        [only] => *only,
        many => {
            return Err(Error::Config(format!(
                "train runs exactly one method; config lists {}",
                many.len()
            )));
        }
    };
    let seed = seed_override.unwrap_or(config.seeds[0]);
    let idx = match &config.dataset {
        DatasetSpec::Idx(spec) => Some(load_idx_datasets(spec)?),
        DatasetSpec::Blobs(_) => None,
    };
    let point = config.population.mean_skills().map(|s| s[0]);
    let cell = build_cell(config, idx.as_ref(), point, seed)?;
    std::fs::create_dir_all(out)?;
    let (report, _) = execute_method(config, method, &cell, out, seed)?;
    Ok(report)
}
