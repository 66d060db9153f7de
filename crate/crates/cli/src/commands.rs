//! Command implementations. Each command reads the config, loads its
//! inputs (recording their digests), writes its artifacts to the output
//! directory and merges its results into the manifest there.

use std::path::{Path, PathBuf};

use oe_forge_core::embedstore::{self, l2_normalize};
use oe_forge_core::outlier_pipeline::{
    exclude_labels, inject_noise, mahalanobis_filter, rank_window_filter, synthesize_virtual_outliers,
};
use oe_forge_core::rng::derive_seed;
use oe_forge_core::scoring_eval::{evaluate, score_set};
use oe_forge_core::trainer::train;
use oe_forge_core::{
    ClassStats, DetectionReport, Direction, EmbeddingSet, FilterConfig, LabelSpace, LinearHead, OutlierSet,
    Provenance, ScoreKind, TrainConfig, TrainRecord,
};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::{sha256_hex, Manifest};

pub const STATS_FILE: &str = "stats.emb";
pub const OUTLIERS_FILE: &str = "outliers.emb";
pub const VIRTUAL_FILE: &str = "virtual.emb";
pub const NOISY_FILE: &str = "outliers_noisy.emb";
pub const HEAD_FILE: &str = "head.emb";

pub const SWEEP_PARAMS: &[&str] = &["k", "delta", "p", "lambda", "noise_variance", "T"];

/// Default number of draws and survivors per class for virtual synthesis.
const VIRTUAL_SAMPLES: usize = 1000;
const VIRTUAL_KEEP: usize = 10;

/// One command invocation: config, output directory and its manifest.
pub struct Run {
    pub cfg: Config,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(cfg: Config, out: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| CliError::output(&out, e))?;
        let mut manifest = Manifest::open(&out)?;
        manifest.set("config", json!(cfg.snapshot()));
        manifest.record_seed("master", cfg.seed()?);
        Ok(Run { cfg, out, manifest })
    }

    fn seed(&mut self, label: &str) -> Result<u64, CliError> {
        let s = derive_seed(self.cfg.seed()?, label);
        self.manifest.record_seed(label, s);
        Ok(s)
    }

    /// Reads a file and records its digest under `role`. The manifest keeps
    /// the path as written, never the resolved one.
    fn digest(&mut self, role: &str, written: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::config(format!("cannot read {role} file '{written}': {e}")))?;
        self.manifest.record_input(role, written, sha256_hex(&bytes));
        let meta = embedstore::meta_path(path);
        if let Ok(side) = std::fs::read(&meta) {
            self.manifest.record_input(&format!("{role}.meta"), &format!("{written}.meta.jsonl"), sha256_hex(&side));
        }
        Ok(())
    }

    fn normalize(&self) -> Result<bool, CliError> {
        self.cfg.get_or("data", "normalize", true)
    }

    /// Loads an embedding file named by `[section] key`.
    fn load_set(&mut self, section: &str, key: &str, role: &str) -> Result<EmbeddingSet, CliError> {
        let written = self.cfg.require(section, key)?.to_string();
        self.load_path(role, &written)
    }

    fn load_path(&mut self, role: &str, written: &str) -> Result<EmbeddingSet, CliError> {
        let path = self.cfg.path(written);
        self.digest(role, written, &path)?;
        let set = embedstore::load(&path)?;
        Ok(if self.normalize()? && !set.is_empty() { l2_normalize(&set)? } else { set })
    }

    /// Loads an artifact produced by an earlier command into this output
    /// directory (recorded relative to it).
    fn load_artifact(&mut self, role: &str, file: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(file);
        if !path.exists() {
            return Err(CliError::config(format!("{role} artifact '{file}' not found in the output directory")));
        }
        self.digest(role, file, &path)?;
        Ok(path)
    }

    pub fn labels(&mut self) -> Result<LabelSpace, CliError> {
        if let Some(file) = self.cfg.raw("data", "classes_file").map(str::to_string) {
            let path = self.cfg.path(&file);
            self.digest("classes_file", &file, &path)?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::config(format!("cannot read classes_file '{file}': {e}")))?;
            return Ok(LabelSpace::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))?);
        }
        let names = self.cfg.list("data", "classes");
        if names.is_empty() {
            return Err(CliError::config("missing required key 'data.classes' (or 'data.classes_file')"));
        }
        Ok(LabelSpace::new(names)?)
    }

    fn save_set(&self, set: &EmbeddingSet, file: &str) -> Result<(), CliError> {
        Ok(embedstore::save(set, self.out.join(file))?)
    }

    fn write(&self, file: &str, text: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.out.join(file);
        std::fs::write(&p, text).map_err(|e| CliError::output(&p, e))
    }

    pub fn finish(self) -> Result<(), CliError> {
        self.manifest.save()
    }
}

fn stats_summary(stats: &ClassStats) -> Value {
    json!({
        "classes": stats.num_classes(),
        "dim": stats.dim(),
        "total_count": stats.total_count(),
        "per_class_counts": stats.per_class_counts(),
        "shrinkage": stats.shrinkage(),
        "log_det": stats.log_det(),
    })
}

fn fit_stats(run: &mut Run) -> Result<ClassStats, CliError> {
    let space = run.labels()?;
    let id = run.load_set("data", "id_train", "id_train")?;
    id.check_labels(&space)?;
    Ok(ClassStats::fit(&id, &space)?)
}

pub fn cmd_stats(run: &mut Run) -> Result<ClassStats, CliError> {
    let stats = fit_stats(run)?;
    stats.save(run.out.join(STATS_FILE))?;
    run.manifest.record_command("stats", stats_summary(&stats));
    Ok(stats)
}

fn filter_config(cfg: &Config) -> Result<FilterConfig, CliError> {
    let d = FilterConfig::default();
    let direction: Direction = cfg.get_or("filter", "direction", d.direction)?;
    let fc = FilterConfig {
        k: cfg.get_or("filter", "k", d.k)?,
        delta: cfg.get_or("filter", "delta", d.delta)?,
        p: cfg.get_or("filter", "p", d.p)?,
        direction,
        noise_variance: cfg.get_or("filter", "noise_variance", d.noise_variance)?,
    };
    fc.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(fc)
}

/// `[filter] stats` if given, otherwise statistics fitted from `id_train`.
fn filter_stats(run: &mut Run) -> Result<ClassStats, CliError> {
    match run.cfg.raw("filter", "stats").map(str::to_string) {
        Some(written) => {
            let path = run.cfg.path(&written);
            run.digest("stats", &written, &path)?;
            Ok(ClassStats::load(&path)?)
        }
        None => fit_stats(run),
    }
}

pub const FILTER_KINDS: &[&str] = &["rank-window", "mahalanobis", "exclude-labels"];

/// Runs the `[filter] kind` chain (comma-separated, default `mahalanobis`)
/// over the candidates and writes the surviving outliers.
pub fn cmd_filter(run: &mut Run) -> Result<OutlierSet, CliError> {
    let mut kinds = run.cfg.list("filter", "kind");
    if kinds.is_empty() {
        kinds.push("mahalanobis".into());
    }
    if let Some(bad) = kinds.iter().find(|k| !FILTER_KINDS.contains(&k.as_str())) {
        return Err(CliError::config(format!(
            "unknown filter kind '{bad}' (expected one of {})",
            FILTER_KINDS.join(", ")
        )));
    }
    let fc = filter_config(&run.cfg)?;
    let candidates = run.load_set("data", "candidates", "candidates")?;

    let mut current: Option<OutlierSet> = None;
    for kind in &kinds {
        let input = current.as_ref().map_or(&candidates, |o| &o.embeddings).clone();
        let step = match kind.as_str() {
            "rank-window" => {
                let id = run.load_set("data", "id_train", "id_train")?;
                rank_window_filter(&input, &id, &fc)?
            }
            "mahalanobis" => {
                let stats = filter_stats(run)?;
                mahalanobis_filter(&input, &stats, &fc)?
            }
            _ => {
                let space = run.labels()?;
                exclude_labels(&input, &space)?
            }
        };
        current = Some(match current {
            None => step,
            Some(prev) => prev.then(|_| Ok(step))?,
        });
    }
    let out = current.expect("at least one filter");
    run.save_set(&out.embeddings, OUTLIERS_FILE)?;
    run.manifest.record_command(
        "filter",
        json!({
            "kinds": kinds,
            "provenance": out.provenance,
            "rows": out.len(),
            "trail": out.trail,
        }),
    );
    Ok(out)
}

pub fn cmd_synth(run: &mut Run) -> Result<OutlierSet, CliError> {
    let stats = filter_stats(run)?;
    let t = run.cfg.get_or("filter", "virtual_samples", VIRTUAL_SAMPLES)?;
    let m = run.cfg.get_or("filter", "virtual_keep", VIRTUAL_KEEP)?;
    let seed = run.seed("synthesis")?;
    let out = synthesize_virtual_outliers(&stats, t, m, seed)?;
    run.save_set(&out.embeddings, VIRTUAL_FILE)?;
    run.manifest.record_command("synth", json!({ "rows": out.len(), "trail": out.trail }));
    Ok(out)
}

/// The training outliers named by `[train] outliers`: `filtered` (default)
/// or `virtual` for this directory's artifacts, `none`, or a file path.
fn training_outliers(run: &mut Run) -> Result<OutlierSet, CliError> {
    let choice = run.cfg.raw("train", "outliers").unwrap_or("filtered").to_string();
    let (set, provenance) = match choice.as_str() {
        "none" => return Ok(OutlierSet::raw(EmbeddingSet::empty(1)?, Provenance::Auxiliary)),
        "filtered" => (embedstore::load(run.load_artifact("outliers", OUTLIERS_FILE)?)?, Provenance::Caption),
        "virtual" => (embedstore::load(run.load_artifact("outliers", VIRTUAL_FILE)?)?, Provenance::Virtual),
        path => (run.load_path("outliers", path)?, Provenance::Auxiliary),
    };
    Ok(OutlierSet::raw(set, provenance))
}

pub fn cmd_noise(run: &mut Run) -> Result<EmbeddingSet, CliError> {
    let outliers = training_outliers(run)?;
    let variance = filter_config(&run.cfg)?.noise_variance;
    let seed = run.seed("noise")?;
    let noisy = inject_noise(&outliers.embeddings, variance, seed)?;
    run.save_set(&noisy, NOISY_FILE)?;
    run.manifest.record_command("noise", json!({ "rows": noisy.count(), "variance": variance }));
    Ok(noisy)
}

fn parse_betas(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(CliError::config(format!("bad value for 'train.betas': '{s}'"))),
        },
        _ => Err(CliError::config(format!("'train.betas' needs two comma-separated numbers, got '{s}'"))),
    }
}

fn train_config(run: &mut Run) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let cfg = &run.cfg;
    let adam_betas = match cfg.raw("train", "betas") {
        Some(s) => parse_betas(s)?,
        None => d.adam_betas,
    };
    let mut tc = TrainConfig {
        lambda: cfg.get_or("train", "lambda", d.lambda)?,
        epochs: cfg.get_or("train", "epochs", d.epochs)?,
        batch_id: cfg.get_or("train", "batch_id", d.batch_id)?,
        batch_oe: cfg.get_or("train", "batch_oe", d.batch_oe)?,
        lr: cfg.get_or("train", "lr", d.lr)?,
        adam_betas,
        adam_eps: cfg.get_or("train", "eps", d.adam_eps)?,
        seed: 0,
        noise_variance: cfg.get_or("train", "noise_variance", d.noise_variance)?,
        shuffle: cfg.get_or("train", "shuffle", d.shuffle)?,
    };
    tc.validate().map_err(|e| CliError::config(e.to_string()))?;
    tc.seed = run.seed("train")?;
    Ok(tc)
}

fn train_summary(rec: &TrainRecord, tc: &TrainConfig, outlier_rows: usize) -> Value {
    let last = rec.epochs.last();
    json!({
        "config": tc,
        "outlier_rows": outlier_rows,
        "epochs_run": rec.epochs.len(),
        "best_epoch": rec.best_epoch,
        "best_val_acc": rec.best_val_acc,
        "final_ce_loss": last.map(|e| e.ce_loss),
        "final_oe_loss": last.map(|e| e.oe_loss),
    })
}

pub fn cmd_train(run: &mut Run) -> Result<(LinearHead, TrainRecord), CliError> {
    let space = run.labels()?;
    let id_train = run.load_set("data", "id_train", "id_train")?;
    let id_val = run.load_set("data", "id_val", "id_val")?;
    id_train.check_labels(&space)?;
    id_val.check_labels(&space)?;
    let mut outliers = training_outliers(run)?;
    if outliers.is_empty() {
        outliers = OutlierSet::raw(EmbeddingSet::empty(id_train.dim())?, outliers.provenance);
    }
    let tc = train_config(run)?;
    let init = LinearHead::init(space.len(), id_train.dim(), run.seed("init")?);
    let (head, rec) = train(&init, &id_train, &id_val, &outliers, &tc)?;
    head.save(run.out.join(HEAD_FILE), space.names())?;
    run.write("train_record.csv", rec.to_csv())?;
    run.write("train_record.json", serde_json::to_string_pretty(&rec).expect("record serializes") + "\n")?;
    run.manifest.record_command("train", train_summary(&rec, &tc, outliers.len()));
    Ok((head, rec))
}

pub fn reports_csv(reports: &[DetectionReport]) -> String {
    let mut s = String::from(DetectionReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn cmd_eval(run: &mut Run) -> Result<Vec<DetectionReport>, CliError> {
    let head_path = match run.cfg.raw("score", "head").map(str::to_string) {
        Some(written) => {
            let p = run.cfg.path(&written);
            run.digest("head", &written, &p)?;
            p
        }
        None => run.load_artifact("head", HEAD_FILE)?,
    };
    let head = LinearHead::load(&head_path)?;
    let kind: ScoreKind = run.cfg.get_or("score", "kind", ScoreKind::Energy)?;
    let temperature: f64 = run.cfg.get_or("score", "temperature", 1.0)?;
    let tpr: f64 = run.cfg.get_or("score", "tpr", 0.95)?;
    if !(temperature > 0.0) {
        return Err(CliError::config(format!("'score.temperature' must be > 0, got {temperature}")));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(CliError::config(format!("'score.tpr' must lie in (0, 1], got {tpr}")));
    }
    let id_test = run.load_set("data", "id_test", "id_test")?;
    let entries = run.cfg.ood_sets();
    if entries.is_empty() {
        return Err(CliError::config("missing required key 'data.ood.<name>' (at least one OoD set)"));
    }
    let mut sets = Vec::with_capacity(entries.len());
    for (name, written) in entries {
        let set = run.load_path(&format!("ood.{name}"), &written)?;
        sets.push((name, set));
    }
    let reports = evaluate(&head, &id_test, &sets, kind, temperature, tpr)?;
    run.write("report.csv", reports_csv(&reports))?;
    run.write("report.json", serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n")?;
    if run.cfg.get_or("score", "dump_scores", false)? {
        let mut s = String::from("set,row,score\n");
        let mut dump = |name: &str, set: &EmbeddingSet| -> Result<(), CliError> {
            for (i, v) in score_set(&head, set, kind, temperature)?.into_iter().enumerate() {
                s.push_str(&format!("{name},{i},{v}\n"));
            }
            Ok(())
        };
        dump("id_test", &id_test)?;
        for (name, set) in &sets {
            dump(name, set)?;
        }
        run.write("scores.csv", s)?;
    }
    run.manifest.record_command(
        "eval",
        json!({ "score_kind": kind.to_string(), "temperature": temperature, "tpr": tpr, "reports": reports }),
    );
    Ok(reports)
}

/// filter, train, eval in one directory. Training without OE (`outliers =
/// none`) skips the filter.
pub fn pipeline(run: &mut Run) -> Result<Vec<DetectionReport>, CliError> {
    match run.cfg.raw("train", "outliers").unwrap_or("filtered") {
        "filtered" => {
            cmd_filter(run)?;
        }
        "virtual" => {
            cmd_synth(run)?;
        }
        _ => {}
    }
    cmd_train(run)?;
    cmd_eval(run)
}

fn sweep_key(param: &str) -> (&'static str, &'static str) {
    match param {
        "k" => ("filter", "k"),
        "delta" => ("filter", "delta"),
        "p" => ("filter", "p"),
        "lambda" => ("train", "lambda"),
        "noise_variance" => ("train", "noise_variance"),
        _ => ("score", "temperature"),
    }
}

pub const SWEEP_HEADER: &str = "param,value,seed,ood_set,score_kind,fpr95,auroc,id_acc,gamma";

/// Runs [`pipeline`] once per value in `<out>/sweep/<param>=<value>/`,
/// all with the same master seed, and writes `sweep.csv` sorted by value.
/// The row per value is the report's last line (the average when there
/// are several OoD sets).
pub fn cmd_sweep(run: &mut Run, param: Option<String>, values: Option<String>) -> Result<String, CliError> {
    let param = match param {
        Some(p) => p,
        None => run.cfg.require("sweep", "param")?.to_string(),
    };
    if !SWEEP_PARAMS.contains(&param.as_str()) {
        return Err(CliError::config(format!(
            "unknown sweep param '{param}' (expected one of {})",
            SWEEP_PARAMS.join(", ")
        )));
    }
    let raw: Vec<String> = match values {
        Some(v) => v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect(),
        None => run.cfg.list("sweep", "values"),
    };
    if raw.is_empty() {
        return Err(CliError::config("missing required key 'sweep.values'"));
    }
    let mut values: Vec<(f64, String)> = raw
        .into_iter()
        .map(|s| {
            s.parse::<f64>()
                .map(|v| (v, s.clone()))
                .map_err(|_| CliError::config(format!("sweep value '{s}' is not a number")))
        })
        .collect::<Result<_, _>>()?;
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    values.dedup_by(|a, b| a.0 == b.0);

    let seed = run.cfg.seed()?;
    let (section, key) = sweep_key(&param);
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut rows = Vec::new();
    for (_, text) in &values {
        let mut cfg = run.cfg.clone();
        cfg.set(section, key, text.clone());
        let dir = run.out.join("sweep").join(format!("{param}={text}"));
        let mut sub = Run::new(cfg, dir)?;
        let reports = pipeline(&mut sub)?;
        sub.finish()?;
        let r = reports.last().expect("at least one report");
        csv.push_str(&format!("{param},{text},{seed},{}\n", r.csv_row()));
        rows.push(json!({ "value": text, "seed": seed, "report": r }));
    }
    run.write("sweep.csv", &csv)?;
    run.manifest.record_command("sweep", json!({ "param": param, "rows": rows }));
    Ok(csv)
}
