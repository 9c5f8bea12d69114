//! The five subcommands. Each returns its result so callers other than the
//! binary can inspect it, and writes its artifacts under `out_dir`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cenet_core::data::{augment_sorted, dataset_fingerprint};
use cenet_core::eval::{infer_query, top_k, Scratch};
use cenet_core::history::cache;
use cenet_core::{
    build_split_contexts, compute_stats, evaluate, train_stage2, Checkpoint, CheckpointMeta,
    ClassifierMetrics, DatasetStats, EpochLog, EvalOptions, FilterMode, Heads, HistoryIndex,
    HyperParams, InferenceConfig, KnownAnswers, MaskMode, ModelParams, QueryContext, RankReport,
    Split, SplitContexts, Stage1Trainer, TkgDataset, TrainSwitches,
};
use serde::Serialize;

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()
        .with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save(cfg.out_dir.join(format!("{command}.config.toml")))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TkgDataset> {
    TkgDataset::load(&cfg.data.dir, cfg.data.granularity)
        .with_context(|| format!("loading dataset from {}", cfg.data.dir.display()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Query contexts for every split, read from the cache when it matches the
/// dataset bytes and rebuilt (and cached) otherwise.
pub fn load_contexts(cfg: &RunConfig, ds: &TkgDataset) -> Result<SplitContexts> {
    if !cfg.cache.enabled {
        return Ok(build_split_contexts(ds)?);
    }
    let fp = dataset_fingerprint(&cfg.data.dir, cfg.data.granularity)?;
    let path = cfg
        .cache_dir()
        .join(format!("contexts-{}.bin", &hex(&fp)[..16]));
    match cache::load(&path, &fp) {
        Ok(Some(ctx)) => return Ok(ctx),
        Ok(None) => {}
        Err(e) => eprintln!(
            "warning: ignoring unreadable context cache {}: {e}",
            path.display()
        ),
    }
    let ctx = build_split_contexts(ds)?;
    if let Err(e) = cache::save(&path, &fp, &ctx) {
        eprintln!(
            "warning: could not write context cache {}: {e}",
            path.display()
        );
    }
    Ok(ctx)
}

// ---------------------------------------------------------------- stats

pub fn cmd_stats(cfg: &RunConfig) -> Result<DatasetStats> {
    prepare_out(cfg, "stats")?;
    let ds = load_dataset(cfg)?;
    let stats = compute_stats(&ds);
    write_json(&cfg.out_dir.join("stats.json"), &stats)?;
    Ok(stats)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint with optimizer state to continue stage 1 from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub stage1: Vec<EpochLog>,
    pub classifier: Option<ClassifierMetrics>,
}

fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("epoch-{epoch:04}.ckpt"))
}

fn meta(
    hp: &HyperParams,
    switches: TrainSwitches,
    num_relations_raw: usize,
    epochs_done: usize,
) -> CheckpointMeta {
    CheckpointMeta {
        hyperparams: hp.clone(),
        switches,
        num_relations_raw,
        stage1_epochs_done: epochs_done,
        adam: None,
    }
}

/// Errors unless `ckpt` was produced by a run with the same model settings.
fn check_resumable(
    ckpt: &Checkpoint,
    hp: &HyperParams,
    switches: TrainSwitches,
    ds: &TkgDataset,
) -> Result<()> {
    ckpt.check_vocab(ds.num_entities, ds.num_relations_total())
        .map_err(|e| anyhow!("incompatible checkpoint: {e}"))?;
    let saved = &ckpt.meta.hyperparams;
    let comparable = |h: &HyperParams| HyperParams {
        stage1_epochs: 0,
        stage2_epochs: 0,
        ..h.clone()
    };
    if comparable(saved) != comparable(hp) {
        bail!(
            "incompatible checkpoint: hyperparameters differ (checkpoint {saved:?}, config {hp:?})"
        );
    }
    if ckpt.meta.switches != switches {
        bail!(
            "incompatible checkpoint: trained with {:?}, config asks for {:?}",
            ckpt.meta.switches,
            switches
        );
    }
    if ckpt.meta.num_relations_raw != ds.num_relations_raw {
        bail!("incompatible checkpoint: relation vocabulary differs");
    }
    if ckpt.adam.is_none() {
        bail!(
            "incompatible checkpoint: no optimizer state saved, resume from a per-epoch checkpoint"
        );
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_out(cfg, "train")?;
    let hp = cfg.effective_hyperparams();
    let plan = cfg.ablation.map(|a| a.plan());
    let switches = plan.map_or_else(TrainSwitches::default, |p| p.switches);
    let run_stage2 = plan.is_none_or(|p| p.train_stage2);

    let ds = load_dataset(cfg)?;
    let ctx = load_contexts(cfg, &ds)?;

    let (mut params, mut trainer) = match &opts.resume {
        Some(path) => {
            let ckpt =
                Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            check_resumable(&ckpt, &hp, switches, &ds)?;
            let done = ckpt.meta.stage1_epochs_done;
            let adam = ckpt.adam.expect("checked above");
            let mut params = ckpt.params;
            params.classifier = None;
            (
                params,
                Stage1Trainer::resume(hp.clone(), switches, adam, done)?,
            )
        }
        None => (
            ModelParams::init(ds.num_entities, ds.num_relations_total(), hp.dim, hp.seed),
            Stage1Trainer::new(hp.clone(), switches)?,
        ),
    };

    let log_path = cfg.out_dir.join(TRAIN_LOG_FILE);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(opts.resume.is_some())
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);

    fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
    let mut stage1 = Vec::new();
    while trainer.epochs_done < hp.stage1_epochs {
        let entry = trainer.run_epoch(&ctx.train, &mut params)?;
        write_jsonl_line(&mut log, &entry)?;
        log.flush()?;
        let ckpt = Checkpoint {
            meta: meta(&hp, switches, ds.num_relations_raw, trainer.epochs_done),
            params: params.clone(),
            adam: Some(trainer.adam.clone()),
        };
        ckpt.save(epoch_checkpoint_path(&cfg.out_dir, trainer.epochs_done))?;
        eprintln!(
            "stage 1 epoch {}: ce {:.4} sup {:.4} combined {:.4} ({:.1}s)",
            entry.epoch, entry.ce, entry.sup, entry.combined, entry.wall_secs
        );
        stage1.push(entry);
    }

    let classifier = if run_stage2 {
        let metrics = train_stage2(&ctx.train, &ctx.valid, &mut params, &hp)?;
        for entry in &metrics.epochs {
            write_jsonl_line(&mut log, entry)?;
        }
        write_json(&cfg.out_dir.join("classifier.json"), &metrics)?;
        eprintln!(
            "stage 2: train accuracy {:.4}, majority baseline {:.4}",
            metrics.train_accuracy, metrics.majority_baseline
        );
        Some(metrics)
    } else {
        None
    };
    log.flush()?;

    let final_ckpt = Checkpoint {
        meta: meta(&hp, switches, ds.num_relations_raw, trainer.epochs_done),
        params,
        adam: None,
    };
    let path = cfg.out_dir.join(MODEL_FILE);
    final_ckpt.save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        stage1,
        classifier,
    })
}

// ---------------------------------------------------------------- shared inference setup

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.out_dir.join(MODEL_FILE), Path::to_path_buf)
}

fn load_checkpoint(path: &Path, ds: &TkgDataset) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.check_vocab(ds.num_entities, ds.num_relations_total())?;
    Ok(ckpt)
}

/// Inference settings: explicit overrides, then the ablation's mask, then
/// the config. A checkpoint trained with one head is scored with that head.
fn resolve_inference(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    mask: Option<MaskMode>,
    filter: Option<FilterMode>,
) -> InferenceConfig {
    let mut inf = cfg.inference.clone();
    if let Some(plan) = cfg.ablation.map(|a| a.plan()) {
        inf.mask_mode = plan.mask_mode;
    }
    if let Some(m) = mask {
        inf.mask_mode = m;
    }
    if let Some(f) = filter {
        inf.filter_mode = f;
    }
    if ckpt.meta.switches.heads != Heads::Both {
        inf.heads = ckpt.meta.switches.heads;
    }
    inf
}

fn require_classifier(mode: MaskMode, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if mode.needs_classifier() && ckpt.params.classifier.is_none() {
        bail!(
            "mask mode {mode:?} needs a trained classifier but {} has none (trained without stage 2); use --mask-mode none, random or ground-truth",
            path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub mask_mode: Option<MaskMode>,
    pub filter_mode: Option<FilterMode>,
    /// JSON-lines file receiving per-query ranks and top scores.
    pub dump_scores: Option<PathBuf>,
    pub dump_top_k: usize,
    /// Report file name inside the output directory.
    pub report_name: String,
}

impl Default for EvalRequest {
    fn default() -> Self {
        EvalRequest {
            checkpoint: None,
            split: Split::Test,
            mask_mode: None,
            filter_mode: None,
            dump_scores: None,
            dump_top_k: 10,
            report_name: "report.json".into(),
        }
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, req: &EvalRequest) -> Result<RankReport> {
    let ds = load_dataset(cfg)?;
    let ctx = load_contexts(cfg, &ds)?;
    evaluate_loaded(cfg, req, &ds, &ctx)
}

/// [`cmd_evaluate`] on an already loaded dataset.
pub fn evaluate_loaded(
    cfg: &RunConfig,
    req: &EvalRequest,
    ds: &TkgDataset,
    ctx: &SplitContexts,
) -> Result<RankReport> {
    prepare_out(cfg, "evaluate")?;
    let path = checkpoint_path(cfg, req.checkpoint.as_deref());
    let ckpt = load_checkpoint(&path, ds)?;
    let inf = resolve_inference(cfg, &ckpt, req.mask_mode, req.filter_mode);
    require_classifier(inf.mask_mode, &ckpt, &path)?;
    let known = KnownAnswers::for_dataset(ds, inf.filter_mode);
    let opts = EvalOptions {
        lambda: ckpt.meta.hyperparams.lambda,
        num_relations_raw: ds.num_relations_raw,
        dump_top_k: req.dump_scores.as_ref().map(|_| req.dump_top_k),
    };
    let contexts = ctx.get(req.split);
    if contexts.is_empty() {
        bail!("{} split is empty; nothing to evaluate", req.split.name());
    }
    let (report, dump) = evaluate(contexts, &ckpt.params, &inf, &known, &opts)?;
    write_json(&cfg.out_dir.join(&req.report_name), &report)?;
    if let Some(dump_path) = &req.dump_scores {
        let file =
            File::create(dump_path).with_context(|| format!("creating {}", dump_path.display()))?;
        let mut w = BufWriter::new(file);
        for line in &dump {
            write_jsonl_line(&mut w, line)?;
        }
        w.flush()?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- predict

#[derive(Clone, Debug)]
pub struct PredictRequest {
    pub checkpoint: Option<PathBuf>,
    pub subject: u32,
    pub relation: u32,
    /// Query granule; history covers every granule before it.
    pub time: u32,
    pub k: usize,
    pub mask_mode: Option<MaskMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub entity: u32,
    pub probability: f64,
    pub in_history: bool,
    /// Mask bit used for this entity; absent without a mask.
    pub mask: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictOutcome {
    pub subject: u32,
    pub relation: u32,
    pub time: u32,
    pub mask_mode: MaskMode,
    /// Classifier verdict (historical?) and probability, when consulted.
    pub predicted_historical: Option<(bool, f64)>,
    pub mask_fallback: bool,
    pub candidates: Vec<Candidate>,
}

pub fn cmd_predict(cfg: &RunConfig, req: &PredictRequest) -> Result<PredictOutcome> {
    prepare_out(cfg, "predict")?;
    let ds = load_dataset(cfg)?;
    let path = checkpoint_path(cfg, req.checkpoint.as_deref());
    let ckpt = load_checkpoint(&path, &ds)?;
    let inf = resolve_inference(cfg, &ckpt, req.mask_mode, None);
    if inf.mask_mode == MaskMode::GroundTruth {
        bail!("the ground-truth mask needs the answer and is only available in evaluate");
    }
    require_classifier(inf.mask_mode, &ckpt, &path)?;
    if req.subject as usize >= ds.num_entities {
        bail!(
            "unknown subject id {} (dataset has {} entities)",
            req.subject,
            ds.num_entities
        );
    }
    if req.relation as usize >= ds.num_relations_total() {
        bail!(
            "unknown relation id {} (dataset has {} relations, {} with inverses)",
            req.relation,
            ds.num_relations_raw,
            ds.num_relations_total()
        );
    }

    let timeline = augment_sorted(&ds.timeline(), ds.num_relations_raw);
    let mut index = HistoryIndex::new();
    index.absorb_until(&timeline, req.time)?;
    let freq = index.frequencies(req.subject, req.relation);
    // the answer is unknown; any id works since only the label would use it
    let query = QueryContext::new(req.subject, req.relation, req.time, 0, freq.into());

    let mut scratch = Scratch::new(ds.num_entities, ckpt.params.dim);
    let outcome = infer_query(
        &ckpt.params,
        &query,
        &inf,
        ckpt.meta.hyperparams.lambda,
        0,
        &mut scratch,
    )?;
    let masked = inf.mask_mode != MaskMode::None;
    let candidates = top_k(&scratch.dist, req.k)
        .into_iter()
        .map(|(e, p)| Candidate {
            entity: e,
            probability: p,
            in_history: query.in_history(e),
            mask: masked.then(|| scratch.mask[e as usize]),
        })
        .collect();
    Ok(PredictOutcome {
        subject: req.subject,
        relation: req.relation,
        time: req.time,
        mask_mode: inf.mask_mode,
        predicted_historical: outcome.label,
        mask_fallback: outcome.fallback,
        candidates,
    })
}

// ---------------------------------------------------------------- export-embeddings

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingLine {
    pub s: u32,
    pub p: u32,
    pub o: u32,
    pub t: u32,
    /// Subject-direction query over an inverse relation.
    pub inverse: bool,
    pub v: Vec<f64>,
    /// Whether the answer is a historical entity.
    pub historical: bool,
    /// Classifier verdict, when the checkpoint has a classifier.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExportOutcome {
    pub path: PathBuf,
    pub lines: usize,
}

pub fn cmd_export_embeddings(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
) -> Result<ExportOutcome> {
    prepare_out(cfg, "export-embeddings")?;
    let ds = load_dataset(cfg)?;
    let ctx = load_contexts(cfg, &ds)?;
    let path = checkpoint_path(cfg, checkpoint);
    let ckpt = load_checkpoint(&path, &ds)?;
    let contexts = ctx.get(split);
    let hp = &ckpt.meta.hyperparams;
    let emb = ckpt
        .params
        .embed_contexts(contexts, hp.lambda, hp.batch_size)?;

    let out = cfg
        .out_dir
        .join(format!("embeddings-{}.jsonl", split.name()));
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    for (i, c) in contexts.iter().enumerate() {
        let v = emb.row(i);
        let verdict = ckpt.params.classifier.as_ref().map(|clf| clf.predict(v));
        let line = EmbeddingLine {
            s: c.s,
            p: c.p,
            o: c.true_o,
            t: c.t,
            inverse: c.p as usize >= ds.num_relations_raw,
            v: v.to_vec(),
            historical: c.label,
            predicted: verdict.map(|x| x.0),
            probability: verdict.map(|x| x.1),
        };
        write_jsonl_line(&mut w, &line)?;
    }
    w.flush()?;
    Ok(ExportOutcome {
        path: out,
        lines: contexts.len(),
    })
}
