//! Mask-based inference, filtered ranking metrics and ablation variants.

use std::collections::HashMap;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NORM_EPS;
use crate::data::{augment_sorted, Quadruple, TkgDataset};
use crate::error::{CenetError, Result};
use crate::history::{write_z, QueryContext};
use crate::model::{Heads, ModelParams, TrainSwitches};
use crate::optim::Parameter;
use crate::tensor::{dot, softmax_into};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    None,
    Hard,
    #[default]
    Soft,
    Random,
    GroundTruth,
}

impl MaskMode {
    pub fn needs_classifier(self) -> bool {
        matches!(self, MaskMode::Hard | MaskMode::Soft)
    }
}

impl FromStr for MaskMode {
    type Err = CenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            "random" => Ok(MaskMode::Random),
            "ground-truth" => Ok(MaskMode::GroundTruth),
            other => Err(CenetError::Config(format!(
                "unknown mask mode `{other}` (expected none, hard, soft, random or ground-truth)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    Raw,
    /// Remove every other object known for `(s, p)` at any time.
    #[default]
    Static,
    /// Remove other objects known for `(s, p)` at the query's own granule.
    TimeAware,
}

impl FromStr for FilterMode {
    type Err = CenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FilterMode::Raw),
            "static" => Ok(FilterMode::Static),
            "time-aware" => Ok(FilterMode::TimeAware),
            other => Err(CenetError::Config(format!(
                "unknown filter mode `{other}` (expected raw, static or time-aware)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mask_mode: MaskMode,
    pub filter_mode: FilterMode,
    /// Heads contributing to the final distribution.
    pub heads: Heads,
    /// Seed for the random mask.
    pub seed: u64,
}

/// `½ (softmax(his) + softmax(nhis))`.
pub fn combined_distribution(his: &[f64], nhis: &[f64]) -> Result<Vec<f64>> {
    if his.is_empty() || his.len() != nhis.len() {
        return Err(CenetError::shape(
            "combined_distribution",
            &[his.len()],
            &[nhis.len()],
        ));
    }
    let mut out = vec![0.0; his.len()];
    let mut tmp = vec![0.0; his.len()];
    combine_into(Some(his), Some(nhis), &mut out, &mut tmp);
    Ok(out)
}

/// Writes the final distribution into `out`. With a single head the
/// distribution is that head's softmax alone.
fn combine_into(his: Option<&[f64]>, nhis: Option<&[f64]>, out: &mut [f64], tmp: &mut [f64]) {
    match (his, nhis) {
        (Some(a), Some(b)) => {
            softmax_into(a, out);
            softmax_into(b, tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o = 0.5 * (*o + t);
            }
        }
        (Some(a), None) | (None, Some(a)) => softmax_into(a, out),
        (None, None) => unreachable!("at least one head is always active"),
    }
}

/// Applies a mask in place. Hard-style modes zero out entities whose bit is
/// false, except that an all-false mask leaves `p` unchanged. Soft mode
/// multiplies by `softmax(B)` over the whole 0/1 vector. Returns true when
/// the hard fallback was taken.
pub fn apply_mask(p: &mut [f64], b: &[bool], mode: MaskMode) -> bool {
    match mode {
        MaskMode::None => false,
        MaskMode::Soft => {
            let ones = b.iter().filter(|&&x| x).count() as f64;
            let e = std::f64::consts::E;
            let denom = ones * e + (b.len() as f64 - ones);
            let (hi, lo) = (e / denom, 1.0 / denom);
            for (x, &bit) in p.iter_mut().zip(b) {
                *x *= if bit { hi } else { lo };
            }
            false
        }
        MaskMode::Hard | MaskMode::Random | MaskMode::GroundTruth => {
            if !b.iter().any(|&x| x) {
                return true;
            }
            for (x, &bit) in p.iter_mut().zip(b) {
                if !bit {
                    *x = 0.0;
                }
            }
            false
        }
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn predict(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// `1 + #{e ∉ filtered, e ≠ true_o : scores[e] > scores[true_o]}`.
/// `filtered` must be sorted and free of duplicates; it may contain `true_o`.
pub fn filtered_rank(scores: &[f64], true_o: usize, filtered: &[u32]) -> usize {
    let target = scores[true_o];
    let above = scores.iter().filter(|&&v| v > target).count();
    let removed = filtered
        .iter()
        .filter(|&&e| e as usize != true_o && scores[e as usize] > target)
        .count();
    1 + above - removed
}

/// Known answers used to filter competing true objects.
#[derive(Clone, Debug, Default)]
pub struct KnownAnswers {
    mode: FilterMode,
    static_: HashMap<(u32, u32), Vec<u32>>,
    timed: HashMap<(u32, u32, u32), Vec<u32>>,
}

impl KnownAnswers {
    /// Builds from quadruples already carrying both query directions.
    pub fn from_quadruples(quads: &[Quadruple], mode: FilterMode) -> Self {
        let mut k = KnownAnswers {
            mode,
            ..Default::default()
        };
        match mode {
            FilterMode::Raw => {}
            FilterMode::Static => {
                for q in quads {
                    k.static_.entry((q.s, q.p)).or_default().push(q.o);
                }
            }
            FilterMode::TimeAware => {
                for q in quads {
                    k.timed.entry((q.s, q.p, q.t)).or_default().push(q.o);
                }
            }
        }
        for v in k.static_.values_mut().chain(k.timed.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        k
    }

    /// Known answers over all splits of a dataset, both directions.
    pub fn for_dataset(ds: &TkgDataset, mode: FilterMode) -> Self {
        Self::from_quadruples(&augment_sorted(&ds.timeline(), ds.num_relations_raw), mode)
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn known(&self, s: u32, p: u32, t: u32) -> &[u32] {
        let v = match self.mode {
            FilterMode::Raw => None,
            FilterMode::Static => self.static_.get(&(s, p)),
            FilterMode::TimeAware => self.timed.get(&(s, p, t)),
        };
        v.map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut n, mut rr, mut h1, mut h3, mut h10) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for r in ranks {
            n += 1;
            rr += 1.0 / r as f64;
            h1 += usize::from(r <= 1);
            h3 += usize::from(r <= 3);
            h10 += usize::from(r <= 10);
        }
        if n == 0 {
            return Metrics::default();
        }
        let n_f = n as f64;
        Metrics {
            count: n,
            mrr: rr / n_f,
            hits1: h1 as f64 / n_f,
            hits3: h3 as f64 / n_f,
            hits10: h10 as f64 / n_f,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub config: InferenceConfig,
    /// Set when the mask used test labels; such numbers are not forecasts.
    pub diagnostic_only: bool,
    pub object: Metrics,
    pub subject: Metrics,
    pub combined: Metrics,
    /// Agreement of the predicted history label with the true one.
    pub classifier_accuracy: Option<f64>,
    /// Share of queries whose true answer is historical.
    pub historical_rate: f64,
    /// Queries where a hard mask was all-false and the unmasked distribution was used.
    pub mask_fallbacks: usize,
    pub wall_secs: f64,
    pub ranks: Vec<usize>,
}

/// Buffers reused across single-query inference calls.
#[derive(Clone, Debug)]
pub struct Scratch {
    pub his: Vec<f64>,
    pub nhis: Vec<f64>,
    /// Final (masked) distribution after [`infer_query`].
    pub dist: Vec<f64>,
    /// Mask used by [`infer_query`].
    pub mask: Vec<bool>,
    z: Vec<f64>,
    pair: Vec<f64>,
    enc: Vec<f64>,
    x: Vec<f64>,
    hidden: Vec<f64>,
    v: Vec<f64>,
}

impl Scratch {
    pub fn new(num_entities: usize, dim: usize) -> Self {
        Scratch {
            his: vec![0.0; num_entities],
            nhis: vec![0.0; num_entities],
            dist: vec![0.0; num_entities],
            mask: vec![false; num_entities],
            z: vec![0.0; num_entities],
            pair: vec![0.0; 2 * dim],
            enc: vec![0.0; dim],
            x: vec![0.0; 3 * dim],
            hidden: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// Query embedding computed by the last [`infer_query`] call that needed one.
    pub fn embedding(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOutcome {
    /// Predicted history label and probability, when a classifier ran.
    pub label: Option<(bool, f64)>,
    pub fallback: bool,
}

fn affine_tanh(w: &Parameter, b: &Parameter, x: &[f64], out: &mut [f64]) {
    let bias = b.value.data();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (dot(x, w.value.row(i)) + bias[i]).tanh();
    }
}

fn check_ids(params: &ModelParams, ctx: &QueryContext) -> Result<()> {
    for (kind, id, limit) in [
        ("entity", ctx.s, params.num_entities),
        ("relation", ctx.p, params.num_relations),
        ("entity", ctx.true_o, params.num_entities),
    ] {
        if id as usize >= limit {
            return Err(CenetError::IdOutOfRange {
                kind,
                id: id.into(),
                limit: limit as u64,
            });
        }
    }
    Ok(())
}

/// Writes the unit-norm query embedding into `scratch` and returns it.
pub fn embed_query<'s>(
    params: &ModelParams,
    ctx: &QueryContext,
    scratch: &'s mut Scratch,
) -> Result<&'s [f64]> {
    check_ids(params, ctx)?;
    let d = params.dim;
    let Scratch { x, hidden, v, .. } = scratch;
    x[..d].copy_from_slice(params.entity.value.row(ctx.s as usize));
    x[d..2 * d].copy_from_slice(params.relation.value.row(ctx.p as usize));
    let f = &mut x[2 * d..];
    f.fill(0.0);
    let wf = params.freq_w.value.data();
    let cols = params.num_entities;
    for &(e, n) in ctx.freq.pairs() {
        let n = f64::from(n);
        for (j, slot) in f.iter_mut().enumerate() {
            *slot += n * wf[j * cols + e as usize];
        }
    }
    for slot in f.iter_mut() {
        *slot = slot.tanh();
    }
    affine_tanh(&params.hidden_w, &params.hidden_b, x, hidden);
    let ob = params.out_b.value.data();
    for (i, o) in v.iter_mut().enumerate() {
        *o = dot(hidden, params.out_w.value.row(i)) + ob[i];
    }
    let norm = dot(v, v).sqrt().max(NORM_EPS);
    for o in v.iter_mut() {
        *o /= norm;
    }
    Ok(&scratch.v)
}

/// Scores one query, applies the configured mask and leaves the final
/// distribution in `scratch.dist`. `query_index` keys the random mask so
/// results do not depend on evaluation order.
pub fn infer_query(
    params: &ModelParams,
    ctx: &QueryContext,
    config: &InferenceConfig,
    lambda: f64,
    query_index: u64,
    scratch: &mut Scratch,
) -> Result<QueryOutcome> {
    check_ids(params, ctx)?;
    let d = params.dim;
    write_z(&ctx.freq, lambda, &mut scratch.z)?;
    scratch.pair[..d].copy_from_slice(params.entity.value.row(ctx.s as usize));
    scratch.pair[d..].copy_from_slice(params.relation.value.row(ctx.p as usize));

    let entity = &params.entity.value;
    let heads = config.heads;
    if heads.historical() {
        affine_tanh(
            &params.his_w,
            &params.his_b,
            &scratch.pair,
            &mut scratch.enc,
        );
        for (e, o) in scratch.his.iter_mut().enumerate() {
            *o = dot(&scratch.enc, entity.row(e)) + scratch.z[e];
        }
    }
    if heads.nonhistorical() {
        affine_tanh(
            &params.nhis_w,
            &params.nhis_b,
            &scratch.pair,
            &mut scratch.enc,
        );
        for (e, o) in scratch.nhis.iter_mut().enumerate() {
            *o = dot(&scratch.enc, entity.row(e)) - scratch.z[e];
        }
    }
    combine_into(
        heads.historical().then_some(scratch.his.as_slice()),
        heads.nonhistorical().then_some(scratch.nhis.as_slice()),
        &mut scratch.dist,
        &mut scratch.z,
    );

    let label = match &params.classifier {
        Some(clf) if config.mask_mode.needs_classifier() => {
            Some(clf.predict(embed_query(params, ctx, scratch)?))
        }
        _ => None,
    };
    let mask = &mut scratch.mask;
    match config.mask_mode {
        MaskMode::None => {}
        MaskMode::Hard | MaskMode::Soft => {
            let (predicted, _) =
                label.ok_or(CenetError::MissingClassifier(match config.mask_mode {
                    MaskMode::Hard => "hard",
                    _ => "soft",
                }))?;
            crate::classifier::write_mask(ctx.history(), predicted, mask);
        }
        MaskMode::GroundTruth => crate::classifier::write_mask(ctx.history(), ctx.label, mask),
        MaskMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(query_index);
            for b in mask.iter_mut() {
                *b = rng.gen::<bool>();
            }
        }
    }
    let fallback = apply_mask(&mut scratch.dist, &scratch.mask, config.mask_mode);
    Ok(QueryOutcome { label, fallback })
}

/// One line of the optional score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub index: usize,
    pub s: u32,
    pub p: u32,
    pub t: u32,
    pub true_o: u32,
    pub rank: usize,
    /// `(entity, score)` pairs in descending score order.
    pub top: Vec<(u32, f64)>,
}

/// The `k` best entities, descending score, ties by smaller id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    let k = k.min(scores.len());
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx.into_iter().map(|e| (e, scores[e as usize])).collect()
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub lambda: f64,
    /// Relation ids at or above this are inverse (subject-direction) queries.
    pub num_relations_raw: usize,
    /// Keep the top `k` scores per query for dumping.
    pub dump_top_k: Option<usize>,
}

struct PerQuery {
    rank: usize,
    label: Option<bool>,
    fallback: bool,
    top: Option<Vec<(u32, f64)>>,
}

/// Ranks every context under `config` and aggregates the metrics.
pub fn evaluate(
    contexts: &[QueryContext],
    params: &ModelParams,
    config: &InferenceConfig,
    known: &KnownAnswers,
    opts: &EvalOptions,
) -> Result<(RankReport, Vec<ScoreDump>)> {
    if contexts.is_empty() {
        return Err(CenetError::EmptySplit("evaluation"));
    }
    if config.mask_mode.needs_classifier() && params.classifier.is_none() {
        return Err(CenetError::MissingClassifier(match config.mask_mode {
            MaskMode::Hard => "hard",
            _ => "soft",
        }));
    }
    if known.mode() != config.filter_mode {
        return Err(CenetError::Config(format!(
            "known-answer index built for {:?} filtering but {:?} requested",
            known.mode(),
            config.filter_mode
        )));
    }
    let start = Instant::now();
    let results: Vec<PerQuery> = contexts
        .par_iter()
        .enumerate()
        .map_init(
            || Scratch::new(params.num_entities, params.dim),
            |scratch, (i, ctx)| {
                let out = infer_query(params, ctx, config, opts.lambda, i as u64, scratch)?;
                let filtered = known.known(ctx.s, ctx.p, ctx.t);
                let rank = filtered_rank(&scratch.dist, ctx.true_o as usize, filtered);
                Ok(PerQuery {
                    rank,
                    label: out.label.map(|l| l.0),
                    fallback: out.fallback,
                    top: opts.dump_top_k.map(|k| top_k(&scratch.dist, k)),
                })
            },
        )
        .collect::<Result<_>>()?;

    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let is_subject = |c: &QueryContext| c.p as usize >= opts.num_relations_raw;
    let pick = |subject: bool| {
        contexts
            .iter()
            .zip(&ranks)
            .filter(move |(c, _)| is_subject(c) == subject)
            .map(|(_, &r)| r)
    };
    let labelled: Vec<(bool, bool)> = results
        .iter()
        .zip(contexts)
        .filter_map(|(r, c)| r.label.map(|l| (l, c.label)))
        .collect();
    let classifier_accuracy = (!labelled.is_empty())
        .then(|| labelled.iter().filter(|(a, b)| a == b).count() as f64 / labelled.len() as f64);
    let report = RankReport {
        config: config.clone(),
        diagnostic_only: config.mask_mode == MaskMode::GroundTruth,
        object: Metrics::from_ranks(pick(false)),
        subject: Metrics::from_ranks(pick(true)),
        combined: Metrics::from_ranks(ranks.iter().copied()),
        classifier_accuracy,
        historical_rate: contexts.iter().filter(|c| c.label).count() as f64 / contexts.len() as f64,
        mask_fallbacks: results.iter().filter(|r| r.fallback).count(),
        wall_secs: start.elapsed().as_secs_f64(),
        ranks,
    };
    let dump = results
        .into_iter()
        .zip(contexts)
        .enumerate()
        .filter_map(|(index, (r, c))| {
            r.top.map(|top| ScoreDump {
                index,
                s: c.s,
                p: c.p,
                t: c.t,
                true_o: c.true_o,
                rank: r.rank,
                top,
            })
        })
        .collect();
    Ok((report, dump))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "his-only")]
    HisOnly,
    #[serde(rename = "nhis-only")]
    NhisOnly,
    #[serde(rename = "no-stage1")]
    NoStage1,
    #[serde(rename = "no-stage2")]
    NoStage2,
    #[serde(rename = "no-CL")]
    NoCl,
    #[serde(rename = "random-mask")]
    RandomMask,
    #[serde(rename = "hard-mask")]
    HardMask,
    #[serde(rename = "soft-mask")]
    SoftMask,
    #[serde(rename = "GT-mask")]
    GtMask,
}

/// Training and inference settings implied by an ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationPlan {
    pub switches: TrainSwitches,
    /// When set, the cross-entropy weight is forced to 1.
    pub ce_only: bool,
    pub train_stage2: bool,
    pub mask_mode: MaskMode,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::HisOnly,
        AblationVariant::NhisOnly,
        AblationVariant::NoStage1,
        AblationVariant::NoStage2,
        AblationVariant::NoCl,
        AblationVariant::RandomMask,
        AblationVariant::HardMask,
        AblationVariant::SoftMask,
        AblationVariant::GtMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::HisOnly => "his-only",
            AblationVariant::NhisOnly => "nhis-only",
            AblationVariant::NoStage1 => "no-stage1",
            AblationVariant::NoStage2 => "no-stage2",
            AblationVariant::NoCl => "no-CL",
            AblationVariant::RandomMask => "random-mask",
            AblationVariant::HardMask => "hard-mask",
            AblationVariant::SoftMask => "soft-mask",
            AblationVariant::GtMask => "GT-mask",
        }
    }

    pub fn plan(self) -> AblationPlan {
        let full = AblationPlan {
            switches: TrainSwitches::default(),
            ce_only: false,
            train_stage2: true,
            mask_mode: MaskMode::Soft,
        };
        let ce_only = TrainSwitches {
            heads: Heads::Both,
            contrastive: false,
        };
        match self {
            AblationVariant::SoftMask => full,
            AblationVariant::HardMask => AblationPlan {
                mask_mode: MaskMode::Hard,
                ..full
            },
            AblationVariant::HisOnly => AblationPlan {
                switches: TrainSwitches {
                    heads: Heads::HisOnly,
                    contrastive: true,
                },
                ..full
            },
            AblationVariant::NhisOnly => AblationPlan {
                switches: TrainSwitches {
                    heads: Heads::NhisOnly,
                    contrastive: true,
                },
                ..full
            },
            AblationVariant::NoStage1 => AblationPlan {
                switches: ce_only,
                ce_only: true,
                ..full
            },
            AblationVariant::NoStage2 => AblationPlan {
                train_stage2: false,
                mask_mode: MaskMode::None,
                ..full
            },
            AblationVariant::NoCl => AblationPlan {
                switches: ce_only,
                ce_only: true,
                train_stage2: false,
                mask_mode: MaskMode::None,
            },
            AblationVariant::RandomMask => AblationPlan {
                train_stage2: false,
                mask_mode: MaskMode::Random,
                ..full
            },
            AblationVariant::GtMask => AblationPlan {
                train_stage2: false,
                mask_mode: MaskMode::GroundTruth,
                ..full
            },
        }
    }
}

impl FromStr for AblationVariant {
    type Err = CenetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CenetError::UnknownVariant {
                name: s.to_string(),
                valid: Self::ALL.map(|v| v.name()).join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_heads_give_uniform_distribution() {
        let p = combined_distribution(&[0.0; 4], &[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn opposite_one_hot_heads_split_mass() {
        let p = combined_distribution(&[50.0, 0.0, 0.0], &[0.0, 50.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_mask_two_entities() {
        let mut p = vec![1.0, 1.0];
        apply_mask(&mut p, &[true, false], MaskMode::Soft);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn hard_mask_rules() {
        let mut p = vec![0.2, 0.3, 0.5];
        apply_mask(&mut p, &[true; 3], MaskMode::Hard);
        assert_eq!(p, vec![0.2, 0.3, 0.5]);
        assert!(apply_mask(&mut p, &[false; 3], MaskMode::Hard));
        assert_eq!(p, vec![0.2, 0.3, 0.5]);
        apply_mask(&mut p, &[false, true, false], MaskMode::Hard);
        assert_eq!(p, vec![0.0, 0.3, 0.0]);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predict(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(predict(&[0.25; 4]), 0);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(filtered_rank(&[0.5, 0.4, 0.3], 2, &[1]), 2);
        assert_eq!(filtered_rank(&[0.5, 0.4, 0.3], 2, &[]), 3);
        assert_eq!(filtered_rank(&[0.5, 0.4, 0.3], 0, &[]), 1);
        assert_eq!(filtered_rank(&[0.3, 0.3, 0.3], 1, &[]), 1);
    }

    #[test]
    fn metric_arithmetic() {
        let m = Metrics::from_ranks([1, 2, 4]);
        assert!((m.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.hits3 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits10, 1.0);
        let perfect = Metrics::from_ranks([1; 5]);
        assert_eq!(
            (perfect.mrr, perfect.hits1, perfect.hits10),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!(
            "soft-mask"
                .parse::<AblationVariant>()
                .unwrap()
                .plan()
                .mask_mode,
            MaskMode::Soft
        );
        let err = "nope".parse::<AblationVariant>().unwrap_err().to_string();
        assert!(err.contains("GT-mask"), "{err}");
    }

    #[test]
    fn top_k_orders_and_truncates() {
        assert_eq!(
            top_k(&[0.1, 0.5, 0.5, 0.2], 3),
            vec![(1, 0.5), (2, 0.5), (3, 0.2)]
        );
        assert_eq!(top_k(&[0.1, 0.2], 10).len(), 2);
    }

    #[test]
    fn known_answers_modes() {
        let quads = [
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(0, 0, 2, 3),
            Quadruple::new(0, 0, 2, 0),
        ];
        let s = KnownAnswers::from_quadruples(&quads, FilterMode::Static);
        assert_eq!(s.known(0, 0, 9), &[1, 2]);
        let t = KnownAnswers::from_quadruples(&quads, FilterMode::TimeAware);
        assert_eq!(t.known(0, 0, 3), &[2]);
        assert_eq!(t.known(0, 0, 0), &[1, 2]);
        assert!(KnownAnswers::from_quadruples(&quads, FilterMode::Raw)
            .known(0, 0, 0)
            .is_empty());
    }
}
