//! Stage-1 model: historical and non-historical scoring heads with the copy
//! term, the query encoder, both losses and the training loop.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::classifier::Classifier;
use crate::error::{CenetError, Result};
use crate::history::{write_z, QueryContext};
use crate::optim::{accumulate_all, Adam, AdamConfig, Parameter};
use crate::tensor::{SparseRows, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub dim: usize,
    /// Weight of the cross-entropy term; `1 - alpha` weights the contrastive term.
    pub alpha: f64,
    /// Magnitude of the copy term.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 200,
            alpha: 0.2,
            lambda: 2.0,
            tau: 0.1,
            batch_size: 1024,
            lr: 0.001,
            stage1_epochs: 30,
            stage2_epochs: 20,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CenetError::Config(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Which scoring heads take part in training and in the final distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heads {
    #[default]
    Both,
    HisOnly,
    NhisOnly,
}

impl Heads {
    pub fn historical(self) -> bool {
        matches!(self, Heads::Both | Heads::HisOnly)
    }

    pub fn nonhistorical(self) -> bool {
        matches!(self, Heads::Both | Heads::NhisOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSwitches {
    pub heads: Heads,
    /// Build the contrastive term at all. With `alpha == 1` it contributes
    /// nothing, so turning it off only saves time.
    pub contrastive: bool,
}

impl Default for TrainSwitches {
    fn default() -> Self {
        TrainSwitches {
            heads: Heads::Both,
            contrastive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub entity: Parameter,
    pub relation: Parameter,
    pub his_w: Parameter,
    pub his_b: Parameter,
    pub nhis_w: Parameter,
    pub nhis_b: Parameter,
    pub freq_w: Parameter,
    pub hidden_w: Parameter,
    pub hidden_b: Parameter,
    pub out_w: Parameter,
    pub out_b: Parameter,
    pub classifier: Option<Classifier>,
}

impl ModelParams {
    /// Every array drawn from `uniform(-1/√d, 1/√d)` in a fixed order.
    pub fn init(num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut p = |name: &str, shape: &[usize]| Parameter::uniform(name, shape, bound, &mut rng);
        ModelParams {
            dim,
            num_entities,
            num_relations,
            entity: p("entity", &[num_entities, dim]),
            relation: p("relation", &[num_relations, dim]),
            his_w: p("his.weight", &[dim, 2 * dim]),
            his_b: p("his.bias", &[dim]),
            nhis_w: p("nhis.weight", &[dim, 2 * dim]),
            nhis_b: p("nhis.bias", &[dim]),
            freq_w: p("freq.weight", &[dim, num_entities]),
            hidden_w: p("mlp.hidden.weight", &[dim, 3 * dim]),
            hidden_b: p("mlp.hidden.bias", &[dim]),
            out_w: p("mlp.out.weight", &[dim, dim]),
            out_b: p("mlp.out.bias", &[dim]),
            classifier: None,
        }
    }

    pub fn stage1(&self) -> [&Parameter; 11] {
        [
            &self.entity,
            &self.relation,
            &self.his_w,
            &self.his_b,
            &self.nhis_w,
            &self.nhis_b,
            &self.freq_w,
            &self.hidden_w,
            &self.hidden_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn stage1_mut(&mut self) -> [&mut Parameter; 11] {
        [
            &mut self.entity,
            &mut self.relation,
            &mut self.his_w,
            &mut self.his_b,
            &mut self.nhis_w,
            &mut self.nhis_b,
            &mut self.freq_w,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// Stage-1 parameters followed by the classifier, when present.
    pub fn all(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.stage1().into_iter().collect();
        if let Some(c) = &self.classifier {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v
    }

    pub fn all_mut(&mut self) -> Vec<&mut Parameter> {
        let ModelParams {
            entity,
            relation,
            his_w,
            his_b,
            nhis_w,
            nhis_b,
            freq_w,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            classifier,
            ..
        } = self;
        let mut v = vec![
            entity, relation, his_w, his_b, nhis_w, nhis_b, freq_w, hidden_w, hidden_b, out_w,
            out_b,
        ];
        if let Some(c) = classifier {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }

    pub fn set_stage1_frozen(&mut self, frozen: bool) {
        for p in self.stage1_mut() {
            p.frozen = frozen;
        }
    }

    /// Query embeddings for many contexts, computed in batches without
    /// keeping any graph around.
    pub fn embed_contexts(
        &self,
        contexts: &[QueryContext],
        lambda: f64,
        batch_size: usize,
    ) -> Result<Tensor> {
        let mut data = Vec::with_capacity(contexts.len() * self.dim);
        for chunk in contexts.chunks(batch_size.max(1)) {
            let batch =
                QueryBatch::assemble(chunk.iter(), self.num_entities, self.num_relations, lambda)?;
            data.extend(embed_batch(self, &batch)?.into_data());
        }
        Tensor::new(vec![contexts.len(), self.dim], data)
    }
}

/// Dense per-batch inputs assembled from sparse contexts.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub subjects: Vec<usize>,
    pub relations: Vec<usize>,
    pub objects: Vec<usize>,
    pub labels: Vec<bool>,
    /// Copy term `[B × |E|]`, a constant input.
    pub z: Tensor,
    /// Raw historical counts `[B × |E|]`, kept sparse.
    pub freq: Arc<SparseRows>,
}

impl QueryBatch {
    pub fn assemble<'a>(
        contexts: impl IntoIterator<Item = &'a QueryContext>,
        num_entities: usize,
        num_relations: usize,
        lambda: f64,
    ) -> Result<Self> {
        let mut b = QueryBatch {
            subjects: Vec::new(),
            relations: Vec::new(),
            objects: Vec::new(),
            labels: Vec::new(),
            z: Tensor::zeros(&[0, num_entities]),
            freq: Arc::new(SparseRows::new(num_entities)),
        };
        let mut z = Vec::new();
        let mut freq = SparseRows::new(num_entities);
        let check = |kind: &'static str, id: u32, limit: usize| {
            if id as usize >= limit {
                Err(CenetError::IdOutOfRange {
                    kind,
                    id: id.into(),
                    limit: limit as u64,
                })
            } else {
                Ok(id as usize)
            }
        };
        for c in contexts {
            b.subjects.push(check("entity", c.s, num_entities)?);
            b.relations.push(check("relation", c.p, num_relations)?);
            b.objects.push(check("entity", c.true_o, num_entities)?);
            b.labels.push(c.label);
            let start = z.len();
            z.resize(start + num_entities, 0.0);
            write_z(&c.freq, lambda, &mut z[start..])?;
            freq.push_row(
                c.freq
                    .pairs()
                    .iter()
                    .map(|&(e, n)| (e as usize, f64::from(n))),
            )?;
        }
        b.z = Tensor::new(vec![b.subjects.len(), num_entities], z)?;
        b.freq = Arc::new(freq);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub his: Option<NodeId>,
    pub nhis: Option<NodeId>,
    pub embedding: Option<NodeId>,
}

struct QueryNodes {
    entity: NodeId,
    subject: NodeId,
    relation: NodeId,
    pair: NodeId,
}

fn query_nodes(g: &mut Graph, params: &ModelParams, batch: &QueryBatch) -> Result<QueryNodes> {
    let entity = g.param(&params.entity);
    let relations = g.param(&params.relation);
    let subject = g.gather_rows(entity, &batch.subjects)?;
    let relation = g.gather_rows(relations, &batch.relations)?;
    let pair = g.concat(&[subject, relation])?;
    Ok(QueryNodes {
        entity,
        subject,
        relation,
        pair,
    })
}

fn similarity(g: &mut Graph, q: &QueryNodes, w: &Parameter, b: &Parameter) -> Result<NodeId> {
    let w = g.param(w);
    let b = g.param(b);
    let affine = g.linear(w, b, q.pair)?;
    let h = g.tanh(affine);
    g.matmul_t(h, q.entity)
}

fn embedding(
    g: &mut Graph,
    params: &ModelParams,
    q: &QueryNodes,
    batch: &QueryBatch,
) -> Result<NodeId> {
    let wf = g.param(&params.freq_w);
    let f = g.sparse_matmul_t(batch.freq.clone(), wf)?;
    let f = g.tanh(f);
    let x = g.concat(&[q.subject, q.relation, f])?;
    let (hw, hb) = (g.param(&params.hidden_w), g.param(&params.hidden_b));
    let h = g.linear(hw, hb, x)?;
    let h = g.tanh(h);
    let (ow, ob) = (g.param(&params.out_w), g.param(&params.out_b));
    let out = g.linear(ow, ob, h)?;
    g.l2_normalize(out)
}

/// Forward pass sharing the `(s ⊕ p)` lookup between heads and encoder.
pub fn forward(
    g: &mut Graph,
    params: &ModelParams,
    batch: &QueryBatch,
    heads: Heads,
    with_embedding: bool,
) -> Result<Forward> {
    let q = query_nodes(g, params, batch)?;
    let z = g.constant(batch.z.clone());
    let his = if heads.historical() {
        let sim = similarity(g, &q, &params.his_w, &params.his_b)?;
        Some(g.add(sim, z)?)
    } else {
        None
    };
    let nhis = if heads.nonhistorical() {
        let sim = similarity(g, &q, &params.nhis_w, &params.nhis_b)?;
        Some(g.sub(sim, z)?)
    } else {
        None
    };
    let embedding = if with_embedding {
        Some(embedding(g, params, &q, batch)?)
    } else {
        None
    };
    Ok(Forward {
        his,
        nhis,
        embedding,
    })
}

/// `tanh(W_his (s ⊕ p) + b_his) · Eᵀ + Z`.
pub fn historical_scores(
    g: &mut Graph,
    params: &ModelParams,
    batch: &QueryBatch,
) -> Result<NodeId> {
    Ok(forward(g, params, batch, Heads::HisOnly, false)?
        .his
        .expect("historical head requested"))
}

/// `tanh(W_nhis (s ⊕ p) + b_nhis) · Eᵀ − Z`.
pub fn nonhistorical_scores(
    g: &mut Graph,
    params: &ModelParams,
    batch: &QueryBatch,
) -> Result<NodeId> {
    Ok(forward(g, params, batch, Heads::NhisOnly, false)?
        .nhis
        .expect("non-historical head requested"))
}

/// Unit-norm query embedding from `MLP(s ⊕ p ⊕ tanh(W_F · F))`.
pub fn query_embedding(g: &mut Graph, params: &ModelParams, batch: &QueryBatch) -> Result<NodeId> {
    let q = query_nodes(g, params, batch)?;
    embedding(g, params, &q, batch)
}

/// `−Σ_q log(softmax(H_his)[o_q] + softmax(H_nhis)[o_q])`. With one head the
/// missing term is dropped. Per-query terms may be negative (down to −log 2).
pub fn ce_loss(
    g: &mut Graph,
    his: Option<NodeId>,
    nhis: Option<NodeId>,
    objects: &[usize],
) -> Result<NodeId> {
    let mut picked = Vec::with_capacity(2);
    for head in [his, nhis].into_iter().flatten() {
        let sm = g.softmax_rows(head)?;
        picked.push(g.pick(sm, objects)?);
    }
    let total = match picked.as_slice() {
        [] => return Err(CenetError::Config("ce_loss needs at least one head".into())),
        [one] => *one,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };
    let logs = g.log(total);
    let s = g.sum(logs);
    Ok(g.scale(s, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct SupCon {
    pub loss: NodeId,
    /// True when the batch had fewer than two queries and the loss is a constant 0.
    pub skipped: bool,
}

/// Supervised contrastive loss over unit-norm rows of `v`. Anchors without
/// any same-label partner contribute nothing.
pub fn supcon_loss(g: &mut Graph, v: NodeId, labels: &[bool], tau: f64) -> Result<SupCon> {
    let n = g.value(v).rows();
    if labels.len() != n {
        return Err(CenetError::shape(
            "supcon_loss",
            g.value(v).shape(),
            &[labels.len()],
        ));
    }
    if n < 2 {
        return Ok(SupCon {
            loss: g.constant(Tensor::scalar(0.0)),
            skipped: true,
        });
    }
    let sim = g.matmul_t(v, v)?;
    let sim = g.scale(sim, 1.0 / tau);
    let log_prob = g.off_diag_log_softmax(sim)?;
    let mut weights = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let positives = (0..n).filter(|&k| k != i && labels[k] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let w = -1.0 / positives as f64;
        let row = weights.row_mut(i);
        for k in 0..n {
            if k != i && labels[k] == labels[i] {
                row[k] = w;
            }
        }
    }
    Ok(SupCon {
        loss: g.weighted_sum(log_prob, weights)?,
        skipped: false,
    })
}

/// `α · ce + (1 − α) · sup`.
pub fn combined_loss(g: &mut Graph, ce: NodeId, sup: NodeId, alpha: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CenetError::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let a = g.scale(ce, alpha);
    let b = g.scale(sup, 1.0 - alpha);
    g.add(a, b)
}

/// Both score matrices for a batch, evaluated without gradients.
pub fn score_batch(
    params: &ModelParams,
    batch: &QueryBatch,
    heads: Heads,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let mut g = Graph::new();
    let f = forward(&mut g, params, batch, heads, false)?;
    Ok((
        f.his.map(|n| g.value(n).clone()),
        f.nhis.map(|n| g.value(n).clone()),
    ))
}

pub fn embed_batch(params: &ModelParams, batch: &QueryBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = query_embedding(&mut g, params, batch)?;
    Ok(g.value(v).clone())
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub sup: f64,
    pub combined: f64,
    pub supcon_skipped: bool,
}

/// Builds the full stage-1 objective for a batch.
pub fn stage1_objective(
    g: &mut Graph,
    params: &ModelParams,
    batch: &QueryBatch,
    hp: &HyperParams,
    switches: &TrainSwitches,
) -> Result<(NodeId, NodeId, Option<SupCon>)> {
    let f = forward(g, params, batch, switches.heads, switches.contrastive)?;
    let ce = ce_loss(g, f.his, f.nhis, &batch.objects)?;
    match f.embedding {
        Some(v) => {
            let sup = supcon_loss(g, v, &batch.labels, hp.tau)?;
            let total = combined_loss(g, ce, sup.loss, hp.alpha)?;
            Ok((total, ce, Some(sup)))
        }
        None => Ok((g.scale(ce, hp.alpha), ce, None)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub ce: f64,
    pub sup: f64,
    pub combined: f64,
    pub batches: usize,
    pub supcon_skipped: usize,
    pub wall_secs: f64,
}

pub struct Stage1Trainer {
    pub hp: HyperParams,
    pub switches: TrainSwitches,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl Stage1Trainer {
    pub fn new(hp: HyperParams, switches: TrainSwitches) -> Result<Self> {
        hp.validate()?;
        let adam = Adam::new(AdamConfig::with_lr(hp.lr));
        Ok(Stage1Trainer {
            hp,
            switches,
            adam,
            epochs_done: 0,
        })
    }

    /// Continues from saved optimizer state after `epochs_done` epochs.
    pub fn resume(
        hp: HyperParams,
        switches: TrainSwitches,
        adam: Adam,
        epochs_done: usize,
    ) -> Result<Self> {
        hp.validate()?;
        Ok(Stage1Trainer {
            hp,
            switches,
            adam,
            epochs_done,
        })
    }

    pub fn step(&mut self, batch: &QueryBatch, params: &mut ModelParams) -> Result<StepLosses> {
        let mut g = Graph::new();
        let (total, ce, sup) = stage1_objective(&mut g, params, batch, &self.hp, &self.switches)?;
        let losses = StepLosses {
            ce: g.value(ce).item()?,
            sup: match sup {
                Some(s) => g.value(s.loss).item()?,
                None => 0.0,
            },
            combined: g.value(total).item()?,
            supcon_skipped: sup.is_some_and(|s| s.skipped),
        };
        if !losses.combined.is_finite() {
            return Err(CenetError::NonFiniteLoss {
                epoch: self.epochs_done + 1,
                step: self.adam.step_count() as usize + 1,
                detail: format!(
                    "ce={} sup={} batch={}",
                    losses.ce,
                    losses.sup,
                    describe_batch(batch)
                ),
            });
        }
        let grads = g.backward(total)?;
        drop(g);
        let mut ps = params.stage1_mut();
        accumulate_all(&mut ps, &grads)?;
        self.adam.step(&mut ps);
        Ok(losses)
    }

    /// One pass over `contexts` in a seeded shuffled order.
    pub fn run_epoch(
        &mut self,
        contexts: &[QueryContext],
        params: &mut ModelParams,
    ) -> Result<EpochLog> {
        if contexts.is_empty() {
            return Err(CenetError::EmptySplit("train"));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.hp.seed);
        rng.set_stream(self.epochs_done as u64 + 1);
        order.shuffle(&mut rng);

        let (mut ce, mut sup, mut combined) = (0.0, 0.0, 0.0);
        let mut skipped = 0;
        let mut batches = 0;
        for chunk in order.chunks(self.hp.batch_size) {
            let batch = QueryBatch::assemble(
                chunk.iter().map(|&i| &contexts[i]),
                params.num_entities,
                params.num_relations,
                self.hp.lambda,
            )?;
            let l = self.step(&batch, params)?;
            ce += l.ce;
            sup += l.sup;
            combined += l.combined;
            skipped += usize::from(l.supcon_skipped);
            batches += 1;
        }
        self.epochs_done += 1;
        let n = batches as f64;
        Ok(EpochLog {
            stage: 1,
            epoch: self.epochs_done,
            ce: ce / n,
            sup: sup / n,
            combined: combined / n,
            batches,
            supcon_skipped: skipped,
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }
}

fn describe_batch(batch: &QueryBatch) -> String {
    let shown: Vec<String> = (0..batch.len().min(8))
        .map(|i| {
            format!(
                "({},{},{})",
                batch.subjects[i], batch.relations[i], batch.objects[i]
            )
        })
        .collect();
    format!("{} queries, first: {}", batch.len(), shown.join(" "))
}

/// Runs `hp.stage1_epochs` epochs, calling `on_epoch` after each (for logging
/// and checkpointing).
pub fn train_stage1(
    contexts: &[QueryContext],
    params: &mut ModelParams,
    hp: &HyperParams,
    switches: &TrainSwitches,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams, &Stage1Trainer) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let mut trainer = Stage1Trainer::new(hp.clone(), *switches)?;
    let mut logs = Vec::with_capacity(hp.stage1_epochs);
    for _ in 0..hp.stage1_epochs {
        let log = trainer.run_epoch(contexts, params)?;
        on_epoch(&log, params, &trainer)?;
        logs.push(log);
    }
    Ok(logs)
}
