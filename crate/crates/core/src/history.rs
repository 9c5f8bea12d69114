//! Full-timeline historical frequencies.
//!
//! One chronological sweep over the (inverse-augmented) quadruple stream
//! produces a [`QueryContext`] per quadruple: the sparse counts of every
//! object seen with the same `(s, p)` at strictly earlier granules, with no
//! window truncation. Queries sharing `(s, p, t)` share one count snapshot.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::data::Quadruple;
use crate::error::{CenetError, Result};

pub mod cache;

/// Sparse `entity → count` pairs sorted by entity id. Counts are positive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseCounts(Vec<(u32, u32)>);

impl SparseCounts {
    /// Builds from pairs; zero counts are dropped and entities are sorted.
    pub fn from_pairs(mut pairs: Vec<(u32, u32)>) -> Self {
        pairs.retain(|&(_, c)| c > 0);
        pairs.sort_unstable_by_key(|&(e, _)| e);
        SparseCounts(pairs)
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.0
    }

    pub fn get(&self, entity: u32) -> u32 {
        self.0
            .binary_search_by_key(&entity, |&(e, _)| e)
            .map_or(0, |i| self.0[i].1)
    }

    pub fn contains(&self, entity: u32) -> bool {
        self.0.binary_search_by_key(&entity, |&(e, _)| e).is_ok()
    }

    /// Historical entity set: every entity with a positive count.
    pub fn entities(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().map(|&(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub s: u32,
    pub p: u32,
    pub t: u32,
    pub true_o: u32,
    /// Object frequencies for `(s, p)` over all granules `k < t`.
    pub freq: Arc<SparseCounts>,
    /// Whether `true_o` is a historical entity.
    pub label: bool,
}

impl QueryContext {
    pub fn new(s: u32, p: u32, t: u32, true_o: u32, freq: Arc<SparseCounts>) -> Self {
        let label = freq.contains(true_o);
        QueryContext {
            s,
            p,
            t,
            true_o,
            freq,
            label,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = u32> + '_ {
        self.freq.entities()
    }

    pub fn in_history(&self, entity: u32) -> bool {
        self.freq.contains(entity)
    }

    pub fn quadruple(&self) -> Quadruple {
        Quadruple::new(self.s, self.p, self.true_o, self.t)
    }
}

/// Cumulative `(s, p) → {o → count}` as of a cursor granule.
#[derive(Clone, Debug, Default)]
pub struct HistoryIndex {
    counts: HashMap<(u32, u32), BTreeMap<u32, u32>>,
    cursor: Option<u32>,
}

impl HistoryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Last fully absorbed granule.
    pub fn cursor(&self) -> Option<u32> {
        self.cursor
    }

    /// Absorbs every quadruple of one granule. Granules must arrive in
    /// strictly increasing order.
    pub fn absorb_granule(&mut self, quads: &[Quadruple]) -> Result<()> {
        let Some(first) = quads.first() else {
            return Ok(());
        };
        let t = first.t;
        if let Some(c) = self.cursor {
            if t <= c {
                return Err(CenetError::Unsorted {
                    index: 0,
                    t,
                    previous: c,
                });
            }
        }
        for q in quads {
            if q.t != t {
                return Err(CenetError::Unsorted {
                    index: 0,
                    t: q.t,
                    previous: t,
                });
            }
            *self
                .counts
                .entry((q.s, q.p))
                .or_default()
                .entry(q.o)
                .or_default() += 1;
        }
        self.cursor = Some(t);
        Ok(())
    }

    /// Absorbs all quadruples with `t < until` from a sorted stream,
    /// returning how many were consumed.
    pub fn absorb_until(&mut self, sorted: &[Quadruple], until: u32) -> Result<usize> {
        let end = sorted.partition_point(|q| q.t < until);
        for group in sorted[..end].chunk_by(|a, b| a.t == b.t) {
            if self.cursor.is_some_and(|c| group[0].t <= c) {
                continue;
            }
            self.absorb_granule(group)?;
        }
        Ok(end)
    }

    pub fn frequencies(&self, s: u32, p: u32) -> SparseCounts {
        self.counts
            .get(&(s, p))
            .map(|m| SparseCounts(m.iter().map(|(&o, &c)| (o, c)).collect()))
            .unwrap_or_default()
    }

    /// Number of distinct `(s, p, o)` combinations stored.
    pub fn stored_pairs(&self) -> usize {
        self.counts.values().map(BTreeMap::len).sum()
    }
}

fn check_sorted(quads: &[Quadruple]) -> Result<()> {
    for (i, w) in quads.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(CenetError::Unsorted {
                index: i + 1,
                t: w[1].t,
                previous: w[0].t,
            });
        }
    }
    Ok(())
}

/// One context per quadruple of a chronologically sorted stream.
pub fn build_contexts(quads: &[Quadruple]) -> Result<Vec<QueryContext>> {
    check_sorted(quads)?;
    let mut index = HistoryIndex::new();
    let mut out = Vec::with_capacity(quads.len());
    for group in quads.chunk_by(|a, b| a.t == b.t) {
        let mut snapshots: HashMap<(u32, u32), Arc<SparseCounts>> = HashMap::new();
        for q in group {
            let freq = snapshots
                .entry((q.s, q.p))
                .or_insert_with(|| Arc::new(index.frequencies(q.s, q.p)))
                .clone();
            out.push(QueryContext::new(q.s, q.p, q.t, q.o, freq));
        }
        index.absorb_granule(group)?;
    }
    Ok(out)
}

/// Contexts for each split of an augmented timeline. History for valid and
/// test queries includes every earlier split.
#[derive(Clone, Debug, Default)]
pub struct SplitContexts {
    pub train: Vec<QueryContext>,
    pub valid: Vec<QueryContext>,
    pub test: Vec<QueryContext>,
}

impl SplitContexts {
    pub fn get(&self, split: crate::data::Split) -> &[QueryContext] {
        match split {
            crate::data::Split::Train => &self.train,
            crate::data::Split::Valid => &self.valid,
            crate::data::Split::Test => &self.test,
        }
    }
}

/// Augments every split with inverse queries and sweeps the whole timeline once.
pub fn build_split_contexts(ds: &crate::data::TkgDataset) -> Result<SplitContexts> {
    let r = ds.num_relations_raw;
    let train = crate::data::augment_sorted(&ds.train, r);
    let valid = crate::data::augment_sorted(&ds.valid, r);
    let test = crate::data::augment_sorted(&ds.test, r);
    let mut stream = Vec::with_capacity(train.len() + valid.len() + test.len());
    stream.extend_from_slice(&train);
    stream.extend_from_slice(&valid);
    stream.extend_from_slice(&test);
    let mut all = build_contexts(&stream)?;
    let test_ctx = all.split_off(train.len() + valid.len());
    let valid_ctx = all.split_off(train.len());
    Ok(SplitContexts {
        train: all,
        valid: valid_ctx,
        test: test_ctx,
    })
}

/// Copy term: `+λ` for historical entities, `-λ` for every other entity.
pub fn clamp_to_z(freq: &SparseCounts, lambda: f64, num_entities: usize) -> Result<Vec<f64>> {
    let mut z = vec![0.0; num_entities];
    write_z(freq, lambda, &mut z)?;
    Ok(z)
}

pub(crate) fn write_z(freq: &SparseCounts, lambda: f64, out: &mut [f64]) -> Result<()> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(CenetError::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    out.fill(-lambda);
    let limit = out.len() as u64;
    for e in freq.entities() {
        let slot = out.get_mut(e as usize).ok_or(CenetError::IdOutOfRange {
            kind: "entity",
            id: e as u64,
            limit,
        })?;
        *slot = lambda;
    }
    Ok(())
}

pub fn label_query(ctx: &QueryContext) -> bool {
    ctx.freq.contains(ctx.true_o)
}
