//! Small generated datasets with known structure, for smoke tests and benches.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Quadruple, TkgDataset};
use crate::error::Result;

/// A mix of recurrent facts (one fixed object per `(s, p)`, emitted at every
/// granule) and novel facts (pairs whose object changes at each occurrence
/// and never repeats).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    pub granules: usize,
    pub recurrent_pairs: usize,
    /// Target share of novel events among all events.
    pub novel_fraction: f64,
    pub valid_granules: usize,
    pub test_granules: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_entities: 50,
            num_relations: 10,
            granules: 60,
            recurrent_pairs: 100,
            novel_fraction: 0.0,
            valid_granules: 6,
            test_granules: 6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<TkgDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (ne, nr) = (self.num_entities as u32, self.num_relations as u32);
        let mut combos: Vec<(u32, u32)> =
            (0..ne).flat_map(|s| (0..nr).map(move |p| (s, p))).collect();
        combos.shuffle(&mut rng);

        let mut used_sp = HashSet::new();
        let mut used_op = HashSet::new();
        let mut recurrent = Vec::new();
        for &(s, p) in &combos {
            if recurrent.len() == self.recurrent_pairs {
                break;
            }
            let o = (s + rng.gen_range(1..ne)) % ne;
            if used_op.insert((o, p)) {
                used_sp.insert((s, p));
                recurrent.push((s, p, o));
            }
        }

        // Novel pairs occur every other granule, so each contributes about
        // granules/2 events.
        let recurrent_events = (recurrent.len() * self.granules) as f64;
        let per_novel = self.granules.div_ceil(2) as f64;
        let novel_pairs = if self.novel_fraction > 0.0 {
            (self.novel_fraction * recurrent_events / ((1.0 - self.novel_fraction) * per_novel))
                .round() as usize
        } else {
            0
        };
        let novel: Vec<(u32, u32, u32, usize)> = combos
            .iter()
            .filter(|sp| !used_sp.contains(*sp))
            .take(novel_pairs)
            .map(|&(s, p)| (s, p, rng.gen_range(0..ne), rng.gen_range(0..2)))
            .collect();

        let mut splits: [Vec<Quadruple>; 3] = Default::default();
        let train_end = self.granules - self.valid_granules - self.test_granules;
        for t in 0..self.granules {
            let split = if t < train_end {
                0
            } else if t < train_end + self.valid_granules {
                1
            } else {
                2
            };
            for &(s, p, o) in &recurrent {
                splits[split].push(Quadruple::new(s, p, o, t as u32));
            }
            for &(s, p, base, phase) in &novel {
                if (t + phase) % 2 == 0 {
                    let occurrence = ((t + phase) / 2) as u32;
                    let o = (base + occurrence) % ne;
                    splits[split].push(Quadruple::new(s, p, o, t as u32));
                }
            }
        }
        let [train, valid, test] = splits;
        TkgDataset::from_splits(
            train,
            valid,
            test,
            Some((self.num_entities, self.num_relations)),
            1,
            self.valid_granules > 0,
        )
    }
}

/// Uniformly random quadruples sorted by granule.
pub fn random_quadruples(
    n: usize,
    num_entities: u32,
    num_relations: u32,
    granules: u32,
    seed: u64,
) -> Vec<Quadruple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quads: Vec<Quadruple> = (0..n)
        .map(|_| {
            Quadruple::new(
                rng.gen_range(0..num_entities),
                rng.gen_range(0..num_relations),
                rng.gen_range(0..num_entities),
                rng.gen_range(0..granules),
            )
        })
        .collect();
    quads.sort_by_key(|q| q.t);
    quads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_stats;

    #[test]
    fn recurrent_dataset_shape() {
        let ds = SyntheticSpec::default().generate().unwrap();
        assert_eq!(ds.train.len(), 100 * 48);
        assert_eq!(ds.test.len(), 100 * 6);
        assert_eq!(ds.num_granules(), 60);
        // only the first occurrence of each pair is new
        let stats = compute_stats(&ds);
        assert_eq!(stats.new_events, 100);
    }

    #[test]
    fn novel_fraction_is_close_to_target() {
        let spec = SyntheticSpec {
            novel_fraction: 0.4,
            ..SyntheticSpec::default()
        };
        let ds = spec.generate().unwrap();
        let all = ds.timeline();
        let recurrent = 100 * 60;
        let share = (all.len() - recurrent) as f64 / all.len() as f64;
        assert!((share - 0.4).abs() < 0.02, "{share}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            novel_fraction: 0.3,
            seed: 5,
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
    }
}
