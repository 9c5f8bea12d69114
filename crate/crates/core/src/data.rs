//! Quadruple datasets in the tab-separated ICEWS/GDELT/WIKI/YAGO layout,
//! inverse-relation augmentation and new-event statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CenetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub s: u32,
    pub p: u32,
    pub o: u32,
    /// Granule index (raw time divided by the dataset granularity).
    pub t: u32,
}

impl Quadruple {
    pub const fn new(s: u32, p: u32, o: u32, t: u32) -> Self {
        Quadruple { s, p, o, t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(CenetError::Config(format!(
                "unknown split `{other}` (expected train, valid or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TkgDataset {
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub num_entities: usize,
    pub num_relations_raw: usize,
    /// Raw-time units per granule.
    pub granularity: u32,
    pub valid_present: bool,
}

/// Parses one quadruple file. Lines are `s p o time [extra columns...]`
/// separated by tabs (any whitespace is accepted); blank lines are skipped.
pub fn parse_quadruple_file(path: impl AsRef<Path>, granularity: u32) -> Result<Vec<Quadruple>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CenetError::io(path, e))?;
    parse_quadruples(BufReader::new(file), path, granularity)
}

pub fn parse_quadruples(
    reader: impl BufRead,
    path: &Path,
    granularity: u32,
) -> Result<Vec<Quadruple>> {
    if granularity == 0 {
        return Err(CenetError::Config("granularity must be positive".into()));
    }
    let err = |line: usize, message: String| CenetError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CenetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next = |what: &str| -> Result<u32> {
            let raw = fields
                .next()
                .ok_or_else(|| err(lineno, format!("missing {what} column")))?;
            raw.parse::<u32>().map_err(|_| {
                err(
                    lineno,
                    format!("{what} `{raw}` is not a non-negative integer"),
                )
            })
        };
        let s = next("subject")?;
        let p = next("relation")?;
        let o = next("object")?;
        let raw_t = next("time")?;
        if raw_t % granularity != 0 {
            return Err(err(
                lineno,
                format!("time {raw_t} is not a multiple of granularity {granularity}"),
            ));
        }
        out.push(Quadruple::new(s, p, o, raw_t / granularity));
    }
    out.sort_by_key(|q| q.t);
    Ok(out)
}

/// Writes quadruples back in the distribution layout (raw time restored).
pub fn write_quadruples(
    mut w: impl Write,
    quads: &[Quadruple],
    granularity: u32,
) -> std::io::Result<()> {
    for q in quads {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            q.s,
            q.p,
            q.o,
            q.t as u64 * granularity as u64
        )?;
    }
    Ok(())
}

/// Appends `(o, p + num_relations_raw, s, t)` for every quadruple so subject
/// prediction becomes object prediction over the doubled relation vocabulary.
pub fn add_inverse_quadruples(quads: &[Quadruple], num_relations_raw: usize) -> Vec<Quadruple> {
    let shift = num_relations_raw as u32;
    let mut out = Vec::with_capacity(quads.len() * 2);
    out.extend_from_slice(quads);
    out.extend(
        quads
            .iter()
            .map(|q| Quadruple::new(q.o, q.p + shift, q.s, q.t)),
    );
    out
}

/// Merges object queries and inverse queries into one chronologically sorted
/// stream (stable: at equal `t`, originals precede their inverses).
pub fn augment_sorted(quads: &[Quadruple], num_relations_raw: usize) -> Vec<Quadruple> {
    let mut out = add_inverse_quadruples(quads, num_relations_raw);
    out.sort_by_key(|q| q.t);
    out
}

fn read_stat_file(path: &Path) -> Result<Option<(usize, usize)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CenetError::io(path, e))?;
    let mut nums = text.split_whitespace().map(|t| t.parse::<usize>());
    match (nums.next(), nums.next()) {
        (Some(Ok(e)), Some(Ok(r))) => Ok(Some((e, r))),
        _ => Err(CenetError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected `num_entities num_relations`".into(),
        }),
    }
}

impl TkgDataset {
    /// Loads `train.txt`, `valid.txt` (optional), `test.txt` and `stat.txt`
    /// (optional) from a directory.
    pub fn load(dir: impl AsRef<Path>, granularity: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let train_path = dir.join("train.txt");
        let test_path = dir.join("test.txt");
        for p in [&train_path, &test_path] {
            if !p.exists() {
                return Err(CenetError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            }
        }
        let train = parse_quadruple_file(&train_path, granularity)?;
        let valid_path = dir.join("valid.txt");
        let valid_present = valid_path.exists();
        let valid = if valid_present {
            parse_quadruple_file(&valid_path, granularity)?
        } else {
            Vec::new()
        };
        let test = parse_quadruple_file(&test_path, granularity)?;
        let stat = read_stat_file(&dir.join("stat.txt"))?;
        Self::from_splits(train, valid, test, stat, granularity, valid_present)
    }

    /// Assembles a dataset from parsed splits. Vocabulary sizes come from
    /// `vocab` when given, else from the largest id seen plus one.
    pub fn from_splits(
        mut train: Vec<Quadruple>,
        mut valid: Vec<Quadruple>,
        mut test: Vec<Quadruple>,
        vocab: Option<(usize, usize)>,
        granularity: u32,
        valid_present: bool,
    ) -> Result<Self> {
        for split in [&mut train, &mut valid, &mut test] {
            split.sort_by_key(|q| q.t);
        }
        let all = || train.iter().chain(&valid).chain(&test);
        let (num_entities, num_relations_raw) = match vocab {
            Some(v) => v,
            None => (
                all().map(|q| q.s.max(q.o) as usize + 1).max().unwrap_or(0),
                all().map(|q| q.p as usize + 1).max().unwrap_or(0),
            ),
        };
        for q in all() {
            for (kind, id, limit) in [
                ("entity", q.s as usize, num_entities),
                ("entity", q.o as usize, num_entities),
                ("relation", q.p as usize, num_relations_raw),
            ] {
                if id >= limit {
                    return Err(CenetError::IdOutOfRange {
                        kind,
                        id: id as u64,
                        limit: limit as u64,
                    });
                }
            }
        }
        let ds = TkgDataset {
            train,
            valid,
            test,
            num_entities,
            num_relations_raw,
            granularity,
            valid_present,
        };
        ds.check_timeline()?;
        Ok(ds)
    }

    fn check_timeline(&self) -> Result<()> {
        let max_t = |qs: &[Quadruple]| qs.last().map(|q| q.t);
        let min_t = |qs: &[Quadruple]| qs.first().map(|q| q.t);
        let ordered = |a: Option<u32>, b: Option<u32>, what: &str| match (a, b) {
            (Some(a), Some(b)) if a > b => Err(CenetError::Timeline(format!(
                "{what}: latest earlier-split granule {a} is after earliest later-split granule {b}"
            ))),
            _ => Ok(()),
        };
        ordered(max_t(&self.train), min_t(&self.test), "train/test")?;
        ordered(max_t(&self.train), min_t(&self.valid), "train/valid")?;
        ordered(max_t(&self.valid), min_t(&self.test), "valid/test")?;
        if let (Some(a), Some(b)) = (max_t(&self.train), min_t(&self.test)) {
            if a == b {
                return Err(CenetError::Timeline(format!(
                    "train and test share granule {a}; extrapolation needs max(train.t) < min(test.t)"
                )));
            }
        }
        Ok(())
    }

    pub fn num_relations_total(&self) -> usize {
        2 * self.num_relations_raw
    }

    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// All raw quadruples in chronological order (train, then valid, then test).
    pub fn timeline(&self) -> Vec<Quadruple> {
        let mut all = Vec::with_capacity(self.train.len() + self.valid.len() + self.test.len());
        all.extend_from_slice(&self.train);
        all.extend_from_slice(&self.valid);
        all.extend_from_slice(&self.test);
        all
    }

    pub fn num_granules(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .map(|q| q.t)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Writes the dataset in the on-disk layout understood by [`TkgDataset::load`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CenetError::io(dir, e))?;
        let mut splits = vec![("train.txt", &self.train), ("test.txt", &self.test)];
        if self.valid_present {
            splits.push(("valid.txt", &self.valid));
        }
        for (name, quads) in splits {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| CenetError::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            write_quadruples(&mut w, quads, self.granularity)
                .map_err(|e| CenetError::io(&path, e))?;
            w.flush().map_err(|e| CenetError::io(&path, e))?;
        }
        let stat = dir.join("stat.txt");
        fs::write(
            &stat,
            format!("{}\t{}\n", self.num_entities, self.num_relations_raw),
        )
        .map_err(|e| CenetError::io(&stat, e))?;
        Ok(())
    }
}

/// SHA-256 over the dataset files present in `dir` plus the granularity.
pub fn dataset_fingerprint(dir: impl AsRef<Path>, granularity: u32) -> Result<[u8; 32]> {
    let dir = dir.as_ref();
    let mut hasher = Sha256::new();
    hasher.update(granularity.to_le_bytes());
    for name in ["train.txt", "valid.txt", "test.txt", "stat.txt"] {
        let path: PathBuf = dir.join(name);
        hasher.update(name.as_bytes());
        if path.exists() {
            let mut buf = Vec::new();
            fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(|e| CenetError::io(&path, e))?;
            hasher.update((buf.len() as u64).to_le_bytes());
            hasher.update(&buf);
        }
    }
    Ok(hasher.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: Option<usize>,
    pub test: usize,
    pub granules: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub counts: SplitCounts,
    pub new_events: usize,
    pub repetitive_events: usize,
    pub new_event_rate: f64,
    /// New-event count per training granule, indexed by granule.
    pub per_timestamp_new_counts: Vec<usize>,
    /// Repetitive-event count per training granule, indexed by granule.
    pub per_timestamp_repetitive_counts: Vec<usize>,
    /// `[gap, count]` where gap is `t` minus the first earlier occurrence.
    pub first_gap_hist: Vec<[u64; 2]>,
    /// `[gap, count]` where gap is `t` minus the latest earlier occurrence.
    pub latest_gap_hist: Vec<[u64; 2]>,
}

/// New/repetitive event statistics over the training split. An event is new
/// when its `(s, p, o)` never occurred at an earlier granule.
pub fn compute_stats(ds: &TkgDataset) -> DatasetStats {
    let mut seen: HashMap<(u32, u32, u32), (u32, u32)> = HashMap::new();
    let max_t = ds.train.last().map_or(0, |q| q.t as usize + 1);
    let mut per_new = vec![0usize; max_t];
    let mut per_rep = vec![0usize; max_t];
    let mut first_hist: BTreeMap<u64, u64> = BTreeMap::new();
    let mut latest_hist: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut new_events, mut repetitive) = (0usize, 0usize);

    for group in ds.train.chunk_by(|a, b| a.t == b.t) {
        let t = group[0].t;
        for q in group {
            match seen.get(&(q.s, q.p, q.o)) {
                Some(&(first, latest)) => {
                    repetitive += 1;
                    per_rep[t as usize] += 1;
                    *first_hist.entry((t - first) as u64).or_default() += 1;
                    *latest_hist.entry((t - latest) as u64).or_default() += 1;
                }
                None => {
                    new_events += 1;
                    per_new[t as usize] += 1;
                }
            }
        }
        for q in group {
            seen.entry((q.s, q.p, q.o))
                .and_modify(|e| e.1 = t)
                .or_insert((t, t));
        }
    }

    let total = new_events + repetitive;
    DatasetStats {
        counts: SplitCounts {
            entities: ds.num_entities,
            relations: ds.num_relations_raw,
            train: ds.train.len(),
            valid: ds.valid_present.then_some(ds.valid.len()),
            test: ds.test.len(),
            granules: ds.num_granules(),
        },
        new_events,
        repetitive_events: repetitive,
        new_event_rate: if total == 0 {
            0.0
        } else {
            new_events as f64 / total as f64
        },
        per_timestamp_new_counts: per_new,
        per_timestamp_repetitive_counts: per_rep,
        first_gap_hist: first_hist.into_iter().map(|(g, c)| [g, c]).collect(),
        latest_gap_hist: latest_hist.into_iter().map(|(g, c)| [g, c]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(s: &str, granularity: u32) -> Result<Vec<Quadruple>> {
        parse_quadruples(s.as_bytes(), Path::new("mem.txt"), granularity)
    }

    #[test]
    fn parses_line_with_granularity() {
        assert_eq!(
            parse_str("4\t7\t9\t48\n", 24).unwrap(),
            vec![Quadruple::new(4, 7, 9, 2)]
        );
    }

    #[test]
    fn ignores_trailing_columns() {
        assert_eq!(
            parse_str("1\t2\t3\t0\t-1\n", 24).unwrap(),
            vec![Quadruple::new(1, 2, 3, 0)]
        );
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(parse_str("", 1).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_str("1\t2\t3\t0\n1\tx\t3\t0\n", 1).unwrap_err();
        match err {
            CenetError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_str("1\t2\t3\n", 1),
            Err(CenetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn indivisible_time_is_error() {
        assert!(matches!(
            parse_str("1\t2\t3\t25\n", 24),
            Err(CenetError::Parse { .. })
        ));
    }

    #[test]
    fn parse_sorts_stably_by_time() {
        let qs = parse_str("0\t0\t1\t2\n0\t0\t2\t1\n0\t0\t3\t2\n", 1).unwrap();
        assert_eq!(qs.iter().map(|q| q.o).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    #[test]
    fn inverse_definition() {
        let out = add_inverse_quadruples(&[Quadruple::new(1, 0, 2, 5)], 3);
        assert_eq!(
            out,
            vec![Quadruple::new(1, 0, 2, 5), Quadruple::new(2, 3, 1, 5)]
        );
        assert!(add_inverse_quadruples(&[], 3).is_empty());
    }

    #[test]
    fn stats_single_event() {
        let ds = TkgDataset::from_splits(
            vec![Quadruple::new(0, 0, 1, 0)],
            vec![],
            vec![Quadruple::new(0, 0, 1, 1)],
            None,
            1,
            false,
        )
        .unwrap();
        let st = compute_stats(&ds);
        assert_eq!(st.new_event_rate, 1.0);
    }

    #[test]
    fn stats_gap_example() {
        let ds = TkgDataset::from_splits(
            vec![Quadruple::new(0, 0, 1, 0), Quadruple::new(0, 0, 1, 5)],
            vec![],
            vec![Quadruple::new(0, 0, 1, 6)],
            None,
            1,
            false,
        )
        .unwrap();
        let st = compute_stats(&ds);
        assert_eq!((st.new_events, st.repetitive_events), (1, 1));
        assert_eq!(st.first_gap_hist, vec![[5, 1]]);
        assert_eq!(st.latest_gap_hist, vec![[5, 1]]);
    }

    #[test]
    fn same_granule_duplicates_are_both_new() {
        let ds = TkgDataset::from_splits(
            vec![
                Quadruple::new(0, 0, 1, 0),
                Quadruple::new(0, 0, 1, 0),
                Quadruple::new(0, 0, 1, 3),
            ],
            vec![],
            vec![Quadruple::new(0, 0, 1, 4)],
            None,
            1,
            false,
        )
        .unwrap();
        let st = compute_stats(&ds);
        assert_eq!((st.new_events, st.repetitive_events), (2, 1));
        // first and latest occurrence are both granule 0
        assert_eq!(st.latest_gap_hist, vec![[3, 1]]);
    }

    #[test]
    fn vocab_from_stat_is_enforced() {
        let err = TkgDataset::from_splits(
            vec![Quadruple::new(5, 0, 1, 0)],
            vec![],
            vec![],
            Some((3, 1)),
            1,
            false,
        );
        assert!(matches!(
            err,
            Err(CenetError::IdOutOfRange { kind: "entity", .. })
        ));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let err = TkgDataset::from_splits(
            vec![Quadruple::new(0, 0, 1, 3)],
            vec![],
            vec![Quadruple::new(0, 0, 1, 2)],
            None,
            1,
            false,
        );
        assert!(matches!(err, Err(CenetError::Timeline(_))));
    }

    #[test]
    fn load_missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = TkgDataset::load(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("train.txt"), "{err}");
    }

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = TkgDataset::from_splits(
            vec![Quadruple::new(0, 1, 2, 0), Quadruple::new(2, 0, 1, 1)],
            vec![Quadruple::new(1, 1, 0, 2)],
            vec![Quadruple::new(0, 0, 2, 3)],
            Some((4, 2)),
            24,
            true,
        )
        .unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(TkgDataset::load(dir.path(), 24).unwrap(), ds);
    }
}
