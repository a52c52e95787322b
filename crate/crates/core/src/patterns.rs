//! Behavioral click-pattern features.
//!
//! A click pattern is the set of clicked positions of a session, stored as a
//! bitmask (bit `p - 1` for position `p`). Queries are described by how often
//! each pattern occurred in their sessions (`2^N` components). A result is
//! described per position it was shown at, over all sessions (first part) and
//! over sessions of the current query only (second part), `2·N·2^N`
//! components in total. The counts are raw and sparse.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::clicklog::QuerySession;
use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub type Pattern = u32;

/// Bitmask of the clicked positions (1-based) of a session.
pub fn click_pattern(positions: &[u8]) -> Pattern {
    positions.iter().fold(0, |acc, &p| acc | 1 << (p - 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeature {
    pub dimension: usize,
    /// `(index, count)` with strictly increasing indices and positive counts.
    pub entries: Vec<(u32, f64)>,
}

impl SparseFeature {
    pub fn zeros(dimension: usize) -> Self {
        SparseFeature {
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        for &(i, c) in &self.entries {
            out[i as usize] = c;
        }
        out
    }

    /// Elementwise sum of two features of the same dimension.
    pub fn add(&self, other: &SparseFeature) -> SparseFeature {
        assert_eq!(self.dimension, other.dimension);
        let mut merged: BTreeMap<u32, f64> = self.entries.iter().copied().collect();
        for &(i, c) in &other.entries {
            *merged.entry(i).or_default() += c;
        }
        SparseFeature {
            dimension: self.dimension,
            entries: merged.into_iter().filter(|&(_, c)| c != 0.0).collect(),
        }
    }
}

fn remove_one(f: &mut SparseFeature, index: u32) {
    if let Ok(k) = f.entries.binary_search_by_key(&index, |&(i, _)| i) {
        f.entries[k].1 -= 1.0;
        if f.entries[k].1 <= 0.0 {
            f.entries.remove(k);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SerpFeatures {
    pub query: SparseFeature,
    pub results: Vec<SparseFeature>,
}

type Counts = BTreeMap<Pattern, u64>;

/// Click-pattern counts keyed by query, by (document, position) and by
/// (query, document, position).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternStats {
    n_positions: usize,
    query: BTreeMap<u64, Counts>,
    result_pos: BTreeMap<(u64, u8), Counts>,
    query_result_pos: BTreeMap<(u64, u64, u8), Counts>,
}

impl PatternStats {
    pub fn new(n_positions: usize) -> Self {
        assert!(
            (1..=16).contains(&n_positions),
            "unsupported result-list length {n_positions}"
        );
        PatternStats {
            n_positions,
            query: BTreeMap::new(),
            result_pos: BTreeMap::new(),
            query_result_pos: BTreeMap::new(),
        }
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn n_patterns(&self) -> usize {
        1 << self.n_positions
    }

    pub fn query_dim(&self) -> usize {
        self.n_patterns()
    }

    pub fn result_dim(&self) -> usize {
        2 * self.n_positions * self.n_patterns()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }

    /// Adds one session: a query, its result list and the clicked positions.
    pub fn add(&mut self, query_id: u64, results: &[u64], positions: &[u8]) {
        assert_eq!(results.len(), self.n_positions);
        let pattern = click_pattern(positions);
        *self.query.entry(query_id).or_default().entry(pattern).or_default() += 1;
        for (i, &doc) in results.iter().enumerate() {
            let pos = (i + 1) as u8;
            *self
                .result_pos
                .entry((doc, pos))
                .or_default()
                .entry(pattern)
                .or_default() += 1;
            *self
                .query_result_pos
                .entry((query_id, doc, pos))
                .or_default()
                .entry(pattern)
                .or_default() += 1;
        }
    }

    pub fn add_session(&mut self, session: &QuerySession) {
        self.add(session.query_id, &session.results, session.click_sequence().positions());
    }

    /// Merges counts of another shard.
    pub fn merge(&mut self, other: &PatternStats) {
        assert_eq!(self.n_positions, other.n_positions);
        fn merge_map<K: Ord + Clone>(into: &mut BTreeMap<K, Counts>, from: &BTreeMap<K, Counts>) {
            for (k, counts) in from {
                let dst = into.entry(k.clone()).or_default();
                for (&p, &c) in counts {
                    *dst.entry(p).or_default() += c;
                }
            }
        }
        merge_map(&mut self.query, &other.query);
        merge_map(&mut self.result_pos, &other.result_pos);
        merge_map(&mut self.query_result_pos, &other.query_result_pos);
    }

    pub fn query_counts(&self, query_id: u64) -> Option<&BTreeMap<Pattern, u64>> {
        self.query.get(&query_id)
    }

    pub fn featurize_query(&self, query_id: u64) -> SparseFeature {
        let entries = self
            .query
            .get(&query_id)
            .map(|c| c.iter().map(|(&p, &n)| (p, n as f64)).collect())
            .unwrap_or_default();
        SparseFeature {
            dimension: self.query_dim(),
            entries,
        }
    }

    /// Features of `doc_id` shown at `position` (1-based) for `query_id`.
    pub fn featurize_result(&self, query_id: u64, doc_id: u64, position: u8) -> SparseFeature {
        let block = self.n_patterns() as u32;
        let offset = (position as u32 - 1) * block;
        let second = self.n_positions as u32 * block + offset;
        let mut entries = Vec::new();
        if let Some(c) = self.result_pos.get(&(doc_id, position)) {
            entries.extend(c.iter().map(|(&p, &n)| (offset + p, n as f64)));
        }
        if let Some(c) = self.query_result_pos.get(&(query_id, doc_id, position)) {
            entries.extend(c.iter().map(|(&p, &n)| (second + p, n as f64)));
        }
        SparseFeature {
            dimension: self.result_dim(),
            entries,
        }
    }

    /// Features of a whole result page: the query followed by each result at its position.
    pub fn featurize_serp(&self, query_id: u64, results: &[u64]) -> SerpFeatures {
        SerpFeatures {
            query: self.featurize_query(query_id),
            results: results
                .iter()
                .enumerate()
                .map(|(i, &d)| self.featurize_result(query_id, d, (i + 1) as u8))
                .collect(),
        }
    }

    /// Features of a page as if one session with click `pattern` on it had
    /// not been counted. Counts the session never contributed stay as they are.
    pub fn featurize_serp_without(&self, query_id: u64, results: &[u64], pattern: Pattern) -> SerpFeatures {
        let mut f = self.featurize_serp(query_id, results);
        let block = self.n_patterns() as u32;
        let second = self.n_positions as u32 * block;
        remove_one(&mut f.query, pattern);
        for (i, r) in f.results.iter_mut().enumerate() {
            let offset = i as u32 * block;
            remove_one(r, offset + pattern);
            remove_one(r, second + offset + pattern);
        }
        f
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STATS_MAGIC)?;
        w.write_all(&STATS_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_positions as u32).to_le_bytes())?;
        fn section<K, W: Write>(
            w: &mut W,
            map: &BTreeMap<K, Counts>,
            key: impl Fn(&K, &mut W) -> std::io::Result<()>,
        ) -> std::io::Result<()> {
            w.write_all(&(map.len() as u64).to_le_bytes())?;
            for (k, counts) in map {
                key(k, w)?;
                w.write_all(&(counts.len() as u32).to_le_bytes())?;
                for (&p, &c) in counts {
                    w.write_all(&p.to_le_bytes())?;
                    w.write_all(&c.to_le_bytes())?;
                }
            }
            Ok(())
        }
        section(&mut w, &self.query, |q, w| w.write_all(&q.to_le_bytes()))?;
        section(&mut w, &self.result_pos, |(d, p), w| {
            w.write_all(&d.to_le_bytes())?;
            w.write_all(&[*p])
        })?;
        section(&mut w, &self.query_result_pos, |(q, d, p), w| {
            w.write_all(&q.to_le_bytes())?;
            w.write_all(&d.to_le_bytes())?;
            w.write_all(&[*p])
        })?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATS_MAGIC {
            return Err(Error::Format("not a pattern-stats file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != STATS_VERSION {
            return Err(Error::Format(format!("pattern-stats version {version} not supported")));
        }
        let n = read_u32(&mut r)? as usize;
        if !(1..=16).contains(&n) {
            return Err(Error::Format(format!("bad result-list length {n}")));
        }
        let mut stats = PatternStats::new(n);
        fn counts<R: Read>(r: &mut R, n_patterns: u32) -> Result<Counts> {
            let len = read_u32(r)?;
            let mut c = Counts::new();
            for _ in 0..len {
                let p = read_u32(r)?;
                if p >= n_patterns {
                    return Err(Error::Format(format!("pattern {p} out of range")));
                }
                c.insert(p, read_u64(r)?);
            }
            Ok(c)
        }
        let np = stats.n_patterns() as u32;
        for _ in 0..read_u64(&mut r)? {
            let q = read_u64(&mut r)?;
            stats.query.insert(q, counts(&mut r, np)?);
        }
        for _ in 0..read_u64(&mut r)? {
            let d = read_u64(&mut r)?;
            let p = read_u8(&mut r)?;
            stats.result_pos.insert((d, p), counts(&mut r, np)?);
        }
        for _ in 0..read_u64(&mut r)? {
            let q = read_u64(&mut r)?;
            let d = read_u64(&mut r)?;
            let p = read_u8(&mut r)?;
            stats.query_result_pos.insert((q, d, p), counts(&mut r, np)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after pattern stats".into()));
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialized stats, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const STATS_MAGIC: &[u8; 8] = b"CSMPSTAT";
const STATS_VERSION: u32 = 1;

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Counts click patterns over training sessions (all with `SERP_SIZE` results).
pub fn count_patterns<'a>(sessions: impl IntoIterator<Item = &'a QuerySession>) -> PatternStats {
    let mut stats = PatternStats::new(crate::clicklog::SERP_SIZE);
    for s in sessions {
        stats.add_session(s);
    }
    stats
}

/// Dense embedding `Σ count · table[index]` of a sparse feature. The table has
/// one row of width `d` per feature component.
pub fn embed(table: &Tensor, feature: &SparseFeature) -> Result<Vec<f64>> {
    let (rows, width) = table.dims2();
    if rows != feature.dimension {
        return Err(Error::Shape(format!(
            "feature of dimension {} against embedding table with {rows} rows",
            feature.dimension
        )));
    }
    let mut out = vec![0.0; width];
    for &(i, c) in &feature.entries {
        for (o, w) in out.iter_mut().zip(table.row(i as usize)) {
            *o += c * w;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicklog::Click;
    use proptest::prelude::*;

    fn session(query_id: u64, results: Vec<u64>, positions: &[u8]) -> QuerySession {
        QuerySession {
            session_id: 1,
            query_time: 0,
            query_id,
            region_id: 0,
            results,
            clicks: positions
                .iter()
                .map(|&p| Click {
                    time_passed: 1,
                    position: p,
                })
                .collect(),
        }
    }

    fn serp() -> Vec<u64> {
        (11..21).collect()
    }

    #[test]
    fn leaving_a_session_out_matches_never_counting_it() {
        let mut shuffled = serp();
        shuffled.swap(0, 4);
        let sessions = [
            session(1, serp(), &[1, 3]),
            session(1, serp(), &[]),
            session(1, shuffled.clone(), &[2]),
            session(2, shuffled.clone(), &[1, 3]),
        ];
        let all = count_patterns(&sessions);
        for (k, s) in sessions.iter().enumerate() {
            let rest = count_patterns(sessions.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, s)| s));
            let pattern = click_pattern(s.click_sequence().positions());
            assert_eq!(
                all.featurize_serp_without(s.query_id, &s.results, pattern),
                rest.featurize_serp(s.query_id, &s.results)
            );
        }
    }

    #[test]
    fn pattern_is_a_set() {
        assert_eq!(click_pattern(&[1, 3]), 0b101);
        assert_eq!(click_pattern(&[3, 1, 3]), 0b101);
        assert_eq!(click_pattern(&[]), 0);
        assert_eq!(click_pattern(&[10]), 1 << 9);
    }

    #[test]
    fn query_counts() {
        let stats = count_patterns([&session(5, serp(), &[1, 3])]);
        assert_eq!(stats.query_counts(5).unwrap()[&0b101], 1);
        let f = stats.featurize_query(5);
        assert_eq!(f.dimension, 1024);
        assert_eq!(f.entries, vec![(5, 1.0)]);
        assert!(stats.featurize_query(6).is_zero());

        let stats = count_patterns([&session(7, serp(), &[]), &session(7, serp(), &[1])]);
        assert_eq!(stats.featurize_query(7).entries, vec![(0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn empty_training_set() {
        let stats = count_patterns(std::iter::empty());
        assert!(stats.is_empty());
        assert!(stats.featurize_query(1).is_zero());
        assert!(stats.featurize_result(1, 2, 3).is_zero());
    }

    #[test]
    fn identical_sessions_double_counts() {
        let s = session(5, serp(), &[2]);
        let stats = count_patterns([&s, &s]);
        assert_eq!(stats.featurize_query(5).entries, vec![(2, 2.0)]);
        assert_eq!(
            stats.featurize_result(5, 12, 2).entries,
            vec![(1024 + 2, 2.0), (10240 + 1024 + 2, 2.0)]
        );
    }

    #[test]
    fn result_feature_layout() {
        let stats = count_patterns([&session(100, serp(), &[1, 3])]);
        let f = stats.featurize_result(100, 13, 3);
        assert_eq!(f.dimension, 20480);
        assert_eq!(f.entries, vec![(2 * 1024 + 5, 1.0), (10240 + 2 * 1024 + 5, 1.0)]);
        assert!(stats.featurize_result(100, 99, 3).is_zero());
        // Same document under another query: only the query-independent part.
        let other = stats.featurize_result(200, 13, 3);
        assert_eq!(other.entries, vec![(2 * 1024 + 5, 1.0)]);
    }

    #[test]
    fn embed_is_linear() {
        let table = Tensor::from_fn(&[8, 3], |i| (i as f64 * 0.37).sin());
        let zero = SparseFeature::zeros(8);
        assert_eq!(embed(&table, &zero).unwrap(), vec![0.0; 3]);
        let unit = SparseFeature {
            dimension: 8,
            entries: vec![(5, 1.0)],
        };
        assert_eq!(embed(&table, &unit).unwrap(), table.row(5).to_vec());

        let f1 = SparseFeature {
            dimension: 8,
            entries: vec![(0, 2.0), (5, 1.0)],
        };
        let f2 = SparseFeature {
            dimension: 8,
            entries: vec![(1, 4.0), (5, 3.0)],
        };
        let sum = embed(&table, &f1.add(&f2)).unwrap();
        let parts: Vec<f64> = embed(&table, &f1)
            .unwrap()
            .iter()
            .zip(embed(&table, &f2).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in sum.iter().zip(&parts) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(embed(&table, &SparseFeature::zeros(9)).is_err());
    }

    #[test]
    fn file_round_trip() {
        let log = crate::clicklog::simulate_log(&Default::default(), 300, 8, 40).unwrap();
        let stats = count_patterns(&log);
        let bytes = stats.to_bytes();
        let back = PatternStats::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, stats);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.fingerprint(), stats.fingerprint());

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(PatternStats::read_from(corrupt.as_slice()).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(PatternStats::read_from(long.as_slice()).is_err());
    }

    fn arb_log() -> impl Strategy<Value = Vec<QuerySession>> {
        let s = (
            0u64..4,
            proptest::sample::subsequence((0u64..30).collect::<Vec<_>>(), 10).prop_shuffle(),
            proptest::collection::vec(1u8..=10, 0..5),
        )
            .prop_map(|(q, r, p)| session(q, r, &p));
        proptest::collection::vec(s, 0..30)
    }

    proptest! {
        #[test]
        fn counting_invariants(log in arb_log(), seed in any::<u64>()) {
            let stats = count_patterns(&log);
            for q in 0..4u64 {
                let n = log.iter().filter(|s| s.query_id == q).count() as u64;
                let total: u64 = stats.query_counts(q).map_or(0, |c| c.values().sum());
                prop_assert_eq!(total, n);
            }
            // Part 2 support is always within part 1 support (shifted by N·2^N).
            for s in &log {
                for (i, &d) in s.results.iter().enumerate() {
                    let f = stats.featurize_result(s.query_id, d, (i + 1) as u8);
                    let first: Vec<_> = f.entries.iter().filter(|e| e.0 < 10240).collect();
                    for &(idx, c) in f.entries.iter().filter(|e| e.0 >= 10240) {
                        let m = first.iter().find(|e| e.0 == idx - 10240);
                        prop_assert!(m.is_some_and(|m| m.1 >= c));
                    }
                }
            }
            // Order independence, and sharded counting merges to the same result.
            let mut shuffled = log.clone();
            let k = (seed as usize) % (log.len() + 1);
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(&count_patterns(&shuffled), &stats);
            let mut merged = count_patterns(&log[..k]);
            merged.merge(&count_patterns(&log[k..]));
            prop_assert_eq!(&merged, &stats);
        }
    }
}
