//! Dataset parsing, similarity clustering and the cluster-aware split.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::bucket_labels;
use crate::sequence;

pub const DATASET_HEADER: &str = "accession\tsequence\ttemperature_c";
pub const SPLIT_HEADER: &str = "accession\tsplit\tcluster_id";
pub const SUMMARY_COLUMNS: [&str; 6] = ["range", "sequences", "clusters", "train", "validation", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub accession: String,
    pub sequence: String,
    pub temperature: f64,
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    parse_dataset_str(&fs::read_to_string(path)?)
}

pub fn parse_dataset_str(text: &str) -> Result<Vec<DatasetRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == DATASET_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {DATASET_HEADER:?}"),
            })
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let accession = fields[0].trim();
        if accession.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty accession".into(),
            });
        }
        let seq = fields[1].trim();
        if seq.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty sequence".into(),
            });
        }
        sequence::validate(seq).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let temperature = fields[2]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite())
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("temperature {:?} is not a finite number", fields[2]),
            })?;
        if !seen.insert(accession.to_string()) {
            return Err(Error::Duplicate(accession.to_string()));
        }
        out.push(DatasetRecord {
            accession: accession.to_string(),
            sequence: seq.to_string(),
            temperature,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_dataset_str`].
pub fn dataset_to_tsv<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>) -> String {
    let mut s = format!("{DATASET_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}", r.accession, r.sequence, r.temperature);
    }
    s
}

/// Jaccard index of the two k-mer sets. Sequences shorter than `k` fall
/// back to `k = max(1, min(len_a, len_b))`.
pub fn kmer_similarity(a: &str, b: &str, k: usize) -> f64 {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    if a.is_empty() || b.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let k = k.min(a.len()).min(b.len()).max(1);
    let sa: HashSet<&[u8]> = a.windows(k).collect();
    let sb: HashSet<&[u8]> = b.windows(k).collect();
    let inter = sa.intersection(&sb).count();
    inter as f64 / (sa.len() + sb.len() - inter) as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    /// Cluster id per input record, in input order.
    pub assignment: Vec<usize>,
    /// Index (into the input) of each cluster's representative.
    pub representatives: Vec<usize>,
}

/// Longest-first greedy clustering: each sequence joins the earliest-created
/// cluster whose representative is at least `threshold` similar, or founds
/// a new one. Ties in length keep input order.
pub fn greedy_cluster(sequences: &[&str], threshold: f64, k: usize) -> Clustering {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sequences[i].len()));
    let mut assignment = vec![usize::MAX; sequences.len()];
    let mut representatives: Vec<usize> = Vec::new();
    for i in order {
        let hit = representatives
            .par_iter()
            .position_first(|&r| kmer_similarity(sequences[r], sequences[i], k) >= threshold);
        assignment[i] = match hit {
            Some(c) => c,
            None => {
                representatives.push(i);
                representatives.len() - 1
            }
        };
    }
    Clustering {
        assignment,
        representatives,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_frac: f64,
    pub val_cluster_frac: f64,
    pub temp_boundaries: Vec<f64>,
    pub similarity_threshold: f64,
    pub kmer: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            test_frac: 0.10,
            val_cluster_frac: 0.10,
            temp_boundaries: vec![45.0, 70.0, 100.0],
            similarity_threshold: 0.5,
            kmer: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub accession: String,
    pub split: Split,
    /// `None` for test records, which are not clustered.
    pub cluster: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub range: String,
    pub sequences: usize,
    pub clusters: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    /// One entry per record, in dataset order.
    pub entries: Vec<SplitEntry>,
    /// Accession of each cluster's representative, indexed by cluster id.
    pub representatives: Vec<String>,
    /// Per temperature range, then a `total` row.
    pub summary: Vec<SummaryRow>,
}

/// `round(x)` with halves going up; a tiny slack absorbs products like
/// `15 × 0.1` landing just below `.5`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// `round_half_up(n · frac)`, kept in `[1, n - 1]` when `n ≥ 2` so that both
/// sides stay non-empty.
fn portion(n: usize, frac: f64) -> usize {
    let c = round_half_up(n as f64 * frac);
    if n >= 2 {
        c.clamp(1, n - 1)
    } else {
        0
    }
}

pub fn make_split(records: &[DatasetRecord], cfg: &SplitConfig) -> Result<SplitAssignment> {
    if records.len() < 10 {
        return Err(Error::InvalidConfig(format!(
            "need at least 10 records to split, got {}",
            records.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_frac) || !(0.0..1.0).contains(&cfg.val_cluster_frac) {
        return Err(Error::InvalidConfig("split fractions must lie in [0, 1)".into()));
    }
    let n = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_test = portion(n, cfg.test_frac);
    let mut is_test = vec![false; n];
    for i in index::sample(&mut rng, n, n_test) {
        is_test[i] = true;
    }

    let bucket = |t: f64| cfg.temp_boundaries.partition_point(|&b| b <= t);
    let labels = bucket_labels(&cfg.temp_boundaries);
    let mut summary: Vec<SummaryRow> = labels
        .iter()
        .map(|l| SummaryRow {
            range: l.clone(),
            sequences: 0,
            clusters: 0,
            train: 0,
            validation: 0,
            test: 0,
        })
        .collect();

    let mut split = vec![Split::Test; n];
    let mut cluster = vec![None; n];
    let mut representatives = Vec::new();
    for (g, row) in summary.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| bucket(records[i].temperature) == g).collect();
        row.sequences = members.len();
        row.test = members.iter().filter(|&&i| is_test[i]).count();
        let pool: Vec<usize> = members.into_iter().filter(|&i| !is_test[i]).collect();
        if pool.is_empty() {
            continue;
        }
        let seqs: Vec<&str> = pool.iter().map(|&i| records[i].sequence.as_str()).collect();
        let c = greedy_cluster(&seqs, cfg.similarity_threshold, cfg.kmer);
        let offset = representatives.len();
        representatives.extend(c.representatives.iter().map(|&r| records[pool[r]].accession.clone()));
        let n_clusters = c.representatives.len();
        row.clusters = n_clusters;

        let mut order: Vec<usize> = (0..n_clusters).collect();
        order.shuffle(&mut rng);
        let n_val = portion(n_clusters, cfg.val_cluster_frac);
        let mut is_val = vec![false; n_clusters];
        for &c in &order[..n_val] {
            is_val[c] = true;
        }
        for (j, &i) in pool.iter().enumerate() {
            let cid = c.assignment[j];
            cluster[i] = Some(offset + cid);
            split[i] = if is_val[cid] { Split::Validation } else { Split::Train };
        }
        row.validation = pool.iter().filter(|&&i| split[i] == Split::Validation).count();
        row.train = pool.len() - row.validation;
    }
    let total = SummaryRow {
        range: "total".into(),
        sequences: n,
        clusters: summary.iter().map(|r| r.clusters).sum(),
        train: summary.iter().map(|r| r.train).sum(),
        validation: summary.iter().map(|r| r.validation).sum(),
        test: summary.iter().map(|r| r.test).sum(),
    };
    summary.push(total);

    let entries = records
        .iter()
        .enumerate()
        .map(|(i, r)| SplitEntry {
            accession: r.accession.clone(),
            split: split[i],
            cluster: cluster[i],
        })
        .collect();
    Ok(SplitAssignment {
        entries,
        representatives,
        summary,
    })
}

impl SplitAssignment {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{SPLIT_HEADER}\n");
        for e in &self.entries {
            let c = e.cluster.map_or_else(|| "-".to_string(), |c| c.to_string());
            let _ = writeln!(s, "{}\t{}\t{}", e.accession, e.split.as_str(), c);
        }
        s
    }

    pub fn summary_tsv(&self) -> String {
        let mut s = SUMMARY_COLUMNS.join("\t");
        s.push('\n');
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.range, r.sequences, r.clusters, r.train, r.validation, r.test
            );
        }
        s
    }

    pub fn accessions(&self, which: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == which)
            .map(|e| e.accession.as_str())
            .collect()
    }
}

/// Reads a split TSV back into `accession → split`.
pub fn parse_split_str(text: &str) -> Result<IndexMap<String, Split>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SPLIT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {SPLIT_HEADER:?}"),
            })
        }
    }
    let mut out = IndexMap::new();
    for (i, raw) in lines {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let split = (fields.len() == 3)
            .then(|| Split::parse(fields[1]))
            .flatten()
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("bad split row {raw:?}"),
            })?;
        if out.insert(fields[0].to_string(), split).is_some() {
            return Err(Error::Duplicate(fields[0].to_string()));
        }
    }
    Ok(out)
}

pub fn parse_split(path: impl AsRef<Path>) -> Result<IndexMap<String, Split>> {
    parse_split_str(&fs::read_to_string(path)?)
}
