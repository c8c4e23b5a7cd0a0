//! Ranking datasets: queries with graded items, a synthetic generator, and a
//! LETOR/SVMlight reader and writer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::{self, Rng};

pub const MAX_LABEL: u8 = 4;

/// Probability that a user prefers an item with the given graded label.
pub fn relevance_prob(label: u8) -> Result<f64> {
    if label > MAX_LABEL {
        return domain(format!("label {label} outside 0..={MAX_LABEL}"));
    }
    Ok(0.25 * f64::from(label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub features: Vec<f64>,
    pub label: u8,
    pub relevance_prob: f64,
}

impl Item {
    pub fn new(item_id: usize, features: Vec<f64>, label: u8) -> Result<Self> {
        Ok(Self {
            item_id,
            features,
            label,
            relevance_prob: relevance_prob(label)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub items: Vec<Item>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn relevance(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.relevance_prob).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Query>,
    pub validation: Vec<Query>,
    pub test: Vec<Query>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn partition(&self, p: Partition) -> &[Query] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn all_queries(&self) -> impl Iterator<Item = &Query> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }

    pub fn num_queries(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn max_items_per_query(&self) -> usize {
        self.all_queries().map(Query::len).max().unwrap_or(0)
    }

    pub fn find_query(&self, query_id: u64) -> Option<&Query> {
        self.all_queries().find(|q| q.query_id == query_id)
    }

    /// Builds a dataset from already partitioned queries, checking that the
    /// partitions share no query id and that every item has the same
    /// feature dimension.
    pub fn from_partitions(
        train: Vec<Query>,
        validation: Vec<Query>,
        test: Vec<Query>,
    ) -> Result<Self> {
        let mut owner: HashMap<u64, Partition> = HashMap::new();
        let parts = [
            (Partition::Train, &train),
            (Partition::Validation, &validation),
            (Partition::Test, &test),
        ];
        let mut feature_dim = None;
        for (p, queries) in parts {
            for q in queries.iter() {
                if q.items.is_empty() {
                    return domain(format!("query {} has no items", q.query_id));
                }
                if let Some(prev) = owner.insert(q.query_id, p) {
                    return domain(format!(
                        "query {} appears in both {prev:?} and {p:?}",
                        q.query_id
                    ));
                }
                for item in &q.items {
                    match feature_dim {
                        None => feature_dim = Some(item.features.len()),
                        Some(d) if d != item.features.len() => {
                            return Err(Error::DimensionMismatch {
                                expected: d,
                                got: item.features.len(),
                            })
                        }
                        _ => {}
                    }
                }
            }
        }
        let feature_dim = feature_dim.ok_or(Error::EmptyDataset)?;
        if feature_dim == 0 {
            return domain("feature dimension must be positive");
        }
        Ok(Self {
            train,
            validation,
            test,
            feature_dim,
        })
    }

    /// Per-feature min-max scaling fit on the training partition and applied
    /// to every partition. Constant features map to 0.
    pub fn min_max_normalized(&self) -> Self {
        let dim = self.feature_dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for item in self.train.iter().flat_map(|q| q.items.iter()) {
            for (j, &v) in item.features.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let scale = |queries: &[Query]| -> Vec<Query> {
            queries
                .iter()
                .map(|q| Query {
                    query_id: q.query_id,
                    items: q
                        .items
                        .iter()
                        .map(|it| Item {
                            features: it
                                .features
                                .iter()
                                .enumerate()
                                .map(|(j, &v)| {
                                    let range = hi[j] - lo[j];
                                    if range.is_finite() && range > 0.0 {
                                        (v - lo[j]) / range
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                            ..it.clone()
                        })
                        .collect(),
                })
                .collect()
        };
        Self {
            train: scale(&self.train),
            validation: scale(&self.validation),
            test: scale(&self.test),
            feature_dim: dim,
        }
    }
}

/// Knobs of the synthetic generator beyond the sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Marginal probability of each grade 0..=4.
    pub label_probs: [f64; 5],
    /// Distance between neighbouring grade centers along the signal direction.
    pub separation: f64,
    /// Standard deviation of the per-grade random offset of each center.
    pub center_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            label_probs: [0.40, 0.25, 0.17, 0.11, 0.07],
            separation: 0.2,
            center_jitter: 0.25,
        }
    }
}

/// Synthetic dataset split 60/20/20 into train/validation/test queries.
pub fn generate_synthetic(
    n_queries: usize,
    items_per_query: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset> {
    let n_train = ((n_queries as f64) * 0.6).round() as usize;
    let n_train = n_train.clamp(1, n_queries.max(1));
    let n_val = (((n_queries as f64) * 0.2).round() as usize).min(n_queries - n_train);
    let n_test = n_queries - n_train - n_val;
    generate_synthetic_split(
        [n_train, n_val, n_test],
        items_per_query,
        feature_dim,
        seed,
        &SyntheticConfig::default(),
    )
}

/// Synthetic dataset with explicit partition sizes.
///
/// Each grade has a cluster center in feature space; an item's features are
/// its grade's center plus standard-normal noise.
pub fn generate_synthetic_split(
    sizes: [usize; 3],
    items_per_query: usize,
    feature_dim: usize,
    seed: u64,
    config: &SyntheticConfig,
) -> Result<Dataset> {
    let n_queries: usize = sizes.iter().sum();
    if n_queries == 0 || items_per_query == 0 || feature_dim == 0 {
        return domain("synthetic dataset sizes must all be at least 1");
    }
    if config.label_probs.iter().any(|&p| p <= 0.0) {
        return domain("every grade needs positive probability");
    }
    let mut rng = rng::derived(seed, &[0xDA7A]);

    let mut direction: Vec<f64> = (0..feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|v| *v /= norm);
    let centers: Vec<Vec<f64>> = (0..=MAX_LABEL)
        .map(|g| {
            direction
                .iter()
                .map(|&u| {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    f64::from(g) * config.separation * u * (feature_dim as f64).sqrt()
                        + config.center_jitter * jitter
                })
                .collect()
        })
        .collect();

    let total: f64 = config.label_probs.iter().sum();
    let cdf: Vec<f64> = config
        .label_probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p / total;
            Some(*acc)
        })
        .collect();

    let mut queries = Vec::with_capacity(n_queries);
    for qid in 0..n_queries {
        let items = (0..items_per_query)
            .map(|item_id| {
                let u: f64 = rng.random();
                let label = cdf.iter().position(|&c| u < c).unwrap_or(4) as u8;
                let features = centers[label as usize]
                    .iter()
                    .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Item::new(item_id, features, label)
            })
            .collect::<Result<Vec<_>>>()?;
        queries.push(Query {
            query_id: qid as u64,
            items,
        });
    }
    let test = queries.split_off(sizes[0] + sizes[1]);
    let validation = queries.split_off(sizes[0]);
    Dataset::from_partitions(queries, validation, test)
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn parse_label(tok: &str, line: usize) -> Result<u8> {
    let raw: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a numeric label, found {tok:?}"),
    })?;
    if !raw.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite label {tok:?}"),
        });
    }
    let rounded = raw.round();
    if rounded < 0.0 || rounded > f64::from(MAX_LABEL) {
        let clamped = rounded.clamp(0.0, f64::from(MAX_LABEL));
        log::warn!("line {line}: label {raw} clamped to {clamped}");
        return Ok(clamped as u8);
    }
    Ok(rounded as u8)
}

/// Reads LETOR/SVMlight lines into queries, grouped by qid in order of first
/// appearance. Gzip input is detected from the magic bytes.
pub fn read_letor_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let reader = open_maybe_gzip(path.as_ref())?;
    let mut rows: Vec<(u64, u8, Vec<(usize, f64)>)> = Vec::new();
    let mut max_fid = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let label_tok = toks.next().unwrap_or_default();
        if label_tok.contains(':') {
            return Err(Error::Parse {
                line: lineno,
                msg: "missing label before qid".into(),
            });
        }
        let label = parse_label(label_tok, lineno)?;
        let qid_tok = toks.next().ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing qid".into(),
        })?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected qid:<integer>, found {qid_tok:?}"),
            })?;
        let mut feats = Vec::new();
        for tok in toks {
            let (fid, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("malformed feature {tok:?}"),
            })?;
            let fid: usize = fid.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature id {fid:?}"),
            })?;
            if fid == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "feature ids start at 1".into(),
                });
            }
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature value {val:?}"),
            })?;
            max_fid = max_fid.max(fid);
            feats.push((fid, val));
        }
        rows.push((qid, label, feats));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = max_fid.max(1);
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<Item>> = HashMap::new();
    for (qid, label, feats) in rows {
        let mut features = vec![0.0; dim];
        for (fid, v) in feats {
            features[fid - 1] = v;
        }
        let items = groups.entry(qid).or_insert_with(|| {
            order.push(qid);
            Vec::new()
        });
        let id = items.len();
        items.push(Item::new(id, features, label)?);
    }
    Ok(order
        .into_iter()
        .map(|qid| Query {
            query_id: qid,
            items: groups.remove(&qid).unwrap_or_default(),
        })
        .collect())
}

/// Loads a single LETOR file; every query goes into the training partition.
pub fn load_letor(path: impl AsRef<Path>) -> Result<Dataset> {
    let queries = read_letor_queries(path)?;
    Dataset::from_partitions(queries, Vec::new(), Vec::new())
}

/// Loads separate train/validation/test LETOR files. Feature vectors are
/// zero-padded to the widest file.
pub fn load_letor_splits(
    train: impl AsRef<Path>,
    validation: impl AsRef<Path>,
    test: impl AsRef<Path>,
) -> Result<Dataset> {
    let mut parts = [
        read_letor_queries(train)?,
        read_letor_queries(validation)?,
        read_letor_queries(test)?,
    ];
    let dim = parts
        .iter()
        .flatten()
        .flat_map(|q| q.items.iter())
        .map(|i| i.features.len())
        .max()
        .unwrap_or(0);
    for item in parts.iter_mut().flatten().flat_map(|q| q.items.iter_mut()) {
        item.features.resize(dim, 0.0);
    }
    let [tr, va, te] = parts;
    Dataset::from_partitions(tr, va, te)
}

pub fn save_letor(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for q in queries {
        for item in &q.items {
            write!(out, "{} qid:{}", item.label, q.query_id)?;
            for (j, v) in item.features.iter().enumerate() {
                write!(out, " {}:{}", j + 1, v)?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Random subset of queries, at least one, used to fit the logging policy.
pub fn sample_fraction(queries: &[Query], fraction: f64, rng: &mut Rng) -> Vec<Query> {
    let n = ((queries.len() as f64) * fraction).round().max(1.0) as usize;
    let n = n.min(queries.len());
    rand::seq::index::sample(rng, queries.len(), n)
        .into_iter()
        .map(|i| queries[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relevance_prob_values() {
        assert_eq!(relevance_prob(0).unwrap(), 0.0);
        assert_eq!(relevance_prob(4).unwrap(), 1.0);
        assert_eq!(relevance_prob(2).unwrap(), 0.5);
        assert!(matches!(relevance_prob(5), Err(Error::Domain(_))));
    }

    fn write_tmp(content: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content).unwrap();
        f
    }

    #[test]
    fn parses_simple_file() {
        let f = write_tmp(b"2 qid:1 1:0.5\n0 qid:1 1:0.1\n");
        let ds = load_letor(f.path()).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.train[0].labels(), vec![2, 0]);
        assert_eq!(ds.train[0].items[0].features, vec![0.5]);
    }

    #[test]
    fn clamps_out_of_range_labels() {
        let f = write_tmp(b"5 qid:1 1:0.5\n");
        let ds = load_letor(f.path()).unwrap();
        assert_eq!(ds.train[0].items[0].label, 4);
        assert_eq!(ds.train[0].items[0].relevance_prob, 1.0);
    }

    #[test]
    fn missing_label_names_line() {
        let f = write_tmp(b"qid:1 1:0.5\n");
        match load_letor(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        let f = write_tmp(b"# only a comment\n\n");
        assert!(matches!(load_letor(f.path()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn fills_missing_features_and_strips_comments() {
        let f = write_tmp(b"1 qid:7 3:2.0 # doc a\n3 qid:8 1:1.5\n0 qid:7 2:-1\n");
        let ds = load_letor(f.path()).unwrap();
        assert_eq!(ds.feature_dim, 3);
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.train[0].query_id, 7);
        assert_eq!(ds.train[0].items[0].features, vec![0.0, 0.0, 2.0]);
        assert_eq!(ds.train[0].items[1].features, vec![0.0, -1.0, 0.0]);
        assert_eq!(ds.train[1].items[0].features, vec![1.5, 0.0, 0.0]);
    }

    #[test]
    fn reads_gzip() {
        use flate2::write::GzEncoder;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(b"3 qid:2 1:1 2:2\n1 qid:2 1:0\n").unwrap();
        let f = write_tmp(&enc.finish().unwrap());
        let ds = load_letor(f.path()).unwrap();
        assert_eq!(ds.train[0].labels(), vec![3, 1]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(1, 3, 2, 7).unwrap();
        let b = generate_synthetic(1, 3, 2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_split_counts() {
        let ds = generate_synthetic(100, 10, 5, 1).unwrap();
        assert_eq!(
            (ds.train.len(), ds.validation.len(), ds.test.len()),
            (60, 20, 20)
        );
        assert_eq!(ds.feature_dim, 5);
    }

    #[test]
    fn synthetic_covers_every_grade() {
        let ds = generate_synthetic(50, 20, 8, 3).unwrap();
        let mut seen = [0usize; 5];
        for item in ds.all_queries().flat_map(|q| q.items.iter()) {
            seen[item.label as usize] += 1;
            assert_eq!(item.relevance_prob, 0.25 * f64::from(item.label));
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn rejects_overlapping_partitions() {
        let q = Query {
            query_id: 1,
            items: vec![Item::new(0, vec![1.0], 1).unwrap()],
        };
        assert!(Dataset::from_partitions(vec![q.clone()], vec![q], vec![]).is_err());
    }

    #[test]
    fn min_max_uses_train_range() {
        let mk = |id, v: f64| Query {
            query_id: id,
            items: vec![Item::new(0, vec![v, 3.0], 0).unwrap()],
        };
        let ds = Dataset::from_partitions(vec![mk(0, 1.0), mk(1, 3.0)], vec![mk(2, 5.0)], vec![])
            .unwrap()
            .min_max_normalized();
        assert_eq!(ds.train[1].items[0].features, vec![1.0, 0.0]);
        assert_eq!(ds.validation[0].items[0].features, vec![2.0, 0.0]);
    }
}
