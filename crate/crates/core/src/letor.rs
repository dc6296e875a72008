//! LETOR / SVMLight ranking files and synthetic dataset generation.
//!
//! Line format: `<label> qid:<id> <idx>:<val> ... [#comment]` with 1-based,
//! possibly sparse feature indices. A comment token `docid=<id>` sets the doc
//! id (otherwise `<qid>:<line number>`), and `initial_score=<v>` restores a
//! first-stage score written by [`write_letor`].

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{FeatureDoc, QueryList};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub groups: Vec<QueryList>,
    pub feature_dim: usize,
    pub grade_max: u32,
}

impl Dataset {
    pub fn num_docs(&self) -> usize {
        self.groups.iter().map(QueryList::len).sum()
    }

    /// Sorts every group by initial score descending, ties by doc id.
    pub fn canonicalize(&mut self) {
        for group in &mut self.groups {
            group.docs.sort_by(|a, b| {
                b.initial_score
                    .total_cmp(&a.initial_score)
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
            });
        }
    }

    /// Splits groups, in order, by the given fractions. The last split takes
    /// the remainder.
    pub fn split(&self, fractions: &[f64]) -> Result<Vec<Dataset>> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} must be non-negative and sum to 1"
            )));
        }
        let n = self.groups.len();
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i + 1 == fractions.len() {
                n
            } else {
                (start + (f * n as f64).round() as usize).min(n)
            };
            out.push(Dataset {
                groups: self.groups[start..end].to_vec(),
                feature_dim: self.feature_dim,
                grade_max: self.grade_max,
            });
            start = end;
        }
        Ok(out)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses a LETOR stream. Feature dimension is the highest index seen.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<Dataset> {
    parse_letor_with_dim(reader, None)
}

/// Parses a LETOR stream, padding every doc to `feature_dim` when given.
/// Missing sparse features are 0.0.
pub fn parse_letor_with_dim<R: BufRead>(reader: R, feature_dim: Option<usize>) -> Result<Dataset> {
    let mut groups: Vec<QueryList> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut max_index = 0usize;
    let mut grade_max = 0u32;
    // Sparse entries per group, parallel to each group's docs.
    let mut sparse_rows: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();

    for (ordinal, line) in reader.lines().enumerate() {
        let line_no = ordinal + 1;
        let line = line?;
        let (body, comment) = match line.split_once('#') {
            Some((b, c)) => (b.trim(), Some(c)),
            None => (line.trim(), None),
        };
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().ok_or_else(|| parse_err(line_no, "missing label"))?;
        let label: u32 = label_tok
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {label_tok:?} is not a non-negative integer")))?;
        let qid_tok = tokens.next().ok_or_else(|| parse_err(line_no, "missing qid"))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|q| !q.is_empty())
            .ok_or_else(|| parse_err(line_no, format!("expected qid:<id>, found {qid_tok:?}")))?;

        let mut sparse = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, format!("malformed feature {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| parse_err(line_no, format!("bad feature index in {tok:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature value in {tok:?}")))?;
            if let Some(dim) = feature_dim {
                if idx > dim {
                    return Err(parse_err(line_no, format!("feature index {idx} exceeds dimension {dim}")));
                }
            }
            max_index = max_index.max(idx);
            sparse.push((idx, val));
        }

        let mut doc_id = None;
        let mut initial_score = 0.0;
        for tok in comment.into_iter().flat_map(str::split_whitespace) {
            if let Some(id) = tok.strip_prefix("docid=") {
                doc_id = Some(id.to_string());
            } else if let Some(s) = tok.strip_prefix("initial_score=") {
                initial_score = s
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad initial_score {s:?}")))?;
            }
        }
        let doc_id = doc_id.unwrap_or_else(|| format!("{qid}:{line_no}"));

        grade_max = grade_max.max(label);
        let slot = *index.entry(qid.to_string()).or_insert_with(|| {
            groups.push(QueryList {
                qid: qid.to_string(),
                docs: Vec::new(),
            });
            sparse_rows.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].docs.push(FeatureDoc {
            doc_id,
            features: Vec::new(),
            label,
            initial_score,
        });
        sparse_rows[slot].push(sparse);
    }

    let dim = feature_dim.unwrap_or(max_index);
    for (group, rows) in groups.iter_mut().zip(sparse_rows) {
        for (doc, row) in group.docs.iter_mut().zip(rows) {
            doc.features = vec![0.0; dim];
            for (i, v) in row {
                doc.features[i - 1] = v;
            }
        }
    }
    Ok(Dataset {
        groups,
        feature_dim: dim,
        grade_max,
    })
}

/// Writes a dataset in LETOR format with dense features. Values use the
/// shortest representation that parses back to the same float.
pub fn write_letor<W: Write>(dataset: &Dataset, mut sink: W) -> Result<()> {
    for group in &dataset.groups {
        for doc in &group.docs {
            write!(sink, "{} qid:{}", doc.label, group.qid)?;
            for (i, v) in doc.features.iter().enumerate() {
                write!(sink, " {}:{:?}", i + 1, v)?;
            }
            writeln!(sink, " #docid={} initial_score={:?}", doc.doc_id, doc.initial_score)?;
        }
    }
    sink.flush()?;
    Ok(())
}

/// Replaces every initial score with `scorer`'s output and re-canonicalizes.
pub fn attach_initial_scores<F>(mut dataset: Dataset, scorer: F) -> Dataset
where
    F: Fn(&FeatureDoc) -> f64,
{
    for doc in dataset.groups.iter_mut().flat_map(|g| g.docs.iter_mut()) {
        doc.initial_score = scorer(doc);
    }
    dataset.canonicalize();
    dataset
}

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub grade_max: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Spread of the hidden linear score `w·x` across features.
const SYNTHETIC_SCORE_SCALE: f64 = 2.5;

/// Builds a learnable ranking dataset: features are standard normal, labels
/// come from a monotone link of a hidden linear score and the initial score
/// is that linear score plus Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_queries == 0 || spec.docs_per_query == 0 || spec.feature_dim == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = SYNTHETIC_SCORE_SCALE / (spec.feature_dim as f64).sqrt();
    let weights: Vec<f64> = (0..spec.feature_dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let width = spec.num_queries.to_string().len();

    let groups = (0..spec.num_queries)
        .map(|q| {
            let qid = format!("{q:0width$}");
            let docs = (0..spec.docs_per_query)
                .map(|j| {
                    let features: Vec<f64> = (0..spec.feature_dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let latent: f64 = weights.iter().zip(&features).map(|(w, x)| w * x).sum();
                    let link = 1.0 / (1.0 + (-latent).exp());
                    let label = (spec.grade_max as f64 * link).round().clamp(0.0, spec.grade_max as f64) as u32;
                    let jitter = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    FeatureDoc {
                        doc_id: format!("{qid}-{j:03}"),
                        features,
                        label,
                        initial_score: latent + jitter,
                    }
                })
                .collect();
            QueryList { qid, docs }
        })
        .collect();

    let mut dataset = Dataset {
        groups,
        feature_dim: spec.feature_dim,
        grade_max: spec.grade_max,
    };
    dataset.canonicalize();
    Ok(dataset)
}
