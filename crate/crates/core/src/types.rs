//! Shared domain types: documents, query lists, model configuration, gain maps
//! and decode traces.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One candidate document of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDoc {
    pub doc_id: String,
    pub features: Vec<f64>,
    /// Graded relevance, `0..=grade_max`.
    pub label: u32,
    /// Score assigned by the preceding ranking stage.
    pub initial_score: f64,
}

/// A query's candidate list. After [`validate_query_list`] the docs are sorted
/// by `initial_score` descending with ties broken by ascending `doc_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryList {
    pub qid: String,
    pub docs: Vec<FeatureDoc>,
}

impl QueryList {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.docs.iter().map(|d| d.label).collect()
    }

    /// Labels of the docs at `order`, in that order.
    pub fn labels_at(&self, order: &[usize]) -> Vec<u32> {
        order.iter().map(|&i| self.docs[i].label).collect()
    }
}

fn canonical_order(a: &FeatureDoc, b: &FeatureDoc) -> Ordering {
    b.initial_score
        .total_cmp(&a.initial_score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Canonicalizes a query list: rejects empty groups, mismatched feature
/// lengths and duplicate ids, sorts by initial score and keeps at most
/// `max_list_len` docs.
pub fn validate_query_list(mut list: QueryList, config: &ModelConfig) -> Result<QueryList> {
    if list.docs.is_empty() {
        return Err(Error::EmptyGroup { qid: list.qid });
    }
    let mut seen = HashSet::with_capacity(list.docs.len());
    for doc in &list.docs {
        if doc.features.len() != config.feature_dim {
            return Err(Error::FeatureLength {
                qid: list.qid.clone(),
                doc_id: doc.doc_id.clone(),
                found: doc.features.len(),
                expected: config.feature_dim,
            });
        }
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(Error::DuplicateDoc {
                qid: list.qid.clone(),
                doc_id: doc.doc_id.clone(),
            });
        }
    }
    list.docs.sort_by(canonical_order);
    list.docs.truncate(config.max_list_len);
    Ok(list)
}

/// Label-to-gain table used by TDCG. Low grades may map to negative gains.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMap {
    mapping: BTreeMap<u32, f64>,
}

impl GammaMap {
    pub fn new(mapping: BTreeMap<u32, f64>) -> Self {
        Self { mapping }
    }

    /// Graded web-search data: 0 → −4, 1 → −2, otherwise the grade itself.
    pub fn web_search() -> Self {
        Self::new([(0, -4.0), (1, -2.0), (2, 2.0), (3, 3.0), (4, 4.0)].into())
    }

    /// Binary data: 0 → −1, 1 → 1.
    pub fn binary() -> Self {
        Self::new([(0, -1.0), (1, 1.0)].into())
    }

    pub fn gain(&self, label: u32) -> Option<f64> {
        self.mapping.get(&label).copied()
    }

    pub fn covers(&self, grade_max: u32) -> bool {
        (0..=grade_max).all(|g| self.mapping.contains_key(&g))
    }

    /// Gains for a label sequence; errors on a label without an entry.
    pub fn gains(&self, labels: &[u32]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                self.gain(l)
                    .ok_or_else(|| Error::Config(format!("gamma map has no entry for label {l}")))
            })
            .collect()
    }
}

impl Default for GammaMap {
    fn default() -> Self {
        Self::web_search()
    }
}

impl fmt::Display for GammaMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::web_search() {
            return f.write_str("web");
        }
        if *self == Self::binary() {
            return f.write_str("binary");
        }
        let parts: Vec<String> = self
            .mapping
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for GammaMap {
    type Err = Error;

    /// Accepts `web`, `binary`, or an explicit table `0:-4,1:-2,2:2`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "web" => return Ok(Self::web_search()),
            "binary" => return Ok(Self::binary()),
            _ => {}
        }
        let mut mapping = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad gamma entry {part:?}")))?;
            let k: u32 = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad gamma label {k:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad gamma gain {v:?}")))?;
            mapping.insert(k, v);
        }
        if mapping.is_empty() {
            return Err(Error::Config("empty gamma map".into()));
        }
        Ok(Self::new(mapping))
    }
}

impl Serialize for GammaMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GammaMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Model dimensions and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Raw feature count per document. The model input adds one column for
    /// the initial score.
    pub feature_dim: usize,
    /// Attention width.
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Hidden width of the row-wise scoring FFN.
    pub rffn_hidden: usize,
    /// Size of the local backward window.
    pub beta: usize,
    /// Weight of the step-by-step lambda loss in the reranking objective.
    pub eta: f64,
    pub max_list_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Logarithm base of rank discounts. Only 2 is supported.
    pub log_base: f64,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub gamma_map: GammaMap,
    pub seed: u64,
    /// A step cuts the list when `p_1` exceeds this.
    pub cut_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 0,
            embed_dim: 256,
            heads: 8,
            encoder_blocks: 2,
            decoder_blocks: 1,
            rffn_hidden: 32,
            beta: 4,
            eta: 0.1,
            max_list_len: 40,
            lr: 1e-5,
            batch_size: 16,
            log_base: 2.0,
            rel_pos_buckets: 16,
            rel_pos_max_distance: 64,
            gamma_map: GammaMap::web_search(),
            seed: 0,
            cut_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Self::default()
        }
    }

    /// Width of a document's input embedding: features plus the initial score.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail("embed_dim must be a positive multiple of heads");
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return fail("encoder_blocks and decoder_blocks must be positive");
        }
        if self.rffn_hidden == 0 {
            return fail("rffn_hidden must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail("eta must lie in [0, 1]");
        }
        if self.max_list_len == 0 || self.batch_size == 0 {
            return fail("max_list_len and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.log_base != 2.0 {
            return fail("log_base must be 2");
        }
        if self.rel_pos_buckets < 2 || self.rel_pos_max_distance == 0 {
            return fail("rel_pos_buckets must be >= 2 and rel_pos_max_distance positive");
        }
        if !(self.cut_threshold > 0.0 && self.cut_threshold < 1.0) {
            return fail("cut_threshold must lie in (0, 1)");
        }
        Ok(())
    }

    /// Parses a flat `key = value` file. Unknown keys are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Rerank step by step and stop at the first cut decision.
    Full,
    /// Rerank all N steps, ignoring the truncation head.
    RerankOnly,
    /// Keep the input order, consult only the truncation head.
    TruncateOnly,
    /// Order by the first step's scores; no further steps, no cut.
    Fast,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "rerank_only" => Ok(Self::RerankOnly),
            "truncate_only" => Ok(Self::TruncateOnly),
            "fast" => Ok(Self::Fast),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::RerankOnly => "rerank_only",
            Self::TruncateOnly => "truncate_only",
            Self::Fast => "fast",
        })
    }
}

/// Per-query record of a decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    /// Emitted doc indices (into the canonical list), one per step.
    pub chosen: Vec<usize>,
    /// Scores over all N candidates at each step; masked entries hold the
    /// masking sentinel.
    pub score_matrices: Vec<Vec<f64>>,
    /// `(p_0, p_1)` per step where the truncation head ran.
    pub cut_probs: Vec<(f64, f64)>,
    /// Number of emitted docs: the first step that cut, else N.
    pub cut_step: usize,
    /// The doc the reranker would have emitted right after the cut, if any.
    pub first_excluded: Option<usize>,
}

impl DecodeTrace {
    /// The returned list: the first `cut_step` emitted docs.
    pub fn output(&self) -> &[usize] {
        &self.chosen[..self.cut_step.min(self.chosen.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, score: f64) -> FeatureDoc {
        FeatureDoc {
            doc_id: id.to_string(),
            features: vec![0.0, 0.0],
            label: 0,
            initial_score: score,
        }
    }

    fn config() -> ModelConfig {
        ModelConfig::with_feature_dim(2)
    }

    fn ids(list: &QueryList) -> Vec<&str> {
        list.docs.iter().map(|d| d.doc_id.as_str()).collect()
    }

    #[test]
    fn sorts_by_initial_score() {
        let list = QueryList {
            qid: "q".into(),
            docs: vec![doc("doc0", 0.2), doc("doc1", 0.9), doc("doc2", 0.5)],
        };
        let out = validate_query_list(list, &config()).unwrap();
        assert_eq!(ids(&out), ["doc1", "doc2", "doc0"]);
    }

    #[test]
    fn keeps_top_max_list_len() {
        let docs = (0..41).map(|i| doc(&format!("d{i:02}"), i as f64)).collect();
        let out = validate_query_list(QueryList { qid: "q".into(), docs }, &config()).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(out.docs[0].doc_id, "d40");
        assert_eq!(out.docs[39].doc_id, "d01");
    }

    #[test]
    fn ties_break_by_doc_id() {
        let list = QueryList {
            qid: "q".into(),
            docs: vec![doc("b", 0.5), doc("a", 0.5)],
        };
        let out = validate_query_list(list, &config()).unwrap();
        assert_eq!(ids(&out), ["a", "b"]);
    }

    #[test]
    fn rejects_empty_group() {
        let err = validate_query_list(QueryList { qid: "7".into(), docs: vec![] }, &config())
            .unwrap_err();
        assert!(err.to_string().contains("empty query group"));
    }

    #[test]
    fn rejects_feature_length_mismatch_naming_qid() {
        let mut bad = doc("x", 0.0);
        bad.features.push(1.0);
        let err = validate_query_list(
            QueryList { qid: "q42".into(), docs: vec![doc("a", 0.0), bad] },
            &config(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::FeatureLength { .. }));
        assert!(err.to_string().contains("q42"));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = validate_query_list(
            QueryList { qid: "q".into(), docs: vec![doc("a", 0.0), doc("a", 1.0)] },
            &config(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateDoc { .. }));
    }

    #[test]
    fn gamma_presets_round_trip_through_strings() {
        for g in [GammaMap::web_search(), GammaMap::binary()] {
            assert_eq!(g.to_string().parse::<GammaMap>().unwrap(), g);
        }
        let custom: GammaMap = "0:-3,1:0.5".parse().unwrap();
        assert_eq!(custom.gain(0), Some(-3.0));
        assert_eq!(custom.gain(1), Some(0.5));
        assert_eq!(custom.to_string().parse::<GammaMap>().unwrap(), custom);
        assert!(GammaMap::web_search().covers(4));
        assert!(!GammaMap::binary().covers(2));
    }

    #[test]
    fn config_kv_round_trip_and_unknown_keys() {
        let mut c = config();
        c.beta = 2;
        c.gamma_map = GammaMap::binary();
        let text = c.to_kv_string();
        assert_eq!(ModelConfig::from_kv_str(&text).unwrap(), c);

        let err = ModelConfig::from_kv_str("feature_dim = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn config_defaults_and_invariants() {
        let c = ModelConfig::from_kv_str("feature_dim = 5").unwrap();
        assert_eq!((c.embed_dim, c.heads, c.beta, c.max_list_len), (256, 8, 4, 40));
        assert_eq!(c.eta, 0.1);
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.input_dim(), 6);
        assert!(ModelConfig::from_kv_str("feature_dim = 5\nheads = 7").is_err());
        assert!(ModelConfig::from_kv_str("feature_dim = 5\neta = 1.5").is_err());
        assert!(ModelConfig::from_kv_str("feature_dim = 5\ncut_threshold = 1.0").is_err());
    }
}
