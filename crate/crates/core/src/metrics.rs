//! Ranking and truncation metrics, plus two decoder diagnostics.
//!
//! Gains are `2^y − 1` with `1 / log2(1 + pos)` discounts. Binary relevance
//! (MAP, recall, margins) means `label >= threshold`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{self, rank_discount};
use crate::types::{DecodeTrace, GammaMap, QueryList};

pub const DEFAULT_RELEVANCE_THRESHOLD: u32 = 1;

fn gain(label: u32) -> f64 {
    2f64.powi(label as i32) - 1.0
}

pub fn dcg_at_k(labels: &[u32], k: usize) -> f64 {
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| gain(l) * rank_discount(i + 1))
        .sum()
}

/// NDCG@k of `ranked` with the ideal ordering taken from `pool`, which may
/// hold more docs than were returned. Zero when the pool has no gain.
pub fn ndcg_against(ranked: &[u32], pool: &[u32], k: usize) -> f64 {
    let mut ideal = pool.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg_at_k(&ideal, k);
    if idcg == 0.0 {
        0.0
    } else {
        dcg_at_k(ranked, k) / idcg
    }
}

pub fn ndcg_at_k(labels: &[u32], k: usize) -> f64 {
    ndcg_against(labels, labels, k)
}

/// Expected reciprocal rank with stop probability `(2^g − 1) / 2^grade_max`.
pub fn err_at_k(labels: &[u32], k: usize, grade_max: u32) -> f64 {
    let denom = 2f64.powi(grade_max as i32);
    let mut not_stopped = 1.0;
    let mut err = 0.0;
    for (i, &l) in labels.iter().take(k).enumerate() {
        let stop = gain(l) / denom;
        err += not_stopped * stop / (i + 1) as f64;
        not_stopped *= 1.0 - stop;
    }
    err
}

/// Average precision with `total_relevant` relevant docs in the full list.
pub fn average_precision_against(ranked: &[u32], threshold: u32, total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &l) in ranked.iter().enumerate() {
        if l >= threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

/// Mean of precision at each relevant position; 0 when nothing is relevant.
/// Averaged over queries this is MAP.
pub fn average_precision(labels: &[u32], threshold: u32) -> f64 {
    let total = labels.iter().filter(|&&l| l >= threshold).count();
    average_precision_against(labels, threshold, total)
}

pub fn recall_at_k(ranked: &[u32], k: usize, threshold: u32, total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|&&l| l >= threshold).count();
    hits as f64 / total_relevant as f64
}

/// TDCG of a ranked prefix of length `x`.
pub fn tdcg(labels: &[u32], gamma: &GammaMap, x: usize) -> Result<f64> {
    losses::tdcg(labels, gamma, x)
}

/// Metric values for one query (or their mean).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub qid: String,
    pub ndcg1: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub err5: f64,
    pub err10: f64,
    pub map: f64,
    pub recall5: f64,
    pub recall10: f64,
    pub tdcg: f64,
    pub output_length: f64,
}

impl EvalRow {
    fn values(&self) -> [f64; 10] {
        [
            self.ndcg1,
            self.ndcg5,
            self.ndcg10,
            self.err5,
            self.err10,
            self.map,
            self.recall5,
            self.recall10,
            self.tdcg,
            self.output_length,
        ]
    }

    fn from_values(qid: String, v: [f64; 10]) -> Self {
        Self {
            qid,
            ndcg1: v[0],
            ndcg5: v[1],
            ndcg10: v[2],
            err5: v[3],
            err10: v[4],
            map: v[5],
            recall5: v[6],
            recall10: v[7],
            tdcg: v[8],
            output_length: v[9],
        }
    }
}

/// Evaluation settings shared by every query of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub gamma: GammaMap,
    pub grade_max: u32,
    pub relevance_threshold: u32,
}

/// Ranking metrics on the returned list (relevant docs left out of it count
/// as missed) and TDCG on the first `cut_step` docs.
pub fn evaluate_trace(trace: &DecodeTrace, list: &QueryList, settings: &EvalSettings) -> Result<EvalRow> {
    if let Some(&bad) = trace.chosen.iter().find(|&&i| i >= list.len()) {
        return Err(Error::TraceIndex { index: bad, len: list.len() });
    }
    let pool = list.labels();
    let ranked = list.labels_at(trace.output());
    let thr = settings.relevance_threshold;
    let total_relevant = pool.iter().filter(|&&l| l >= thr).count();
    Ok(EvalRow {
        qid: list.qid.clone(),
        ndcg1: ndcg_against(&ranked, &pool, 1),
        ndcg5: ndcg_against(&ranked, &pool, 5),
        ndcg10: ndcg_against(&ranked, &pool, 10),
        err5: err_at_k(&ranked, 5, settings.grade_max),
        err10: err_at_k(&ranked, 10, settings.grade_max),
        map: average_precision_against(&ranked, thr, total_relevant),
        recall5: recall_at_k(&ranked, 5, thr, total_relevant),
        recall10: recall_at_k(&ranked, 10, thr, total_relevant),
        tdcg: tdcg(&ranked, &settings.gamma, ranked.len())?,
        output_length: ranked.len() as f64,
    })
}

/// Per-query rows plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut sums = [0.0; 10];
        for row in &rows {
            for (s, v) in sums.iter_mut().zip(row.values()) {
                *s += v;
            }
        }
        let n = rows.len().max(1) as f64;
        let mean = EvalRow::from_values("mean".into(), sums.map(|s| s / n));
        Self { rows, mean }
    }

    pub const CSV_HEADER: &'static str =
        "qid,ndcg@1,ndcg@5,ndcg@10,err@5,err@10,map,recall@5,recall@10,tdcg,length";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&row.qid);
            for v in row.values() {
                write!(out, ",{v:.6}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

/// At each step, the lowest positive score minus the highest negative score
/// among not-yet-emitted candidates. `None` where a class is absent.
pub fn min_margin_by_step(trace: &DecodeTrace, list: &QueryList, threshold: u32) -> Vec<Option<f64>> {
    let mut emitted = vec![false; list.len()];
    let mut out = Vec::with_capacity(trace.score_matrices.len());
    for (t, scores) in trace.score_matrices.iter().enumerate() {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for (i, doc) in list.docs.iter().enumerate() {
            if emitted[i] {
                continue;
            }
            if doc.label >= threshold {
                min_pos = min_pos.min(scores[i]);
            } else {
                max_neg = max_neg.max(scores[i]);
            }
        }
        out.push((min_pos.is_finite() && max_neg.is_finite()).then_some(min_pos - max_neg));
        if let Some(&c) = trace.chosen.get(t) {
            emitted[c] = true;
        }
    }
    out
}

/// Normalized histogram over grades `0..=grade_max` of the first doc left
/// out by each cut. Queries that kept every doc are skipped; all zeros when
/// none cut.
pub fn cutpoint_label_histogram(traces: &[DecodeTrace], lists: &[QueryList], grade_max: u32) -> Vec<f64> {
    let mut counts = vec![0.0; grade_max as usize + 1];
    let mut total = 0.0;
    for (trace, list) in traces.iter().zip(lists) {
        if let Some(i) = trace.first_excluded {
            counts[list.docs[i].label.min(grade_max) as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Least-squares slope of `values` against positions `1, 2, ...`.
pub fn least_squares_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean_x = (n + 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = (i + 1) as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}
