//! End-to-end inference with a choice of truncation policy, and the trace
//! file format.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::decode;
use crate::error::{Error, Result};
use crate::letor::Dataset;
use crate::losses::rank_discount;
use crate::metrics::{evaluate_trace, EvalReport, EvalSettings};
use crate::params::ModelParams;
use crate::types::{validate_query_list, DecodeMode, DecodeTrace, GammaMap, QueryList};

/// How the returned list is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationPolicy {
    /// The model's own cut decisions.
    Model,
    /// The reranked order cut at `min(x, N)`.
    Fixed(usize),
    /// The reranked order cut where TDCG peaks.
    Oracle,
}

impl FromStr for TruncationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "oracle" => Ok(Self::Oracle),
            _ => {
                let x = s
                    .strip_prefix("fixed:")
                    .and_then(|x| x.parse::<usize>().ok())
                    .filter(|&x| x >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown policy {s:?}; expected model, fixed:<x> with x >= 1, or oracle")))?;
                Ok(Self::Fixed(x))
            }
        }
    }
}

impl fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model => f.write_str("model"),
            Self::Fixed(x) => write!(f, "fixed:{x}"),
            Self::Oracle => f.write_str("oracle"),
        }
    }
}

/// Smallest `x` maximizing TDCG@x over labels in rank order.
pub fn oracle_cut(labels: &[u32], gamma: &GammaMap) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::CutOutOfRange { x: 1, len: 0 });
    }
    let gains = gamma.gains(labels)?;
    let mut running = 0.0;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, g) in gains.iter().enumerate() {
        running += g * rank_discount(i + 1);
        if running > best.0 {
            best = (running, i + 1);
        }
    }
    Ok(best.1)
}

/// Decodes one validated list under a policy. Non-model policies cut the
/// rerank-only order; `mode` applies to the model policy.
pub fn apply_policy(params: &ModelParams, list: &QueryList, policy: TruncationPolicy, mode: DecodeMode) -> Result<DecodeTrace> {
    if policy == TruncationPolicy::Model {
        return decode(params, list, mode);
    }
    let mut trace = decode(params, list, DecodeMode::RerankOnly)?;
    let n = trace.chosen.len();
    trace.cut_step = match policy {
        TruncationPolicy::Fixed(x) => x.min(n),
        _ => oracle_cut(&list.labels_at(&trace.chosen), &params.config.gamma_map)?,
    };
    trace.first_excluded = trace.chosen.get(trace.cut_step).copied();
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Canonical lists the traces index into.
    pub lists: Vec<QueryList>,
    pub traces: Vec<DecodeTrace>,
    pub report: EvalReport,
}

pub fn run_pipeline(dataset: &Dataset, params: &ModelParams, policy: TruncationPolicy, mode: DecodeMode) -> Result<PipelineOutput> {
    let settings = EvalSettings {
        gamma: params.config.gamma_map.clone(),
        grade_max: dataset.grade_max,
        relevance_threshold: crate::metrics::DEFAULT_RELEVANCE_THRESHOLD,
    };
    let mut lists = Vec::with_capacity(dataset.groups.len());
    let mut traces = Vec::with_capacity(dataset.groups.len());
    let mut rows = Vec::with_capacity(dataset.groups.len());
    for group in &dataset.groups {
        let list = validate_query_list(group.clone(), &params.config)?;
        let trace = apply_policy(params, &list, policy, mode)?;
        rows.push(evaluate_trace(&trace, &list, &settings)?);
        lists.push(list);
        traces.push(trace);
    }
    Ok(PipelineOutput {
        lists,
        traces,
        report: EvalReport::from_rows(rows),
    })
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub qid: String,
    pub doc_ids: Vec<String>,
    pub cut_step: usize,
    /// `p_1` at every decoded step (empty when the cut head did not run).
    pub p_cut: Vec<f64>,
}

impl TraceLine {
    pub fn new(list: &QueryList, trace: &DecodeTrace) -> Self {
        Self {
            qid: list.qid.clone(),
            doc_ids: trace.output().iter().map(|&i| list.docs[i].doc_id.clone()).collect(),
            cut_step: trace.cut_step,
            p_cut: trace.cut_probs.iter().map(|p| p.1).collect(),
        }
    }
}

/// Writes one JSON object per query.
pub fn write_traces<W: Write>(lists: &[QueryList], traces: &[DecodeTrace], mut sink: W) -> Result<()> {
    for (list, trace) in lists.iter().zip(traces) {
        let line = serde_json::to_string(&TraceLine::new(list, trace)).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(sink, "{line}")?;
    }
    sink.flush()?;
    Ok(())
}
