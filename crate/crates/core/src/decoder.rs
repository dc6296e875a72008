//! Step-wise decoder: at step `T` it scores every unselected candidate given
//! the already emitted prefix, emits the best one, and decides whether to cut
//! the list there from the prefix, the emitted doc and a short window of the
//! next-best candidates.
//!
//! Every per-doc projection the steps need (attention keys and values, the
//! interaction half of the scoring FFN) is computed once per list and
//! gathered per step. Row-wise maps commute with row selection, so this is
//! the same function as recomputing them on each step's inputs.

use ndarray::{Array2, Axis};

use crate::encoder::{self, EncoderOutput, Projections};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{RelativeBias, Tape, Var};
use crate::types::{validate_query_list, DecodeMode, DecodeTrace, QueryList};

/// Score given to already-selected candidates.
pub const MASKED_SCORE: f64 = -1e9;

/// Per-list tape state shared by all decode steps.
pub struct ListContext {
    pub encoder: EncoderOutput,
    pub n: usize,
    scoring: Option<ScoringContext>,
    truncation: Option<Projections>,
}

struct ScoringContext {
    /// `I` of the latent cross.
    interaction: Var,
    /// `I · W_top + b` of the scoring FFN's first layer.
    interaction_hidden: Var,
    /// Rows of the first scoring layer that act on the prefix state.
    state_weight: Var,
    /// First prefix block's projections of `LN(X)` for every doc.
    prefix_proj: Projections,
    /// Prefix state used at step 1.
    start: Var,
}

impl ListContext {
    /// Runs the encoder and precomputes what scoring and/or truncation need.
    pub fn new(
        tape: &mut Tape<'_>,
        params: &ModelParams,
        list: &QueryList,
        scoring: bool,
        truncation: bool,
    ) -> Result<Self> {
        let enc = encoder::run_encoder(tape, params, list)?;
        let scoring = scoring.then(|| {
            let ids = &params.ids;
            let e = params.config.embed_dim;
            let interaction = latent_cross(tape, params, enc.u, enc.o);
            let w1 = tape.param(ids.rffn_hidden.w);
            let b1 = tape.param(ids.rffn_hidden.b);
            let top = tape.slice_rows(w1, 0, e);
            let state_weight = tape.slice_rows(w1, e, e);
            let interaction_hidden = tape.affine(interaction, top, b1);
            let prefix_proj = encoder::project(tape, &ids.prefix[0], enc.x);
            let start = tape.param(ids.start);
            let start = encoder::transfer(tape, params, start);
            ScoringContext {
                interaction,
                interaction_hidden,
                state_weight,
                prefix_proj,
                start,
            }
        });
        let truncation = truncation.then(|| encoder::project(tape, &params.ids.trunc, enc.o));
        Ok(Self {
            encoder: enc,
            n: list.len(),
            scoring,
            truncation,
        })
    }

    fn scoring(&self) -> &ScoringContext {
        self.scoring.as_ref().expect("context prepared without scoring")
    }

    pub fn interaction(&self) -> Var {
        self.scoring().interaction
    }
}

/// `I = (1 + MLP(O)) ⊙ Swish(U W + b)`.
pub fn latent_cross(tape: &mut Tape<'_>, params: &ModelParams, u: Var, o: Var) -> Var {
    let ids = &params.ids;
    let (lw, lb) = (tape.param(ids.latent.w), tape.param(ids.latent.b));
    let gate = tape.affine(o, lw, lb);
    let gate = tape.add_scalar(gate, 1.0);
    let (fw, fb) = (tape.param(ids.ffn.w), tape.param(ids.ffn.b));
    let features = tape.affine(u, fw, fb);
    let features = tape.swish(features);
    tape.mul(gate, features)
}

/// The prefix state `m` for the next step: the transferred start vector when
/// nothing has been emitted, otherwise the last row of the prefix attention
/// stack over the transferred prefix embeddings.
pub fn sequential_dependency(tape: &mut Tape<'_>, params: &ModelParams, ctx: &ListContext, prefix: &[usize]) -> Var {
    let sc = ctx.scoring();
    let Some(&last) = prefix.last() else {
        return sc.start;
    };
    let heads = params.config.heads;
    let blocks = &params.ids.prefix;
    let final_block = blocks.len() - 1;
    let mut h = tape.gather_rows(ctx.encoder.x, prefix);
    for (bi, block) in blocks.iter().enumerate() {
        let is_final = bi == final_block;
        let proj = if bi == 0 {
            let query_rows: &[usize] = if is_final { &[last] } else { prefix };
            Projections {
                query: tape.gather_rows(sc.prefix_proj.query, query_rows),
                key: tape.gather_rows(sc.prefix_proj.key, prefix),
                value: tape.gather_rows(sc.prefix_proj.value, prefix),
            }
        } else {
            let mut p = encoder::project(tape, block, h);
            if is_final {
                p.query = tape.slice_rows(p.query, prefix.len() - 1, 1);
            }
            p
        };
        let attended = tape.attention(proj.query, proj.key, proj.value, heads, None);
        let residual = if is_final {
            tape.slice_rows(h, prefix.len() - 1, 1)
        } else {
            h
        };
        h = encoder::finish_block(tape, block, attended, residual);
    }
    h
}

/// `rFFN(concat(I, M))` for every candidate, with masked rows set to
/// [`MASKED_SCORE`]. Returns an `[N, 1]` node.
pub fn score_candidates(tape: &mut Tape<'_>, params: &ModelParams, ctx: &ListContext, state: Var, mask: &[bool]) -> Var {
    let sc = ctx.scoring();
    let ids = &params.ids;
    let state_hidden = tape.matmul(state, sc.state_weight);
    let hidden = tape.add_row(sc.interaction_hidden, state_hidden);
    let hidden = tape.swish(hidden);
    let (w2, b2) = (tape.param(ids.rffn_out.w), tape.param(ids.rffn_out.b));
    let scores = tape.affine(hidden, w2, b2);
    tape.mask_rows(scores, mask, MASKED_SCORE)
}

/// Unmasked candidate indices by descending score, ties to the lower index.
pub fn dynamic_rank(scores: &[f64], mask: &[bool]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !mask[i]).collect();
    if order.is_empty() {
        return Err(Error::DecodeExhausted);
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Bidirectional log-spaced bucketing of a relative offset: half of the
/// buckets per sign, exact buckets for small distances and logarithmic ones
/// up to `max_distance`, beyond which distances share the last bucket.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let distance = offset.unsigned_abs() as usize;
    let exact = (half / 2).max(1);
    if distance < exact {
        return base + distance;
    }
    if max_distance <= exact || half <= exact {
        return base + half - 1;
    }
    let ratio = (distance as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln();
    let log_bucket = exact + (ratio * (half - exact) as f64) as usize;
    base + log_bucket.min(half - 1)
}

/// Output of the truncation head at one step.
#[derive(Debug, Clone, Copy)]
pub struct CutDecision {
    /// `[1, 2]` logits.
    pub logits: Var,
    /// `(p_0, p_1)`: keep going, cut here.
    pub probs: (f64, f64),
}

/// Cut probabilities for emitting `current` after `prefix`, with `window`
/// the next-best candidates. `G = [prefix, current, window]` sits at
/// positions `first_position..`; only position differences enter the
/// attention, through bucketed learnable offsets.
pub fn truncation_decision(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    ctx: &ListContext,
    prefix: &[usize],
    current: usize,
    window: &[usize],
    first_position: i64,
) -> CutDecision {
    let proj = ctx.truncation.expect("context prepared without truncation");
    let config = &params.config;
    let ids = &params.ids;
    let rows: Vec<usize> = prefix
        .iter()
        .copied()
        .chain(std::iter::once(current))
        .chain(window.iter().copied())
        .collect();
    let query_pos = first_position + prefix.len() as i64;
    let buckets = Array2::from_shape_fn((1, rows.len()), |(_, l)| {
        let key_pos = first_position + l as i64;
        relative_bucket(query_pos - key_pos, config.rel_pos_buckets, config.rel_pos_max_distance)
    });
    let query = tape.gather_rows(proj.query, &[current]);
    let key = tape.gather_rows(proj.key, &rows);
    let value = tape.gather_rows(proj.value, &rows);
    let table = tape.param(ids.rel_pos);
    let attended = tape.attention(query, key, value, config.heads, Some(RelativeBias { table, buckets }));
    let residual = tape.gather_rows(ctx.encoder.o, &[current]);
    let joined = encoder::finish_block(tape, &ids.trunc, attended, residual);
    let (hw, hb) = (tape.param(ids.trunc_head.w), tape.param(ids.trunc_head.b));
    let logits = tape.affine(joined, hw, hb);
    let probs = softmax2(tape.value(logits)[[0, 0]], tape.value(logits)[[0, 1]]);
    CutDecision { logits, probs }
}

pub(crate) fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    (ea / (ea + eb), eb / (ea + eb))
}

/// What [`generate`] computes at each step.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions<'a> {
    /// Run the scoring path (otherwise candidates keep the input order).
    pub score: bool,
    /// Run the truncation head.
    pub truncate: bool,
    /// Stop after the first step whose `p_1` exceeds the cut threshold.
    pub stop_at_cut: bool,
    /// Emit this sequence instead of the greedy choice.
    pub forced: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub chosen: usize,
    /// `[N, 1]` score node, when scoring ran.
    pub scores: Option<Var>,
    pub score_values: Vec<f64>,
    /// Candidates after `chosen` in this step's ranking, at most β.
    pub window: Vec<usize>,
    pub cut: Option<CutDecision>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub steps: Vec<StepRecord>,
    pub cut_step: usize,
    pub first_excluded: Option<usize>,
}

/// Greedy step-wise generation over a prepared list.
pub fn generate(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    ctx: &ListContext,
    list: &QueryList,
    opts: GenerateOptions<'_>,
) -> Result<Generation> {
    let n = ctx.n;
    let beta = params.config.beta;
    let threshold = params.config.cut_threshold;
    if let Some(forced) = opts.forced {
        assert_eq!(forced.len(), n, "forced sequence must cover the list");
    }
    let mut mask = vec![false; n];
    let mut prefix: Vec<usize> = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut cut_step = n;

    for t in 0..n {
        let (scores, score_values) = if opts.score {
            let state = sequential_dependency(tape, params, ctx, &prefix);
            let s = score_candidates(tape, params, ctx, state, &mask);
            let values = tape.value(s).column(0).to_vec();
            (Some(s), values)
        } else {
            let values = list
                .docs
                .iter()
                .zip(&mask)
                .map(|(d, &m)| if m { MASKED_SCORE } else { d.initial_score })
                .collect();
            (None, values)
        };
        let ranking = if opts.score {
            dynamic_rank(&score_values, &mask)?
        } else {
            (0..n).filter(|&i| !mask[i]).collect()
        };
        let chosen = match opts.forced {
            Some(f) => f[t],
            None => ranking[0],
        };
        let window: Vec<usize> = ranking.iter().copied().filter(|&i| i != chosen).take(beta).collect();
        let cut = opts
            .truncate
            .then(|| truncation_decision(tape, params, ctx, &prefix, chosen, &window, 0));
        steps.push(StepRecord {
            chosen,
            scores,
            score_values,
            window,
            cut,
        });
        mask[chosen] = true;
        prefix.push(chosen);
        if opts.stop_at_cut && cut.is_some_and(|c| c.probs.1 > threshold) {
            cut_step = t + 1;
            break;
        }
    }

    let first_excluded = if cut_step < n {
        match opts.forced {
            Some(f) => Some(f[cut_step]),
            None if opts.score => {
                let state = sequential_dependency(tape, params, ctx, &prefix);
                let s = score_candidates(tape, params, ctx, state, &mask);
                let values = tape.value(s).column(0).to_vec();
                Some(dynamic_rank(&values, &mask)?[0])
            }
            None => (0..n).find(|&i| !mask[i]),
        }
    } else {
        None
    };
    Ok(Generation {
        steps,
        cut_step,
        first_excluded,
    })
}

/// Decodes a validated list. Indices in the trace refer to `list.docs`.
pub fn decode(params: &ModelParams, list: &QueryList, mode: DecodeMode) -> Result<DecodeTrace> {
    let mut tape = Tape::new(&params.tensors);
    match mode {
        DecodeMode::Fast => {
            let ctx = ListContext::new(&mut tape, params, list, true, false)?;
            let mask = vec![false; ctx.n];
            let state = sequential_dependency(&mut tape, params, &ctx, &[]);
            let s = score_candidates(&mut tape, params, &ctx, state, &mask);
            let values = tape.value(s).column(0).to_vec();
            let order = dynamic_rank(&values, &mask)?;
            Ok(DecodeTrace {
                cut_step: order.len(),
                chosen: order,
                score_matrices: vec![values],
                cut_probs: Vec::new(),
                first_excluded: None,
            })
        }
        DecodeMode::Full | DecodeMode::RerankOnly | DecodeMode::TruncateOnly => {
            let score = mode != DecodeMode::TruncateOnly;
            let truncate = mode != DecodeMode::RerankOnly;
            let ctx = ListContext::new(&mut tape, params, list, score, truncate)?;
            let input_order: Vec<usize> = (0..ctx.n).collect();
            let opts = GenerateOptions {
                score,
                truncate,
                stop_at_cut: truncate,
                forced: (!score).then_some(input_order.as_slice()),
            };
            let generation = generate(&mut tape, params, &ctx, list, opts)?;
            Ok(trace_of(generation))
        }
    }
}

fn trace_of(generation: Generation) -> DecodeTrace {
    let mut trace = DecodeTrace {
        chosen: Vec::with_capacity(generation.steps.len()),
        score_matrices: Vec::with_capacity(generation.steps.len()),
        cut_probs: Vec::new(),
        cut_step: generation.cut_step,
        first_excluded: generation.first_excluded,
    };
    for step in generation.steps {
        trace.chosen.push(step.chosen);
        trace.score_matrices.push(step.score_values);
        if let Some(c) = step.cut {
            trace.cut_probs.push(c.probs);
        }
    }
    trace
}

/// Canonicalizes `list` and decodes it, returning the canonical list the
/// trace indexes into.
pub fn decode_query(params: &ModelParams, list: QueryList, mode: DecodeMode) -> Result<(QueryList, DecodeTrace)> {
    let list = validate_query_list(list, &params.config)?;
    let trace = decode(params, &list, mode)?;
    Ok((list, trace))
}

/// Encoder rows `O` of a list as a plain matrix.
pub fn encoder_rows(params: &ModelParams, list: &QueryList) -> Result<Array2<f64>> {
    let mut tape = Tape::new(&params.tensors);
    let enc = encoder::run_encoder(&mut tape, params, list)?;
    Ok(tape.value(enc.o).to_owned())
}

/// Candidate scores of the first step (prefix state = start vector).
pub fn first_step_scores(params: &ModelParams, list: &QueryList) -> Result<Vec<f64>> {
    let mut tape = Tape::new(&params.tensors);
    let ctx = ListContext::new(&mut tape, params, list, true, false)?;
    let state = sequential_dependency(&mut tape, params, &ctx, &[]);
    let s = score_candidates(&mut tape, params, &ctx, state, &vec![false; ctx.n]);
    Ok(tape.value(s).index_axis(Axis(1), 0).to_vec())
}
