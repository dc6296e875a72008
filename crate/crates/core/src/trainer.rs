//! Two-phase training. Epoch 1 only reranks; later epochs alternate by batch
//! parity between the reranking loss (truncation parameters frozen) and the
//! truncation loss (scoring FFN frozen).
//!
//! Rollouts are the model's own greedy generations run to full length.
//! Gradients enter through step scores and cut probabilities; the discrete
//! selection itself is not differentiated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode, generate, GenerateOptions, ListContext, StepRecord};
use crate::error::{Error, Result};
use crate::letor::Dataset;
use crate::losses::{rerank_loss_grad, soft_cut_labels, truncation_loss_grad, RolloutRecord};
use crate::metrics::{ndcg_at_k, tdcg};
use crate::params::{Checkpoint, ModelParams, ParamGroup};
use crate::tape::Tape;
use crate::types::{validate_query_list, DecodeMode, ModelConfig, QueryList};

/// Which objective a batch optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Rerank,
    Truncate,
}

impl Phase {
    /// Parameter group held fixed while this phase trains.
    pub fn frozen_group(self) -> ParamGroup {
        match self {
            Phase::Rerank => ParamGroup::Truncation,
            Phase::Truncate => ParamGroup::CrossRanking,
        }
    }

    /// Phase of batch `batch` (0-based) in epoch `epoch` (1-based).
    pub fn of_batch(epoch: usize, batch: usize) -> Self {
        if epoch == 1 || batch.is_multiple_of(2) {
            Phase::Rerank
        } else {
            Phase::Truncate
        }
    }
}

/// Per-tensor freeze flags for a phase.
pub fn frozen_mask(params: &ModelParams, phase: Phase) -> Vec<bool> {
    (0..params.tensors.len())
        .map(|id| params.group(id) == phase.frozen_group())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Write a resumable training state every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_every needs a checkpoint directory".into()));
        }
        Ok(())
    }
}

/// Adam with per-tensor step counts, so a frozen tensor's moments and bias
/// correction stay put while it is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: vec![0; params.tensors.len()],
        }
    }

    pub fn step(&mut self, tensors: &mut [Array2<f64>], grads: &[Array2<f64>], frozen: &[bool]) {
        for id in 0..tensors.len() {
            if frozen[id] {
                continue;
            }
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(&mut tensors[id])
                .and(&mut self.m[id])
                .and(&mut self.v[id])
                .and(&grads[id])
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// A full-length greedy rollout with cut probabilities at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub record: RolloutRecord,
    pub cut_probs: Vec<(f64, f64)>,
}

fn record_of(steps: &[StepRecord], window_size: usize) -> RolloutRecord {
    RolloutRecord {
        sequence: steps.iter().map(|s| s.chosen).collect(),
        score_matrices: steps.iter().map(|s| s.score_values.clone()).collect(),
        windows: steps.iter().map(|s| s.window.clone()).collect(),
        window_size,
    }
}

/// Forward-only rollouts of a batch under fixed parameters.
pub fn rollout_batch(lists: &[QueryList], params: &ModelParams) -> Result<Vec<Rollout>> {
    lists
        .iter()
        .map(|list| {
            let mut tape = Tape::new(&params.tensors);
            let ctx = ListContext::new(&mut tape, params, list, true, true)?;
            let opts = GenerateOptions {
                score: true,
                truncate: true,
                ..Default::default()
            };
            let generation = generate(&mut tape, params, &ctx, list, opts)?;
            Ok(Rollout {
                record: record_of(&generation.steps, params.config.beta),
                cut_probs: generation.steps.iter().filter_map(|s| s.cut.map(|c| c.probs)).collect(),
            })
        })
        .collect()
}

/// Loss of one list and its gradient for every tensor.
#[derive(Debug, Clone)]
pub struct ListLoss {
    pub value: f64,
    /// The emitted sequence; pass it back as `forced` to re-evaluate the
    /// same rollout under perturbed parameters.
    pub sequence: Vec<usize>,
    pub grads: Vec<Array2<f64>>,
}

/// Phase loss of one list. With `forced`, that sequence is emitted instead of
/// the greedy choice.
pub fn list_loss_grad(params: &ModelParams, list: &QueryList, phase: Phase, forced: Option<&[usize]>) -> Result<ListLoss> {
    let mut grads = params.zeros_like();
    let (value, sequence) = accumulate_list(params, list, phase, forced, 1.0, &mut grads)?;
    Ok(ListLoss { value, sequence, grads })
}

/// Adds `scale ×` the list's loss gradient into `grads` and returns the
/// unscaled loss and the emitted sequence.
fn accumulate_list(
    params: &ModelParams,
    list: &QueryList,
    phase: Phase,
    forced: Option<&[usize]>,
    scale: f64,
    grads: &mut [Array2<f64>],
) -> Result<(f64, Vec<usize>)> {
    let truncate = phase == Phase::Truncate;
    let mut tape = Tape::new(&params.tensors);
    let ctx = ListContext::new(&mut tape, params, list, true, truncate)?;
    let opts = GenerateOptions {
        score: true,
        truncate,
        stop_at_cut: false,
        forced,
    };
    let generation = generate(&mut tape, params, &ctx, list, opts)?;
    let record = record_of(&generation.steps, params.config.beta);
    let labels = list.labels();

    let (value, seeds) = match phase {
        Phase::Rerank => {
            let loss = rerank_loss_grad(&record, &labels, params.config.eta);
            let seeds = generation
                .steps
                .iter()
                .zip(&loss.score_grads)
                .map(|(step, g)| {
                    let var = step.scores.expect("scoring ran");
                    (var, Array2::from_shape_fn((g.len(), 1), |(i, _)| scale * g[i]))
                })
                .collect::<Vec<_>>();
            (loss.value, seeds)
        }
        Phase::Truncate => {
            let soft = soft_cut_labels(&record, &labels, &params.config.gamma_map)?;
            let cuts: Vec<_> = generation.steps.iter().map(|s| s.cut.expect("truncation ran")).collect();
            let probs: Vec<(f64, f64)> = cuts.iter().map(|c| c.probs).collect();
            let (value, prob_grads) = truncation_loss_grad(&probs, &soft);
            let seeds = cuts
                .iter()
                .zip(&prob_grads)
                .map(|(cut, &(g0, g1))| {
                    let (p0, p1) = cut.probs;
                    let mean = p0 * g0 + p1 * g1;
                    let dz = ndarray::array![[scale * p0 * (g0 - mean), scale * p1 * (g1 - mean)]];
                    (cut.logits, dz)
                })
                .collect::<Vec<_>>();
            (value, seeds)
        }
    };
    tape.backward(&seeds, grads);
    Ok((value, record.sequence))
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub mean_rerank_loss: f64,
    /// Absent in rerank-only epochs.
    pub mean_truncation_loss: Option<f64>,
    pub val_ndcg5: Option<f64>,
    pub val_tdcg: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,phase,mean_l_r,mean_l_t,val_ndcg@5,val_tdcg";

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.9}"))
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9},{},{},{}",
            r.epoch,
            r.phase,
            r.mean_rerank_loss,
            opt_field(r.mean_truncation_loss),
            opt_field(r.val_ndcg5),
            opt_field(r.val_tdcg)
        )
        .expect("writing to a String");
    }
    out
}

fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let bad = |line: &str| Error::Checkpoint(format!("malformed history row {line:?}"));
    let opt = |s: &str| -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    };
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                phase: if f[1] == "rerank" { "rerank" } else { "alternate" },
                mean_rerank_loss: f[2].parse().map_err(|_| bad(line))?,
                mean_truncation_loss: opt(f[3]).map_err(|_| bad(line))?,
                val_ndcg5: opt(f[4]).map_err(|_| bad(line))?,
                val_tdcg: opt(f[5]).map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Validation NDCG@5 in rerank-only mode and mean full-mode TDCG.
pub fn validation_scores(params: &ModelParams, lists: &[QueryList]) -> Result<(f64, f64)> {
    let mut ndcg = 0.0;
    let mut total_tdcg = 0.0;
    for list in lists {
        let ranked = decode(params, list, DecodeMode::RerankOnly)?;
        ndcg += ndcg_at_k(&list.labels_at(&ranked.chosen), 5);
        let full = decode(params, list, DecodeMode::Full)?;
        let out = full.output();
        total_tdcg += tdcg(&list.labels_at(out), &params.config.gamma_map, out.len())?;
    }
    let n = lists.len().max(1) as f64;
    Ok((ndcg / n, total_tdcg / n))
}

/// Everything needed to continue training after an epoch.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub epochs_done: usize,
    pub history: Vec<HistoryRow>,
    /// Best epoch so far by validation NDCG@5, with its score and weights.
    pub best: Option<(usize, f64, ModelParams)>,
}

impl TrainState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let params = ModelParams::init(config)?;
        let optimizer = Adam::new(&params, config.lr);
        Ok(Self {
            params,
            optimizer,
            epochs_done: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.params.to_checkpoint();
        let names = &self.params.names;
        for (prefix, tensors) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for (name, t) in names.iter().zip(tensors) {
                ckpt.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("epochs_done".into(), self.epochs_done.to_string());
        let steps: Vec<String> = self.optimizer.steps.iter().map(u64::to_string).collect();
        meta.insert("adam.steps".into(), steps.join(","));
        meta.insert("history".into(), history_csv(&self.history));
        if let Some((epoch, score, best)) = &self.best {
            meta.insert("best.epoch".into(), epoch.to_string());
            meta.insert("best.score_bits".into(), score.to_bits().to_string());
            for (name, t) in names.iter().zip(&best.tensors) {
                ckpt.tensors.push((format!("best.{name}"), t.clone()));
            }
        }
        ckpt.meta = meta;
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ModelParams::from_checkpoint(ckpt, None)?;
        let stored: BTreeMap<&str, &Array2<f64>> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: String| -> Result<Array2<f64>> {
            stored
                .get(name.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let meta = |key: &str| -> Result<&String> {
            ckpt.meta
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))
        };
        let mut optimizer = Adam::new(&params, ckpt.config.lr);
        for (i, name) in params.names.iter().enumerate() {
            optimizer.m[i] = fetch(format!("adam.m.{name}"))?;
            optimizer.v[i] = fetch(format!("adam.v.{name}"))?;
        }
        optimizer.steps = meta("adam.steps")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad adam.steps".into())))
            .collect::<Result<_>>()?;
        let epochs_done = meta("epochs_done")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epochs_done".into()))?;
        let history = parse_history(meta("history")?)?;
        let best = match ckpt.meta.get("best.epoch") {
            None => None,
            Some(epoch) => {
                let epoch = epoch.parse().map_err(|_| Error::Checkpoint("bad best.epoch".into()))?;
                let bits: u64 = meta("best.score_bits")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad best.score_bits".into()))?;
                let mut best = params.clone();
                for (i, name) in params.names.iter().enumerate() {
                    best.tensors[i] = fetch(format!("best.{name}"))?;
                }
                Some((epoch, f64::from_bits(bits), best))
            }
        };
        Ok(Self {
            params,
            optimizer,
            epochs_done,
            history,
            best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Weights of the best validation epoch (the final ones without a
    /// validation set).
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

fn prepare(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<QueryList>> {
    dataset
        .groups
        .iter()
        .map(|g| validate_query_list(g.clone(), config))
        .collect()
}

/// Trains from fresh weights.
pub fn train(train_set: &Dataset, valid: Option<&Dataset>, config: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    resume(TrainState::new(config)?, train_set, valid, tc)
}

/// Continues training `state` up to `tc.epochs` epochs in total.
pub fn resume(mut state: TrainState, train_set: &Dataset, valid: Option<&Dataset>, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    let config = state.params.config.clone();
    if train_set.groups.is_empty() {
        return Err(Error::Config("training set has no queries".into()));
    }
    let lists = prepare(train_set, &config)?;
    let valid_lists = valid.map(|v| prepare(v, &config)).transpose()?;
    let batch_size = config.batch_size.max(1);
    let masks = [
        frozen_mask(&state.params, Phase::Rerank),
        frozen_mask(&state.params, Phase::Truncate),
    ];

    for epoch in state.epochs_done + 1..=tc.epochs {
        let mut order: Vec<usize> = (0..lists.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut rerank_sum, mut rerank_batches) = (0.0, 0usize);
        let (mut trunc_sum, mut trunc_batches) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let phase = Phase::of_batch(epoch, batch);
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = state.params.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let (value, _) = accumulate_list(&state.params, &lists[i], phase, None, scale, &mut grads)?;
                loss += scale * value;
            }
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch });
            }
            let mask = &masks[(phase == Phase::Truncate) as usize];
            state.optimizer.step(&mut state.params.tensors, &grads, mask);
            match phase {
                Phase::Rerank => {
                    rerank_sum += loss;
                    rerank_batches += 1;
                }
                Phase::Truncate => {
                    trunc_sum += loss;
                    trunc_batches += 1;
                }
            }
        }

        let scores = valid_lists
            .as_deref()
            .map(|v| validation_scores(&state.params, v))
            .transpose()?;
        state.history.push(HistoryRow {
            epoch,
            phase: if epoch == 1 { "rerank" } else { "alternate" },
            mean_rerank_loss: rerank_sum / rerank_batches.max(1) as f64,
            mean_truncation_loss: (trunc_batches > 0).then(|| trunc_sum / trunc_batches as f64),
            val_ndcg5: scores.map(|s| s.0),
            val_tdcg: scores.map(|s| s.1),
        });
        // Epoch 1 leaves the truncation head untrained, so it only counts
        // as best when training stops there.
        if let Some((ndcg, _)) = scores {
            let eligible = epoch >= 2 || tc.epochs == 1;
            let improves = state.best.as_ref().is_none_or(|(_, best, _)| ndcg > *best);
            if eligible && improves {
                state.best = Some((epoch, ndcg, state.params.clone()));
            }
        }
        state.epochs_done = epoch;
        if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
            if let Some(dir) = &tc.checkpoint_dir {
                state.save(dir.join(format!("state-epoch-{epoch}.ckpt")))?;
            }
        }
    }

    let (best_epoch, best_params) = match state.best {
        Some((epoch, _, params)) => (epoch, params),
        None => (state.epochs_done, state.params.clone()),
    };
    Ok(TrainOutcome {
        params: state.params,
        best_params,
        best_epoch,
        history: state.history,
    })
}
