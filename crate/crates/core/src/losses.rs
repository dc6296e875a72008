//! Training objectives over greedy rollouts.
//!
//! Reranking: a step-adaptive attention cross-entropy plus a step-by-step
//! lambda loss. Truncation: binary cross-entropy against soft cut labels
//! derived from the TDCG reward of cutting now versus after the window.
//!
//! Every loss comes with its analytic gradient with respect to the step score
//! vectors or cut probabilities; the trainer feeds those into the tape.

use crate::error::{Error, Result};
use crate::tape::sigmoid;
use crate::types::GammaMap;

/// Logit assigned to already-selected docs in attention distributions.
pub const SELECTED_LOGIT: f64 = -1e4;

/// Lower clamp on probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rank discount `1 / log2(1 + pos)` for a 1-based position.
pub fn rank_discount(pos: usize) -> f64 {
    1.0 / ((1 + pos) as f64).log2()
}

/// A generated sequence with the score vector of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Emitted doc indices, one per step.
    pub sequence: Vec<usize>,
    /// Scores over all N candidates at each step.
    pub score_matrices: Vec<Vec<f64>>,
    /// Backward window (next-best candidates) at each step.
    pub windows: Vec<Vec<usize>>,
    pub window_size: usize,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    fn candidates(&self) -> usize {
        self.score_matrices.first().map_or(0, Vec::len)
    }

    /// Docs emitted before step `t` (0-based).
    fn selected_before(&self, t: usize) -> Vec<bool> {
        let mut mask = vec![false; self.candidates()];
        for &i in &self.sequence[..t] {
            mask[i] = true;
        }
        mask
    }

    /// Labels of the emitted sequence.
    pub fn sequence_labels(&self, labels: &[u32]) -> Vec<u32> {
        self.sequence.iter().map(|&i| labels[i]).collect()
    }
}

/// Soft `(y_cut, y_nocut)` targets per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCutLabels {
    pub pairs: Vec<(f64, f64)>,
}

/// A loss value and its gradient with respect to every step's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub score_grads: Vec<Vec<f64>>,
}

impl ScoreLoss {
    fn zeros(rollout: &RolloutRecord) -> Self {
        Self {
            value: 0.0,
            score_grads: rollout
                .score_matrices
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect(),
        }
    }
}

fn masked_log_softmax(values: impl Fn(usize) -> f64, selected: &[bool]) -> Vec<f64> {
    let logits: Vec<f64> = (0..selected.len())
        .map(|i| if selected[i] { SELECTED_LOGIT } else { values(i) })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

/// Ground-truth attention: softmax of labels with selected docs pushed to
/// [`SELECTED_LOGIT`].
pub fn attention_targets(labels: &[u32], selected: &[bool]) -> Vec<f64> {
    masked_log_softmax(|i| labels[i] as f64, selected)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Step-adaptive attention loss with its score gradients. Step `t` is
/// weighted by `1 / log2(1 + t)`.
pub fn attention_loss_grad(rollout: &RolloutRecord, labels: &[u32]) -> ScoreLoss {
    let mut out = ScoreLoss::zeros(rollout);
    for (t, scores) in rollout.score_matrices.iter().enumerate() {
        let selected = rollout.selected_before(t);
        let target = attention_targets(labels, &selected);
        let log_pred = masked_log_softmax(|i| scores[i], &selected);
        let alpha = rank_discount(t + 1);
        let ce: f64 = target.iter().zip(&log_pred).map(|(a, lb)| -a * lb).sum();
        out.value += alpha * ce;
        for i in (0..scores.len()).filter(|&i| !selected[i]) {
            out.score_grads[t][i] = alpha * (log_pred[i].exp() - target[i]);
        }
    }
    out
}

pub fn step_adaptive_attention_loss(rollout: &RolloutRecord, labels: &[u32]) -> f64 {
    attention_loss_grad(rollout, labels).value
}

fn gain(label: u32) -> f64 {
    2f64.powi(label as i32) - 1.0
}

fn dcg(labels: &[u32]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| gain(l) * rank_discount(i + 1))
        .sum()
}

/// `|NDCG after swapping positions i and j − NDCG|` of a label sequence.
pub fn ndcg_swap_delta(labels: &[u32], i: usize, j: usize) -> f64 {
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return 0.0;
    }
    let delta = (gain(labels[i]) - gain(labels[j])) * (rank_discount(i + 1) - rank_discount(j + 1));
    delta.abs() / idcg
}

/// Step-by-step lambda loss with its score gradients: for every pair of
/// steps `f < b` whose later doc is more relevant, a logistic penalty on the
/// two docs' scores in step `f`'s score vector, weighted by the NDCG swap
/// delta.
pub fn sbs_loss_grad(rollout: &RolloutRecord, labels: &[u32]) -> ScoreLoss {
    let mut out = ScoreLoss::zeros(rollout);
    let seq_labels = rollout.sequence_labels(labels);
    let len = rollout.len().min(rollout.score_matrices.len());
    for f in 0..len {
        let scores = &rollout.score_matrices[f];
        let front = rollout.sequence[f];
        for b in f + 1..len {
            if seq_labels[b] <= seq_labels[f] {
                continue;
            }
            let back = rollout.sequence[b];
            let weight = ndcg_swap_delta(&seq_labels[..len], f, b);
            let diff = scores[front] - scores[back];
            out.value += weight * softplus(diff);
            let d = weight * sigmoid(diff);
            out.score_grads[f][front] += d;
            out.score_grads[f][back] -= d;
        }
    }
    out
}

pub fn sbs_lambda_loss(rollout: &RolloutRecord, labels: &[u32]) -> f64 {
    sbs_loss_grad(rollout, labels).value
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `L_R = L_att + η · L_sbs` with its score gradients.
pub fn rerank_loss_grad(rollout: &RolloutRecord, labels: &[u32], eta: f64) -> ScoreLoss {
    let mut out = attention_loss_grad(rollout, labels);
    if eta == 0.0 {
        return out;
    }
    let sbs = sbs_loss_grad(rollout, labels);
    out.value += eta * sbs.value;
    for (acc, g) in out.score_grads.iter_mut().zip(&sbs.score_grads) {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += eta * v;
        }
    }
    out
}

pub fn rerank_loss(rollout: &RolloutRecord, labels: &[u32], eta: f64) -> f64 {
    rerank_loss_grad(rollout, labels, eta).value
}

/// `Σ_{t ≤ x} γ(y_t) / log2(t + 1)` over labels in rank order.
pub fn tdcg(labels: &[u32], gamma: &GammaMap, x: usize) -> Result<f64> {
    if x == 0 || x > labels.len() {
        return Err(Error::CutOutOfRange { x, len: labels.len() });
    }
    Ok(gamma
        .gains(&labels[..x])?
        .into_iter()
        .enumerate()
        .map(|(i, g)| g * rank_discount(i + 1))
        .sum())
}

/// Soft cut labels per step. The local list at step `T` is the emitted
/// prefix, the step's doc and its backward window; cutting earns TDCG@T and
/// continuing earns TDCG@(T + window length).
pub fn soft_cut_labels(rollout: &RolloutRecord, labels: &[u32], gamma: &GammaMap) -> Result<SoftCutLabels> {
    let mut pairs = Vec::with_capacity(rollout.len());
    for t in 0..rollout.len() {
        let local: Vec<u32> = rollout.sequence[..=t]
            .iter()
            .chain(&rollout.windows[t])
            .map(|&i| labels[i])
            .collect();
        let cut = tdcg(&local, gamma, t + 1)?;
        let keep = tdcg(&local, gamma, local.len())?;
        let y_cut = sigmoid(cut - keep);
        pairs.push((y_cut, 1.0 - y_cut));
    }
    Ok(SoftCutLabels { pairs })
}

/// Truncation loss and its gradient with respect to each step's `(p_0, p_1)`.
pub fn truncation_loss_grad(cut_probs: &[(f64, f64)], soft: &SoftCutLabels) -> (f64, Vec<(f64, f64)>) {
    assert_eq!(cut_probs.len(), soft.pairs.len(), "steps misaligned");
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(cut_probs.len());
    for (&(p0, p1), &(y_cut, y_nocut)) in cut_probs.iter().zip(&soft.pairs) {
        value -= y_cut * p1.max(PROB_FLOOR).ln() + y_nocut * p0.max(PROB_FLOOR).ln();
        let d = |y: f64, p: f64| if p > PROB_FLOOR { -y / p } else { 0.0 };
        grads.push((d(y_nocut, p0), d(y_cut, p1)));
    }
    (value, grads)
}

pub fn truncation_loss(cut_probs: &[(f64, f64)], soft: &SoftCutLabels) -> f64 {
    truncation_loss_grad(cut_probs, soft).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn full_rollout(sequence: Vec<usize>, scores: Vec<Vec<f64>>) -> RolloutRecord {
        let n = sequence.len();
        RolloutRecord {
            sequence,
            score_matrices: scores,
            windows: vec![vec![]; n],
            window_size: 0,
        }
    }

    #[test]
    fn attention_targets_examples() {
        let a = attention_targets(&[4, 0], &[false, false]);
        assert_abs_diff_eq!(a[0], 0.98201, epsilon = 1e-5);
        assert_abs_diff_eq!(a[1], 0.01799, epsilon = 1e-5);
        let a = attention_targets(&[4, 0], &[true, false]);
        assert!(a[0] < 1e-40);
        assert_abs_diff_eq!(a[1], 1.0, epsilon = 1e-15);
        let a = attention_targets(&[2, 2, 2], &[false; 3]);
        assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn step_weights() {
        assert_eq!(rank_discount(1), 1.0);
        assert_eq!(rank_discount(3), 0.5);
    }

    #[test]
    fn attention_loss_hits_entropy_when_scores_match_labels() {
        let labels = [3, 1, 0];
        let seq = vec![0, 1, 2];
        let scores: Vec<Vec<f64>> = (0..3).map(|_| labels.iter().map(|&l| l as f64 + 7.0).collect()).collect();
        let r = full_rollout(seq.clone(), scores);
        let mut expected = 0.0;
        for t in 0..3 {
            let sel = r.selected_before(t);
            let a = attention_targets(&labels, &sel);
            let h: f64 = a.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
            expected += rank_discount(t + 1) * h;
        }
        assert_abs_diff_eq!(step_adaptive_attention_loss(&r, &labels), expected, epsilon = 1e-12);
    }

    #[test]
    fn final_single_candidate_step_costs_nothing() {
        let r = full_rollout(vec![1, 0], vec![vec![0.3, 0.9], vec![0.7, -1e9]]);
        let g = attention_loss_grad(&r, &[0, 2]);
        // Step 2 has one candidate left: its CE and gradient vanish.
        assert_eq!(g.score_grads[1], vec![0.0, 0.0]);
        let step1_only = full_rollout(vec![1], vec![vec![0.3, 0.9]]);
        assert_abs_diff_eq!(g.value, attention_loss_grad(&step1_only, &[0, 2]).value, epsilon = 1e-15);
    }

    #[test]
    fn sbs_zero_on_non_increasing_labels() {
        let r = full_rollout(vec![0, 1, 2], vec![vec![0.1, 0.5, 0.9]; 3]);
        assert_eq!(sbs_lambda_loss(&r, &[3, 3, 1]), 0.0);
    }

    #[test]
    fn sbs_two_step_example() {
        // Sequence labels [2, 3] with equal step-1 scores.
        let r = full_rollout(vec![0, 1], vec![vec![0.5, 0.5], vec![-1e9, 0.5]]);
        let delta = ndcg_swap_delta(&[2, 3], 0, 1);
        assert_abs_diff_eq!(delta, 0.16601, epsilon = 1e-5);
        assert_abs_diff_eq!(sbs_lambda_loss(&r, &[2, 3]), 0.11507, epsilon = 1e-5);
        assert_abs_diff_eq!(delta * 2f64.ln(), sbs_lambda_loss(&r, &[2, 3]), epsilon = 1e-15);
    }

    #[test]
    fn sbs_depends_on_score_differences_only() {
        let r = full_rollout(vec![0, 1], vec![vec![0.5, 0.5], vec![-1e9, 0.5]]);
        let doubled = full_rollout(vec![0, 1], vec![vec![1.0, 1.0], vec![-1e9, 1.0]]);
        assert_eq!(sbs_lambda_loss(&r, &[2, 3]), sbs_lambda_loss(&doubled, &[2, 3]));
    }

    #[test]
    fn rerank_combination() {
        let r = full_rollout(vec![0, 1, 2], vec![vec![0.2, 0.1, 0.7], vec![-1e9, 0.4, 0.3], vec![-1e9, -1e9, 0.0]]);
        let labels = [1, 4, 2];
        let att = step_adaptive_attention_loss(&r, &labels);
        let sbs = sbs_lambda_loss(&r, &labels);
        assert!(sbs > 0.0);
        assert_eq!(rerank_loss(&r, &labels, 0.0), att);
        assert_abs_diff_eq!(rerank_loss(&r, &labels, 0.1), att + 0.1 * sbs, epsilon = 1e-12);
    }

    #[test]
    fn tdcg_examples() {
        let g = GammaMap::web_search();
        let labels = [3, 2, 0];
        assert_abs_diff_eq!(tdcg(&labels, &g, 1).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tdcg(&labels, &g, 2).unwrap(), 4.262, epsilon = 1e-3);
        assert_abs_diff_eq!(tdcg(&labels, &g, 3).unwrap(), 2.262, epsilon = 1e-3);
        assert!(tdcg(&labels, &g, 0).is_err());
        assert!(tdcg(&labels, &g, 4).is_err());
        let zeros = [0; 6];
        let series: Vec<f64> = (1..=6).map(|x| tdcg(&zeros, &g, x).unwrap()).collect();
        assert!(series.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn soft_label_examples() {
        let g = GammaMap::web_search();
        let r = RolloutRecord {
            sequence: vec![0, 1, 2],
            score_matrices: vec![vec![0.0; 3]; 3],
            windows: vec![vec![1, 2], vec![2], vec![]],
            window_size: 2,
        };
        let soft = soft_cut_labels(&r, &[3, 2, 0], &g).unwrap();
        assert_abs_diff_eq!(soft.pairs[0].0, 0.6765, epsilon = 1e-4);
        assert_abs_diff_eq!(soft.pairs[0].1, 0.3235, epsilon = 1e-4);
        // Empty window: both rewards coincide.
        assert_eq!(soft.pairs[2], (0.5, 0.5));

        let strong = RolloutRecord {
            sequence: vec![0, 1, 2],
            score_matrices: vec![vec![0.0; 3]; 3],
            windows: vec![vec![1, 2], vec![2], vec![]],
            window_size: 2,
        };
        let soft = soft_cut_labels(&strong, &[1, 4, 4], &g).unwrap();
        assert!(soft.pairs[0].1 > soft.pairs[0].0);
    }

    #[test]
    fn truncation_loss_examples() {
        let soft = SoftCutLabels { pairs: vec![(1.0, 0.0)] };
        assert_eq!(truncation_loss(&[(0.0, 1.0)], &soft), 0.0);
        let soft = SoftCutLabels { pairs: vec![(0.5, 0.5), (0.5, 0.5)] };
        assert_abs_diff_eq!(truncation_loss(&[(0.5, 0.5), (0.5, 0.5)], &soft), 2.0 * 2f64.ln(), epsilon = 1e-15);
        let soft = SoftCutLabels { pairs: vec![(0.3, 0.7), (0.9, 0.1)] };
        let entropy: f64 = soft.pairs.iter().map(|&(a, b)| -(a * f64::ln(a) + b * f64::ln(b))).sum();
        assert_abs_diff_eq!(truncation_loss(&[(0.7, 0.3), (0.1, 0.9)], &soft), entropy, epsilon = 1e-12);
        // A zero probability is clamped, not infinite.
        let soft = SoftCutLabels { pairs: vec![(1.0, 0.0)] };
        assert!(truncation_loss(&[(1.0, 0.0)], &soft).is_finite());
    }

    /// Central differences of a loss in the score vectors.
    fn numeric_score_grads(r: &RolloutRecord, f: impl Fn(&RolloutRecord) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for t in 0..r.score_matrices.len() {
            let mut row = Vec::new();
            for i in 0..r.score_matrices[t].len() {
                let mut plus = r.clone();
                plus.score_matrices[t][i] += h;
                let mut minus = r.clone();
                minus.score_matrices[t][i] -= h;
                row.push((f(&plus) - f(&minus)) / (2.0 * h));
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn score_gradients_match_central_differences() {
        let r = full_rollout(
            vec![2, 0, 3, 1],
            vec![
                vec![0.2, -0.4, 0.9, 0.1],
                vec![0.5, 0.3, -1e9, 0.6],
                vec![-1e9, 0.8, -1e9, 0.7],
                vec![-1e9, 0.1, -1e9, -1e9],
            ],
        );
        let labels = [1, 3, 0, 4];
        let analytic = rerank_loss_grad(&r, &labels, 0.3).score_grads;
        let numeric = numeric_score_grads(&r, |r| rerank_loss(r, &labels, 0.3));
        for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-7);
        }
    }

    #[test]
    fn truncation_gradient_matches_central_differences() {
        let soft = SoftCutLabels { pairs: vec![(0.3, 0.7), (0.8, 0.2)] };
        let probs = [(0.6, 0.4), (0.25, 0.75)];
        let (_, grads) = truncation_loss_grad(&probs, &soft);
        let h = 1e-7;
        for s in 0..2 {
            for k in 0..2 {
                let bump = |d: f64| {
                    let mut p = probs;
                    if k == 0 { p[s].0 += d } else { p[s].1 += d }
                    truncation_loss(&p, &soft)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = if k == 0 { grads[s].0 } else { grads[s].1 };
                assert_abs_diff_eq!(analytic, numeric, epsilon = 1e-6);
            }
        }
    }
}
