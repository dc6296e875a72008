use jointrank::decoder::{
    decode, dynamic_rank, first_step_scores, latent_cross, relative_bucket, score_candidates, sequential_dependency,
    truncation_decision, ListContext, MASKED_SCORE,
};
use jointrank::encoder::run_encoder;
use jointrank::params::ModelParams;
use jointrank::tape::Tape;
use jointrank::{DecodeMode, Error, FeatureDoc, ModelConfig, QueryList};

fn list_of(rows: &[&[f64]]) -> QueryList {
    QueryList {
        qid: "q".into(),
        docs: rows
            .iter()
            .enumerate()
            .map(|(i, r)| FeatureDoc {
                doc_id: format!("d{i}"),
                features: r[..r.len() - 1].to_vec(),
                label: 0,
                initial_score: r[r.len() - 1],
            })
            .collect(),
    }
}

fn small_config(feature_dim: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        heads: 2,
        rffn_hidden: 4,
        beta: 2,
        seed: 21,
        ..ModelConfig::with_feature_dim(feature_dim)
    }
}

fn id(p: &ModelParams, name: &str) -> usize {
    p.index_of(name).unwrap_or_else(|| panic!("no tensor {name}"))
}

// Plain nested-vector arithmetic, independent of the tape.
mod dense {
    pub type M = Vec<Vec<f64>>;

    pub fn of(a: &ndarray::Array2<f64>) -> M {
        a.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    pub fn affine(x: &M, w: &M, b: &M) -> M {
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| b[0][j] + (0..row.len()).map(|k| row[k] * w[k][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn swish(x: &M) -> M {
        x.iter().map(|r| r.iter().map(|v| v / (1.0 + (-v).exp())).collect()).collect()
    }

    pub fn layer_norm(x: &M, gain: &M, bias: &M) -> M {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[0][j] + bias[0][j])
                    .collect()
            })
            .collect()
    }

    /// `x + Wo · MHSA(LN(x))`.
    pub fn block(x: &M, t: &dyn Fn(&str) -> M, prefix: &str, heads: usize) -> M {
        let n = layer_norm(x, &t(&format!("{prefix}.ln.gain")), &t(&format!("{prefix}.ln.bias")));
        let proj = |k: &str| affine(&n, &t(&format!("{prefix}.attn.{k}.w")), &t(&format!("{prefix}.attn.{k}.b")));
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let e = x[0].len();
        let dh = e / heads;
        let mut attended = vec![vec![0.0; e]; x.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let logits: Vec<f64> = (0..x.len())
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let w = (l - max).exp() / z;
                    for c in cols.clone() {
                        attended[i][c] += w * v[j][c];
                    }
                }
            }
        }
        let out = affine(&attended, &t(&format!("{prefix}.attn.o.w")), &t(&format!("{prefix}.attn.o.b")));
        x.iter().zip(out).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
    }
}

/// Scores from plain arithmetic for a given prefix, at `Z = 2, E = 4`.
fn dense_scores(p: &ModelParams, u: &dense::M, prefix: &[usize], mask: &[bool]) -> Vec<f64> {
    let t = |name: &str| dense::of(&p.tensors[id(p, name)]);
    let transfer = |rows: &dense::M| dense::swish(&dense::affine(rows, &t("transfer.w"), &t("transfer.b")));
    let x = transfer(u);
    let mut o = x.clone();
    for b in 0..p.config.encoder_blocks {
        o = dense::block(&o, &t, &format!("enc.{b}"), p.config.heads);
    }
    let gate = dense::affine(&o, &t("dec.latent.w"), &t("dec.latent.b"));
    let feats = dense::swish(&dense::affine(u, &t("dec.ffn.w"), &t("dec.ffn.b")));
    let interaction: dense::M = gate
        .iter()
        .zip(&feats)
        .map(|(g, f)| g.iter().zip(f).map(|(a, b)| (1.0 + a) * b).collect())
        .collect();
    let m = if prefix.is_empty() {
        transfer(&t("dec.start"))[0].clone()
    } else {
        let rows: dense::M = prefix.iter().map(|&i| x[i].clone()).collect();
        dense::block(&rows, &t, "dec.prefix.0", p.config.heads).pop().unwrap()
    };
    let joined: dense::M = interaction.iter().map(|r| r.iter().chain(&m).copied().collect()).collect();
    let hidden = dense::swish(&dense::affine(&joined, &t("rffn.hidden.w"), &t("rffn.hidden.b")));
    let scores = dense::affine(&hidden, &t("rffn.out.w"), &t("rffn.out.b"));
    scores
        .iter()
        .zip(mask)
        .map(|(s, &masked)| if masked { MASKED_SCORE } else { s[0] })
        .collect()
}

#[test]
fn scores_match_dense_arithmetic() {
    let config = ModelConfig {
        embed_dim: 4,
        heads: 2,
        seed: 8,
        ..ModelConfig::with_feature_dim(1)
    };
    let mut p = ModelParams::init(&config).unwrap();
    // Non-trivial norms and output projections so every term matters.
    for (i, t) in p.tensors.iter_mut().enumerate() {
        t.mapv_inplace(|v| v + 0.05 * ((i as f64) * 0.7).sin());
    }
    let list = list_of(&[&[0.4, 0.9], &[-1.3, 0.2], &[0.8, -0.5]]);
    let u: dense::M = list
        .docs
        .iter()
        .map(|d| vec![d.features[0], d.initial_score])
        .collect();

    let first = first_step_scores(&p, &list).unwrap();
    let expected = dense_scores(&p, &u, &[], &[false; 3]);
    for (a, b) in first.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{first:?} vs {expected:?}");
    }

    let trace = decode(&p, &list, DecodeMode::RerankOnly).unwrap();
    for t in 1..3 {
        let prefix = &trace.chosen[..t];
        let mask: Vec<bool> = (0..3).map(|i| prefix.contains(&i)).collect();
        let expected = dense_scores(&p, &u, prefix, &mask);
        for (a, b) in trace.score_matrices[t].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "step {t}: {:?} vs {expected:?}", trace.score_matrices[t]);
        }
    }
}

#[test]
fn dynamic_rank_examples() {
    assert_eq!(dynamic_rank(&[0.2, 0.9, 0.5], &[false; 3]).unwrap(), vec![1, 2, 0]);
    assert_eq!(dynamic_rank(&[0.2, 0.9, 0.5], &[false, true, false]).unwrap(), vec![2, 0]);
    assert_eq!(dynamic_rank(&[0.5, 0.5], &[false; 2]).unwrap(), vec![0, 1]);
    assert!(matches!(dynamic_rank(&[0.1, 0.2], &[true; 2]), Err(Error::DecodeExhausted)));
}

#[test]
fn start_state_ignores_the_list() {
    let p = ModelParams::init(&small_config(2)).unwrap();
    let state = |list: &QueryList| {
        let mut tape = Tape::new(&p.tensors);
        let ctx = ListContext::new(&mut tape, &p, list, true, false).unwrap();
        let m = sequential_dependency(&mut tape, &p, &ctx, &[]);
        tape.value(m).to_owned()
    };
    let a = state(&list_of(&[&[1.0, 2.0, 0.3], &[0.0, -1.0, 0.1]]));
    let b = state(&list_of(&[&[5.0, 5.0, 5.0]]));
    assert_eq!(a, b);
    assert_eq!(a.dim(), (1, 8));
}

#[test]
fn prefix_state_depends_only_on_the_prefix() {
    let p = ModelParams::init(&small_config(2)).unwrap();
    let shared: [f64; 3] = [0.7, -0.2, 1.5];
    let other: [f64; 3] = [0.1, 0.3, -0.6];
    let a = list_of(&[&shared, &[2.0, 2.0, 2.0], &other]);
    let b = list_of(&[&[-3.0, 1.0, 0.0], &other, &[9.0, -9.0, 4.0], &shared]);
    let state = |list: &QueryList, prefix: &[usize]| {
        let mut tape = Tape::new(&p.tensors);
        let ctx = ListContext::new(&mut tape, &p, list, true, false).unwrap();
        let m = sequential_dependency(&mut tape, &p, &ctx, prefix);
        tape.value(m).to_owned()
    };
    assert_eq!(state(&a, &[0]), state(&b, &[3]));
    assert_eq!(state(&a, &[0, 2]), state(&b, &[3, 1]));
    assert!(state(&a, &[0]).iter().all(|v| v.is_finite()));
}

fn interaction_with(p: &ModelParams, list: &QueryList) -> ndarray::Array2<f64> {
    let mut tape = Tape::new(&p.tensors);
    let enc = run_encoder(&mut tape, p, list).unwrap();
    let i = latent_cross(&mut tape, p, enc.u, enc.o);
    tape.value(i).to_owned()
}

#[test]
fn latent_cross_identities() {
    let list = list_of(&[&[1.0, -0.5, 0.2], &[0.3, 0.8, -1.0]]);
    let mut p = ModelParams::init(&small_config(2)).unwrap();
    let (lw, lb) = (id(&p, "dec.latent.w"), id(&p, "dec.latent.b"));
    p.tensors[lw].fill(0.0);
    p.tensors[lb].fill(0.0);
    let plain = interaction_with(&p, &list);
    let mut tape = Tape::new(&p.tensors);
    let u = tape.input(jointrank::encoder::embed_inputs(&list).unwrap());
    let (fw, fb) = (tape.param(id(&p, "dec.ffn.w")), tape.param(id(&p, "dec.ffn.b")));
    let h = tape.affine(u, fw, fb);
    let feats = tape.swish(h);
    assert_eq!(plain, tape.value(feats));

    p.tensors[lb].fill(1.0);
    let doubled = interaction_with(&p, &list);
    assert_eq!(doubled, &plain * 2.0);

    let mut q = ModelParams::init(&small_config(2)).unwrap();
    let (fw, fb) = (id(&q, "dec.ffn.w"), id(&q, "dec.ffn.b"));
    q.tensors[fw].fill(0.0);
    q.tensors[fb].fill(0.0);
    assert!(interaction_with(&q, &list).iter().all(|&v| v == 0.0));
}

#[test]
fn lone_unmasked_candidate_wins_and_twins_tie() {
    let p = ModelParams::init(&small_config(2)).unwrap();
    let twin: [f64; 3] = [0.4, 0.4, 0.9];
    let list = list_of(&[&[3.0, 1.0, 2.0], &twin, &[-1.0, 0.0, 0.1], &twin]);
    let mut tape = Tape::new(&p.tensors);
    let ctx = ListContext::new(&mut tape, &p, &list, true, false).unwrap();
    let m = sequential_dependency(&mut tape, &p, &ctx, &[]);
    let s = score_candidates(&mut tape, &p, &ctx, m, &[false; 4]);
    let scores = tape.value(s).column(0).to_vec();
    assert_eq!(scores[1], scores[3]);

    let mask = [true, true, false, true];
    let s = score_candidates(&mut tape, &p, &ctx, m, &mask);
    let scores = tape.value(s).column(0).to_vec();
    assert_eq!(dynamic_rank(&scores, &mask).unwrap(), vec![2]);
    assert!(scores.iter().zip(mask).all(|(&v, m)| !m || v == MASKED_SCORE));
}

#[test]
fn cut_distribution_is_valid_and_shift_invariant() {
    let mut config = small_config(2);
    config.beta = 0;
    let mut p = ModelParams::init(&config).unwrap();
    let table = id(&p, "trunc.rel_pos");
    for (i, v) in p.tensors[table].iter_mut().enumerate() {
        *v = (i as f64 * 0.37).sin();
    }
    let list = list_of(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5], &[0.0, 2.0, -0.3], &[0.7, 0.7, 0.7]]);
    let mut tape = Tape::new(&p.tensors);
    let ctx = ListContext::new(&mut tape, &p, &list, false, true).unwrap();

    let single = truncation_decision(&mut tape, &p, &ctx, &[], 2, &[], 0);
    let (p0, p1) = single.probs;
    assert!((p0 + p1 - 1.0).abs() < 1e-6 && p0 >= 0.0 && p1 >= 0.0);

    let at = |tape: &mut Tape<'_>, start| truncation_decision(tape, &p, &ctx, &[3, 0], 1, &[2], start).probs;
    let base = at(&mut tape, 0);
    for shift in [1, 5, 40, 1000] {
        assert_eq!(at(&mut tape, shift), base);
    }
}

#[test]
fn relative_buckets_split_by_sign_and_saturate() {
    let (nb, md) = (16, 64);
    assert_eq!(relative_bucket(0, nb, md), 0);
    for d in 1..200i64 {
        let neg = relative_bucket(-d, nb, md);
        let pos = relative_bucket(d, nb, md);
        assert!(neg < nb / 2 && (nb / 2..nb).contains(&pos));
        assert!(relative_bucket(-(d + 1), nb, md) >= neg);
        assert!(relative_bucket(d + 1, nb, md) >= pos);
    }
    assert_eq!(relative_bucket(500, nb, md), nb - 1);
    assert_eq!(relative_bucket(-500, nb, md), nb / 2 - 1);
}

#[test]
fn decode_modes() {
    let mut p = ModelParams::init(&small_config(2)).unwrap();
    let list = list_of(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5], &[0.0, 2.0, -0.3], &[0.7, 0.7, 0.7], &[-0.4, 0.1, 0.0]]);

    let ranked = decode(&p, &list, DecodeMode::RerankOnly).unwrap();
    let mut sorted = ranked.chosen.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    assert_eq!(ranked.cut_step, 5);
    assert!(ranked.cut_probs.is_empty());

    let trunc_only = decode(&p, &list, DecodeMode::TruncateOnly).unwrap();
    assert_eq!(trunc_only.chosen, (0..trunc_only.chosen.len()).collect::<Vec<_>>());

    let head_b = id(&p, "trunc.head.b");
    p.tensors[head_b][[0, 1]] = 50.0;
    let always_cut = decode(&p, &list, DecodeMode::Full).unwrap();
    assert_eq!(always_cut.output().len(), 1);
    assert_eq!(always_cut.cut_step, 1);
    assert_eq!(always_cut.first_excluded, Some(ranked.chosen[1]));

    p.tensors[head_b][[0, 1]] = -50.0;
    let never_cut = decode(&p, &list, DecodeMode::Full).unwrap();
    assert_eq!(never_cut.chosen, ranked.chosen);
    assert_eq!(never_cut.cut_step, 5);
    assert_eq!(never_cut.first_excluded, None);
}

#[test]
fn fast_matches_stepwise_when_prefix_state_is_ignored() {
    let mut p = ModelParams::init(&small_config(2)).unwrap();
    let w1 = id(&p, "rffn.hidden.w");
    let e = p.config.embed_dim;
    p.tensors[w1].slice_mut(ndarray::s![e.., ..]).fill(0.0);
    let list = list_of(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5], &[0.0, 2.0, -0.3], &[0.7, 0.7, 0.7], &[-0.4, 0.1, 0.0]]);
    let fast = decode(&p, &list, DecodeMode::Fast).unwrap();
    let ranked = decode(&p, &list, DecodeMode::RerankOnly).unwrap();
    let full = decode(&p, &list, DecodeMode::Full).unwrap();
    assert_eq!(fast.chosen, ranked.chosen);
    assert_eq!(&fast.chosen[..full.chosen.len()], full.chosen.as_slice());
    assert_eq!(fast.cut_step, 5);
}
