//! Global list encoder: input embeddings, the transfer layer, and stacked
//! pre-norm self-attention blocks producing the contextual rows `O`.
//!
//! The encoder carries no positional signal, so it is permutation
//! equivariant over the input rows.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::{AttentionBlock, ModelParams};
use crate::tape::{Tape, Var};
use crate::types::QueryList;

/// Tape handles for one list's encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[N, Z+1]` input embeddings.
    pub u: Var,
    /// `[N, E]` transfer output.
    pub x: Var,
    /// `[N, E]` contextual output.
    pub o: Var,
}

/// Row `i` is doc `i`'s features followed by its initial score.
pub fn embed_inputs(list: &QueryList) -> Result<Array2<f64>> {
    let width = list.docs.first().map_or(0, |d| d.features.len()) + 1;
    let mut u = Array2::zeros((list.len(), width));
    for (row, doc) in list.docs.iter().enumerate() {
        if doc.features.len() + 1 != width {
            return Err(Error::FeatureLength {
                qid: list.qid.clone(),
                doc_id: doc.doc_id.clone(),
                found: doc.features.len(),
                expected: width - 1,
            });
        }
        let values = doc.features.iter().chain(std::iter::once(&doc.initial_score));
        for (col, &v) in values.enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    qid: list.qid.clone(),
                    row,
                });
            }
            u[[row, col]] = v;
        }
    }
    Ok(u)
}

/// `Swish(U W + b)`, mapping input embeddings to the attention width. The
/// decoder reuses this map for prefix rows and the start vector.
pub fn transfer(tape: &mut Tape<'_>, params: &ModelParams, u: Var) -> Var {
    let w = tape.param(params.ids.transfer.w);
    let b = tape.param(params.ids.transfer.b);
    let h = tape.affine(u, w, b);
    tape.swish(h)
}

/// Query, key and value projections of `LN(x)` for a block.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

pub fn project(tape: &mut Tape<'_>, block: &AttentionBlock, x: Var) -> Projections {
    let gain = tape.param(block.norm.gain);
    let bias = tape.param(block.norm.bias);
    let normed = tape.layer_norm(x, gain, bias);
    let mut proj = |lin: crate::params::Linear| {
        let w = tape.param(lin.w);
        let b = tape.param(lin.b);
        tape.affine(normed, w, b)
    };
    Projections {
        query: proj(block.query),
        key: proj(block.key),
        value: proj(block.value),
    }
}

/// Applies the block's output projection to attended values and adds the
/// residual rows.
pub fn finish_block(tape: &mut Tape<'_>, block: &AttentionBlock, attended: Var, residual: Var) -> Var {
    let w = tape.param(block.output.w);
    let b = tape.param(block.output.b);
    let out = tape.affine(attended, w, b);
    tape.add(residual, out)
}

/// `x + MHSA(LN(x))` with full attention over all rows.
pub fn attention_block(tape: &mut Tape<'_>, block: &AttentionBlock, heads: usize, x: Var) -> Var {
    let p = project(tape, block, x);
    let attended = tape.attention(p.query, p.key, p.value, heads, None);
    finish_block(tape, block, attended, x)
}

/// Runs the configured encoder blocks over the transfer output.
pub fn encode(tape: &mut Tape<'_>, params: &ModelParams, x: Var) -> Var {
    params
        .ids
        .encoder
        .iter()
        .fold(x, |h, block| attention_block(tape, block, params.config.heads, h))
}

/// Full encoder pass for a list.
pub fn run_encoder(tape: &mut Tape<'_>, params: &ModelParams, list: &QueryList) -> Result<EncoderOutput> {
    let u = embed_inputs(list)?;
    if u.ncols() != params.config.input_dim() {
        return Err(Error::FeatureLength {
            qid: list.qid.clone(),
            doc_id: list.docs[0].doc_id.clone(),
            found: u.ncols() - 1,
            expected: params.config.feature_dim,
        });
    }
    let u = tape.input(u);
    let x = transfer(tape, params, u);
    let o = encode(tape, params, x);
    Ok(EncoderOutput { u, x, o })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FeatureDoc, ModelConfig};
    use ndarray::array;

    fn config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            ..ModelConfig::with_feature_dim(2)
        }
    }

    fn list(rows: &[[f64; 3]]) -> QueryList {
        QueryList {
            qid: "q".into(),
            docs: rows
                .iter()
                .enumerate()
                .map(|(i, r)| FeatureDoc {
                    doc_id: format!("d{i}"),
                    features: r[..2].to_vec(),
                    label: 0,
                    initial_score: r[2],
                })
                .collect(),
        }
    }

    #[test]
    fn concatenates_features_and_score() {
        let u = embed_inputs(&list(&[[0.5, 0.3, 0.7]])).unwrap();
        assert_eq!(u, array![[0.5, 0.3, 0.7]]);
    }

    #[test]
    fn rejects_non_finite_with_row() {
        let err = embed_inputs(&list(&[[0.5, 0.3, 0.7], [f64::NAN, 0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, .. }));
    }

    #[test]
    fn zero_transfer_gives_zero_rows() {
        let mut p = ModelParams::init(&config()).unwrap();
        p.tensors[p.ids.transfer.w].fill(0.0);
        let mut t = Tape::new(&p.tensors);
        let u = t.input(embed_inputs(&list(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).unwrap());
        let x = transfer(&mut t, &p, u);
        assert!(t.value(x).iter().all(|&v| v == 0.0));
        assert_eq!(t.value(x).dim(), (2, 8));
    }

    #[test]
    fn transfer_of_unit_preactivation_is_swish_one() {
        let mut p = ModelParams::init(&config()).unwrap();
        p.tensors[p.ids.transfer.w].fill(0.0);
        p.tensors[p.ids.transfer.b].fill(1.0);
        let mut t = Tape::new(&p.tensors);
        let u = t.input(embed_inputs(&list(&[[1.0, 2.0, 3.0]])).unwrap());
        let x = transfer(&mut t, &p, u);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(t.value(x).iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!((expected - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut p = ModelParams::init(&config()).unwrap();
        for block in p.ids.encoder.clone() {
            p.tensors[block.value.w].fill(0.0);
            p.tensors[block.output.b].fill(0.0);
        }
        let mut t = Tape::new(&p.tensors);
        let x = t.input(array![[0.5, -1.0, 2.0, 0.1, 0.0, 3.0, -0.4, 1.2], [1.0; 8]]);
        let o = encode(&mut t, &p, x);
        assert_eq!(t.value(o), t.value(x));
    }

    #[test]
    fn single_row_stays_finite() {
        let p = ModelParams::init(&config()).unwrap();
        let mut t = Tape::new(&p.tensors);
        let out = run_encoder(&mut t, &p, &list(&[[1e3, -1e3, 1e3]])).unwrap();
        assert_eq!(t.value(out.o).nrows(), 1);
        assert!(t.value(out.o).iter().all(|v| v.is_finite()));
    }
}
