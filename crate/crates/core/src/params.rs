//! Learnable weights, their layout, and the checkpoint container.
//!
//! Checkpoint file layout:
//!
//! ```text
//! genrt-ckpt-1\n
//! <one-line JSON manifest: config, tensor names and shapes, metadata>\n
//! <little-endian f64 data of every tensor, in manifest order>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ModelConfig;

pub const CHECKPOINT_VERSION: &str = "genrt-ckpt-1";

/// Attention output projections start at this fraction of the fan-in scale
/// so every residual block is close to the identity at initialization.
const OUTPUT_PROJ_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

/// A pre-norm self-attention block: `x + Wo·MHSA(LN(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlock {
    pub norm: NormIds,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Indices of every named tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIds {
    pub transfer: Linear,
    pub encoder: Vec<AttentionBlock>,
    pub start: usize,
    pub prefix: Vec<AttentionBlock>,
    pub latent: Linear,
    pub ffn: Linear,
    pub rffn_hidden: Linear,
    pub rffn_out: Linear,
    pub trunc: AttentionBlock,
    pub rel_pos: usize,
    pub trunc_head: Linear,
}

/// Parameter groups frozen by the alternating schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Relative-position attention, its table and the cut head.
    Truncation,
    /// The row-wise scoring FFN.
    CrossRanking,
    Shared,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("trunc.") {
            Self::Truncation
        } else if name.starts_with("rffn.") {
            Self::CrossRanking
        } else {
            Self::Shared
        }
    }
}

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

struct LayoutBuilder {
    specs: Vec<(String, [usize; 2], Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, scale: f64) -> Linear {
        let bound = scale / (fan_in as f64).sqrt();
        Linear {
            w: self.add(format!("{prefix}.w"), [fan_in, fan_out], Init::Uniform(bound)),
            b: self.add(format!("{prefix}.b"), [1, fan_out], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, width: usize) -> AttentionBlock {
        AttentionBlock {
            norm: NormIds {
                gain: self.add(format!("{prefix}.ln.gain"), [1, width], Init::Ones),
                bias: self.add(format!("{prefix}.ln.bias"), [1, width], Init::Zeros),
            },
            query: self.linear(&format!("{prefix}.attn.q"), width, width, 1.0),
            key: self.linear(&format!("{prefix}.attn.k"), width, width, 1.0),
            value: self.linear(&format!("{prefix}.attn.v"), width, width, 1.0),
            output: self.linear(&format!("{prefix}.attn.o"), width, width, OUTPUT_PROJ_SCALE),
        }
    }
}

fn layout(config: &ModelConfig) -> (ParamIds, LayoutBuilder) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (z, e) = (config.input_dim(), config.embed_dim);
    let transfer = b.linear("transfer", z, e, 1.0);
    let encoder = (0..config.encoder_blocks)
        .map(|i| b.block(&format!("enc.{i}"), e))
        .collect();
    let start = b.add("dec.start".into(), [1, z], Init::Uniform(1.0));
    let prefix = (0..config.decoder_blocks)
        .map(|i| b.block(&format!("dec.prefix.{i}"), e))
        .collect();
    let latent = b.linear("dec.latent", e, e, 1.0);
    let ffn = b.linear("dec.ffn", z, e, 1.0);
    let rffn_hidden = b.linear("rffn.hidden", 2 * e, config.rffn_hidden, 1.0);
    let rffn_out = b.linear("rffn.out", config.rffn_hidden, 1, 1.0);
    let trunc = b.block("trunc.block", e);
    let rel_pos = b.add("trunc.rel_pos".into(), [config.rel_pos_buckets, config.heads], Init::Zeros);
    let trunc_head = b.linear("trunc.head", e, 2, 1.0);
    let ids = ParamIds {
        transfer,
        encoder,
        start,
        prefix,
        latent,
        ffn,
        rffn_hidden,
        rffn_out,
        trunc,
        rel_pos,
        trunc_head,
    };
    (ids, b)
}

/// All learnable tensors of the model, each stored as a 2-D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
    pub ids: ParamIds,
}

impl ModelParams {
    /// Fresh weights drawn from `config.seed`: fan-in scaled uniform for
    /// affine maps, near-zero attention output projections, unit norms and
    /// a zero relative-position table.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (ids, builder) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(builder.specs.len());
        let mut tensors = Vec::with_capacity(builder.specs.len());
        for (name, [r, c], init) in builder.specs {
            let t = match init {
                Init::Zeros => Array2::zeros((r, c)),
                Init::Ones => Array2::ones((r, c)),
                Init::Uniform(bound) => Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..=bound)),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            ids,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    }

    pub fn group(&self, id: usize) -> ParamGroup {
        ParamGroup::of(&self.names[id])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, None)
    }

    /// Loads and checks every tensor against the layout of `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, Some(expected))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect(),
            meta: BTreeMap::new(),
        }
    }

    /// Rebuilds parameters from the `ModelParams` tensors of a checkpoint.
    /// Extra tensors (optimizer state) are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let config = expected.unwrap_or(&ckpt.config);
        config.validate()?;
        let (ids, builder) = layout(config);
        let stored: BTreeMap<&str, &Array2<f64>> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut names = Vec::with_capacity(builder.specs.len());
        let mut tensors = Vec::with_capacity(builder.specs.len());
        for (name, [r, c], _) in builder.specs {
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != (r, c) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: vec![r, c],
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            tensors.push((*t).clone());
        }
        Ok(Self {
            config: ckpt.config.clone(),
            names,
            tensors,
            ids,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: String,
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

/// A flat container of named matrices plus string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Array2<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = Manifest {
            config: self.config.to_kv_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
            meta: self.meta.clone(),
        };
        writeln!(w, "{CHECKPOINT_VERSION}")?;
        writeln!(w, "{}", serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version tag {:?}, expected {CHECKPOINT_VERSION}",
                line.trim_end()
            )));
        }
        line.clear();
        r.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = ModelConfig::from_kv_str(&manifest.config)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut buf = [0u8; 8];
        for entry in manifest.tensors {
            let [rows, cols] = entry.shape;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated data for tensor {}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Array2::from_shape_vec((rows, cols), data).expect("length matches shape");
            tensors.push((entry.name, t));
        }
        Ok(Self {
            config,
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            ..ModelConfig::with_feature_dim(3)
        }
    }

    #[test]
    fn declared_shapes_follow_config() {
        let p = ModelParams::init(&ModelConfig::with_feature_dim(8)).unwrap();
        let shape = |name: &str| p.tensors[p.index_of(name).unwrap()].dim();
        assert_eq!(shape("transfer.w"), (9, 256));
        assert_eq!(shape("dec.ffn.w"), (9, 256));
        assert_eq!(shape("rffn.hidden.w"), (512, 32));
        assert_eq!(shape("rffn.out.w"), (32, 1));
        assert_eq!(shape("trunc.head.w"), (256, 2));
        assert_eq!(shape("trunc.rel_pos"), (16, 8));
        assert_eq!(shape("dec.start"), (1, 9));
        assert_eq!(p.ids.encoder.len(), 2);
        assert_eq!(p.ids.prefix.len(), 1);
    }

    #[test]
    fn groups_by_name() {
        assert_eq!(ParamGroup::of("trunc.head.w"), ParamGroup::Truncation);
        assert_eq!(ParamGroup::of("trunc.rel_pos"), ParamGroup::Truncation);
        assert_eq!(ParamGroup::of("rffn.hidden.b"), ParamGroup::CrossRanking);
        assert_eq!(ParamGroup::of("dec.latent.w"), ParamGroup::Shared);
        assert_eq!(ParamGroup::of("enc.0.attn.q.w"), ParamGroup::Shared);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&small()).unwrap();
        let b = ModelParams::init(&small()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(&small()).unwrap();
        let mut ckpt = p.to_checkpoint();
        ckpt.meta.insert("epoch".into(), "3".into());
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(ModelParams::from_checkpoint(&back, None).unwrap(), p);
    }

    #[test]
    fn wrong_feature_dim_names_the_tensor() {
        let p = ModelParams::init(&small()).unwrap();
        let expected = ModelConfig {
            feature_dim: 5,
            ..small()
        };
        let err = ModelParams::from_checkpoint(&p.to_checkpoint(), Some(&expected)).unwrap_err();
        match err {
            Error::ShapeMismatch { name, expected, found } => {
                assert_eq!(name, "transfer.w");
                assert_eq!(expected, vec![6, 8]);
                assert_eq!(found, vec![4, 8]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let err = Checkpoint::read_from("other-1\n{}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("genrt-ckpt-1"));
    }
}
