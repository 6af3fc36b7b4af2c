//! Decoder-only tiny transformer language models.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::Token;

pub use checkpoint::{CheckpointHeader, FORMAT_VERSION, MAGIC};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl LMConfig {
    /// Four layers, width 128.
    pub fn target_default(vocab_size: usize) -> Self {
        LMConfig {
            vocab_size,
            context_len: 128,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            tie_embeddings: true,
        }
    }

    /// One layer, width 32.
    pub fn draft_default(vocab_size: usize) -> Self {
        LMConfig {
            vocab_size,
            context_len: 128,
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut violated = Vec::new();
        if self.vocab_size < 2 {
            violated.push(format!("vocab_size >= 2 (got {})", self.vocab_size));
        }
        if self.context_len < 2 {
            violated.push(format!("context_len >= 2 (got {})", self.context_len));
        }
        if self.n_layers == 0 {
            violated.push("n_layers >= 1".to_string());
        }
        if self.d_model == 0 || self.d_ff == 0 {
            violated.push("d_model and d_ff must be positive".to_string());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            violated.push(format!(
                "d_model ({}) divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if violated.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "model config violates: {}",
                violated.join("; ")
            )))
        }
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            specs.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc"), vec![d, f]),
                (p("mlp.bfc"), vec![f]),
                (p("mlp.proj"), vec![f, d]),
                (p("mlp.bproj"), vec![d]),
            ]);
        }
        specs.push(("ln_f.g".to_string(), vec![d]));
        specs.push(("ln_f.b".to_string(), vec![d]));
        if !self.tie_embeddings {
            specs.push(("head.w".to_string(), vec![d, v]));
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Reference,
    Draft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM<T = f32> {
    config: LMConfig,
    params: Vec<Tensor<T>>,
    pub role: Role,
    pub seed: u64,
    /// Optimizer steps applied since initialization.
    pub step: u64,
}

/// Graph handles produced by [`TinyLM::forward_graph`].
pub struct ForwardVars {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// (is layer-norm gain, is bias) for a parameter name.
fn weight_kind(name: &str) -> (bool, bool) {
    match name.rsplit_once('.') {
        Some((_, "g")) => (true, false),
        Some((_, leaf)) => (false, leaf.starts_with('b')),
        None => (false, false),
    }
}

impl<T: Real> TinyLM<T> {
    pub fn init(config: LMConfig, seed: u64, role: Role) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let (is_gain, is_bias) = weight_kind(&name);
                if is_gain {
                    Tensor::full(shape, T::one())
                } else if is_bias {
                    Tensor::zeros(shape)
                } else {
                    let scale = if name.ends_with("attn.wo") || name.ends_with("mlp.proj") {
                        resid_scale
                    } else {
                        1.0
                    };
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::of(normal.sample(&mut rng) * scale))
                        .collect();
                    Tensor::new(shape, data).expect("spec shape")
                }
            })
            .collect();
        Ok(TinyLM {
            config,
            params,
            role,
            seed,
            step: 0,
        })
    }

    /// Assembles a model from explicit parameters in declaration order.
    pub fn from_params(config: LMConfig, params: Vec<Tensor<T>>, role: Role) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::precondition(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::CheckpointConfig(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(TinyLM {
            config,
            params,
            role,
            seed: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let i = self
            .config
            .param_specs()
            .iter()
            .position(|(n, _)| n == name)?;
        Some(&self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self
            .config
            .param_specs()
            .iter()
            .position(|(n, _)| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn cast<U: Real>(&self) -> TinyLM<U> {
        TinyLM {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            role: self.role,
            seed: self.seed,
            step: self.step,
        }
    }

    fn check_tokens(&self, tokens: &[Token], seq: usize) -> Result<()> {
        if seq > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: seq,
                context: self.config.context_len,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass of `batch` sequences of length `seq`
    /// (flattened row-major in `tokens`) on `g`.
    ///
    /// When `rows` is given, only those flattened positions are projected
    /// to the vocabulary. Parameters enter the graph as trainable leaves
    /// when `trainable` is set and as constants otherwise.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        tokens: &[Token],
        batch: usize,
        seq: usize,
        rows: Option<&[usize]>,
        trainable: bool,
    ) -> Result<ForwardVars> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(Error::Shape {
                op: "forward",
                left: vec![tokens.len()],
                right: vec![batch, seq],
            });
        }
        self.check_tokens(tokens, seq)?;
        let cfg = &self.config;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();

        let tok = g.embedding(params[0], &ids)?;
        let pos = g.embedding(params[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..cfg.n_layers {
            let p = &params[2 + 16 * l..2 + 16 * (l + 1)];
            let h = g.layer_norm(x, p[0], p[1], LN_EPS)?;
            let q = g.matmul(h, p[2])?;
            let q = g.add_bias(q, p[3])?;
            let k = g.matmul(h, p[4])?;
            let k = g.add_bias(k, p[5])?;
            let v = g.matmul(h, p[6])?;
            let v = g.add_bias(v, p[7])?;
            let a = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let o = g.matmul(a, p[8])?;
            let o = g.add_bias(o, p[9])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p[10], p[11], LN_EPS)?;
            let f = g.matmul(h, p[12])?;
            let f = g.add_bias(f, p[13])?;
            let f = g.gelu(f);
            let o = g.matmul(f, p[14])?;
            let o = g.add_bias(o, p[15])?;
            x = g.add(x, o)?;
        }
        let base = 2 + 16 * cfg.n_layers;
        let mut h = g.layer_norm(x, params[base], params[base + 1], LN_EPS)?;
        if let Some(rows) = rows {
            h = g.select_rows(h, rows)?;
        }
        let logits = if cfg.tie_embeddings {
            g.matmul_nt(h, params[0])?
        } else {
            g.matmul(h, params[base + 2])?
        };
        Ok(ForwardVars { logits, params })
    }

    /// Logits for every position of a single sequence, shaped `[len, vocab]`.
    pub fn forward(&self, tokens: &[Token]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, tokens, 1, tokens.len(), None, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits at the listed positions of a single sequence.
    pub fn forward_at(&self, tokens: &[Token], positions: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, tokens, 1, tokens.len(), Some(positions), false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits at the final position only.
    pub fn last_logits(&self, tokens: &[Token]) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Err(Error::precondition("empty context"));
        }
        Ok(self.forward_at(tokens, &[tokens.len() - 1])?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LMConfig {
        LMConfig {
            vocab_size: 11,
            context_len: 8,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            tie_embeddings: true,
        }
    }

    #[test]
    fn invalid_config_lists_violations() {
        let mut c = small();
        c.n_heads = 3;
        c.vocab_size = 1;
        let msg = TinyLM::<f32>::init(c, 0, Role::Draft)
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("vocab_size") && msg.contains("divisible"),
            "{msg}"
        );
    }

    #[test]
    fn default_configs_have_wide_capacity_gap() {
        let t = LMConfig::target_default(64).param_count();
        let d = LMConfig::draft_default(64).param_count();
        assert!(t >= 20 * d, "{t} vs {d}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TinyLM::<f32>::init(small(), 5, Role::Draft).unwrap();
        let b = TinyLM::<f32>::init(small(), 5, Role::Draft).unwrap();
        let c = TinyLM::<f32>::init(small(), 6, Role::Draft).unwrap();
        assert_eq!(a, b);
        let diff = a
            .params()
            .iter()
            .zip(c.params())
            .map(|(x, y)| x.max_abs_diff(y))
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn forward_shape_and_overflow() {
        let m = TinyLM::<f32>::init(small(), 1, Role::Target).unwrap();
        let out = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(out.shape(), &[3, 11]);
        assert!(matches!(
            m.forward(&[0; 9]),
            Err(Error::ContextOverflow { len: 9, context: 8 })
        ));
        assert!(matches!(
            m.forward(&[0, 11]),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
    }

    #[test]
    fn last_logits_match_full_forward_bitwise() {
        let m = TinyLM::<f32>::init(small(), 2, Role::Target).unwrap();
        let toks = [3, 1, 4, 1, 5];
        let full = m.forward(&toks).unwrap();
        assert_eq!(m.last_logits(&toks).unwrap().as_slice(), full.row(4));
    }
}
