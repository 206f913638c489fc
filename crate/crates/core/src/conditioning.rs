//! Age/location embeddings, the conditioned self-attention bottleneck block
//! and feature-wise modulation.
//!
//! The age index and the crop's relative center are mapped to `hid_dim`
//! vectors by two separate MLPs. The bottleneck block projects encoder
//! features to `hid_dim` tokens with a 1x1 convolution, prepends the age and
//! location vectors as two extra tokens, runs multi-head self-attention over
//! all tokens, drops the condition tokens again and projects back to the
//! input channel count with a second 1x1 convolution.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, Forward, Init, LayerNorm, Linear, Mlp2, ParamStore};
use crate::sampling::RelCenter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConSAConfig {
    pub hid_dim: usize,
    pub heads: usize,
    pub in_channels: usize,
    pub dropout: f64,
    /// LayerNorm on the token sequence before attention.
    pub prenorm: bool,
    /// Adds the block input to its output.
    pub residual: bool,
    /// Prepend the location vector as a second condition token.
    pub use_location: bool,
}

impl ConSAConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            hid_dim: 64,
            heads: 4,
            in_channels,
            dropout: 0.1,
            prenorm: true,
            residual: false,
            use_location: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hid_dim == 0 || self.heads == 0 || self.hid_dim % self.heads != 0 {
            return Err(Error::BadSpec(format!(
                "hid_dim {} must be a positive multiple of heads {}",
                self.hid_dim, self.heads
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::BadSpec("ConSA needs at least one input channel".into()));
        }
        Ok(())
    }

    pub fn condition_tokens(&self) -> usize {
        if self.use_location {
            2
        } else {
            1
        }
    }
}

/// Batched age and location vectors, each `(B, hid_dim)`. The location
/// vector is absent for age-only conditioning.
#[derive(Debug, Clone)]
pub struct ConditionContext {
    pub age_vec: Tensor,
    pub loc_vec: Option<Tensor>,
}

impl ConditionContext {
    fn location(&self) -> Result<&Tensor> {
        self.loc_vec
            .as_ref()
            .ok_or_else(|| Error::Shape("location vector required but not computed".into()))
    }
}

/// `MLP_ag` (learned lookup row followed by an MLP) and `MLP_sp`.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    num_ages: usize,
    hid_dim: usize,
    age_table: Tensor,
    age_mlp: Mlp2,
    loc_mlp: Option<Mlp2>,
}

impl ConditionEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, num_ages: usize, hid_dim: usize, with_location: bool) -> Result<Self> {
        Ok(Self {
            num_ages,
            hid_dim,
            age_table: store.add(&format!("{name}.age_table"), &[num_ages, hid_dim], Init::Uniform(1.0))?,
            age_mlp: Mlp2::new(store, &format!("{name}.age_mlp"), hid_dim, hid_dim, hid_dim)?,
            loc_mlp: if with_location {
                Some(Mlp2::new(store, &format!("{name}.loc_mlp"), 3, hid_dim, hid_dim)?)
            } else {
                None
            },
        })
    }

    pub fn num_ages(&self) -> usize {
        self.num_ages
    }

    pub fn hid_dim(&self) -> usize {
        self.hid_dim
    }

    pub fn check_ages(&self, ages: &[usize]) -> Result<()> {
        match ages.iter().find(|&&a| a >= self.num_ages) {
            Some(&age) => Err(Error::UnknownAge {
                age,
                num_ages: self.num_ages,
            }),
            None => Ok(()),
        }
    }

    /// `(B, hid_dim)` age vectors.
    pub fn embed_age(&self, ages: &[usize]) -> Result<Tensor> {
        self.check_ages(ages)?;
        let dtype = self.age_table.dtype();
        let mut onehot = vec![0.0f64; ages.len() * self.num_ages];
        for (i, &a) in ages.iter().enumerate() {
            onehot[i * self.num_ages + a] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (ages.len(), self.num_ages), self.age_table.device())?.to_dtype(dtype)?;
        self.age_mlp.forward(&onehot.matmul(&self.age_table)?)
    }

    /// `(B, hid_dim)` location vectors from a `(B, 3)` tensor of relative centers.
    pub fn embed_location(&self, centers: &Tensor) -> Result<Tensor> {
        let (_, three) = centers.dims2()?;
        if three != 3 {
            return Err(Error::Shape(format!("location input has {three} columns, expected 3")));
        }
        let mlp = self
            .loc_mlp
            .as_ref()
            .ok_or_else(|| Error::Shape("embedder was built without a location branch".into()))?;
        mlp.forward(centers)
    }

    pub fn context(&self, ages: &[usize], centers: &[RelCenter]) -> Result<ConditionContext> {
        if ages.len() != centers.len() {
            return Err(Error::Shape(format!("{} ages for {} centers", ages.len(), centers.len())));
        }
        let loc_vec = match self.loc_mlp {
            Some(_) => {
                let centers = centers_tensor(centers, self.age_table.dtype(), self.age_table.device())?;
                Some(self.embed_location(&centers)?)
            }
            None => None,
        };
        Ok(ConditionContext {
            age_vec: self.embed_age(ages)?,
            loc_vec,
        })
    }
}

/// `(B, 3)` tensor of `(x*, y*, z*)`; every coordinate must lie in `[0, 1]`.
pub fn centers_tensor(centers: &[RelCenter], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(centers.len() * 3);
    for c in centers {
        c.check_range()?;
        data.extend_from_slice(&c.to_array());
    }
    Ok(Tensor::from_vec(data, (centers.len(), 3), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: usize,
    pub qkv: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn project(&self, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = tokens.dims3()?.2;
        let qkv = self.qkv.forward(tokens)?;
        let q = self.split_heads(&qkv.narrow(2, 0, d)?)?;
        let k = self.split_heads(&qkv.narrow(2, d, d)?)?;
        let v = self.split_heads(&qkv.narrow(2, 2 * d, d)?)?;
        Ok((q, k, v))
    }

    fn probabilities(&self, q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let dh = q.dims4()?.3;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        softmax_last(&scores)
    }

    /// `(B, heads, T, T)` attention weights.
    pub fn weights(&self, tokens: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (q, k, _) = self.project(tokens)?;
        self.probabilities(&q, &k, mask)
    }

    /// Scaled dot-product attention over `(B, T, dim)` tokens. `mask` is an
    /// additive `(T, T)` bias on the attention logits.
    pub fn forward(&self, tokens: &Tensor, mask: Option<&Tensor>, fwd: &mut Forward, dropout: f64) -> Result<Tensor> {
        let (b, t, d) = tokens.dims3()?;
        let (q, k, v) = self.project(tokens)?;
        let probs = fwd.dropout(&self.probabilities(&q, &k, mask)?, dropout)?;
        let mixed = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.out.forward(&mixed)
    }
}

/// Conditioned self-attention block placed at the encoder bottleneck.
#[derive(Debug, Clone)]
pub struct ConSA {
    cfg: ConSAConfig,
    pub conv_in: Conv2d,
    pub norm: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub conv_out: Conv2d,
}

impl ConSA {
    pub fn new(store: &mut ParamStore, name: &str, cfg: ConSAConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            conv_in: Conv2d::new(store, &format!("{name}.conv_in"), cfg.in_channels, cfg.hid_dim, 1)?,
            norm: if cfg.prenorm {
                Some(LayerNorm::new(store, &format!("{name}.norm"), cfg.hid_dim)?)
            } else {
                None
            },
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.hid_dim, cfg.heads)?,
            conv_out: Conv2d::new(store, &format!("{name}.conv_out"), cfg.hid_dim, cfg.in_channels, 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &ConSAConfig {
        &self.cfg
    }

    // (B, T, hid) token sequence: condition tokens first, then h*w patch tokens.
    fn tokens(&self, features: &Tensor, ctx: &ConditionContext) -> Result<Tensor> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "ConSA expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let hid = self.cfg.hid_dim;
        let mut vecs = vec![&ctx.age_vec];
        if self.cfg.use_location {
            vecs.push(ctx.location()?);
        }
        for v in vecs {
            if v.dims() != [b, hid] {
                return Err(Error::Shape(format!(
                    "condition vector {:?} does not match batch {b} x hid_dim {hid}",
                    v.dims()
                )));
            }
        }
        let patches = self
            .conv_in
            .forward(features)?
            .reshape((b, hid, h * w))?
            .transpose(1, 2)?;
        let age = ctx.age_vec.unsqueeze(1)?;
        let mut parts = vec![age];
        if self.cfg.use_location {
            parts.push(ctx.location()?.unsqueeze(1)?);
        }
        parts.push(patches);
        let tokens = Tensor::cat(&parts, 1)?;
        Ok(match &self.norm {
            Some(n) => n.forward(&tokens)?,
            None => tokens,
        })
    }

    pub fn forward(&self, features: &Tensor, ctx: &ConditionContext, fwd: &mut Forward) -> Result<Tensor> {
        self.forward_masked(features, ctx, fwd, None)
    }

    /// As [`ConSA::forward`] with an additive `(T, T)` attention mask over the
    /// full token sequence (condition tokens included).
    pub fn forward_masked(
        &self,
        features: &Tensor,
        ctx: &ConditionContext,
        fwd: &mut Forward,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, _c, h, w) = features.dims4()?;
        let tokens = self.tokens(features, ctx)?;
        let mixed = self.attn.forward(&tokens, mask, fwd, self.cfg.dropout)?;
        let patches = mixed
            .narrow(1, self.cfg.condition_tokens(), h * w)?
            .transpose(1, 2)?
            .reshape((b, self.cfg.hid_dim, h, w))?;
        let out = self.conv_out.forward(&patches)?;
        if self.cfg.residual {
            Ok((out + features)?)
        } else {
            Ok(out)
        }
    }

    /// Attention weights over the full token sequence, `(B, heads, T, T)`.
    pub fn attention_weights(&self, features: &Tensor, ctx: &ConditionContext) -> Result<Tensor> {
        self.attn.weights(&self.tokens(features, ctx)?, None)
    }
}

/// Per-sample, per-channel modulation `(B, C)` pairs.
#[derive(Debug, Clone)]
pub struct FiLMParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `MLP_F` producing `(gamma, beta)` for one decoder stage from
/// `concat[age_vec, loc_vec]`.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    channels: usize,
    pub hidden: Linear,
    pub head: Linear,
}

impl FilmGenerator {
    /// The head bias starts at `gamma = 1, beta = 0`.
    pub fn new(store: &mut ParamStore, name: &str, hid_dim: usize, channels: usize) -> Result<Self> {
        let hidden = Linear::new(store, &format!("{name}.0"), 2 * hid_dim, hid_dim)?;
        let mut head = Linear::new(store, &format!("{name}.1"), hid_dim, 2 * channels)?;
        let bias: Vec<f64> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
        head.bias = store.insert(
            &format!("{name}.1.bias"),
            &Tensor::from_vec(bias, 2 * channels, store.device())?,
        )?;
        Ok(Self {
            channels,
            hidden,
            head,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self, ctx: &ConditionContext) -> Result<FiLMParams> {
        let joint = Tensor::cat(&[&ctx.age_vec, ctx.location()?], 1)?;
        let out = self.head.forward(&self.hidden.forward(&joint)?.silu()?)?;
        Ok(FiLMParams {
            gamma: out.narrow(1, 0, self.channels)?,
            beta: out.narrow(1, self.channels, self.channels)?,
        })
    }
}

/// `out[b, c] = gamma[b, c] * features[b, c] + beta[b, c]`.
pub fn film_apply(features: &Tensor, p: &FiLMParams) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4()?;
    if p.gamma.dims() != [b, c] || p.beta.dims() != [b, c] {
        return Err(Error::Shape(format!(
            "FiLM parameters {:?}/{:?} do not match features {:?}",
            p.gamma.dims(),
            p.beta.dims(),
            features.dims()
        )));
    }
    let gamma = p.gamma.reshape((b, c, 1, 1))?;
    let beta = p.beta.reshape((b, c, 1, 1))?;
    Ok(features.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}
