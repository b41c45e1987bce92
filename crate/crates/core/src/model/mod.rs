//! Hookable decoder-only transformer.
//!
//! Pre-norm, attention-only blocks with RMSNorm and rotary queries/keys, no
//! biases. Each head's output is its attention-weighted values pushed through
//! that head's rows of the output projection, so the heads of a layer sum to
//! the block's residual update exactly. Both activation sites
//! ([`SiteKind::ResidualPost`] and [`SiteKind::HeadOutput`]) can be captured
//! and overwritten during a forward pass.

mod checkpoint;
mod oracle;
mod sites;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use oracle::{build_oracle_model, GroundTruth, OracleLayout};
pub use sites::{ActivationTrace, Intervention, Position, SiteId, SiteKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Graph, Tensor, TokenId, Var};

/// Rotary frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_head: 16,
            vocab_size: 512,
            max_seq_len: 256,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(LabError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(LabError::InvalidConfig(
                "d_head must be even for rotary embeddings".into(),
            ));
        }
        if !(self.rms_eps >= 0.0 && self.rms_eps.is_finite()) {
            return Err(LabError::InvalidConfig("rms_eps must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[d_model, d_model]`; rows `h*d_head..(h+1)*d_head` belong to head `h`.
    pub w_o: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

/// Parameters bound as leaves on a [`Graph`].
pub(crate) struct ParamVars {
    embed: Var,
    layers: Vec<[Var; 5]>,
    final_norm: Var,
    unembed: Var,
}

impl ParamVars {
    /// Leaves in [`TransformerModel::named_params`] order.
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

impl TransformerModel {
    /// Scaled-normal initialization; output projections get an extra
    /// `1/sqrt(2·n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::ones(&[d]),
                w_q: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_k: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_v: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                w_o: Tensor::randn(&[d, d], out_std, &mut rng),
            })
            .collect();
        let unembed = Tensor::randn(&[d, config.vocab_size], INIT_STD, &mut rng);
        Ok(TransformerModel {
            config: config.clone(),
            embed,
            layers,
            final_norm: Tensor::ones(&[d]),
            unembed,
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        unembed: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let model = TransformerModel {
            config,
            embed,
            layers,
            final_norm,
            unembed,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        if self.layers.len() != c.n_layers {
            return Err(LabError::InvalidConfig(format!(
                "{} layer weight sets for {} layers",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (name, t) in self.named_params() {
            let want: Vec<usize> = match name.rsplit('.').next().unwrap_or("") {
                "embed" => vec![c.vocab_size, d],
                "unembed" => vec![d, c.vocab_size],
                "final_norm" | "attn_norm" => vec![d],
                _ => vec![d, d],
            };
            if t.shape() != want.as_slice() {
                return Err(LabError::shape("model parameter", t.shape(), &want));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.w_q"), &l.w_q));
            out.push((format!("layers.{i}.w_k"), &l.w_k));
            out.push((format!("layers.{i}.w_v"), &l.w_v));
            out.push((format!("layers.{i}.w_o"), &l.w_o));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), requires_grad);
        ParamVars {
            embed: leaf(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        leaf(&l.attn_norm),
                        leaf(&l.w_q),
                        leaf(&l.w_k),
                        leaf(&l.w_v),
                        leaf(&l.w_o),
                    ]
                })
                .collect(),
            final_norm: leaf(&self.final_norm),
            unembed: leaf(&self.unembed),
        }
    }

    /// Logits `[seq, vocab]` and the full activation trace.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<(Tensor, ActivationTrace)> {
        self.forward_with_interventions(tokens, &[])
    }

    /// Logits only; skips trace capture.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.logits_with_interventions(tokens, &[])
    }

    /// Logits of a patched forward pass, without the trace.
    pub fn logits_with_interventions(&self, tokens: &[TokenId], interventions: &[Intervention]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let (logits, _) = self.run(&mut g, &pv, &[tokens], interventions, false)?;
        Ok(g.value(logits).clone())
    }

    /// Forward pass where each listed site is overwritten by its replacement
    /// before anything downstream reads it.
    pub fn forward_with_interventions(
        &self,
        tokens: &[TokenId],
        interventions: &[Intervention],
    ) -> Result<(Tensor, ActivationTrace)> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let (logits, trace) = self.run(&mut g, &pv, &[tokens], interventions, true)?;
        let trace = trace.expect("trace requested");
        Ok((g.value(logits).clone(), trace))
    }

    /// Mean next-token loss over `windows` (see [`Self::loss_and_grads`]).
    pub fn loss(&self, windows: &[Vec<TokenId>]) -> Result<f64> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let loss = self.window_loss(&mut g, &pv, windows)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    }

    /// Loss and its gradient for every parameter, in
    /// [`Self::named_params`] order.
    pub fn loss_and_grads(&self, windows: &[Vec<TokenId>]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, true);
        let loss = self.window_loss(&mut g, &pv, windows)?;
        g.backward(loss)?;
        let grads = pv
            .all()
            .into_iter()
            .map(|v| g.grad(v).expect("parameter leaves carry gradients"))
            .collect();
        Ok((g.value(loss).item().expect("scalar loss"), grads))
    }

    /// Mean next-token cross-entropy over a batch of equal-length windows;
    /// each window supplies `len-1` inputs and their shifted targets.
    pub(crate) fn window_loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        windows: &[Vec<TokenId>],
    ) -> Result<Var> {
        let inputs: Vec<&[TokenId]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
        let targets: Vec<TokenId> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let (logits, _) = self.run(g, pv, &inputs, &[], false)?;
        g.cross_entropy(logits, &targets)
    }

    /// Core forward on a graph. All sequences share one length; interventions
    /// require a batch of one.
    pub(crate) fn run(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        batch: &[&[TokenId]],
        interventions: &[Intervention],
        capture: bool,
    ) -> Result<(Var, Option<ActivationTrace>)> {
        let c = &self.config;
        let b = batch.len();
        let t = batch.first().map_or(0, |s| s.len());
        if b == 0 || t == 0 {
            return Err(LabError::InvalidArgument("empty batch".into()));
        }
        if batch.iter().any(|s| s.len() != t) {
            return Err(LabError::InvalidArgument("ragged batch".into()));
        }
        if t > c.max_seq_len {
            return Err(LabError::SequenceTooLong {
                len: t,
                max: c.max_seq_len,
            });
        }
        if !interventions.is_empty() && b != 1 {
            return Err(LabError::InvalidArgument(
                "interventions need a batch of one".into(),
            ));
        }
        for iv in interventions {
            iv.validate(c, t)?;
        }
        let (h, dh, d) = (c.n_heads, c.d_head, c.d_model);
        let ids: Vec<TokenId> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let mut x = g.embedding(pv.embed, &ids)?;

        let score_scale = 1.0 / (dh as f64).sqrt();

        let mut trace = capture.then(|| ActivationTrace::empty(c.n_layers));
        for (layer, [norm, wq, wk, wv, wo]) in pv.layers.iter().copied().enumerate() {
            let xn = g.rms_norm(x, norm, c.rms_eps)?;
            let split = |g: &mut Graph, w: Var| -> Result<Var> {
                let p = g.matmul(xn, w)?;
                let p = g.reshape(p, &[b, t, h, dh])?;
                g.transpose(p, 1, 2)
            };
            let q = split(g, wq)?;
            let q = g.rope(q, ROPE_BASE)?;
            // scaling q is equivalent to scaling the scores and touches T/dh fewer values
            let q = g.scale(q, score_scale);
            let k = split(g, wk)?;
            let k = g.rope(k, ROPE_BASE)?;
            let v = split(g, wv)?;

            let scores = g.matmul_t(q, k)?;
            let attn = g.softmax_causal(scores)?;
            let z = g.matmul(attn, v)?;

            let z = g.transpose(z, 0, 1)?;
            let z = g.reshape(z, &[h, b * t, dh])?;
            let wo_heads = g.reshape(wo, &[h, dh, d])?;
            let mut heads = g.matmul(z, wo_heads)?;

            for iv in interventions.iter().filter(|iv| {
                iv.site.kind == SiteKind::HeadOutput && iv.site.layer == layer
            }) {
                let flat = g.reshape(heads, &[h * t, d])?;
                let head = iv.site.head.expect("validated");
                let patched = splice_rows(g, flat, head * t, iv)?;
                heads = g.reshape(patched, &[h, t, d])?;
            }

            let update = g.sum_axis(heads, 0)?;
            x = g.add(x, update)?;

            for iv in interventions.iter().filter(|iv| {
                iv.site.kind == SiteKind::ResidualPost && iv.site.layer == layer
            }) {
                x = splice_rows(g, x, 0, iv)?;
            }

            if let Some(tr) = trace.as_mut() {
                tr.residual_post[layer] = g.value(x).clone().reshape(&[b * t, d])?;
                let hv = g.value(heads).data();
                tr.head_output[layer] = (0..h)
                    .map(|hi| {
                        Tensor::new(vec![b * t, d], hv[hi * b * t * d..(hi + 1) * b * t * d].to_vec())
                    })
                    .collect::<Result<_>>()?;
            }
        }
        let xn = g.rms_norm(x, pv.final_norm, c.rms_eps)?;
        let logits = g.matmul(xn, pv.unembed)?;
        Ok((logits, trace))
    }
}

/// Replaces rows of a `[rows, d]` var starting at `base + position` with the
/// intervention's value, composed from slice and concat.
fn splice_rows(g: &mut Graph, x: Var, base: usize, iv: &Intervention) -> Result<Var> {
    let rows = g.shape(x)[0];
    let d = g.shape(x)[1];
    let (start, n) = match iv.site.position {
        Position::At(p) => (base + p, 1),
        Position::All => (base, iv.replacement.numel() / d),
    };
    let rep = g.constant(iv.replacement.clone().reshape(&[n, d])?);
    let mut parts = Vec::with_capacity(3);
    if start > 0 {
        parts.push(g.slice(x, 0, 0, start)?);
    }
    parts.push(rep);
    if start + n < rows {
        parts.push(g.slice(x, 0, start + n, rows)?);
    }
    g.concat(&parts, 0)
}
