//! Toy backbone: interleaved sequence-modeling blocks and MLP blocks over a
//! named parameter store. The sequence block is segment-local attention plus,
//! for the recurrent variants, a gated bidirectional scan layer inserted the
//! same way for TTT and for the baseline RNNs.

use rand::Rng;

use crate::baselines::{
    build_sliding_window_mask, gated_delta_scan, linear_attn_scan, reverse_wrapped,
    softmax_attention, AttentionMask, AttnHeadVars, AttnVars, RnnHeadVars, RnnVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::ttt::{
    gated_residual, scan_minibatch, HeadVars, HiddenState, TttConfig, TttVariant, TttVars, LN_EPS,
};

// ----- parameter store ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Gate,
}

impl ParamKind {
    /// Biases and normalization parameters are exempt from weight decay.
    pub fn decay_exempt(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::Norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: &'static str,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named parameter tensors with group labels for stage schedules.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: &'static str, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), group, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn group_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for p in &self.params {
            if !names.contains(&p.group) {
                names.push(p.group);
            }
        }
        names
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect() }
    }
}

/// Graph-bound view of a [`ParamSet`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

// ----- variants -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    TttMlp,
    TttLinear,
    MambaLike,
    Delta,
    LocalAttn,
    Swa,
    FullAttn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TttMlp => "ttt-mlp",
            Variant::TttLinear => "ttt-linear",
            Variant::MambaLike => "mamba-like",
            Variant::Delta => "delta",
            Variant::LocalAttn => "local-attn",
            Variant::Swa => "swa",
            Variant::FullAttn => "full-attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }

    pub fn all() -> [Variant; 7] {
        [
            Variant::TttMlp,
            Variant::TttLinear,
            Variant::MambaLike,
            Variant::Delta,
            Variant::LocalAttn,
            Variant::Swa,
            Variant::FullAttn,
        ]
    }

    pub fn is_ttt(self) -> bool {
        matches!(self, Variant::TttMlp | Variant::TttLinear)
    }

    pub fn is_rnn_baseline(self) -> bool {
        matches!(self, Variant::MambaLike | Variant::Delta)
    }

    pub fn default_eta(self) -> f64 {
        match self {
            Variant::TttMlp => 0.1,
            Variant::TttLinear => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    /// Inner-loop mini-batch for the TTT variants.
    pub b: usize,
    pub eta: f64,
    pub n_layers: usize,
    /// Sliding-window width for the swa variant.
    pub window: usize,
    /// Start attention near an identity operator (self-dominant scores,
    /// identity value/output paths). This is the desk-scale stand-in for
    /// inserting the new layers into a pre-trained backbone: the scan layers
    /// see informative tokens from the first step instead of the near-zero
    /// output of randomly initialized attention.
    pub pretrained_init: bool,
    /// Init std for the inserted sequence-layer projections.
    pub seq_init_std: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, d: usize, k: usize) -> Self {
        ModelConfig {
            variant,
            d,
            k,
            heads: 1,
            hidden_mult: 4,
            b: 64,
            eta: variant.default_eta(),
            n_layers: 2,
            window: 8,
            pretrained_init: true,
            seq_init_std: 0.1,
        }
    }

    pub fn ttt_config(&self) -> TttConfig {
        let variant = if self.variant == Variant::TttLinear {
            TttVariant::Linear
        } else {
            TttVariant::Mlp
        };
        let mut c = TttConfig::new(self.d, self.k, variant);
        c.hidden_mult = self.hidden_mult;
        c.b = self.b;
        c.eta = self.eta;
        c.heads = self.heads;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be >= 1"));
        }
        if self.heads == 0 || self.k % self.heads != 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "k={} and d={} must both divide by heads={}",
                self.k, self.d, self.heads
            )));
        }
        if self.variant.is_ttt() {
            self.ttt_config().validate()?;
        }
        Ok(())
    }
}

// ----- layer wiring -------------------------------------------------------------

struct TttHeadIds {
    theta_k: ParamId,
    theta_v: ParamId,
    theta_q: ParamId,
    theta_o: ParamId,
    w0: Vec<ParamId>,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

struct RnnHeadIds {
    wk: ParamId,
    wv: ParamId,
    wq: ParamId,
    wo: ParamId,
    decay_w: ParamId,
    decay_b: ParamId,
    /// Present only for the delta variant.
    write: Option<(ParamId, ParamId)>,
}

enum SeqLayerIds {
    Ttt { heads: Vec<TttHeadIds>, alpha: ParamId, beta: ParamId },
    Rnn { heads: Vec<RnnHeadIds>, alpha: ParamId, beta: ParamId, delta: bool },
    AttentionOnly,
}

struct LayerIds {
    block_ln: (ParamId, ParamId),
    attn_heads: Vec<(ParamId, ParamId, ParamId, ParamId)>, // q, k, v, o
    seq: SeqLayerIds,
    mlp_ln: (ParamId, ParamId),
    mlp: (ParamId, ParamId, ParamId, ParamId), // w1, b1, w2, b2
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    layers: Vec<LayerIds>,
}

const STD: f64 = 0.02;

/// Rows [row0, row0+rows) of the d x d identity, plus a little noise so heads
/// are not exactly symmetric.
fn identity_slice(rows: usize, d: usize, row0: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::randn(&[rows, d], 0.01, rng);
    for r in 0..rows {
        t.data_mut()[r * d + row0 + r] += 1.0;
    }
    t
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let d = cfg.d;
        let kh = cfg.k / cfg.heads;
        // attention runs at model width; per-head slices of the identity
        let akh = d / cfg.heads;
        let gamma = 2.0 * (akh as f64).powf(0.25);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let pre = format!("layer{l}");
            let block_ln = (
                ps.add(format!("{pre}.block_ln.gain"), "pretrained", ParamKind::Norm, Tensor::ones(&[d])),
                ps.add(format!("{pre}.block_ln.bias"), "pretrained", ParamKind::Norm, Tensor::zeros(&[d])),
            );
            let attn_heads = (0..cfg.heads)
                .map(|h| {
                    let (wq, wk, wv, wo) = if cfg.pretrained_init {
                        let slice = identity_slice(akh, d, h * akh, rng);
                        (
                            slice.scale(gamma).unwrap(),
                            slice.scale(gamma).unwrap(),
                            slice.clone(),
                            slice.transpose().unwrap(),
                        )
                    } else {
                        (
                            Tensor::randn(&[akh, d], STD, rng),
                            Tensor::randn(&[akh, d], STD, rng),
                            Tensor::randn(&[akh, d], STD, rng),
                            Tensor::randn(&[d, akh], STD, rng),
                        )
                    };
                    (
                        ps.add(format!("{pre}.attn.q{h}"), "attn", ParamKind::Weight, wq),
                        ps.add(format!("{pre}.attn.k{h}"), "attn", ParamKind::Weight, wk),
                        ps.add(format!("{pre}.attn.v{h}"), "attn", ParamKind::Weight, wv),
                        ps.add(format!("{pre}.attn.o{h}"), "attn", ParamKind::Weight, wo),
                    )
                })
                .collect();
            let seq = match cfg.variant {
                Variant::TttMlp | Variant::TttLinear => {
                    let tcfg = cfg.ttt_config();
                    let sstd = cfg.seq_init_std;
                    let heads = (0..cfg.heads)
                        .map(|h| TttHeadIds {
                            theta_k: ps.add(format!("{pre}.ttt.theta_k{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            theta_v: ps.add(format!("{pre}.ttt.theta_v{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            theta_q: ps.add(format!("{pre}.ttt.theta_q{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            theta_o: ps.add(format!("{pre}.ttt.theta_o{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[d, kh], sstd, rng)),
                            w0: HiddenState::randn(&tcfg, sstd, rng)
                                .parts()
                                .into_iter()
                                .enumerate()
                                .map(|(i, t)| ps.add(format!("{pre}.ttt.w0_{h}_{i}"), "ttt", ParamKind::Weight, t))
                                .collect(),
                            ln_gain: ps.add(format!("{pre}.ttt.ln_gain{h}"), "ttt", ParamKind::Norm, Tensor::ones(&[kh])),
                            ln_bias: ps.add(format!("{pre}.ttt.ln_bias{h}"), "ttt", ParamKind::Norm, Tensor::zeros(&[kh])),
                        })
                        .collect();
                    SeqLayerIds::Ttt {
                        heads,
                        alpha: ps.add(format!("{pre}.gate.alpha"), "gates", ParamKind::Gate, Tensor::full(&[d], crate::ttt::GATE_INIT)),
                        beta: ps.add(format!("{pre}.gate.beta"), "gates", ParamKind::Gate, Tensor::full(&[d], crate::ttt::GATE_INIT)),
                    }
                }
                Variant::MambaLike | Variant::Delta => {
                    let delta = cfg.variant == Variant::Delta;
                    let sstd = cfg.seq_init_std;
                    let heads = (0..cfg.heads)
                        .map(|h| RnnHeadIds {
                            wk: ps.add(format!("{pre}.rnn.k{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            wv: ps.add(format!("{pre}.rnn.v{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            wq: ps.add(format!("{pre}.rnn.q{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[kh, d], sstd, rng)),
                            wo: ps.add(format!("{pre}.rnn.o{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[d, kh], sstd, rng)),
                            decay_w: ps.add(format!("{pre}.rnn.decay_w{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[d, 1], STD, rng)),
                            decay_b: ps.add(format!("{pre}.rnn.decay_b{h}"), "ttt", ParamKind::Bias, Tensor::full(&[1, 1], 2.0)),
                            write: delta.then(|| {
                                (
                                    ps.add(format!("{pre}.rnn.write_w{h}"), "ttt", ParamKind::Weight, Tensor::randn(&[d, 1], STD, rng)),
                                    ps.add(format!("{pre}.rnn.write_b{h}"), "ttt", ParamKind::Bias, Tensor::full(&[1, 1], 1.0)),
                                )
                            }),
                        })
                        .collect();
                    SeqLayerIds::Rnn {
                        heads,
                        alpha: ps.add(format!("{pre}.gate.alpha"), "gates", ParamKind::Gate, Tensor::full(&[d], crate::ttt::GATE_INIT)),
                        beta: ps.add(format!("{pre}.gate.beta"), "gates", ParamKind::Gate, Tensor::full(&[d], crate::ttt::GATE_INIT)),
                        delta,
                    }
                }
                Variant::LocalAttn | Variant::Swa | Variant::FullAttn => SeqLayerIds::AttentionOnly,
            };
            let mlp_ln = (
                ps.add(format!("{pre}.mlp_ln.gain"), "pretrained", ParamKind::Norm, Tensor::ones(&[d])),
                ps.add(format!("{pre}.mlp_ln.bias"), "pretrained", ParamKind::Norm, Tensor::zeros(&[d])),
            );
            let mlp = (
                ps.add(format!("{pre}.mlp.w1"), "pretrained", ParamKind::Weight, Tensor::randn(&[d, 4 * d], STD, rng)),
                ps.add(format!("{pre}.mlp.b1"), "pretrained", ParamKind::Bias, Tensor::zeros(&[4 * d])),
                ps.add(format!("{pre}.mlp.w2"), "pretrained", ParamKind::Weight, Tensor::randn(&[4 * d, d], STD, rng)),
                ps.add(format!("{pre}.mlp.b2"), "pretrained", ParamKind::Bias, Tensor::zeros(&[d])),
            );
            layers.push(LayerIds { block_ln, attn_heads, seq, mlp_ln, mlp });
        }
        Ok(Model { cfg, params: ps, layers })
    }

    /// The attention mask this variant uses inside its sequence blocks, given
    /// the task's segment structure.
    pub fn attention_mask(&self, t: usize, segments: &[std::ops::Range<usize>]) -> Result<AttentionMask> {
        match self.cfg.variant {
            Variant::FullAttn => Ok(AttentionMask::full(t)),
            Variant::Swa => build_sliding_window_mask(t, self.cfg.window),
            _ => AttentionMask::from_segments(t, segments),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let mut stream = x;
        for layer in &self.layers {
            stream = self.forward_layer(g, bound, layer, stream, mask)?;
        }
        Ok(stream)
    }

    fn forward_layer(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        layer: &LayerIds,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let gain = bound.var(layer.block_ln.0);
        let bias = bound.var(layer.block_ln.1);
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let attn_vars = AttnVars {
            heads: layer
                .attn_heads
                .iter()
                .map(|&(q, k, v, o)| AttnHeadVars {
                    wq: bound.var(q),
                    wk: bound.var(k),
                    wv: bound.var(v),
                    wo: bound.var(o),
                })
                .collect(),
            head_dim: self.cfg.d / self.cfg.heads,
        };
        let x_prime = softmax_attention(g, normed, &attn_vars, mask)?;

        let z_prime = match &layer.seq {
            SeqLayerIds::AttentionOnly => x_prime,
            SeqLayerIds::Ttt { heads, alpha, beta } => {
                let tcfg = self.cfg.ttt_config();
                let vars = TttVars {
                    heads: heads
                        .iter()
                        .map(|h| HeadVars {
                            theta_k: bound.var(h.theta_k),
                            theta_v: bound.var(h.theta_v),
                            theta_q: bound.var(h.theta_q),
                            theta_o: bound.var(h.theta_o),
                            w0: match h.w0.len() {
                                1 => HiddenState::Linear(bound.var(h.w0[0])),
                                _ => HiddenState::Mlp { w1: bound.var(h.w0[0]), w2: bound.var(h.w0[1]) },
                            },
                            ln_gain: bound.var(h.ln_gain),
                            ln_bias: bound.var(h.ln_bias),
                        })
                        .collect(),
                    alpha: bound.var(*alpha),
                    beta: bound.var(*beta),
                };
                let fwd = scan_minibatch(g, x_prime, &vars, &tcfg)?;
                let z = gated_residual(g, fwd, x_prime, vars.alpha)?;
                let rev = crate::ttt::bidirectional(g, z, &vars, &tcfg)?;
                gated_residual(g, rev, z, vars.beta)?
            }
            SeqLayerIds::Rnn { heads, alpha, beta, delta } => {
                let vars = RnnVars {
                    heads: heads
                        .iter()
                        .map(|h| RnnHeadVars {
                            wk: bound.var(h.wk),
                            wv: bound.var(h.wv),
                            wq: bound.var(h.wq),
                            wo: bound.var(h.wo),
                            decay_w: bound.var(h.decay_w),
                            decay_b: bound.var(h.decay_b),
                            write_w: h
                                .write
                                .map(|(w, _)| bound.var(w))
                                .unwrap_or_else(|| g.constant(Tensor::zeros(&[self.cfg.d, 1]))),
                            write_b: h
                                .write
                                .map(|(_, b)| bound.var(b))
                                .unwrap_or_else(|| g.constant(Tensor::zeros(&[1, 1]))),
                        })
                        .collect(),
                    head_dim: self.cfg.k / self.cfg.heads,
                };
                let is_delta = *delta;
                let fwd = if is_delta {
                    gated_delta_scan(g, x_prime, &vars)?
                } else {
                    linear_attn_scan(g, x_prime, &vars)?
                };
                let z = gated_residual(g, fwd, x_prime, bound.var(*alpha))?;
                let mut scan = |g: &mut Graph, v: Var| {
                    if is_delta {
                        gated_delta_scan(g, v, &vars)
                    } else {
                        linear_attn_scan(g, v, &vars)
                    }
                };
                let rev = reverse_wrapped(g, z, &mut scan)?;
                gated_residual(g, rev, z, bound.var(*beta))?
            }
        };
        let y = g.add(z_prime, x)?;

        // MLP block with its own residual
        let mgain = bound.var(layer.mlp_ln.0);
        let mbias = bound.var(layer.mlp_ln.1);
        let normed = g.layer_norm(y, mgain, mbias, LN_EPS)?;
        let h = g.matmul(normed, bound.var(layer.mlp.0))?;
        let h = g.add(h, bound.var(layer.mlp.1))?;
        let a = g.gelu(h)?;
        let out = g.matmul(a, bound.var(layer.mlp.2))?;
        let out = g.add(out, bound.var(layer.mlp.3))?;
        g.add(y, out)
    }

    /// Parameter ids that can receive gradients for this variant (the dead
    /// write gates of the mamba-like scan are excluded automatically because
    /// they are never created).
    pub fn trainable_ids(&self, groups: &[String]) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for g in groups {
            ids.extend(self.params.ids_in_group(g));
        }
        ids.sort();
        ids.dedup();
        ids
    }
}
