//! Encoder-decoder character transcriber over synthetic feature frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{attend, feed_forward, merge_heads, self_attention, split_heads, FeedForward, FusionError, KvCache, SelfAttention};
use crate::init_bridge::CrossAttentionSource;
use crate::numerics::{Graph, NumericsError, Tensor, Var, RMS_EPS};
use crate::params::{Param, ParamSet, Role};
use crate::tokenizer::CharTokenizer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub feat_dim: usize,
    pub frames: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    /// Longest decoder sequence, BOS and EOS included.
    pub max_tokens: usize,
}

impl AcousticConfig {
    /// The encoder whose states and cross-attention weights feed the fusion.
    pub fn strong(feat_dim: usize, frames: usize) -> Self {
        Self {
            feat_dim,
            frames,
            width: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 64,
            vocab_size: CharTokenizer::acoustic().vocab_size(),
            max_tokens: frames + 2,
        }
    }

    /// The small transcriber that produces n-best hypotheses.
    pub fn weak(feat_dim: usize, frames: usize) -> Self {
        Self { width: 16, heads: 2, encoder_layers: 1, decoder_layers: 1, ffn_hidden: 32, ..Self::strong(feat_dim, frames) }
    }

    pub fn head_size(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<P> {
    pub self_norm: P,
    pub self_attn: SelfAttention<P>,
    pub cross_norm: P,
    pub cross: SelfAttention<P>,
    pub ffn_norm: P,
    pub ffn: FeedForward<P>,
}

impl<P> DecoderLayer<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> DecoderLayer<Q> {
        DecoderLayer {
            self_norm: f(&self.self_norm),
            self_attn: self.self_attn.map(f),
            cross_norm: f(&self.cross_norm),
            cross: self.cross.map(f),
            ffn_norm: f(&self.ffn_norm),
            ffn: self.ffn.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
        f(format!("{prefix}.self_norm"), &self.self_norm);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        f(format!("{prefix}.cross_norm"), &self.cross_norm);
        self.cross.visit(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ffn_norm"), &self.ffn_norm);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(format!("{prefix}.self_norm"), &mut self.self_norm);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        f(format!("{prefix}.cross_norm"), &mut self.cross_norm);
        self.cross.visit_mut(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ffn_norm"), &mut self.ffn_norm);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// One encoder block: bidirectional self-attention and feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock<P> {
    pub attn_norm: P,
    pub attention: SelfAttention<P>,
    pub ffn_norm: P,
    pub ffn: FeedForward<P>,
}

impl<P> EncoderBlock<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> EncoderBlock<Q> {
        EncoderBlock { attn_norm: f(&self.attn_norm), attention: self.attention.map(f), ffn_norm: f(&self.ffn_norm), ffn: self.ffn.map(f) }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
        f(format!("{prefix}.attn_norm"), &self.attn_norm);
        self.attention.visit(&format!("{prefix}.attention"), f);
        f(format!("{prefix}.ffn_norm"), &self.ffn_norm);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(format!("{prefix}.attn_norm"), &mut self.attn_norm);
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        f(format!("{prefix}.ffn_norm"), &mut self.ffn_norm);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct AcousticWeights<P> {
    pub input_proj: P,
    pub enc_positions: P,
    pub encoder: Vec<EncoderBlock<P>>,
    pub enc_norm: P,
    pub embed: P,
    pub dec_positions: P,
    pub decoder: Vec<DecoderLayer<P>>,
    pub dec_norm: P,
    pub head: P,
}

impl<P> AcousticWeights<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> AcousticWeights<Q> {
        AcousticWeights {
            input_proj: f(&self.input_proj),
            enc_positions: f(&self.enc_positions),
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            enc_norm: f(&self.enc_norm),
            embed: f(&self.embed),
            dec_positions: f(&self.dec_positions),
            decoder: self.decoder.iter().map(|l| l.map(f)).collect(),
            dec_norm: f(&self.dec_norm),
            head: f(&self.head),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &P)) {
        f("acoustic.input_proj".into(), &self.input_proj);
        f("acoustic.enc_positions".into(), &self.enc_positions);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("acoustic.encoder.{i}"), f);
        }
        f("acoustic.enc_norm".into(), &self.enc_norm);
        f("acoustic.embed".into(), &self.embed);
        f("acoustic.dec_positions".into(), &self.dec_positions);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("acoustic.decoder.{i}"), f);
        }
        f("acoustic.dec_norm".into(), &self.dec_norm);
        f("acoustic.head".into(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        f("acoustic.input_proj".into(), &mut self.input_proj);
        f("acoustic.enc_positions".into(), &mut self.enc_positions);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("acoustic.encoder.{i}"), f);
        }
        f("acoustic.enc_norm".into(), &mut self.enc_norm);
        f("acoustic.embed".into(), &mut self.embed);
        f("acoustic.dec_positions".into(), &mut self.dec_positions);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("acoustic.decoder.{i}"), f);
        }
        f("acoustic.dec_norm".into(), &mut self.dec_norm);
        f("acoustic.head".into(), &mut self.head);
    }
}

#[derive(Clone, Debug)]
pub struct ToyAcoustic {
    pub config: AcousticConfig,
    pub weights: AcousticWeights<Param>,
}

impl ParamSet for ToyAcoustic {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Param)) {
        self.weights.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.weights.visit_mut(f);
    }
}

impl CrossAttentionSource for ToyAcoustic {
    fn cross_kv(&self) -> Vec<(&Tensor, &Tensor)> {
        self.weights.decoder.iter().map(|l| (l.cross.w_k.value(), l.cross.w_v.value())).collect()
    }
}

/// Per-layer cross-attention keys and values over one encoded utterance.
pub struct CrossKv(Vec<(Var, Var)>);

impl ToyAcoustic {
    pub fn new(config: &AcousticConfig, rng: &mut impl Rng) -> Self {
        let n = config.width;
        let h = config.ffn_hidden;
        let in_std = 1.0 / (n as f64).sqrt();
        let depth = (config.encoder_layers + config.decoder_layers).max(1) as f64;
        let out_std = in_std / (2.0 * depth).sqrt();
        let mut p = |shape: &[usize], std: f64| Param::new(Tensor::randn(shape, std, rng), Role::Base);
        let ones = || Param::new(Tensor::full(&[n], 1.0), Role::Base);
        let attention = |p: &mut dyn FnMut(&[usize], f64) -> Param| SelfAttention {
            w_q: p(&[n, n], in_std),
            w_k: p(&[n, n], in_std),
            w_v: p(&[n, n], in_std),
            w_o: p(&[n, n], out_std),
        };
        let ffn = |p: &mut dyn FnMut(&[usize], f64) -> Param| FeedForward {
            gate: p(&[n, h], in_std),
            up: p(&[n, h], in_std),
            down: p(&[h, n], out_std * (n as f64 / h as f64).sqrt()),
        };
        let input_proj = p(&[config.feat_dim, n], 1.0 / (config.feat_dim as f64).sqrt());
        let enc_positions = p(&[config.frames, n], 0.5);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderBlock { attn_norm: ones(), attention: attention(&mut p), ffn_norm: ones(), ffn: ffn(&mut p) })
            .collect();
        let embed = p(&[config.vocab_size, n], 1.0);
        let dec_positions = p(&[config.max_tokens, n], 0.5);
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                self_norm: ones(),
                self_attn: attention(&mut p),
                cross_norm: ones(),
                cross: attention(&mut p),
                ffn_norm: ones(),
                ffn: ffn(&mut p),
            })
            .collect();
        let head = p(&[n, config.vocab_size], in_std);
        let weights =
            AcousticWeights { input_proj, enc_positions, encoder, enc_norm: ones(), embed, dec_positions, decoder, dec_norm: ones(), head };
        Self { config: config.clone(), weights }
    }

    pub fn bind(&self, g: &mut Graph) -> AcousticWeights<Var> {
        self.weights.map(&mut |p| p.bind(g))
    }

    /// Encoder states `[B, frames, width]` for features `[B, frames, feat_dim]`.
    pub fn encode_var(&self, g: &mut Graph, w: &AcousticWeights<Var>, features: Var) -> Result<Var, FusionError> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[1] != self.config.frames || s[2] != self.config.feat_dim {
            return Err(NumericsError::ShapeMismatch {
                op: "acoustic_encode",
                lhs: vec![0, self.config.frames, self.config.feat_dim],
                rhs: s,
            }
            .into());
        }
        let x = g.matmul(features, w.input_proj)?;
        let mut x = g.add_broadcast(x, w.enc_positions)?;
        for layer in &w.encoder {
            let h = g.rms_norm(x, layer.attn_norm, RMS_EPS)?;
            let q = g.matmul(h, layer.attention.w_q)?;
            let k = g.matmul(h, layer.attention.w_k)?;
            let v = g.matmul(h, layer.attention.w_v)?;
            let q = split_heads(g, q, self.config.heads)?;
            let k = split_heads(g, k, self.config.heads)?;
            let v = split_heads(g, v, self.config.heads)?;
            let (ctx, _) = attend(g, q, k, v, false)?;
            let ctx = merge_heads(g, ctx)?;
            let out = g.matmul(ctx, layer.attention.w_o)?;
            x = g.add(x, out)?;
            x = feed_forward(g, &layer.ffn, layer.ffn_norm, x)?;
        }
        Ok(g.rms_norm(x, w.enc_norm, RMS_EPS)?)
    }

    /// `H_audio` of shape `[1, frames, width]` for one `[frames, feat_dim]` utterance.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor, FusionError> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let f = g.constant(features.clone().reshape(&[1, self.config.frames, self.config.feat_dim])?);
        let h = self.encode_var(&mut g, &w, f)?;
        Ok(g.value(h).clone())
    }

    pub fn cross_kv_vars(&self, g: &mut Graph, w: &AcousticWeights<Var>, h_audio: Var) -> Result<CrossKv, FusionError> {
        let heads = self.config.heads;
        let mut out = Vec::with_capacity(w.decoder.len());
        for layer in &w.decoder {
            let k = g.matmul(h_audio, layer.cross.w_k)?;
            let v = g.matmul(h_audio, layer.cross.w_v)?;
            out.push((split_heads(g, k, heads)?, split_heads(g, v, heads)?));
        }
        Ok(CrossKv(out))
    }

    /// Decoder logits `[B, T, vocab]` for token ids laid out `[B, T]`,
    /// starting at position `start` (non-zero only when continuing caches).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_var(
        &self,
        g: &mut Graph,
        w: &AcousticWeights<Var>,
        ids: &[usize],
        batch: usize,
        start: usize,
        cross: &CrossKv,
        mut caches: Option<&mut [KvCache]>,
    ) -> Result<Var, FusionError> {
        let t = ids.len() / batch;
        let n = self.config.width;
        if start + t > self.config.max_tokens {
            return Err(NumericsError::Invalid {
                op: "acoustic_decode",
                msg: format!("{} tokens exceed {}", start + t, self.config.max_tokens),
            }
            .into());
        }
        let x = g.embedding(w.embed, ids)?;
        let x = g.reshape(x, &[batch, t, n])?;
        let positions: Vec<usize> = (start..start + t).collect();
        let pos = g.embedding(w.dec_positions, &positions)?;
        let mut x = g.add_broadcast(x, pos)?;
        for (i, layer) in w.decoder.iter().enumerate() {
            let h = g.rms_norm(x, layer.self_norm, RMS_EPS)?;
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            let sa = self_attention(g, &layer.self_attn, h, self.config.heads, cache)?;
            let out = g.matmul(sa.context, layer.self_attn.w_o)?;
            x = g.add(x, out)?;
            let h = g.rms_norm(x, layer.cross_norm, RMS_EPS)?;
            let q = g.matmul(h, layer.cross.w_q)?;
            let q = split_heads(g, q, self.config.heads)?;
            let (k, v) = cross.0[i];
            let (ctx, _) = attend(g, q, k, v, false)?;
            let ctx = merge_heads(g, ctx)?;
            let out = g.matmul(ctx, layer.cross.w_o)?;
            x = g.add(x, out)?;
            x = feed_forward(g, &layer.ffn, layer.ffn_norm, x)?;
        }
        let x = g.rms_norm(x, w.dec_norm, RMS_EPS)?;
        Ok(g.matmul(x, w.head)?)
    }

    /// Opens an incremental decoding session for `batch` parallel sequences
    /// over one utterance.
    pub fn session(&self, features: &Tensor, batch: usize) -> Result<DecodeSession<'_>, FusionError> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let f = g.constant(features.clone().reshape(&[1, self.config.frames, self.config.feat_dim])?);
        let h = self.encode_var(&mut g, &w, f)?;
        let cross = self.cross_kv_vars(&mut g, &w, h)?;
        let caches = vec![KvCache::default(); self.config.decoder_layers];
        Ok(DecodeSession { model: self, g, w, cross, caches, batch, step: 0 })
    }
}

pub struct DecodeSession<'m> {
    model: &'m ToyAcoustic,
    g: Graph,
    w: AcousticWeights<Var>,
    cross: CrossKv,
    caches: Vec<KvCache>,
    batch: usize,
    step: usize,
}

impl DecodeSession<'_> {
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn max_tokens(&self) -> usize {
        self.model.config.max_tokens
    }

    /// Feeds one token per sequence; returns next-token logits `[B, vocab]`.
    pub fn step(&mut self, tokens: &[usize]) -> Result<Tensor, FusionError> {
        let logits = self.model.decode_var(&mut self.g, &self.w, tokens, self.batch, self.step, &self.cross, Some(&mut self.caches))?;
        self.step += 1;
        let v = self.g.value(logits).clone();
        Ok(v.reshape(&[self.batch, self.model.config.vocab_size])?)
    }
}
