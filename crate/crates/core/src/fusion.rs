//! The fused self-attention layer.
//!
//! Each layer keeps its frozen self-attention and feed-forward weights and
//! adds three trainable pieces: a prefix adapter attended with the frozen
//! query/key/value projections, a bottleneck adapter applied to acoustic
//! keys and values, and two scalar gates that blend both branches into the
//! frozen attention output before the frozen output projection.

use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var, RMS_EPS};
use crate::params::slots;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("kv cache holds shape {cached:?}, incompatible with new keys {incoming:?}")]
    Cache { cached: Vec<usize>, incoming: Vec<usize> },
    #[error("acoustic features have width {got}, projections expect {expected}")]
    AudioWidth { expected: usize, got: usize },
}

slots!(
    /// Frozen query/key/value/output projections of one attention block.
    SelfAttention { w_q, w_k, w_v, w_o }
);
slots!(
    /// Learnable prefix rows read through the frozen key/value projections.
    PrefixAdapter { prefix }
);
slots!(
    /// `SiLU(x · down) · up`.
    Bottleneck { down, up }
);
slots!(
    /// Acoustic key/value projections copied from the acoustic decoder.
    KvProjection { k, v }
);
slots!(Gates { lm, audio });
slots!(FeedForward { gate, up, down });

/// Everything a layer needs to attend over acoustic states.
#[derive(Clone, Debug)]
pub struct AcousticBranch<P> {
    pub kv_proj: KvProjection<P>,
    pub adapter_k: Bottleneck<P>,
    /// `None` when one adapter is shared by keys and values.
    pub adapter_v: Option<Bottleneck<P>>,
}

impl<P> AcousticBranch<P> {
    pub fn adapter_v(&self) -> &Bottleneck<P> {
        self.adapter_v.as_ref().unwrap_or(&self.adapter_k)
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> AcousticBranch<Q> {
        AcousticBranch {
            kv_proj: self.kv_proj.map(f),
            adapter_k: self.adapter_k.map(f),
            adapter_v: self.adapter_v.as_ref().map(|a| a.map(f)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
        self.kv_proj.visit(&format!("{prefix}.kv_proj"), f);
        self.adapter_k.visit(&format!("{prefix}.adapter_k"), f);
        if let Some(a) = &self.adapter_v {
            a.visit(&format!("{prefix}.adapter_v"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.kv_proj.visit_mut(&format!("{prefix}.kv_proj"), f);
        self.adapter_k.visit_mut(&format!("{prefix}.adapter_k"), f);
        if let Some(a) = &mut self.adapter_v {
            a.visit_mut(&format!("{prefix}.adapter_v"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionLayer<P> {
    pub attn_norm: P,
    pub attention: SelfAttention<P>,
    pub adapter_l: PrefixAdapter<P>,
    pub acoustic: Option<AcousticBranch<P>>,
    pub gates: Gates<P>,
    pub ffn_norm: P,
    pub ffn: FeedForward<P>,
}

impl<P> FusionLayer<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> FusionLayer<Q> {
        FusionLayer {
            attn_norm: f(&self.attn_norm),
            attention: self.attention.map(f),
            adapter_l: self.adapter_l.map(f),
            acoustic: self.acoustic.as_ref().map(|a| a.map(f)),
            gates: self.gates.map(f),
            ffn_norm: f(&self.ffn_norm),
            ffn: self.ffn.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
        f(format!("{prefix}.attn_norm"), &self.attn_norm);
        self.attention.visit(&format!("{prefix}.attention"), f);
        self.adapter_l.visit(&format!("{prefix}.adapter_l"), f);
        if let Some(a) = &self.acoustic {
            a.visit(&format!("{prefix}.acoustic"), f);
        }
        self.gates.visit(&format!("{prefix}.gates"), f);
        f(format!("{prefix}.ffn_norm"), &self.ffn_norm);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(format!("{prefix}.attn_norm"), &mut self.attn_norm);
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        self.adapter_l.visit_mut(&format!("{prefix}.adapter_l"), f);
        if let Some(a) = &mut self.acoustic {
            a.visit_mut(&format!("{prefix}.acoustic"), f);
        }
        self.gates.visit_mut(&format!("{prefix}.gates"), f);
        f(format!("{prefix}.ffn_norm"), &mut self.ffn_norm);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

pub type FrozenSelfAttention = SelfAttention<crate::params::Param>;
pub type AdapterL = PrefixAdapter<crate::params::Param>;
pub type AdapterW = Bottleneck<crate::params::Param>;
pub type AcousticKvProjection = KvProjection<crate::params::Param>;
pub type GateScalars = Gates<crate::params::Param>;
pub type FusionLayerParams = FusionLayer<crate::params::Param>;

/// Which attention branches a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// The frozen language model alone.
    Base,
    /// Frozen attention plus the gated adapter and acoustic branches.
    Fused,
}

/// Cached keys and values (`[B, H, T, D]`) of one self-attention block.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[B, T, H·D] -> [B, H, T, D]`.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(NumericsError::Invalid { op: "split_heads", msg: format!("cannot split {s:?} into {heads} heads") });
    }
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.swap_axes_12(r)
}

/// `[B, H, T, D] -> [B, T, H·D]`.
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    let r = g.swap_axes_12(x)?;
    g.reshape(r, &[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product attention with `d_k` equal to the head size.
/// Returns the per-head context and the attention weights.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, causal: bool) -> Result<(Var, Var), NumericsError> {
    let d = *g.shape(q).last().unwrap();
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = if causal { g.causal_softmax(scores)? } else { g.softmax(scores, g.shape(scores).len() - 1)? };
    Ok((g.matmul(weights, v)?, weights))
}

pub struct SelfAttentionOut {
    /// Merged-head context before the output projection, `[B, T, N]`.
    pub context: Var,
    /// Per-head queries `[B, H, T, D]`, reused by the adapter branches.
    pub query: Var,
    pub weights: Var,
}

/// Causal multi-head self-attention with the frozen projections. When a
/// cache is supplied, its keys/values precede the new positions and are
/// extended in place.
pub fn self_attention(
    g: &mut Graph,
    sa: &SelfAttention<Var>,
    x: Var,
    heads: usize,
    cache: Option<&mut KvCache>,
) -> Result<SelfAttentionOut, FusionError> {
    let q = g.matmul(x, sa.w_q)?;
    let k = g.matmul(x, sa.w_k)?;
    let v = g.matmul(x, sa.w_v)?;
    let q = split_heads(g, q, heads)?;
    let mut k = split_heads(g, k, heads)?;
    let mut v = split_heads(g, v, heads)?;
    if let Some(cache) = cache {
        if let (Some(ck), Some(cv)) = (&cache.k, &cache.v) {
            let incoming = g.shape(k).to_vec();
            let cs = ck.shape();
            if cs[0] != incoming[0] || cs[1] != incoming[1] || cs[3] != incoming[3] {
                return Err(FusionError::Cache { cached: cs.to_vec(), incoming });
            }
            let ck = g.constant(ck.clone());
            let cv = g.constant(cv.clone());
            k = g.concat(ck, k, 2)?;
            v = g.concat(cv, v, 2)?;
        }
        cache.k = Some(g.value(k).clone());
        cache.v = Some(g.value(v).clone());
    }
    let (ctx, weights) = attend(g, q, k, v, true)?;
    Ok(SelfAttentionOut { context: merge_heads(g, ctx)?, query: q, weights })
}

/// Attention of the frozen queries over the prefix rows projected by the
/// frozen key/value weights. No mask: every prefix row is visible.
pub fn adapter_attention(g: &mut Graph, sa: &SelfAttention<Var>, adapter: &PrefixAdapter<Var>, query: Var) -> Result<Var, FusionError> {
    let heads = g.shape(query)[1];
    let rows = g.shape(adapter.prefix)[0];
    let width = g.shape(adapter.prefix)[1];
    let project = |g: &mut Graph, w: Var| -> Result<Var, NumericsError> {
        let p = g.matmul(adapter.prefix, w)?;
        let p = g.reshape(p, &[1, rows, width])?;
        split_heads(g, p, heads)
    };
    let k = project(g, sa.w_k)?;
    let v = project(g, sa.w_v)?;
    let (ctx, _) = attend(g, query, k, v, false)?;
    Ok(merge_heads(g, ctx)?)
}

/// `SiLU(x · down) · up` over the last axis of `x`.
pub fn adapter_bottleneck(g: &mut Graph, adapter: &Bottleneck<Var>, x: Var) -> Result<Var, NumericsError> {
    let h = g.matmul(x, adapter.down)?;
    let h = g.silu(h)?;
    g.matmul(h, adapter.up)
}

/// Acoustic keys and values in the language model's head geometry:
/// project with the transplanted weights, pass through the bottleneck
/// adapter in flat width, split into acoustic heads, then place into the
/// padding template. Output shapes are `[B, lm_heads, T_audio, lm_head_size]`.
pub fn fuse_kv(
    g: &mut Graph,
    branch: &AcousticBranch<Var>,
    h_audio: Var,
    template: &Tensor,
    audio_heads: usize,
) -> Result<(Var, Var), FusionError> {
    let expected = g.shape(branch.kv_proj.k)[0];
    let got = *g.shape(h_audio).last().unwrap_or(&0);
    if got != expected || g.shape(h_audio).len() != 3 {
        return Err(FusionError::AudioWidth { expected, got });
    }
    let one = |g: &mut Graph, proj: Var, adapter: &Bottleneck<Var>| -> Result<Var, NumericsError> {
        let x = g.matmul(h_audio, proj)?;
        let x = adapter_bottleneck(g, adapter, x)?;
        let x = split_heads(g, x, audio_heads)?;
        g.embed_corner(template, x)
    };
    let k = one(g, branch.kv_proj.k, &branch.adapter_k)?;
    let v = one(g, branch.kv_proj.v, branch.adapter_v())?;
    Ok((k, v))
}

/// Unmasked attention of the frozen queries over fused acoustic keys/values;
/// heads are concatenated with no extra projection.
pub fn acoustic_cross_attention(g: &mut Graph, query: Var, k_hat: Var, v_hat: Var) -> Result<Var, FusionError> {
    let (ctx, _) = attend(g, query, k_hat, v_hat, false)?;
    Ok(merge_heads(g, ctx)?)
}

/// `sa_l + λ_L · a_l + λ_W · sa_w`; absent branches contribute nothing.
pub fn gated_merge(g: &mut Graph, gates: &Gates<Var>, sa_l: Var, a_l: Option<Var>, sa_w: Option<Var>) -> Result<Var, NumericsError> {
    let mut out = sa_l;
    if let Some(a) = a_l {
        let scaled = g.scale_by(gates.lm, a)?;
        out = g.add(out, scaled)?;
    }
    if let Some(w) = sa_w {
        let scaled = g.scale_by(gates.audio, w)?;
        out = g.add(out, scaled)?;
    }
    Ok(out)
}

pub struct LayerGeometry {
    pub heads: usize,
}

/// One pre-norm residual layer: fused attention, then the frozen
/// SwiGLU feed-forward.
pub fn fusion_layer_forward(
    g: &mut Graph,
    layer: &FusionLayer<Var>,
    x: Var,
    audio_kv: Option<(Var, Var)>,
    cache: Option<&mut KvCache>,
    path: Path,
    geometry: &LayerGeometry,
) -> Result<Var, FusionError> {
    let h = g.rms_norm(x, layer.attn_norm, RMS_EPS)?;
    let sa = self_attention(g, &layer.attention, h, geometry.heads, cache)?;
    let merged = match path {
        Path::Base => sa.context,
        Path::Fused => {
            let a_l = adapter_attention(g, &layer.attention, &layer.adapter_l, sa.query)?;
            let sa_w = match audio_kv {
                Some((k, v)) => Some(acoustic_cross_attention(g, sa.query, k, v)?),
                None => None,
            };
            gated_merge(g, &layer.gates, sa.context, Some(a_l), sa_w)?
        }
    };
    let attn_out = g.matmul(merged, layer.attention.w_o)?;
    let x = g.add(x, attn_out)?;
    Ok(feed_forward(g, &layer.ffn, layer.ffn_norm, x)?)
}

/// `x + ((SiLU(n·gate) ⊙ n·up) · down)` with `n = rms_norm(x)`.
pub fn feed_forward(g: &mut Graph, ffn: &FeedForward<Var>, norm: Var, x: Var) -> Result<Var, NumericsError> {
    let n = g.rms_norm(x, norm, RMS_EPS)?;
    let a = g.matmul(n, ffn.gate)?;
    let a = g.silu(a)?;
    let b = g.matmul(n, ffn.up)?;
    let h = g.mul(a, b)?;
    let out = g.matmul(h, ffn.down)?;
    g.add(x, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SILU_1: f64 = 0.731_058_578_630_004_9;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_sa(g: &mut Graph, n: usize) -> SelfAttention<Var> {
        let i = Tensor::rect_identity(n, n);
        SelfAttention { w_q: g.constant(i.clone()), w_k: g.constant(i.clone()), w_v: g.constant(i.clone()), w_o: g.constant(i) }
    }

    fn random_sa(g: &mut Graph, n: usize, r: &mut ChaCha8Rng) -> SelfAttention<Var> {
        let mut w = || g.constant(Tensor::randn(&[n, n], 0.4, r));
        SelfAttention { w_q: w(), w_k: w(), w_v: w(), w_o: w() }
    }

    #[test]
    fn single_token_identity_attention_returns_input() {
        let mut g = Graph::new();
        let sa = identity_sa(&mut g, 4);
        let x = g.constant(Tensor::new(vec![1, 1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let out = self_attention(&mut g, &sa, x, 2, None).unwrap();
        assert_eq!(g.value(out.context).data(), g.value(x).data());
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let mut r = rng(11);
        let x0 = Tensor::randn(&[1, 2, 8], 1.0, &mut r);
        let mut g = Graph::new();
        let sa = random_sa(&mut g, 8, &mut r);
        let x = g.constant(x0.clone());
        let full = self_attention(&mut g, &sa, x, 2, None).unwrap();
        let full = g.value(full.context).clone();

        let mut cache = KvCache::default();
        let first = g.constant(Tensor::new(vec![1, 1, 8], x0.data()[..8].to_vec()).unwrap());
        let a = self_attention(&mut g, &sa, first, 2, Some(&mut cache)).unwrap();
        let second = g.constant(Tensor::new(vec![1, 1, 8], x0.data()[8..].to_vec()).unwrap());
        let b = self_attention(&mut g, &sa, second, 2, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 2);
        let stepped: Vec<f64> = g.value(a.context).data().iter().chain(g.value(b.context).data()).copied().collect();
        let diff = full.data().iter().zip(&stepped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");

        let wrong = g.constant(Tensor::zeros(&[2, 1, 8]));
        assert!(matches!(self_attention(&mut g, &sa, wrong, 2, Some(&mut cache)), Err(FusionError::Cache { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(12);
        let mut g = Graph::new();
        let sa = random_sa(&mut g, 8, &mut r);
        let x = g.constant(Tensor::randn(&[1, 5, 8], 1.0, &mut r));
        let out = self_attention(&mut g, &sa, x, 2, None).unwrap();
        for row in g.value(out.weights).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prefix_gives_zero_adapter_output() {
        let mut r = rng(13);
        let mut g = Graph::new();
        let sa = random_sa(&mut g, 8, &mut r);
        let x = g.constant(Tensor::randn(&[1, 3, 8], 1.0, &mut r));
        let out = self_attention(&mut g, &sa, x, 2, None).unwrap();
        let adapter = PrefixAdapter { prefix: g.constant(Tensor::zeros(&[4, 8])) };
        let a = adapter_attention(&mut g, &sa, &adapter, out.query).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_prefix_row_gets_full_weight() {
        let mut r = rng(14);
        let mut g = Graph::new();
        let sa = random_sa(&mut g, 4, &mut r);
        let prefix = Tensor::randn(&[1, 4], 1.0, &mut r);
        let x = g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut r));
        let out = self_attention(&mut g, &sa, x, 1, None).unwrap();
        let p = g.constant(prefix.clone());
        let a = adapter_attention(&mut g, &sa, &PrefixAdapter { prefix: p }, out.query).unwrap();
        // every query reads exactly prefix·W_V
        let pv = g.matmul(p, sa.w_v).unwrap();
        let pv = g.value(pv).data().to_vec();
        for row in g.value(a).data().chunks(4) {
            for (a, b) in row.iter().zip(&pv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_attention_matches_scalar_evaluation() {
        // one head, width 2, two prefix rows, two queries
        let wq = [[1.0, 0.5], [-0.5, 2.0]];
        let wk = [[0.3, 0.0], [1.0, -1.0]];
        let wv = [[2.0, 1.0], [0.0, 1.0]];
        let m = [[0.2, -0.4], [1.5, 0.7]];
        let h = [[1.0, 2.0], [-1.0, 0.5]];
        let mm = |a: [f64; 2], w: [[f64; 2]; 2]| [a[0] * w[0][0] + a[1] * w[1][0], a[0] * w[0][1] + a[1] * w[1][1]];
        let mut expected = Vec::new();
        for hi in h {
            let q = mm(hi, wq);
            let s: Vec<f64> = m
                .iter()
                .map(|&mi| {
                    let k = mm(mi, wk);
                    (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
                })
                .collect();
            let z = s[0].exp() + s[1].exp();
            let p = [s[0].exp() / z, s[1].exp() / z];
            let v0 = mm(m[0], wv);
            let v1 = mm(m[1], wv);
            expected.push(p[0] * v0[0] + p[1] * v1[0]);
            expected.push(p[0] * v0[1] + p[1] * v1[1]);
        }
        let mut g = Graph::new();
        let t2 = |w: [[f64; 2]; 2]| Tensor::new(vec![2, 2], vec![w[0][0], w[0][1], w[1][0], w[1][1]]).unwrap();
        let sa = SelfAttention {
            w_q: g.constant(t2(wq)),
            w_k: g.constant(t2(wk)),
            w_v: g.constant(t2(wv)),
            w_o: g.constant(Tensor::rect_identity(2, 2)),
        };
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let out = self_attention(&mut g, &sa, x, 1, None).unwrap();
        let p = g.constant(t2(m));
        let a = adapter_attention(&mut g, &sa, &PrefixAdapter { prefix: p }, out.query).unwrap();
        for (x, y) in g.value(a).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    fn identity_bottleneck(g: &mut Graph, width: usize, r: usize) -> Bottleneck<Var> {
        Bottleneck { down: g.constant(Tensor::rect_identity(width, width / r)), up: g.constant(Tensor::rect_identity(width / r, width)) }
    }

    #[test]
    fn identity_bottleneck_selects_leading_coordinates() {
        let mut g = Graph::new();
        let b = identity_bottleneck(&mut g, 8, 4);
        let mut e0 = Tensor::zeros(&[1, 1, 8]);
        e0.set(&[0, 0, 0], 1.0);
        let x = g.constant(e0);
        let y = adapter_bottleneck(&mut g, &b, x).unwrap();
        let y = g.value(y).data();
        assert!((y[0] - SILU_1).abs() < 1e-15);
        assert!(y[1..].iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::new(vec![1, 1, 8], vec![0.0, 0.0, 3.0, -1.0, 2.0, 5.0, 1.0, 1.0]).unwrap());
        let y = adapter_bottleneck(&mut g, &b, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_bottleneck_gradients() {
        let mut r = rng(15);
        let down = Tensor::randn(&[8, 2], 0.5, &mut r);
        let up = Tensor::randn(&[2, 8], 0.5, &mut r);
        let x = Tensor::randn(&[1, 3, 8], 1.0, &mut r);
        let w = Tensor::randn(&[1, 3, 8], 1.0, &mut r);
        let loss = |d: &Tensor, u: &Tensor, grad: bool| {
            let mut g = Graph::new();
            let b = Bottleneck { down: g.leaf(d.clone().into(), grad), up: g.leaf(u.clone().into(), grad) };
            let xv = g.constant(x.clone());
            let y = adapter_bottleneck(&mut g, &b, xv).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            let s = g.sum(p).unwrap();
            if grad {
                g.backward(s).unwrap();
                (g.value(s).item(), g.grad(b.down), g.grad(b.up))
            } else {
                (g.value(s).item(), None, None)
            }
        };
        let (_, gd, gu) = loss(&down, &up, true);
        let nd = central_diff(&down, 1e-5, |d| loss(d, &up, false).0);
        let nu = central_diff(&up, 1e-5, |u| loss(&down, u, false).0);
        assert!(rel_err(&gd.unwrap(), &nd) < 1e-4);
        assert!(rel_err(&gu.unwrap(), &nu) < 1e-4);
    }

    #[test]
    fn cross_attention_single_frame_broadcasts_value_row() {
        let mut r = rng(16);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[1, 2, 3, 4], 1.0, &mut r));
        let k = g.constant(Tensor::randn(&[1, 2, 1, 4], 1.0, &mut r));
        let v0 = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut r);
        let v = g.constant(v0.clone());
        let out = acoustic_cross_attention(&mut g, q, k, v).unwrap();
        let out = g.value(out);
        for t in 0..3 {
            for h in 0..2 {
                for d in 0..4 {
                    assert!((out.get(&[0, t, h * 4 + d]) - v0.get(&[0, h, 0, d])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cross_attention_matches_scalar_evaluation() {
        let q = [0.5, -1.0];
        let ks = [[1.0, 0.0], [0.2, 0.3], [-1.0, 2.0]];
        let vs = [[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]];
        let s: Vec<f64> = ks.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = (0..2).map(|d| (0..3).map(|t| s[t].exp() / z * vs[t][d]).sum()).collect();
        let mut g = Graph::new();
        let qv = g.constant(Tensor::new(vec![1, 1, 1, 2], q.to_vec()).unwrap());
        let kv = g.constant(Tensor::new(vec![1, 1, 3, 2], ks.concat()).unwrap());
        let vv = g.constant(Tensor::new(vec![1, 1, 3, 2], vs.concat()).unwrap());
        let out = acoustic_cross_attention(&mut g, qv, kv, vv).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_merge_identities() {
        let mut r = rng(17);
        let mut g = Graph::new();
        let sa0 = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
        let sa = g.constant(sa0.clone());
        let al = g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut r));
        let sw = g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut r));
        let zero = Gates { lm: g.constant(Tensor::scalar(0.0)), audio: g.constant(Tensor::scalar(0.0)) };
        let out = gated_merge(&mut g, &zero, sa, Some(al), Some(sw)).unwrap();
        assert_eq!(g.value(out), &sa0);

        let neg = g.scale(sa, -1.0).unwrap();
        let gates = Gates { lm: g.constant(Tensor::scalar(1.0)), audio: g.constant(Tensor::scalar(0.0)) };
        let out = gated_merge(&mut g, &gates, sa, Some(neg), Some(sw)).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_gradient_is_upstream_dot_branch() {
        let mut r = rng(18);
        let sa0 = Tensor::randn(&[1, 2, 3], 1.0, &mut r);
        let al0 = Tensor::randn(&[1, 2, 3], 1.0, &mut r);
        let up = Tensor::randn(&[1, 2, 3], 1.0, &mut r);
        let f = |lam: &Tensor| {
            let mut g = Graph::new();
            let l = g.variable(lam.clone());
            let gates = Gates { lm: l, audio: g.constant(Tensor::scalar(0.3)) };
            let sa = g.constant(sa0.clone());
            let al = g.constant(al0.clone());
            let out = gated_merge(&mut g, &gates, sa, Some(al), None).unwrap();
            let u = g.constant(up.clone());
            let p = g.mul(out, u).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap();
            (g.value(s).item(), g.grad(l).unwrap().item())
        };
        let lam = Tensor::scalar(0.4);
        let (_, analytic) = f(&lam);
        let expected: f64 = al0.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((analytic - expected).abs() < 1e-12);
        let numeric = central_diff(&lam, 1e-5, |l| f(l).0);
        assert!((numeric.item() - expected).abs() < 1e-8);
    }
}
