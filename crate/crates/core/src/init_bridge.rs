//! Bridging acoustic keys/values into the language model's head geometry,
//! plus the initialization of the acoustic adapters.

use rand::Rng;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::fusion::{AcousticBranch, AdapterW, Bottleneck, FusionLayerParams, KvProjection};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::params::{Param, Role};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("acoustic model has no decoder layers to transplant from")]
    NoDecoderLayers,
    #[error("layer {layer} has no acoustic branch")]
    MissingBranch { layer: usize },
}

/// Zeros of shape `[lm_heads, audio_len, lm_head_size]` with ones on the
/// diagonal of every head slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddingTemplate(Tensor);

impl PaddingTemplate {
    pub fn build(config: &ModelConfig) -> Result<Self, BridgeError> {
        config.validate()?;
        let (h, t, s) = (config.lm_heads, config.audio_len, config.lm_head_size);
        let mut tensor = Tensor::zeros(&[h, t, s]);
        for head in 0..h {
            for i in 0..t.min(s) {
                tensor.set(&[head, i, i], 1.0);
            }
        }
        Ok(Self(tensor))
    }

    /// The all-zero template used when the bridge initialization is disabled.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self(Tensor::zeros(&[config.lm_heads, config.audio_len, config.lm_head_size]))
    }

    pub fn from_tensor(tensor: Tensor) -> Self {
        Self(tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Places `x` (`[B, audio_heads, T, audio_head_size]`) into the top-left
    /// corner of a per-batch copy of the template, overwriting what was there.
    pub fn embed_kv(&self, x: &Tensor) -> Result<Tensor, BridgeError> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let out = g.embed_corner(&self.0, v)?;
        Ok(g.value(out).clone())
    }
}

pub fn build_padding_template(config: &ModelConfig) -> Result<PaddingTemplate, BridgeError> {
    PaddingTemplate::build(config)
}

/// Sets `down` and `up` to rectangular identities.
pub fn init_identity_projections(adapter: &mut AdapterW) {
    let (w, b) = (adapter.down.value().shape()[0], adapter.down.value().shape()[1]);
    adapter.down.set(Tensor::rect_identity(w, b));
    adapter.up.set(Tensor::rect_identity(b, w));
}

/// How the acoustic adapters and template start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdapterInit {
    /// Identity projections and the diagonal template.
    Bridge,
    /// Gaussian projections and an all-zero template.
    Gaussian { std: f64 },
}

impl AdapterInit {
    pub const NO_INIT: AdapterInit = AdapterInit::Gaussian { std: 0.02 };

    pub fn template(self, config: &ModelConfig) -> Result<PaddingTemplate, BridgeError> {
        match self {
            AdapterInit::Bridge => PaddingTemplate::build(config),
            AdapterInit::Gaussian { .. } => {
                config.validate()?;
                Ok(PaddingTemplate::zeros(config))
            }
        }
    }

    pub fn adapter(self, width: usize, bottleneck: usize, rng: &mut impl Rng) -> AdapterW {
        let mut a = Bottleneck {
            down: Param::new(Tensor::zeros(&[width, bottleneck]), Role::Adapter),
            up: Param::new(Tensor::zeros(&[bottleneck, width]), Role::Adapter),
        };
        match self {
            AdapterInit::Bridge => init_identity_projections(&mut a),
            AdapterInit::Gaussian { std } => {
                a.down.set(Tensor::randn(&[width, bottleneck], std, rng));
                a.up.set(Tensor::randn(&[bottleneck, width], std, rng));
            }
        }
        a
    }
}

/// Source of per-layer cross-attention key/value projections.
pub trait CrossAttentionSource {
    /// `(w_k, w_v)` for each decoder layer, in order.
    fn cross_kv(&self) -> Vec<(&Tensor, &Tensor)>;
}

/// Copies decoder layer `i mod layers` cross-attention K/V weights into LM
/// layer `i`, marked frozen.
pub fn transplant_cross_attention(source: &impl CrossAttentionSource, lm_layers: &mut [FusionLayerParams]) -> Result<(), BridgeError> {
    let kv = source.cross_kv();
    if kv.is_empty() {
        return Err(BridgeError::NoDecoderLayers);
    }
    for (i, layer) in lm_layers.iter_mut().enumerate() {
        let branch = layer.acoustic.as_mut().ok_or(BridgeError::MissingBranch { layer: i })?;
        let (k, v) = kv[i % kv.len()];
        branch.kv_proj.k = Param::new(k.clone(), Role::Transplant);
        branch.kv_proj.v = Param::new(v.clone(), Role::Transplant);
    }
    Ok(())
}

/// Adds an acoustic branch to every layer: transplanted projections and
/// freshly initialized adapters. Returns the matching template.
pub fn attach_acoustic_branches(
    config: &ModelConfig,
    source: &impl CrossAttentionSource,
    lm_layers: &mut [FusionLayerParams],
    init: AdapterInit,
    rng: &mut impl Rng,
) -> Result<PaddingTemplate, BridgeError> {
    let template = init.template(config)?;
    let (w, b) = (config.audio_width, config.bottleneck());
    for layer in lm_layers.iter_mut() {
        let placeholder = || Param::new(Tensor::zeros(&[w, w]), Role::Transplant);
        let adapter_k = init.adapter(w, b, rng);
        let adapter_v = (!config.shared_kv_adapter).then(|| init.adapter(w, b, rng));
        layer.acoustic = Some(AcousticBranch { kv_proj: KvProjection { k: placeholder(), v: placeholder() }, adapter_k, adapter_v });
    }
    transplant_cross_attention(source, lm_layers)?;
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometry(lm_heads: usize, audio_len: usize, lm_head_size: usize) -> ModelConfig {
        ModelConfig {
            lm_heads,
            lm_head_size,
            lm_width: lm_heads * lm_head_size,
            audio_len,
            audio_heads: 1,
            audio_head_size: lm_head_size.min(2),
            audio_width: lm_head_size.min(2),
            reduction: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn template_small_cases() {
        let t = PaddingTemplate::build(&geometry(2, 3, 4)).unwrap();
        assert_eq!(t.tensor().shape(), &[2, 3, 4]);
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(t.tensor().get(&[h, i, j]), f64::from(u8::from(i == j)));
                }
            }
        }
        let t = PaddingTemplate::build(&geometry(1, 5, 3)).unwrap();
        for i in 3..5 {
            assert!((0..3).all(|j| t.tensor().get(&[0, i, j]) == 0.0));
        }
        let c = ModelConfig::default();
        let t = PaddingTemplate::build(&c).unwrap();
        assert_eq!(t.tensor().sum(), (c.lm_heads * c.audio_len.min(c.lm_head_size)) as f64);
        assert_eq!(t, PaddingTemplate::build(&c).unwrap());
    }

    #[test]
    fn template_rejects_bad_geometry() {
        let c = ModelConfig { audio_heads: 8, audio_head_size: 4, ..ModelConfig::default() };
        assert!(matches!(PaddingTemplate::build(&c), Err(BridgeError::Config(_))));
    }

    #[test]
    fn embed_kv_overwrites_corner() {
        let c = ModelConfig::default();
        let t = PaddingTemplate::build(&c).unwrap();
        let zeros = Tensor::zeros(&[1, c.audio_heads, c.audio_len, c.audio_head_size]);
        let out = t.embed_kv(&zeros).unwrap();
        for h in 0..c.lm_heads {
            for i in 0..c.audio_len {
                for j in 0..c.lm_head_size {
                    let expected = if h < c.audio_heads && j < c.audio_head_size { 0.0 } else { t.tensor().get(&[h, i, j]) };
                    assert_eq!(out.get(&[0, h, i, j]), expected);
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, c.audio_heads, c.audio_len, c.audio_head_size], 1.0, &mut rng);
        let before = x.clone();
        let out = t.embed_kv(&x).unwrap();
        assert_eq!(x, before);
        for _ in 0..50 {
            let (h, i, j) = (rng.gen_range(0..c.audio_heads), rng.gen_range(0..c.audio_len), rng.gen_range(0..c.audio_head_size));
            assert_eq!(out.get(&[0, h, i, j]), x.get(&[0, h, i, j]));
        }
    }

    #[test]
    fn embed_kv_full_overwrite_when_geometries_match() {
        let c = ModelConfig { audio_heads: 4, audio_head_size: 16, audio_width: 64, ..ModelConfig::default() };
        let t = PaddingTemplate::build(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 4, c.audio_len, 16], 1.0, &mut rng);
        assert_eq!(t.embed_kv(&x).unwrap(), x);
        let too_wide = Tensor::zeros(&[1, 5, c.audio_len, 16]);
        assert!(t.embed_kv(&too_wide).is_err());
    }

    #[test]
    fn identity_projection_is_a_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = AdapterInit::Bridge.adapter(8, 2, &mut rng);
        let (d, u) = (a.down.value(), a.up.value());
        for i in 0..8 {
            for j in 0..8 {
                let p: f64 = (0..2).map(|k| d.get(&[i, k]) * u.get(&[k, j])).sum();
                assert_eq!(p, f64::from(u8::from(i == j && i < 2)));
            }
        }
    }

    struct Fake(Vec<(Tensor, Tensor)>);

    impl CrossAttentionSource for Fake {
        fn cross_kv(&self) -> Vec<(&Tensor, &Tensor)> {
            self.0.iter().map(|(k, v)| (k, v)).collect()
        }
    }

    fn layers(n: usize) -> Vec<FusionLayerParams> {
        let config = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        crate::lm::ToyLm::new(&config, &mut rng).unwrap().weights.layers[..1].iter().cycle().take(n).cloned().collect()
    }

    #[test]
    fn transplant_cycles_decoder_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut source = Fake((0..2).map(|_| (Tensor::randn(&[32, 32], 1.0, &mut rng), Tensor::randn(&[32, 32], 1.0, &mut rng))).collect());
        let mut lm = layers(4);
        let config = ModelConfig::default();
        attach_acoustic_branches(&config, &source, &mut lm, AdapterInit::Bridge, &mut rng).unwrap();
        for (i, layer) in lm.iter().enumerate() {
            let b = layer.acoustic.as_ref().unwrap();
            assert_eq!(b.kv_proj.k.value(), &source.0[i % 2].0);
            assert_eq!(b.kv_proj.v.value(), &source.0[i % 2].1);
            assert_eq!(b.kv_proj.k.role, Role::Transplant);
            assert!(!b.kv_proj.k.trainable);
        }
        source.0[0].0.set(&[0, 0], 123.0);
        assert_ne!(lm[0].acoustic.as_ref().unwrap().kv_proj.k.value().get(&[0, 0]), 123.0);

        let empty = Fake(Vec::new());
        assert_eq!(transplant_cross_attention(&empty, &mut lm), Err(BridgeError::NoDecoderLayers));
        let mut bare = layers(1);
        assert_eq!(transplant_cross_attention(&source, &mut bare), Err(BridgeError::MissingBranch { layer: 0 }));
    }
}
