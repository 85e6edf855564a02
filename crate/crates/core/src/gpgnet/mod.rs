//! Target-driven attention: a frame encoder, a target-patch encoder and a
//! sentence encoder are fused and decoded into a per-pixel target map.

mod mask;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::image::Frame;
use crate::language::{SentenceEncoder, MAX_TOKENS};
use crate::numerics::{checkpoint, Graph, LayerSpec, ParamStore, Sequential, Tensor, Var};
use crate::{Error, Result};

pub use mask::{mask_from_bbox, AttentionMap, BinaryMask};
pub use train::{evaluate_attention, train_gpgnet, AttentionEval, GpgSample, GpgTrainConfig, GpgTrainReport};

/// Architecture of the attention network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpgConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of the four stride-2 encoder stages; the last is `C`.
    pub encoder_channels: Vec<usize>,
    pub vocab_size: usize,
    pub use_target: bool,
    pub use_language: bool,
}

impl GpgConfig {
    /// 48×64 input, `C = 32`.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            input_width: 64,
            input_height: 48,
            encoder_channels: vec![8, 16, 32, 32],
            vocab_size,
            use_target: true,
            use_language: true,
        }
    }

    /// 192×256 input, `C = 512`.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            input_width: 256,
            input_height: 192,
            encoder_channels: vec![64, 128, 256, 512],
            vocab_size,
            use_target: true,
            use_language: true,
        }
    }

    pub fn channels(&self) -> usize {
        *self.encoder_channels.last().expect("non-empty encoder")
    }

    pub fn fused_channels(&self) -> usize {
        3 * self.channels()
    }

    pub fn downsample(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_height / self.downsample(), self.input_width / self.downsample())
    }

    fn validate(&self) -> Result<()> {
        let d = self.downsample();
        if self.encoder_channels.is_empty() || self.input_width % d != 0 || self.input_height % d != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {d}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }
}

fn encoder_specs(channels: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut in_ch = 3;
    for &out_ch in channels {
        specs.push(LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride: 2, pad: 1 });
        specs.push(LayerSpec::Relu);
        in_ch = out_ch;
    }
    specs
}

fn decoder_specs(channels: &[usize]) -> Vec<LayerSpec> {
    // Mirror of the encoder: 3C -> c[n-2] -> ... -> c[0] -> 1.
    let mut outs: Vec<usize> = channels[..channels.len() - 1].iter().rev().copied().collect();
    outs.push(1);
    let mut specs = Vec::new();
    let mut in_ch = 3 * channels[channels.len() - 1];
    for (i, &out_ch) in outs.iter().enumerate() {
        specs.push(LayerSpec::UpsampleConv2d { in_ch, out_ch, kernel: 3, pad: 1, factor: 2 });
        if i + 1 < outs.len() {
            specs.push(LayerSpec::Relu);
        }
        in_ch = out_ch;
    }
    specs.push(LayerSpec::Sigmoid);
    specs
}

/// Encoder features that stay fixed over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GpgContext {
    /// `[1, C, Hf, Wf]`.
    pub target: Tensor,
    /// `[1, C]`.
    pub sentence: Tensor,
}

#[derive(Clone, Debug)]
pub struct GpgNet {
    config: GpgConfig,
    frame_encoder: Sequential,
    target_encoder: Sequential,
    language: SentenceEncoder,
    decoder: Sequential,
}

impl GpgNet {
    pub fn build<R: Rng + ?Sized>(config: GpgConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let enc = encoder_specs(&config.encoder_channels);
        let frame_encoder = Sequential::build("gpg.frame", &enc, store, rng)?;
        let target_encoder = Sequential::build("gpg.target", &enc, store, rng)?;
        let language = SentenceEncoder::build("gpg.lang", config.vocab_size, config.channels(), store, rng)?;
        let decoder = Sequential::build("gpg.decoder", &decoder_specs(&config.encoder_channels), store, rng)?;
        Ok(Self { config, frame_encoder, target_encoder, language, decoder })
    }

    pub fn config(&self) -> &GpgConfig {
        &self.config
    }

    pub fn set_modalities(&mut self, use_target: bool, use_language: bool) {
        self.config.use_target = use_target;
        self.config.use_language = use_language;
    }

    pub fn manifest(&self) -> String {
        [&self.frame_encoder, &self.target_encoder, self.language.convs(), &self.decoder]
            .iter()
            .map(|s| s.manifest())
            .collect::<Vec<_>>()
            .join("")
    }

    /// Writes the weights with the configuration as metadata.
    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        checkpoint::save(path, store, &serde_json::to_string(&self.config)?, &self.manifest())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let ckpt = checkpoint::load(path)?;
        let config: GpgConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("gpgnet metadata: {e}")))?;
        let mut store = ParamStore::new();
        let net = Self::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_from(&ckpt.params)?;
        Ok((net, store))
    }

    fn check_images(&self, v: &Tensor, what: &str) -> Result<usize> {
        let c = &self.config;
        if v.ndim() != 4 || v.dim(1) != 3 || v.dim(2) != c.input_height || v.dim(3) != c.input_width {
            return Err(Error::shape(
                what,
                format!("expected [N, 3, {}, {}], got {:?}", c.input_height, c.input_width, v.shape()),
            ));
        }
        Ok(v.dim(0))
    }

    /// Pooled `[N, C]` sentence vectors, zero when language is disabled.
    fn sentence_vectors(&self, g: &mut Graph, store: &ParamStore, tokens: &[Vec<usize>]) -> Result<Var> {
        let c = self.config.channels();
        if !self.config.use_language {
            return Ok(g.input(Tensor::zeros(&[tokens.len(), c])));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for t in tokens {
            let enc = self.language.encode(g, store, t)?;
            rows.push(self.language.anchor(g, enc)?);
        }
        g.concat(&rows, 0)
    }

    /// Fused `[N, 3C, Hf, Wf]` map: frame features, target features, tiled sentence.
    pub fn encode_inputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: Var,
        targets: Var,
        tokens: &[Vec<usize>],
    ) -> Result<Var> {
        let n = self.check_images(g.value(frames), "attention frame input")?;
        if self.check_images(g.value(targets), "attention target input")? != n || tokens.len() != n {
            return Err(Error::shape("encode inputs", "batch sizes differ"));
        }
        if let Some(bad) = tokens.iter().find(|t| t.len() != MAX_TOKENS) {
            return Err(Error::shape("encode inputs", format!("{} tokens", bad.len())));
        }
        let (hf, wf) = self.config.feature_size();
        let frame_feat = self.frame_encoder.forward(g, store, frames)?;
        let target_feat = if self.config.use_target {
            self.target_encoder.forward(g, store, targets)?
        } else {
            g.input(Tensor::zeros(&[n, self.config.channels(), hf, wf]))
        };
        let sentence = self.sentence_vectors(g, store, tokens)?;
        let tiled = g.tile(sentence, hf, wf)?;
        g.concat(&[frame_feat, target_feat, tiled], 1)
    }

    /// `[N, 3C, Hf, Wf]` to `[N, 1, H, W]` probabilities.
    pub fn decode_attention(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        self.decoder.forward(g, store, fused)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: Var,
        targets: Var,
        tokens: &[Vec<usize>],
    ) -> Result<Var> {
        let fused = self.encode_inputs(g, store, frames, targets, tokens)?;
        self.decode_attention(g, store, fused)
    }

    /// Frame-0 target crop resized to the full network input.
    pub fn target_patch(&self, frame: &Frame, bbox: &BBox) -> Tensor {
        let (w, h) = (self.config.input_width, self.config.input_height);
        Tensor::new(vec![1, 3, h, w], frame.crop_resize(bbox, w, h)).expect("crop size")
    }

    pub fn frame_input(&self, frame: &Frame) -> Tensor {
        let (w, h) = (self.config.input_width, self.config.input_height);
        Tensor::new(vec![1, 3, h, w], frame.resized(w, h)).expect("resize size")
    }

    /// Precomputes the target and sentence branches for a sequence.
    pub fn prepare(&self, store: &ParamStore, first_frame: &Frame, bbox: &BBox, tokens: &[usize]) -> Result<GpgContext> {
        let mut g = Graph::new();
        let (hf, wf) = self.config.feature_size();
        let c = self.config.channels();
        let target = if self.config.use_target {
            let x = g.input(self.target_patch(first_frame, bbox));
            let t = self.target_encoder.forward(&mut g, store, x)?;
            g.value(t).clone()
        } else {
            Tensor::zeros(&[1, c, hf, wf])
        };
        let s = self.sentence_vectors(&mut g, store, &[tokens.to_vec()])?;
        Ok(GpgContext { target, sentence: g.value(s).clone() })
    }

    /// Attention for `frame` at the frame's own resolution.
    pub fn attention(&self, store: &ParamStore, ctx: &GpgContext, frame: &Frame, index: usize) -> Result<AttentionMap> {
        let mut g = Graph::new();
        let (hf, wf) = self.config.feature_size();
        let x = g.input(self.frame_input(frame));
        let frame_feat = self.frame_encoder.forward(&mut g, store, x)?;
        let target = g.input(ctx.target.clone());
        let s = g.input(ctx.sentence.clone());
        let tiled = g.tile(s, hf, wf)?;
        let fused = g.concat(&[frame_feat, target, tiled], 1)?;
        let out = self.decode_attention(&mut g, store, fused)?;
        let values = g.value(out).data().to_vec();
        let (w, h) = (self.config.input_width, self.config.input_height);
        let map = AttentionMap::new(w, h, values.iter().map(|v| v.clamp(0.0, 1.0)).collect(), index)?;
        Ok(resize_nearest(&map, frame.width(), frame.height()))
    }
}

fn resize_nearest(map: &AttentionMap, width: usize, height: usize) -> AttentionMap {
    if map.width == width && map.height == height {
        return map.clone();
    }
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = (y * map.height / height).min(map.height - 1);
        for x in 0..width {
            let sx = (x * map.width / width).min(map.width - 1);
            values.push(map.at(sx, sy));
        }
    }
    AttentionMap { width, height, values, frame: map.frame }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> GpgConfig {
        GpgConfig {
            input_width: 32,
            input_height: 16,
            encoder_channels: vec![2, 3, 4, 4],
            vocab_size: 6,
            use_target: true,
            use_language: true,
        }
    }

    fn tokens(seed: usize) -> Vec<usize> {
        let mut t: Vec<usize> = (0..5).map(|i| 2 + (i + seed) % 4).collect();
        t.resize(MAX_TOKENS, 0);
        t
    }

    #[test]
    fn toy_shapes() {
        let cfg = GpgConfig::toy(10);
        assert_eq!(cfg.fused_channels(), 96);
        assert_eq!(cfg.feature_size(), (3, 4));
        let mut store = ParamStore::new();
        let net = GpgNet::build(cfg, &mut store, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[2, 3, 48, 64]));
        let t = g.input(Tensor::zeros(&[2, 3, 48, 64]));
        let fused = net.encode_inputs(&mut g, &store, f, t, &[tokens(0), tokens(1)]).unwrap();
        assert_eq!(g.shape(fused), &[2, 96, 3, 4]);
        let out = net.decode_attention(&mut g, &store, fused).unwrap();
        assert_eq!(g.shape(out), &[2, 1, 48, 64]);
    }

    #[test]
    fn reference_scale_fuses_1536_channels() {
        let cfg = GpgConfig::reference(10);
        assert_eq!(cfg.fused_channels(), 1536);
        assert_eq!(cfg.feature_size(), (12, 16));
        let mut store = ParamStore::new();
        let net = GpgNet::build(cfg, &mut store, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[1, 3, 192, 256]));
        let t = g.input(Tensor::zeros(&[1, 3, 192, 256]));
        let fused = net.encode_inputs(&mut g, &store, f, t, &[tokens(0)]).unwrap();
        assert_eq!(g.shape(fused), &[1, 1536, 12, 16]);
    }

    #[test]
    fn zero_decoder_outputs_half() {
        let mut store = ParamStore::new();
        let net = GpgNet::build(tiny_config(), &mut store, &mut rng(1)).unwrap();
        for id in net.decoder.param_ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let frame = Frame::new(32, 16);
        let ctx = net.prepare(&store, &frame, &BBox::new(2.0, 2.0, 5.0, 5.0), &tokens(0)).unwrap();
        let map = net.attention(&store, &ctx, &frame, 0).unwrap();
        assert_eq!((map.width, map.height), (32, 16));
        assert!(map.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let mut store = ParamStore::new();
        let net = GpgNet::build(tiny_config(), &mut store, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[1, 3, 16, 30]));
        let t = g.input(Tensor::zeros(&[1, 3, 16, 32]));
        assert!(net.encode_inputs(&mut g, &store, f, t, &[tokens(0)]).is_err());
    }

    #[test]
    fn encode_decode_passes_grad_check() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let net = GpgNet::build(tiny_config(), &mut store, &mut r).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::random_normal(&shape, 0.5, &mut r);
            }
        }
        let frames = Tensor::random_uniform(&[2, 3, 16, 32], -2.0, 2.0, &mut r);
        let targets = Tensor::random_uniform(&[2, 3, 16, 32], -2.0, 2.0, &mut r);
        let masks: Vec<f64> = (0..2 * 16 * 32).map(|i| f64::from(u8::from(i % 7 < 3))).collect();
        let toks = vec![tokens(0), tokens(2)];
        let opts = GradCheckOptions { max_coords_per_param: Some(12), ..Default::default() };
        let report = grad_check(&store, opts, |g, s| {
            let f = g.input(frames.clone());
            let t = g.input(targets.clone());
            let p = net.forward(g, s, f, t, &toks)?;
            g.bce(p, &masks, true)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        let net = GpgNet::build(tiny_config(), &mut store, &mut rng(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gpg.ckpt");
        net.save(&path, &store).unwrap();
        let (back, back_store) = GpgNet::load(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (id, name, value) in store.iter() {
            assert_eq!(back_store.name(id), name);
            assert_eq!(back_store.get(id), value);
        }
    }

    #[test]
    fn disabled_modalities_do_not_depend_on_their_inputs() {
        let mut store = ParamStore::new();
        let mut net = GpgNet::build(tiny_config(), &mut store, &mut rng(4)).unwrap();
        net.set_modalities(false, false);
        let frame = Frame::new(32, 16);
        let a = net.prepare(&store, &frame, &BBox::new(1.0, 1.0, 4.0, 4.0), &tokens(0)).unwrap();
        let b = net.prepare(&store, &frame, &BBox::new(9.0, 3.0, 6.0, 8.0), &tokens(3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn attention_is_bounded(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let net = GpgNet::build(tiny_config(), &mut store, &mut r).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::random_normal(&shape, scale, &mut r);
            }
            let mut frame = Frame::new(32, 16);
            frame.set_pixel(3, 4, [200, 10, 90]);
            let ctx = net.prepare(&store, &frame, &BBox::new(1.0, 1.0, 6.0, 6.0), &tokens(1)).unwrap();
            let map = net.attention(&store, &ctx, &frame, 0).unwrap();
            prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
