//! Structure-aware local network: conv/fc backbone, graph-enhanced multi-domain
//! heads and the joint classification + triplet objective.

mod losses;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::image::Frame;
use crate::language::{SentenceEncoder, MAX_TOKENS};
use crate::numerics::{checkpoint, Graph, LayerSpec, ParamStore, Sequential, Tensor, Var};
use crate::relgraph::GcnStack;
use crate::{Error, Result};

pub use losses::{bce_loss, total_loss, total_loss_var, triplet_loss};
pub use train::{
    make_domain_batch, train_salnet, write_loss_csv, DomainBatch, LossRecord, SalnetTrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalnetConfig {
    /// Square patch side.
    pub patch_size: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_strides: [usize; 3],
    pub fc1_width: usize,
    /// Backbone output width `D`, shared with the sentence anchor.
    pub feature_dim: usize,
    pub dropout: f64,
    pub gcn_depth: usize,
    /// Skip the second row softmax over the affinity matrix.
    pub single_normalization: bool,
    /// Heads see `[raw ‖ enhanced]` features when set, raw features otherwise.
    pub use_gcn: bool,
    pub lambda: f64,
    pub alpha: f64,
    /// Samples per training graph, split evenly into positives and negatives.
    pub nodes: usize,
    pub max_triplets: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for SalnetConfig {
    fn default() -> Self {
        Self::toy(32)
    }
}

impl SalnetConfig {
    /// Desk-scale network on 32×32 patches.
    pub fn toy(feature_dim: usize) -> Self {
        Self {
            patch_size: 32,
            conv_channels: [8, 16, 32],
            conv_kernels: [5, 3, 3],
            conv_strides: [2, 2, 1],
            fc1_width: 4 * feature_dim,
            feature_dim,
            dropout: 0.5,
            gcn_depth: 3,
            single_normalization: false,
            use_gcn: true,
            lambda: 0.1,
            alpha: 1.0,
            nodes: 32,
            max_triplets: 64,
            positive_iou: 0.7,
            negative_iou: 0.5,
        }
    }

    /// 107×107 patches, a 3×3×512 conv output and 4608/512-wide fc layers.
    pub fn reference() -> Self {
        Self {
            patch_size: 107,
            conv_channels: [96, 256, 512],
            conv_kernels: [7, 5, 3],
            conv_strides: [2, 4, 4],
            fc1_width: 4608,
            feature_dim: 512,
            ..Self::toy(512)
        }
    }

    /// Spatial side after each conv (no padding).
    pub fn conv_sides(&self) -> Result<[usize; 3]> {
        let mut side = self.patch_size;
        let mut out = [0; 3];
        for i in 0..3 {
            let k = self.conv_kernels[i];
            if side < k || self.conv_strides[i] == 0 {
                return Err(Error::Config(format!("conv {i}: kernel {k} exceeds input side {side}")));
            }
            side = (side - k) / self.conv_strides[i] + 1;
            out[i] = side;
        }
        Ok(out)
    }

    /// Flattened conv output width.
    pub fn conv_width(&self) -> Result<usize> {
        let side = self.conv_sides()?[2];
        Ok(side * side * self.conv_channels[2])
    }

    pub fn head_width(&self) -> usize {
        if self.use_gcn {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    pub fn positives_per_graph(&self) -> usize {
        self.nodes / 2
    }

    pub fn negatives_per_graph(&self) -> usize {
        self.nodes - self.nodes / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.conv_sides()?;
        if self.feature_dim == 0 || self.fc1_width == 0 {
            return Err(Error::Config("zero-width fc layer".into()));
        }
        if self.nodes < 4 {
            return Err(Error::Config(format!("{} nodes per graph (need at least 4)", self.nodes)));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("lambda and alpha must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {}", self.dropout)));
        }
        Ok(())
    }
}

/// Outputs of one domain graph.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub classification: Var,
    pub triplet: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Salnet {
    config: SalnetConfig,
    conv: Sequential,
    fc: Sequential,
    gcn: GcnStack,
    language: SentenceEncoder,
    heads: Vec<Sequential>,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: SalnetConfig,
    domains: usize,
    vocab_size: usize,
}

impl Salnet {
    pub fn build<R: Rng + ?Sized>(
        config: SalnetConfig,
        domains: usize,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.conv_channels;
        let [k1, k2, k3] = config.conv_kernels;
        let [s1, s2, s3] = config.conv_strides;
        let conv = Sequential::build(
            "salnet.conv",
            &[
                LayerSpec::Conv2d { in_ch: 3, out_ch: c1, kernel: k1, stride: s1, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: c1, out_ch: c2, kernel: k2, stride: s2, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: c2, out_ch: c3, kernel: k3, stride: s3, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            store,
            rng,
        )?;
        let d = config.feature_dim;
        let fc = Sequential::build(
            "salnet.fc",
            &[
                LayerSpec::FullyConnected { in_dim: config.conv_width()?, out_dim: config.fc1_width },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: config.dropout },
                LayerSpec::FullyConnected { in_dim: config.fc1_width, out_dim: d },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: config.dropout },
            ],
            store,
            rng,
        )?;
        let gcn = GcnStack::build("salnet.gcn", d, config.gcn_depth, config.single_normalization, store, rng)?;
        let language = SentenceEncoder::build("salnet.lang", vocab_size, d, store, rng)?;
        let heads = (0..domains)
            .map(|k| Self::build_head(&format!("salnet.head.{k}"), config.head_width(), store, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, conv, fc, gcn, language, heads, vocab_size })
    }

    /// A fresh `in_dim → 2` softmax scorer.
    pub fn build_head<R: Rng + ?Sized>(name: &str, in_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Sequential> {
        Sequential::build(
            name,
            &[LayerSpec::FullyConnected { in_dim, out_dim: 2 }, LayerSpec::SoftmaxRows],
            store,
            rng,
        )
    }

    pub fn config(&self) -> &SalnetConfig {
        &self.config
    }

    pub fn domains(&self) -> usize {
        self.heads.len()
    }

    pub fn conv(&self) -> &Sequential {
        &self.conv
    }

    pub fn fc(&self) -> &Sequential {
        &self.fc
    }

    pub fn gcn(&self) -> &GcnStack {
        &self.gcn
    }

    pub fn language(&self) -> &SentenceEncoder {
        &self.language
    }

    pub fn head(&self, domain: usize) -> Result<&Sequential> {
        self.heads.get(domain).ok_or(Error::UnknownDomain { domain, count: self.heads.len() })
    }

    pub fn manifest(&self) -> String {
        let mut out = self.conv.manifest() + &self.fc.manifest() + self.language.convs().manifest().as_str();
        for h in &self.heads {
            out += &h.manifest();
        }
        out
    }

    /// `[N, 3, P, P]` crops of `boxes`.
    pub fn patches(&self, frame: &Frame, boxes: &[BBox]) -> Result<Tensor> {
        let p = self.config.patch_size;
        let mut data = Vec::with_capacity(boxes.len() * 3 * p * p);
        for b in boxes {
            data.extend(frame.crop_resize(b, p, p));
        }
        Tensor::new(vec![boxes.len(), 3, p, p], data)
    }

    fn check_patches(&self, shape: &[usize]) -> Result<()> {
        let p = self.config.patch_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != p || shape[3] != p {
            return Err(Error::shape("salnet backbone", format!("expected [N, 3, {p}, {p}], got {shape:?}")));
        }
        Ok(())
    }

    /// Frozen part of the backbone: `[N, 3, P, P]` to `[N, conv_width]`.
    pub fn conv_forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        self.check_patches(g.shape(patches))?;
        self.conv.forward(g, store, patches)
    }

    /// `[N, conv_width]` to `[N, D]`.
    pub fn fc_forward(&self, g: &mut Graph, store: &ParamStore, conv_features: Var) -> Result<Var> {
        self.fc.forward(g, store, conv_features)
    }

    /// Inference-mode `[N, D]` features.
    pub fn backbone_forward(&self, store: &ParamStore, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(patches.clone());
        let c = self.conv_forward(&mut g, store, x)?;
        let f = self.fc_forward(&mut g, store, c)?;
        Ok(g.value(f).clone())
    }

    /// Inference-mode conv features, chunked to bound memory.
    pub fn conv_features(&self, store: &ParamStore, patches: &Tensor) -> Result<Tensor> {
        self.check_patches(patches.shape())?;
        let n = patches.dim(0);
        let mut rows = Vec::with_capacity(n * self.config.conv_width()?);
        for start in (0..n).step_by(256) {
            let count = 256.min(n - start);
            let mut g = Graph::new();
            let x = g.input(patches.slice_leading(start, count));
            let c = self.conv.forward(&mut g, store, x)?;
            rows.extend_from_slice(g.value(c).data());
        }
        Tensor::new(vec![n, self.config.conv_width()?], rows)
    }

    /// Head input for `features [N, D]`: graph-enhanced or raw.
    pub fn head_input(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        if self.config.use_gcn {
            self.gcn.enhance(g, store, features)
        } else {
            Ok(features)
        }
    }

    /// `[N, 2]` softmax rows, column 0 being the target probability.
    pub fn head_score(&self, g: &mut Graph, store: &ParamStore, domain: usize, x: Var) -> Result<Var> {
        let head = self.head(domain)?;
        head.forward(g, store, x)
    }

    /// Sentence anchor `[1, D]` on the tape.
    pub fn anchor(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.len() != MAX_TOKENS {
            return Err(Error::shape("salnet anchor", format!("{} tokens", tokens.len())));
        }
        let enc = self.language.encode(g, store, tokens)?;
        self.language.anchor(g, enc)
    }

    /// Classification, triplet and combined loss for one domain graph.
    pub fn domain_loss(&self, g: &mut Graph, store: &ParamStore, batch: &DomainBatch) -> Result<LossParts> {
        let x = g.input(batch.patches.clone());
        let conv = self.conv_forward(g, store, x)?;
        let feats = self.fc_forward(g, store, conv)?;
        self.loss_from_features(g, store, batch, feats)
    }

    /// The loss given backbone features `[N, D]` already on the tape.
    pub fn loss_from_features(&self, g: &mut Graph, store: &ParamStore, batch: &DomainBatch, feats: Var) -> Result<LossParts> {
        let input = self.head_input(g, store, feats)?;
        let scores = self.head_score(g, store, batch.domain, input)?;
        let positive = g.column(scores, 0)?;
        let classification = g.bce(positive, &batch.labels, false)?;
        let triplet = if batch.triplets.is_empty() {
            g.input(Tensor::scalar(0.0))
        } else {
            let anchor = self.anchor(g, store, &batch.tokens)?;
            let (pi, ni): (Vec<usize>, Vec<usize>) = batch.triplets.iter().copied().unzip();
            let pos = g.gather_rows(feats, &pi)?;
            let neg = g.gather_rows(feats, &ni)?;
            g.triplet(anchor, pos, neg, self.config.alpha)?
        };
        let total = total_loss_var(g, classification, triplet, self.config.lambda)?;
        Ok(LossParts { classification, triplet, total })
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let meta = Metadata { config: self.config.clone(), domains: self.heads.len(), vocab_size: self.vocab_size };
        checkpoint::save(path, store, &serde_json::to_string(&meta)?, &self.manifest())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let ckpt = checkpoint::load(path)?;
        let meta: Metadata = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("salnet metadata: {e}")))?;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Self::build(meta.config, meta.domains, meta.vocab_size, &mut store, &mut rng)?;
        store.load_from(&ckpt.params)?;
        Ok((net, store))
    }
}
