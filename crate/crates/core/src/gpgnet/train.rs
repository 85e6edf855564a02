use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, GpgNet};
use crate::bbox::BBox;
use crate::language::{tokenize, Vocabulary};
use crate::numerics::{Graph, Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::synth::Sequence;
use crate::{Error, Result};

/// One supervised example: a frame, the sequence's frame-0 target crop, its
/// sentence and the box mask, all at network input resolution (images `[3, H, W]`).
#[derive(Clone, Debug)]
pub struct GpgSample {
    pub frame: Tensor,
    pub target: Tensor,
    pub tokens: Vec<usize>,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpgTrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Random clear frames drawn per sequence in each epoch.
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for GpgTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::adagrad(),
            lr: 5e-5,
            batch_size: 20,
            epochs: 50,
            frames_per_sequence: 1,
            seed: 0,
        }
    }
}

impl GpgTrainConfig {
    /// Adam at 1e-3 over four frames per sequence per epoch; trains the toy
    /// network from scratch in a few minutes on one core.
    pub fn desk() -> Self {
        Self { optimizer: OptimizerKind::adam(), lr: 1e-3, frames_per_sequence: 4, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpgTrainReport {
    /// Mean per-pixel BCE of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Nearest-neighbour resample of a mask to `(w, h)`.
fn mask_at(mask: &BinaryMask, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (y * mask.height / h).min(mask.height - 1);
        for x in 0..w {
            let sx = (x * mask.width / w).min(mask.width - 1);
            out.push(f64::from(mask.values[sy * mask.width + sx]));
        }
    }
    out
}

impl GpgNet {
    /// Builds the training tuple for frame `t` of `seq`.
    pub fn sample(&self, seq: &Sequence, t: usize, vocab: &Vocabulary) -> Result<GpgSample> {
        let mask = seq
            .masks
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no mask for frame {t}", seq.name)))?;
        let init = seq.initial_box()?;
        let (w, h) = (self.config().input_width, self.config().input_height);
        Ok(GpgSample {
            frame: self.frame_input(&seq.frames[t]).reshape(&[3, h, w])?,
            target: self.target_patch(&seq.frames[0], &init).reshape(&[3, h, w])?,
            tokens: tokenize(&seq.sentence, vocab),
            mask: mask_at(mask, w, h),
        })
    }

    /// Mean per-pixel BCE over `batch`, with parameter gradients.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&GpgSample],
    ) -> Result<crate::numerics::Var> {
        let frames = g.input(Tensor::stack(&batch.iter().map(|s| s.frame.clone()).collect::<Vec<_>>())?);
        let targets = g.input(Tensor::stack(&batch.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?);
        let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
        let out = self.forward(g, store, frames, targets, &tokens)?;
        let labels: Vec<f64> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let flat = g.reshape(out, &[labels.len()])?;
        g.bce(flat, &labels, true)
    }
}

fn clear_frames(seq: &Sequence) -> Vec<usize> {
    seq.annotations
        .iter()
        .enumerate()
        .filter(|(t, a)| a.clear().is_some() && *t < seq.masks.len())
        .map(|(t, _)| t)
        .collect()
}

/// Trains the attention network on per-pixel BCE against box masks.
pub fn train_gpgnet(
    net: &GpgNet,
    store: &mut ParamStore,
    sequences: &[Sequence],
    vocab: &Vocabulary,
    config: &GpgTrainConfig,
) -> Result<GpgTrainReport> {
    if config.batch_size == 0 || config.frames_per_sequence == 0 {
        return Err(Error::Config("batch size and frames per sequence must be positive".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.masks.len() != s.frames.len()) {
        return Err(Error::InvalidArgument(format!("{}: masks missing", s.name)));
    }
    log::info!(
        "gpgnet training: optimizer {:?}, lr {}, batch {}, epochs {}, {} sequences",
        config.optimizer,
        config.lr,
        config.batch_size,
        config.epochs,
        sequences.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr)?;
    let pools: Vec<Vec<usize>> = sequences.iter().map(clear_frames).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut samples = Vec::new();
        for (seq, pool) in sequences.iter().zip(&pools) {
            if pool.is_empty() {
                log::warn!("{}: no clear frames, skipped", seq.name);
                continue;
            }
            for _ in 0..config.frames_per_sequence {
                samples.push(net.sample(seq, pool[rng.random_range(0..pool.len())], vocab)?);
            }
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no usable training frames".into()));
        }
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut weight = 0usize;
        for chunk in samples.chunks(config.batch_size) {
            let batch: Vec<&GpgSample> = chunk.iter().collect();
            let mut g = Graph::training(rng.random());
            let loss = net.batch_loss(&mut g, store, &batch)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("gpgnet loss at epoch {epoch}")));
            }
            total += value * chunk.len() as f64;
            weight += chunk.len();
            let grads = g.backward(loss)?.into_params();
            opt.step(store, &grads)?;
        }
        let mean = total / weight as f64;
        log::info!("gpgnet epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(GpgTrainReport { epoch_losses, steps: opt.steps() })
}

/// Held-out attention quality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionEval {
    /// Mean IoU of the thresholded attention box with the ground truth; frames
    /// with no pixel above threshold count as 0.
    pub mean_iou: f64,
    pub frames: usize,
    /// Frames where attention inside the target exceeds attention inside the
    /// first distractor, over frames where both are visible.
    pub target_wins: usize,
    pub contrast_frames: usize,
}

impl AttentionEval {
    pub fn win_rate(&self) -> f64 {
        if self.contrast_frames == 0 {
            0.0
        } else {
            self.target_wins as f64 / self.contrast_frames as f64
        }
    }
}

/// Scores attention maps on every clear frame after the first.
pub fn evaluate_attention(
    net: &GpgNet,
    store: &ParamStore,
    sequences: &[Sequence],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<AttentionEval> {
    let mut eval = AttentionEval::default();
    let mut iou_sum = 0.0;
    for seq in sequences {
        let init = seq.initial_box()?;
        let ctx = net.prepare(store, &seq.frames[0], &init, &tokenize(&seq.sentence, vocab))?;
        for t in 1..seq.len() {
            let Some(gt) = seq.annotations[t].clear() else { continue };
            let map = net.attention(store, &ctx, &seq.frames[t], t)?;
            iou_sum += map.thresholded_box(threshold).map_or(0.0, |b: BBox| b.iou(&gt));
            eval.frames += 1;
            if seq.spec.distractors.is_empty() {
                continue;
            }
            if let Some(d) = seq.spec.distractor_box(0, t) {
                if let (Some(a), Some(b)) = (map.mean_inside(&gt), map.mean_inside(&d)) {
                    eval.contrast_frames += 1;
                    if a > b {
                        eval.target_wins += 1;
                    }
                }
            }
        }
    }
    if eval.frames > 0 {
        eval.mean_iou = iou_sum / eval.frames as f64;
    }
    Ok(eval)
}
