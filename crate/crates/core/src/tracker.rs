//! Online tracking: first-frame fine-tuning, per-frame candidate scoring,
//! failure detection and long/short-term updates.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::gpgnet::{AttentionMap, GpgContext, GpgNet};
use crate::image::Frame;
use crate::language::{tokenize, SentenceSpec, Vocabulary};
use crate::numerics::{Graph, Optimizer, OptimizerKind, ParamId, ParamStore, Sequential, Tensor};
use crate::proposals::{
    gaussian_sample, global_proposals, merge_candidate_pools, negative_samples, positive_samples, write_debug_jsonl,
    CandidatePool, GaussianSampler, GlobalProposalConfig, Provenance,
};
use crate::salnet::Salnet;
use crate::synth::Sequence;
use crate::{Error, Result};

pub const FAILURE_THRESHOLD: f64 = 0.5;

/// True when the winning target score falls below 0.5.
pub fn detect_failure(score: f64) -> bool {
    score < FAILURE_THRESHOLD
}

/// Index of the highest score; the first one wins ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub init_positives: usize,
    pub init_negatives: usize,
    pub init_iterations: usize,
    pub batch_positives: usize,
    pub batch_negatives: usize,
    pub init_lr_fc: f64,
    pub init_lr_head: f64,
    pub update_lr_fc: f64,
    pub update_lr_head: f64,
    pub momentum: f64,
    pub update_steps: usize,
    pub long_interval: usize,
    pub long_memory: usize,
    pub short_memory: usize,
    pub negative_memory: usize,
    /// Samples collected on each successful frame.
    pub update_positives: usize,
    pub update_negatives: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub local_candidates: usize,
    pub capacity: usize,
    pub local_sampler: GaussianSampler,
    pub global: GlobalProposalConfig,
    pub use_global: bool,
    /// Recompute attention every `attention_stride` frames.
    pub attention_stride: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            init_positives: 500,
            init_negatives: 5000,
            init_iterations: 30,
            batch_positives: 32,
            batch_negatives: 96,
            init_lr_fc: 3e-4,
            init_lr_head: 3e-3,
            update_lr_fc: 1e-4,
            update_lr_head: 1e-3,
            momentum: 0.9,
            update_steps: 10,
            long_interval: 10,
            long_memory: 100,
            short_memory: 20,
            negative_memory: 20,
            update_positives: 50,
            update_negatives: 200,
            positive_iou: 0.7,
            negative_iou: 0.5,
            local_candidates: 256,
            capacity: 320,
            local_sampler: GaussianSampler::default(),
            global: GlobalProposalConfig::default(),
            use_global: true,
            attention_stride: 1,
        }
    }
}

impl TrackerConfig {
    /// Smaller sample budgets for single-core experiments; schedules,
    /// thresholds and learning rates are unchanged.
    pub fn desk() -> Self {
        Self {
            init_positives: 100,
            init_negatives: 500,
            update_positives: 16,
            update_negatives: 48,
            local_candidates: 128,
            capacity: 192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_positives == 0 || self.init_negatives == 0 || self.local_candidates == 0 || self.capacity == 0 {
            return Err(Error::Config("tracker sample counts must be positive".into()));
        }
        if self.long_memory == 0 || self.short_memory == 0 || self.negative_memory == 0 || self.attention_stride == 0 {
            return Err(Error::Config("tracker memories and attention stride must be positive".into()));
        }
        Ok(())
    }
}

/// FIFO of per-frame sample sets, bounded by frame count.
#[derive(Clone, Debug)]
pub struct Memory {
    capacity: usize,
    frames: VecDeque<(usize, Tensor)>,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, frames: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, frame: usize, features: Tensor) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((frame, features));
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices currently held, oldest first.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|(t, _)| *t).collect()
    }

    /// All rows stacked into `[M, F]`.
    pub fn rows(&self) -> Option<Tensor> {
        let first = self.frames.front()?;
        let width = first.1.dim(1);
        let mut data = Vec::new();
        for (_, f) in &self.frames {
            data.extend_from_slice(f.data());
        }
        Tensor::new(vec![data.len() / width, width], data).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    Long,
    Short,
}

/// Outcome of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    /// Source of the winning candidate; `None` on failure (box kept).
    pub provenance: Option<Provenance>,
    pub candidate: BBox,
    pub failed: bool,
    pub updates: Vec<UpdateMode>,
}

/// Per-sequence tracking state.
#[derive(Clone, Debug)]
pub struct TrackState {
    pub bbox: BBox,
    pub t: usize,
    pub long: Memory,
    pub short: Memory,
    pub negatives: Memory,
    pub sentence: SentenceSpec,
    pub scores: Vec<f64>,
    context: Option<GpgContext>,
    attention: Option<AttentionMap>,
}

/// An attention network with its weights.
#[derive(Clone, Copy)]
pub struct AttentionSource<'a> {
    pub net: &'a GpgNet,
    pub store: &'a ParamStore,
}

pub struct Tracker<'a> {
    salnet: &'a Salnet,
    attention: Option<AttentionSource<'a>>,
    config: TrackerConfig,
    online: ParamStore,
    head: Sequential,
    fc_ids: Vec<ParamId>,
    head_ids: Vec<ParamId>,
    rng: ChaCha8Rng,
    state: TrackState,
    frame_size: (usize, usize),
}

impl<'a> Tracker<'a> {
    /// Builds the online head and fine-tunes it on the first frame.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        salnet: &'a Salnet,
        salnet_store: &ParamStore,
        attention: Option<AttentionSource<'a>>,
        config: TrackerConfig,
        frame0: &Frame,
        bbox0: BBox,
        sentence: &str,
        vocab: &Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        bbox0.validate()?;
        if !bbox0.intersects_frame(frame0.width(), frame0.height()) {
            return Err(Error::InvalidArgument(format!("initial box {bbox0:?} outside the frame")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = salnet_store.clone();
        let d = salnet.config().feature_dim;
        let head = Salnet::build_head("online.head", d, &mut online, &mut rng)?;
        let fc_ids = salnet.fc().param_ids().collect();
        let head_ids = head.param_ids().collect();
        let spec = salnet.language().sentence_spec(salnet_store, sentence, vocab)?;
        let context = match attention {
            Some(src) if config.use_global => Some(src.net.prepare(src.store, frame0, &bbox0, &tokenize(sentence, vocab))?),
            _ => None,
        };
        let frame_size = (frame0.width(), frame0.height());
        let state = TrackState {
            bbox: bbox0,
            t: 0,
            long: Memory::new(config.long_memory),
            short: Memory::new(config.short_memory),
            negatives: Memory::new(config.negative_memory),
            sentence: spec,
            scores: Vec::new(),
            context,
            attention: None,
        };
        let mut tracker = Self { salnet, attention, config, online, head, fc_ids, head_ids, rng, state, frame_size };
        let pos = positive_samples(&bbox0, tracker.config.init_positives, tracker.config.positive_iou, frame_size, &mut tracker.rng);
        let neg = negative_samples(&bbox0, tracker.config.init_negatives, tracker.config.negative_iou, frame_size, &mut tracker.rng);
        let pos_f = tracker.conv_features(frame0, &pos)?;
        let neg_f = tracker.conv_features(frame0, &neg)?;
        let (lr_fc, lr_head) = (tracker.config.init_lr_fc, tracker.config.init_lr_head);
        tracker.fine_tune(&pos_f, &neg_f, tracker.config.init_iterations, lr_fc, lr_head)?;
        let keep = tracker.config.update_negatives.min(neg_f.dim(0));
        let idx: Vec<usize> = sample(&mut tracker.rng, neg_f.dim(0), keep).into_vec();
        tracker.state.long.push(0, pos_f.clone());
        tracker.state.short.push(0, pos_f);
        tracker.state.negatives.push(0, neg_f.select_leading(&idx));
        Ok(tracker)
    }

    pub fn state(&self) -> &TrackState {
        &self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Online parameters (the frozen conv weights are among them).
    pub fn online_store(&self) -> &ParamStore {
        &self.online
    }

    /// Attention of the most recent frame, if global search is on.
    pub fn last_attention(&self) -> Option<&AttentionMap> {
        self.state.attention.as_ref()
    }

    fn conv_features(&self, frame: &Frame, boxes: &[BBox]) -> Result<Tensor> {
        let patches = self.salnet.patches(frame, boxes)?;
        self.salnet.conv_features(&self.online, &patches)
    }

    /// Target probabilities for cached conv features.
    pub fn score_features(&self, conv: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(conv.clone());
        let f = self.salnet.fc_forward(&mut g, &self.online, x)?;
        let s = self.head.forward(&mut g, &self.online, f)?;
        let p = g.column(s, 0)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn score_boxes(&self, frame: &Frame, boxes: &[BBox]) -> Result<Vec<f64>> {
        let conv = self.conv_features(frame, boxes)?;
        self.score_features(&conv)
    }

    fn fine_tune(&mut self, pos: &Tensor, neg: &Tensor, steps: usize, lr_fc: f64, lr_head: f64) -> Result<()> {
        let momentum = OptimizerKind::Sgd { momentum: self.config.momentum };
        let mut opt_fc = Optimizer::new(momentum, lr_fc)?;
        let mut opt_head = Optimizer::new(momentum, lr_head)?;
        for _ in 0..steps {
            let pi = self.draw(pos.dim(0), self.config.batch_positives);
            let ni = self.draw(neg.dim(0), self.config.batch_negatives);
            let mut rows = pos.select_leading(&pi).into_data();
            rows.extend(neg.select_leading(&ni).into_data());
            let batch = Tensor::new(vec![pi.len() + ni.len(), pos.dim(1)], rows)?;
            let labels: Vec<f64> = (0..pi.len() + ni.len()).map(|i| f64::from(u8::from(i < pi.len()))).collect();
            let mut g = Graph::training(self.rng.random());
            let x = g.input(batch);
            let f = self.salnet.fc_forward(&mut g, &self.online, x)?;
            let s = self.head.forward(&mut g, &self.online, f)?;
            let p = g.column(s, 0)?;
            let loss = g.bce(p, &labels, false)?;
            let grads = g.backward(loss)?.into_params();
            let mut fc_grads = grads.clone();
            fc_grads.retain(|id| self.fc_ids.contains(&id));
            let mut head_grads = grads;
            head_grads.retain(|id| self.head_ids.contains(&id));
            opt_fc.step(&mut self.online, &fc_grads)?;
            opt_head.step(&mut self.online, &head_grads)?;
        }
        Ok(())
    }

    /// `k` row indices: a shuffled sample when `k ≤ n`, cycling otherwise.
    fn draw(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k <= n {
            sample(&mut self.rng, n, k).into_vec()
        } else {
            (0..k).map(|_| self.rng.random_range(0..n)).collect()
        }
    }

    pub fn update_model(&mut self, mode: UpdateMode) -> Result<()> {
        let pos = match mode {
            UpdateMode::Long => self.state.long.rows(),
            UpdateMode::Short => self.state.short.rows(),
        };
        let (Some(pos), Some(neg)) = (pos, self.state.negatives.rows()) else {
            return Ok(());
        };
        let (lr_fc, lr_head) = (self.config.update_lr_fc, self.config.update_lr_head);
        self.fine_tune(&pos, &neg, self.config.update_steps, lr_fc, lr_head)
    }

    /// Candidate pool for `frame`: Gaussian samples around the previous box
    /// plus attention-driven proposals.
    pub fn candidates(&mut self, frame: &Frame) -> Result<CandidatePool> {
        let t = self.state.t + 1;
        let local = gaussian_sample(
            &self.state.bbox,
            self.config.local_candidates,
            &self.config.local_sampler,
            self.frame_size,
            &mut self.rng,
        );
        let mut global = Vec::new();
        if let (Some(src), Some(ctx)) = (self.attention, self.state.context.as_ref()) {
            if self.state.attention.is_none() || t % self.config.attention_stride == 0 {
                self.state.attention = Some(src.net.attention(src.store, ctx, frame, t)?);
            }
            let map = self.state.attention.as_ref().expect("attention computed");
            global = global_proposals(map, &self.state.bbox, &self.config.global, &mut self.rng);
        }
        merge_candidate_pools(&local, &global, self.config.capacity)
    }

    /// Tracks one frame; `debug` receives one JSON line per candidate.
    pub fn step(&mut self, frame: &Frame, debug: Option<&mut dyn Write>) -> Result<StepResult> {
        if (frame.width(), frame.height()) != self.frame_size {
            return Err(Error::shape("track step", "frame size changed".to_string()));
        }
        let pool = self.candidates(frame)?;
        let boxes = pool.boxes();
        let scores = self.score_boxes(frame, &boxes)?;
        let t = self.state.t + 1;
        if let Some(out) = debug {
            write_debug_jsonl(out, t, &pool, &scores)?;
        }
        let best = select_best(&scores).expect("non-empty pool");
        let score = scores[best];
        let failed = detect_failure(score);
        let mut updates = Vec::new();
        if failed {
            self.update_model(UpdateMode::Short)?;
            updates.push(UpdateMode::Short);
        } else {
            let bbox = boxes[best];
            self.state.bbox = bbox;
            let pos = positive_samples(&bbox, self.config.update_positives, self.config.positive_iou, self.frame_size, &mut self.rng);
            let neg = negative_samples(&bbox, self.config.update_negatives, self.config.negative_iou, self.frame_size, &mut self.rng);
            let pos_f = self.conv_features(frame, &pos)?;
            let neg_f = self.conv_features(frame, &neg)?;
            self.state.long.push(t, pos_f.clone());
            self.state.short.push(t, pos_f);
            self.state.negatives.push(t, neg_f);
        }
        if t % self.config.long_interval == 0 {
            self.update_model(UpdateMode::Long)?;
            updates.push(UpdateMode::Long);
        }
        self.state.t = t;
        self.state.scores.push(score);
        Ok(StepResult {
            frame: t,
            bbox: self.state.bbox,
            score,
            provenance: (!failed).then_some(pool.candidates[best].provenance),
            candidate: boxes[best],
            failed,
            updates,
        })
    }
}

/// One output row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    /// `init`, `local`, `global` or `none`.
    pub provenance: String,
}

impl TrackRecord {
    fn from_step(r: &StepResult) -> Self {
        Self {
            frame: r.frame,
            bbox: r.bbox,
            score: r.score,
            provenance: r.provenance.map_or_else(|| "none".to_string(), |p| p.to_string()),
        }
    }
}

/// Tracks a whole sequence from its first annotated box.
pub fn track_sequence(
    salnet: &Salnet,
    salnet_store: &ParamStore,
    attention: Option<AttentionSource<'_>>,
    config: &TrackerConfig,
    seq: &Sequence,
    vocab: &Vocabulary,
    seed: u64,
    mut debug: Option<&mut dyn Write>,
) -> Result<Vec<TrackRecord>> {
    let init = seq.initial_box()?;
    let mut tracker = Tracker::init(salnet, salnet_store, attention, config.clone(), &seq.frames[0], init, &seq.sentence, vocab, seed)?;
    let mut out = vec![TrackRecord { frame: 0, bbox: init, score: 1.0, provenance: "init".into() }];
    for frame in &seq.frames[1..] {
        let sink: Option<&mut dyn Write> = match &mut debug {
            Some(d) => Some(&mut **d),
            None => None,
        };
        let r = tracker.step(frame, sink)?;
        out.push(TrackRecord::from_step(&r));
    }
    Ok(out)
}

pub fn write_track_csv<W: Write>(out: W, records: &[TrackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "x", "y", "w", "h", "score", "provenance"])?;
    for r in records {
        w.write_record([
            r.frame.to_string(),
            format!("{:.4}", r.bbox.x),
            format!("{:.4}", r.bbox.y),
            format!("{:.4}", r.bbox.w),
            format!("{:.4}", r.bbox.h),
            format!("{:.6}", r.score),
            r.provenance.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_track_csv(path: &Path) -> Result<Vec<TrackRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<(usize, f64, f64, f64, f64, f64, String)>() {
        let (frame, x, y, w, h, score, provenance) = row?;
        out.push(TrackRecord { frame, bbox: BBox::new(x, y, w, h), score, provenance });
    }
    Ok(out)
}
