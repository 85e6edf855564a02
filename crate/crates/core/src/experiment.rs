//! Training, tracking and scoring routines shared by the command line and the
//! acceptance tests.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::eval::{evaluate_sequence, reacquired, SequenceMetrics};
use crate::gpgnet::{train_gpgnet, GpgConfig, GpgNet, GpgTrainConfig, GpgTrainReport};
use crate::language::Vocabulary;
use crate::numerics::ParamStore;
use crate::salnet::{train_salnet, LossRecord, Salnet, SalnetConfig, SalnetTrainConfig};
use crate::synth::{Event, Sequence};
use crate::tracker::{track_sequence, AttentionSource, TrackRecord, TrackerConfig};
use crate::{Error, Result};

/// Frames after reappearance within which the target must be re-acquired.
pub const REACQUIRE_WINDOW: usize = 5;
pub const REACQUIRE_IOU: f64 = 0.5;

/// Builds and trains a proposal network with one head per training sequence.
pub fn train_salnet_model(
    train: &[Sequence],
    vocab: &Vocabulary,
    config: SalnetConfig,
    train_config: &SalnetTrainConfig,
) -> Result<(Salnet, ParamStore, Vec<LossRecord>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let net = Salnet::build(config, train.len(), vocab.len(), &mut store, &mut rng)?;
    let history = train_salnet(&net, &mut store, train, vocab, train_config)?;
    Ok((net, store, history))
}

pub fn train_gpg_model(
    train: &[Sequence],
    vocab: &Vocabulary,
    config: GpgConfig,
    train_config: &GpgTrainConfig,
) -> Result<(GpgNet, ParamStore, GpgTrainReport)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let net = GpgNet::build(config, &mut store, &mut rng)?;
    let report = train_gpgnet(&net, &mut store, train, vocab, train_config)?;
    Ok((net, store, report))
}

/// Which parts of the tracker are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Local and attention-driven candidates; attention sees target and sentence.
    #[default]
    Full,
    /// Local candidates only.
    LocalOnly,
    /// Attention from the target patch alone.
    TargetOnly,
    /// Attention from the sentence alone.
    LanguageOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::LocalOnly, Variant::TargetOnly, Variant::LanguageOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LocalOnly => "local-only",
            Variant::TargetOnly => "target-only",
            Variant::LanguageOnly => "language-only",
        }
    }

    /// The attention network with this variant's modalities, if it uses one.
    pub fn attention_net(self, net: &GpgNet) -> Option<GpgNet> {
        let (target, language) = match self {
            Variant::Full => (true, true),
            Variant::LocalOnly => return None,
            Variant::TargetOnly => (true, false),
            Variant::LanguageOnly => (false, true),
        };
        let mut net = net.clone();
        net.set_modalities(target, language);
        Some(net)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tracker variant {s:?}")))
    }
}

/// Trained weights a tracking run needs.
pub struct Models<'a> {
    pub salnet: &'a Salnet,
    pub salnet_store: &'a ParamStore,
    pub attention: Option<(&'a GpgNet, &'a ParamStore)>,
    pub vocab: &'a Vocabulary,
}

/// Per-sequence tracking seed.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Tracks every sequence; sequence `i` uses [`sequence_seed`]`(seed, i)`.
pub fn track_corpus(
    models: &Models<'_>,
    config: &TrackerConfig,
    variant: Variant,
    sequences: &[Sequence],
    seed: u64,
) -> Result<Vec<Vec<TrackRecord>>> {
    let net = match models.attention {
        Some((net, _)) => variant.attention_net(net),
        None if variant == Variant::LocalOnly => None,
        None => return Err(Error::InvalidArgument(format!("variant {variant} needs an attention network"))),
    };
    let attention = net.as_ref().zip(models.attention.map(|a| a.1)).map(|(net, store)| AttentionSource { net, store });
    let config = TrackerConfig { use_global: attention.is_some(), ..config.clone() };
    sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            log::info!("tracking {} ({variant})", seq.name);
            track_sequence(models.salnet, models.salnet_store, attention, &config, seq, models.vocab, sequence_seed(seed, i), None)
        })
        .collect()
}

/// Boxes of frames where the target is in view.
pub fn ground_truth(seq: &Sequence) -> Vec<Option<BBox>> {
    seq.annotations.iter().map(|a| a.bbox.filter(|_| a.visible())).collect()
}

/// Per-sequence metrics over a tracked corpus.
pub fn corpus_metrics(sequences: &[Sequence], tracks: &[Vec<TrackRecord>]) -> Result<Vec<SequenceMetrics>> {
    sequences
        .iter()
        .zip(tracks)
        .map(|(seq, track)| {
            let pred: Vec<_> = track.iter().map(|r| r.bbox).collect();
            Ok(evaluate_sequence(&seq.name, &pred, &ground_truth(seq), seq.spec.width)?.0)
        })
        .collect()
}

pub fn mean_success_auc(metrics: &[SequenceMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.success_auc).sum::<f64>() / metrics.len() as f64
}

/// First frame after the first exit-view interval, if the scene has one.
pub fn reappearance_frame(seq: &Sequence) -> Option<usize> {
    seq.spec.events.iter().find_map(|e| match e {
        Event::ExitView { end, .. } => Some(*end),
        _ => None,
    })
}

/// Fraction of scenes with an exit event whose target is re-acquired within
/// [`REACQUIRE_WINDOW`] frames of reappearing.
pub fn reacquisition_rate(sequences: &[Sequence], tracks: &[Vec<TrackRecord>]) -> f64 {
    let mut scenes = 0usize;
    let mut hits = 0usize;
    for (seq, track) in sequences.iter().zip(tracks) {
        let Some(t) = reappearance_frame(seq) else { continue };
        scenes += 1;
        let pred: Vec<_> = track.iter().map(|r| r.bbox).collect();
        if reacquired(&pred, &ground_truth(seq), t, REACQUIRE_WINDOW, REACQUIRE_IOU) {
            hits += 1;
        }
    }
    if scenes == 0 {
        0.0
    } else {
        hits as f64 / scenes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, random_scene, ScenarioKind};

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn modalities_follow_variant() {
        let mut store = ParamStore::new();
        let net = GpgNet::build(GpgConfig::toy(21), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(Variant::LocalOnly.attention_net(&net).is_none());
        let t = Variant::TargetOnly.attention_net(&net).unwrap();
        assert!(t.config().use_target && !t.config().use_language);
        let l = Variant::LanguageOnly.attention_net(&net).unwrap();
        assert!(!l.config().use_target && l.config().use_language);
    }

    #[test]
    fn perfect_tracks_score_one_and_reacquire() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<Sequence> = (0..3)
            .map(|i| generate_sequence(&format!("r{i}"), &random_scene(&mut rng, ScenarioKind::Reappear, 64, 48, 24)).unwrap())
            .collect();
        let tracks: Vec<Vec<TrackRecord>> = seqs
            .iter()
            .map(|s| {
                let mut last = s.initial_box().unwrap();
                s.annotations
                    .iter()
                    .enumerate()
                    .map(|(t, a)| {
                        if let Some(b) = a.bbox.filter(|_| a.visible()) {
                            last = b;
                        }
                        TrackRecord { frame: t, bbox: last, score: 1.0, provenance: "local".into() }
                    })
                    .collect()
            })
            .collect();
        let metrics = corpus_metrics(&seqs, &tracks).unwrap();
        assert_eq!(mean_success_auc(&metrics), 1.0);
        assert_eq!(reacquisition_rate(&seqs, &tracks), 1.0);
        let frozen: Vec<Vec<TrackRecord>> = tracks
            .iter()
            .zip(&seqs)
            .map(|(tr, s)| {
                let t = reappearance_frame(s).unwrap();
                tr.iter().enumerate().map(|(i, r)| if i >= t { TrackRecord { bbox: tr[t - 1].bbox, ..r.clone() } } else { r.clone() }).collect()
            })
            .collect();
        assert_eq!(reacquisition_rate(&seqs, &frozen), 0.0);
    }
}
