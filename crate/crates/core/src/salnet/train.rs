use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Salnet;
use crate::language::{tokenize, Vocabulary};
use crate::numerics::{Gradients, Graph, Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::proposals::{negative_samples, positive_samples};
use crate::synth::Sequence;
use crate::{Error, Result};

/// One domain graph: labelled patches from a single frame of one sequence.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: usize,
    /// `[N, 3, P, P]`.
    pub patches: Tensor,
    /// 1 for positives, 0 for negatives.
    pub labels: Vec<f64>,
    pub tokens: Vec<usize>,
    /// `(positive row, negative row)` pairs for the triplet term.
    pub triplets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalnetTrainConfig {
    /// Optimizer steps.
    pub iterations: usize,
    /// Domain graphs whose gradients are summed per step.
    pub graphs_per_step: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SalnetTrainConfig {
    fn default() -> Self {
        Self { iterations: 200, graphs_per_step: 8, lr: 1e-4, seed: 0 }
    }
}

/// Mean losses over the graphs of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(rename = "L_c")]
    pub classification: f64,
    #[serde(rename = "L_t")]
    pub triplet: f64,
    #[serde(rename = "Loss")]
    pub total: f64,
}

/// Samples positives and negatives around a random clear frame of `seq`.
///
/// Returns `None` when the sequence has no clear frame.
pub fn make_domain_batch<R: Rng + ?Sized>(
    net: &Salnet,
    seq: &Sequence,
    domain: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Option<DomainBatch>> {
    let clear: Vec<usize> = (0..seq.len()).filter(|&t| seq.annotations[t].clear().is_some()).collect();
    if clear.is_empty() {
        return Ok(None);
    }
    let t = clear[rng.random_range(0..clear.len())];
    let gt = seq.annotations[t].clear().expect("clear frame");
    let cfg = net.config();
    let frame_size = (seq.frames[t].width(), seq.frames[t].height());
    let pos = positive_samples(&gt, cfg.positives_per_graph(), cfg.positive_iou, frame_size, rng);
    let neg = negative_samples(&gt, cfg.negatives_per_graph(), cfg.negative_iou, frame_size, rng);
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mut boxes = pos.clone();
    boxes.extend(&neg);
    let labels = (0..boxes.len()).map(|i| f64::from(u8::from(i < pos.len()))).collect();
    let mut triplets: Vec<(usize, usize)> = (0..pos.len())
        .flat_map(|i| (pos.len()..boxes.len()).map(move |j| (i, j)))
        .collect();
    triplets.shuffle(rng);
    triplets.truncate(cfg.max_triplets);
    Ok(Some(DomainBatch {
        domain,
        patches: net.patches(&seq.frames[t], &boxes)?,
        labels,
        tokens: tokenize(&seq.sentence, vocab),
        triplets,
    }))
}

/// Multi-domain training: sequence `k` owns head `k`; domains are visited
/// round-robin and each step sums the gradients of `graphs_per_step` graphs.
pub fn train_salnet(
    net: &Salnet,
    store: &mut ParamStore,
    sequences: &[Sequence],
    vocab: &Vocabulary,
    config: &SalnetTrainConfig,
) -> Result<Vec<LossRecord>> {
    if sequences.len() != net.domains() {
        return Err(Error::InvalidArgument(format!(
            "{} sequences for {} domain heads",
            sequences.len(),
            net.domains()
        )));
    }
    let usable: Vec<usize> = (0..sequences.len())
        .filter(|&k| {
            let ok = sequences[k].annotations.iter().any(|a| a.clear().is_some());
            if !ok {
                log::warn!("{}: no usable frames, skipped", sequences[k].name);
            }
            ok
        })
        .collect();
    if usable.len() < 2 {
        return Err(Error::InvalidArgument("salnet training needs at least two usable sequences".into()));
    }
    if config.graphs_per_step == 0 {
        return Err(Error::Config("graphs per step must be positive".into()));
    }
    log::info!(
        "salnet training: {} iterations, {} graphs/step, lr {}, lambda {}, alpha {}, nodes {}",
        config.iterations,
        config.graphs_per_step,
        config.lr,
        net.config().lambda,
        net.config().alpha,
        net.config().nodes
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), config.lr)?;
    let mut history = Vec::with_capacity(config.iterations);
    let mut cursor = 0usize;
    for iteration in 0..config.iterations {
        let mut grads = Gradients::new();
        let (mut lc, mut lt, mut total) = (0.0, 0.0, 0.0);
        let mut graphs = 0usize;
        while graphs < config.graphs_per_step {
            let domain = usable[cursor % usable.len()];
            cursor += 1;
            let Some(batch) = make_domain_batch(net, &sequences[domain], domain, vocab, &mut rng)? else {
                continue;
            };
            let mut g = Graph::training(rng.random());
            let parts = net.domain_loss(&mut g, store, &batch)?;
            let value = |v| g.value(v).data()[0];
            let (c, t, l) = (value(parts.classification), value(parts.triplet), value(parts.total));
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("salnet loss at iteration {iteration}")));
            }
            lc += c;
            lt += t;
            total += l;
            grads.merge(g.backward(parts.total)?.params());
            graphs += 1;
        }
        opt.step(store, &grads)?;
        let n = graphs as f64;
        let record = LossRecord { iteration, classification: lc / n, triplet: lt / n, total: total / n };
        log::debug!("salnet iteration {iteration}: {record:?}");
        history.push(record);
    }
    Ok(history)
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
