//! The full set of finite-difference gradient checks, runnable outside the
//! unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gpgnet::{GpgConfig, GpgNet};
use crate::language::{SentenceEncoder, MAX_TOKENS};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Graph, LayerSpec, ParamStore, Sequential, Tensor};
use crate::relgraph::GcnStack;
use crate::salnet::{DomainBatch, Salnet, SalnetConfig};
use crate::Result;

/// Tolerance on the relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRAD_TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore, filter: impl Fn(&str) -> bool, std: f64, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if filter(store.name(id)) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::random_normal(&shape, std, r);
        }
    }
}

fn layer_check(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let net = Sequential::build("layer", specs, &mut store, &mut r)?;
    randomize(&mut store, |_| true, 0.5, &mut r);
    let x = Tensor::random_normal(input_shape, 1.0, &mut r);
    let out_len = {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = net.forward(&mut g, &store, xv)?;
        g.value(y).numel()
    };
    let weights = Tensor::random_normal(&[out_len], 1.0, &mut r);
    grad_check(&store, GradCheckOptions::default(), |g, s| {
        let xv = g.input(x.clone());
        let y = net.forward(g, s, xv)?;
        g.weighted_sum(y, weights.clone())
    })
}

fn layer_cases() -> Vec<(Vec<LayerSpec>, Vec<usize>)> {
    let fc = LayerSpec::FullyConnected { in_dim: 4, out_dim: 3 };
    vec![
        (vec![LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 }], vec![2, 2, 5, 5]),
        (vec![LayerSpec::Conv1d { in_ch: 3, out_ch: 2, kernel: 3, pad: 1 }], vec![2, 3, 6]),
        (vec![fc.clone()], vec![3, 4]),
        (vec![fc.clone(), LayerSpec::Relu], vec![3, 4]),
        (vec![fc.clone(), LayerSpec::Sigmoid], vec![3, 4]),
        (vec![fc.clone(), LayerSpec::SoftmaxRows], vec![3, 4]),
        (vec![fc.clone(), LayerSpec::Dropout { rate: 0.5 }], vec![3, 4]),
        (
            vec![LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, pad: 1 }, LayerSpec::Flatten, LayerSpec::FullyConnected { in_dim: 18, out_dim: 2 }],
            vec![2, 1, 3, 3],
        ),
        (vec![LayerSpec::UpsampleConv2d { in_ch: 2, out_ch: 2, kernel: 3, pad: 1, factor: 2 }], vec![1, 2, 3, 2]),
    ]
}

fn sentence_encoder_check() -> Result<GradCheckReport> {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let enc = SentenceEncoder::build("lang", 6, 4, &mut store, &mut r)?;
    randomize(&mut store, |_| true, 0.5, &mut r);
    let mut tokens = vec![2, 3, 5, 4, 1, 2];
    tokens.resize(MAX_TOKENS, 0);
    let weights = Tensor::random_normal(&[4 * MAX_TOKENS], 1.0, &mut r);
    grad_check(&store, GradCheckOptions::default(), |g, s| {
        let y = enc.encode(g, s, &tokens)?;
        g.weighted_sum(y, weights.clone())
    })
}

fn enhance_check(single_normalization: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let stack = GcnStack::build("gcn", 4, 3, single_normalization, &mut store, &mut r)?;
    let x = store.add("x", Tensor::random_normal(&[5, 4], 1.0, &mut r))?;
    let weights = Tensor::random_normal(&[5 * 8], 1.0, &mut r);
    grad_check(&store, GradCheckOptions::default(), |g, s| {
        let xv = g.param(s, x);
        let y = stack.enhance(g, s, xv)?;
        g.weighted_sum(y, weights.clone())
    })
}

fn salnet_composite_check() -> Result<GradCheckReport> {
    let cfg = SalnetConfig {
        patch_size: 12,
        conv_channels: [2, 3, 4],
        conv_kernels: [3, 3, 3],
        conv_strides: [2, 1, 1],
        fc1_width: 8,
        feature_dim: 4,
        nodes: 6,
        ..SalnetConfig::toy(4)
    };
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let net = Salnet::build(cfg.clone(), 2, 6, &mut store, &mut r)?;
    let (n, p, half) = (cfg.nodes, cfg.patch_size, cfg.positives_per_graph());
    let mut tokens = vec![2, 3, 4];
    tokens.resize(MAX_TOKENS, 0);
    let batch = DomainBatch {
        domain: 1,
        patches: Tensor::random_uniform(&[n, 3, p, p], -0.5, 0.5, &mut r),
        labels: (0..n).map(|i| f64::from(u8::from(i < half))).collect(),
        tokens,
        triplets: (0..half).flat_map(|i| (half..n).map(move |j| (i, j))).collect(),
    };
    let opts = GradCheckOptions { max_coords_per_param: Some(10), ..Default::default() };
    grad_check(&store, opts, |g, s| Ok(net.domain_loss(g, s, &batch)?.total))
}

fn gpgnet_check() -> Result<GradCheckReport> {
    let cfg = GpgConfig {
        input_width: 32,
        input_height: 16,
        encoder_channels: vec![2, 3, 4, 4],
        vocab_size: 6,
        use_target: true,
        use_language: true,
    };
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let net = GpgNet::build(cfg, &mut store, &mut r)?;
    randomize(&mut store, |name| name.ends_with("bias"), 0.5, &mut r);
    let frames = Tensor::random_uniform(&[2, 3, 16, 32], -2.0, 2.0, &mut r);
    let targets = Tensor::random_uniform(&[2, 3, 16, 32], -2.0, 2.0, &mut r);
    let masks: Vec<f64> = (0..2 * 16 * 32).map(|i| f64::from(u8::from(i % 7 < 3))).collect();
    let toks: Vec<Vec<usize>> = (0..2)
        .map(|k| {
            let mut t: Vec<usize> = (0..5).map(|i| 2 + (i + 2 * k) % 4).collect();
            t.resize(MAX_TOKENS, 0);
            t
        })
        .collect();
    let opts = GradCheckOptions { max_coords_per_param: Some(12), ..Default::default() };
    grad_check(&store, opts, |g, s| {
        let f = g.input(frames.clone());
        let t = g.input(targets.clone());
        let p = net.forward(g, s, f, t, &toks)?;
        g.bce(p, &masks, true)
    })
}

/// Runs every gradient oracle: each layer kind, the sentence encoder, graph
/// enhancement under both normalizations, the full proposal-network loss and
/// the attention network.
pub fn gradient_suite() -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();
    let mut push = |name: String, report: GradCheckReport| out.push(OracleResult { name, report });
    for (i, (specs, shape)) in layer_cases().iter().enumerate() {
        let kinds: Vec<&str> = specs.iter().map(|s| s.kind()).collect();
        push(format!("layer/{}", kinds.join("+")), layer_check(specs, shape, i as u64)?);
    }
    push("sentence-encoder".into(), sentence_encoder_check()?);
    push("enhance-features/double".into(), enhance_check(false)?);
    push("enhance-features/single".into(), enhance_check(true)?);
    push("salnet/classification+triplet".into(), salnet_composite_check()?);
    push("gpgnet/encode+decode".into(), gpgnet_check()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_oracle_passes() {
        let results = gradient_suite().unwrap();
        assert_eq!(results.len(), layer_cases().len() + 5);
        for r in &results {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }
}
