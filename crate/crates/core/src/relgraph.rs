//! Relation graph over proposal features and the graph-convolution stack that
//! propagates features along it.
//!
//! Similarities are negative Euclidean distances. Each row of the affinity
//! matrix is a softmax over the other nodes (diagonal zero), and the
//! propagation matrix is a second full-row softmax of that affinity.

use rand::Rng;

use crate::numerics::{kaiming_uniform, kernels, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

fn check_square(m: &Tensor, context: &str) -> Result<usize> {
    if m.ndim() != 2 || m.dim(0) != m.dim(1) {
        return Err(Error::shape(context, format!("expected a square matrix, got {:?}", m.shape())));
    }
    Ok(m.dim(0))
}

/// `S_ij = −‖x_i − x_j‖₂` for the rows of `x [n, k]`.
pub fn pairwise_similarity(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("pairwise similarity", format!("{:?}", x.shape())));
    }
    let (n, k) = (x.dim(0), x.dim(1));
    if n < 2 {
        return Err(Error::InvalidArgument(format!("relation graph needs at least 2 nodes, got {n}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("node features".into()));
    }
    Tensor::new(vec![n, n], kernels::pairwise_neg_distance(x.data(), n, k))
}

/// Row softmax over off-diagonal entries; the diagonal is zero.
pub fn affinity_matrix(similarity: &Tensor) -> Result<Tensor> {
    let n = check_square(similarity, "affinity")?;
    if n < 2 {
        return Err(Error::InvalidArgument("affinity needs at least 2 nodes".into()));
    }
    Tensor::new(vec![n, n], kernels::offdiag_softmax(similarity.data(), n))
}

/// Full row softmax of the affinity matrix.
pub fn normalize_graph(affinity: &Tensor) -> Result<Tensor> {
    let n = check_square(affinity, "normalize graph")?;
    Tensor::new(vec![n, n], kernels::softmax_rows(affinity.data(), n))
}

/// One propagation step `G · X · W`, rectified unless `last`.
pub fn gcn_layer(propagation: &Tensor, features: &Tensor, weight: &Tensor, last: bool) -> Result<Tensor> {
    let n = check_square(propagation, "gcn layer")?;
    if features.ndim() != 2 || weight.ndim() != 2 || features.dim(0) != n || features.dim(1) != weight.dim(0) {
        return Err(Error::shape(
            "gcn layer",
            format!("G {:?}, X {:?}, W {:?}", propagation.shape(), features.shape(), weight.shape()),
        ));
    }
    let (k, c) = (weight.dim(0), weight.dim(1));
    let mut xw = vec![0.0; n * c];
    kernels::gemm(n, k, c, features.data(), false, weight.data(), false, 0.0, &mut xw);
    let mut out = vec![0.0; n * c];
    kernels::gemm(n, n, c, propagation.data(), false, &xw, false, 0.0, &mut out);
    if !last {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Tensor::new(vec![n, c], out)
}

/// Stacked graph convolutions with trainable `[k_in, k_out]` weights and no bias.
#[derive(Clone, Debug)]
pub struct GcnStack {
    weights: Vec<ParamId>,
    single_normalization: bool,
}

impl GcnStack {
    /// Registers `depth` layers of width `width` under `{name}.{i}.weight`.
    pub fn build<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        depth: usize,
        single_normalization: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("gcn depth must be at least 1".into()));
        }
        let weights = (0..depth)
            .map(|i| store.add(format!("{name}.{i}.weight"), kaiming_uniform(&[width, width], width, rng)))
            .collect::<Result<_>>()?;
        Ok(Self { weights, single_normalization })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(*self.weights.last().expect("depth >= 1")).dim(1)
    }

    /// The propagation matrix for `x [n, k]` on the tape.
    pub fn propagation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.pairwise_neg_distance(x)?;
        let w = g.offdiag_softmax(s)?;
        if self.single_normalization {
            Ok(w)
        } else {
            g.softmax_rows(w)
        }
    }

    /// `[x ‖ Z]` where `Z` is the output of the last graph convolution.
    pub fn enhance(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::shape("enhance features", format!("need [n >= 2, k], got {shape:?}")));
        }
        let prop = self.propagation(g, x)?;
        let mut z = x;
        for (i, &wid) in self.weights.iter().enumerate() {
            let w = g.param(store, wid);
            let zw = g.matmul(z, w)?;
            z = g.matmul(prop, zw)?;
            if i + 1 < self.weights.len() {
                z = g.relu(z);
            }
        }
        g.concat(&[x, z], 1)
    }

    /// Inference-only convenience around [`GcnStack::enhance`].
    pub fn enhance_features(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.enhance(&mut g, store, xv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn oracle_distance(x: &Tensor) -> Vec<Vec<f64>> {
        let n = x.dim(0);
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..x.dim(1) {
                    let d = x.at(i, c) - x.at(j, c);
                    acc += d * d;
                }
                out[i][j] = -acc.sqrt();
            }
        }
        out
    }

    fn oracle_affinity(s: &Tensor) -> Vec<Vec<f64>> {
        let n = s.dim(0);
        (0..n)
            .map(|i| {
                let denom: f64 = (0..n).filter(|&j| j != i).map(|j| s.at(i, j).exp()).sum();
                (0..n)
                    .map(|j| if i == j { 0.0 } else { s.at(i, j).exp() / denom })
                    .collect()
            })
            .collect()
    }

    fn oracle_softmax(w: &Tensor) -> Vec<Vec<f64>> {
        let n = w.dim(0);
        (0..n)
            .map(|i| {
                let denom: f64 = (0..n).map(|j| w.at(i, j).exp()).sum();
                (0..n).map(|j| w.at(i, j).exp() / denom).collect()
            })
            .collect()
    }

    fn oracle_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at(i, l) * b.at(l, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn similarity_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(pairwise_similarity(&same).unwrap().data().iter().all(|&v| v == 0.0));
        let tri = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_similarity(&tri).unwrap().at(0, 1), -5.0);
        assert!(pairwise_similarity(&Tensor::zeros(&[1, 3])).is_err());

        let x = Tensor::random_normal(&[5, 8], 1.0, &mut rng(1));
        let s = pairwise_similarity(&x).unwrap();
        let o = oracle_distance(&x);
        for i in 0..5 {
            for j in 0..5 {
                assert!((s.at(i, j) - o[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_examples() {
        let s = Tensor::full(&[3, 3], -2.0);
        let w = affinity_matrix(&s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.at(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
        let w2 = affinity_matrix(&Tensor::random_normal(&[2, 2], 1.0, &mut rng(0))).unwrap();
        assert_eq!(w2.data(), &[0.0, 1.0, 1.0, 0.0]);

        let s6 = Tensor::random_normal(&[6, 6], 2.0, &mut rng(2));
        let w6 = affinity_matrix(&s6).unwrap();
        let o = oracle_affinity(&s6);
        for i in 0..6 {
            for j in 0..6 {
                assert!((w6.at(i, j) - o[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let g = normalize_graph(&Tensor::zeros(&[4, 4])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.25));
        let w = Tensor::random_normal(&[6, 6], 1.0, &mut rng(3));
        let g = normalize_graph(&w).unwrap();
        let o = oracle_softmax(&w);
        for i in 0..6 {
            assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..6 {
                assert!((g.at(i, j) - o[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_layer_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![0.5, 0.0]]).unwrap();
        let z = gcn_layer(&Tensor::identity(3), &x, &Tensor::identity(2), false).unwrap();
        assert_eq!(z, x);

        let g = Tensor::full(&[2, 2], 0.5);
        let xp = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let z = gcn_layer(&g, &xp, &Tensor::identity(1), true).unwrap();
        assert_eq!(z.data(), &[3.0, 3.0]);

        let mut r = rng(4);
        let g = Tensor::random_normal(&[7, 7], 1.0, &mut r);
        let xp = Tensor::random_normal(&[7, 5], 1.0, &mut r);
        let w = Tensor::random_normal(&[5, 3], 1.0, &mut r);
        let z = gcn_layer(&g, &xp, &w, true).unwrap();
        let expected = oracle_matmul(&oracle_matmul(&g, &xp), &w);
        assert!(z.max_abs_diff(&expected) < 1e-10);
        assert!(gcn_layer(&g, &xp, &Tensor::zeros(&[4, 3]), true).is_err());
    }

    #[test]
    fn zero_weight_stack_appends_zeros() {
        let mut store = ParamStore::new();
        let stack = GcnStack::build("gcn", 8, 1, false, &mut store, &mut rng(0)).unwrap();
        *store.get_mut(stack.weights()[0]) = Tensor::zeros(&[8, 8]);
        let x = Tensor::random_normal(&[5, 8], 1.0, &mut rng(1));
        let out = stack.enhance_features(&store, &x).unwrap();
        assert_eq!(out.shape(), &[5, 16]);
        for i in 0..5 {
            assert_eq!(&out.row(i)[..8], x.row(i));
            assert!(out.row(i)[8..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stack_matches_value_level_composition() {
        let mut store = ParamStore::new();
        let stack = GcnStack::build("gcn", 4, 3, false, &mut store, &mut rng(7)).unwrap();
        let x = Tensor::random_normal(&[6, 4], 1.0, &mut rng(8));
        let prop = normalize_graph(&affinity_matrix(&pairwise_similarity(&x).unwrap()).unwrap()).unwrap();
        let mut z = x.clone();
        for (i, &w) in stack.weights().iter().enumerate() {
            z = gcn_layer(&prop, &z, store.get(w), i == 2).unwrap();
        }
        let out = stack.enhance_features(&store, &x).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!((out.at(i, 4 + j) - z.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enhance_passes_grad_check() {
        for single in [false, true] {
            let mut store = ParamStore::new();
            let mut r = rng(11);
            let stack = GcnStack::build("gcn", 4, 3, single, &mut store, &mut r).unwrap();
            let x = store.add("x", Tensor::random_normal(&[5, 4], 1.0, &mut r)).unwrap();
            let weights = Tensor::random_normal(&[5 * 8], 1.0, &mut r);
            let report = grad_check(&store, GradCheckOptions::default(), |g, s| {
                let xv = g.param(s, x);
                let y = stack.enhance(g, s, xv)?;
                g.weighted_sum(y, weights.clone())
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn propagation_rows_are_stochastic() {
        for n in [2, 5, 32, 50] {
            let x = Tensor::random_normal(&[n, 6], 1.0, &mut rng(n as u64));
            let g = normalize_graph(&affinity_matrix(&pairwise_similarity(&x).unwrap()).unwrap()).unwrap();
            for i in 0..n {
                assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(g.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    proptest! {
        #[test]
        fn enhance_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let stack = GcnStack::build("gcn", 3, 3, false, &mut store, &mut r).unwrap();
            let x = Tensor::random_normal(&[n, 3], 1.0, &mut r);
            let perm: Vec<usize> = (0..n).rev().collect();
            let px = x.select_leading(&perm);
            let out = stack.enhance_features(&store, &x).unwrap();
            let pout = stack.enhance_features(&store, &px).unwrap();
            prop_assert!(pout.max_abs_diff(&out.select_leading(&perm)) < 1e-10);
        }

        #[test]
        fn duplicate_node_keeps_original_similarities(seed in any::<u64>(), n in 2usize..8, dup in 0usize..8) {
            let x = Tensor::random_normal(&[n, 4], 1.0, &mut rng(seed));
            let mut idx: Vec<usize> = (0..n).collect();
            idx.push(dup % n);
            let s = pairwise_similarity(&x).unwrap();
            let s2 = pairwise_similarity(&x.select_leading(&idx)).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(s.at(i, j), s2.at(i, j));
                }
            }
        }
    }
}
