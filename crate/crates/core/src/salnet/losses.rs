use crate::numerics::{bce_value, triplet_value, Graph, Var};
use crate::{Error, Result};

/// Summed binary cross-entropy of positive-class scores.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape("bce loss", format!("{} scores vs {} labels", p.len(), y.len())));
    }
    Ok(bce_value(p, y, false))
}

/// `Σ_i max(0, ‖v − p_i‖² − ‖v − n_i‖² + α)` with row-major `[T, D]` batches.
pub fn triplet_loss(anchor: &[f64], pos: &[f64], neg: &[f64], alpha: f64) -> Result<f64> {
    let d = anchor.len();
    if d == 0 || pos.len() != neg.len() || pos.len() % d != 0 {
        return Err(Error::shape(
            "triplet loss",
            format!("anchor {d}, positives {}, negatives {}", pos.len(), neg.len()),
        ));
    }
    Ok(triplet_value(anchor, pos, neg, d, alpha))
}

pub fn total_loss(classification: f64, triplet: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    Ok(classification + lambda * triplet)
}

/// `L_c + λ·L_t` on the tape.
pub fn total_loss_var(g: &mut Graph, classification: Var, triplet: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    let weighted = g.scale(triplet, lambda);
    g.add(classification, weighted)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        assert!(bce_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn bce_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..40).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..40).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let oracle: f64 = p.iter().zip(&y).map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum();
        assert!((bce_loss(&p, &y).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn triplet_boundary_and_collapse() {
        let v = [0.3, -0.2];
        let n = [1.3, -0.2];
        assert_eq!(triplet_loss(&v, &v, &n, 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&v, &n, &n, 1.0).unwrap(), 1.0);
        assert!(triplet_loss(&v, &[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn triplet_matches_per_triplet_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 5;
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..7 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n: Vec<f64> = (0..7 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..7 {
            let mut dp = 0.0;
            let mut dn = 0.0;
            for j in 0..d {
                dp += (v[j] - p[i * d + j]).powi(2);
                dn += (v[j] - n[i * d + j]).powi(2);
            }
            oracle += f64::max(0.0, dp - dn + 1.0);
        }
        assert!((triplet_loss(&v, &p, &n, 1.0).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.7, 5.0, 0.0).unwrap(), 0.7);
        assert!((total_loss(1.0, 2.0, 0.1).unwrap() - 1.2).abs() < 1e-15);
        assert!(total_loss(1.0, 2.0, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn triplet_zero_when_margin_holds(
            v in prop::collection::vec(-2.0f64..2.0, 3),
            p in prop::collection::vec(-2.0f64..2.0, 3),
            dir in prop::collection::vec(-1.0f64..1.0, 3),
            extra in 0.0f64..3.0,
        ) {
            let dp: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            // Place the negative at squared distance dp + α + extra from v.
            let r = (dp + 1.0 + extra).sqrt() + 1e-9;
            let n: Vec<f64> = v.iter().zip(&dir).map(|(a, u)| a + r * u / norm).collect();
            prop_assert_eq!(triplet_loss(&v, &p, &n, 1.0).unwrap(), 0.0);
        }

        #[test]
        fn total_is_linear_in_lambda(lc in 0.0f64..10.0, lt in 0.0f64..10.0, a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let la = total_loss(lc, lt, a).unwrap();
            let lb = total_loss(lc, lt, b).unwrap();
            prop_assert!(((la - lb) - (a - b) * lt).abs() < 1e-9);
            prop_assert!(la >= 0.0);
        }
    }
}
