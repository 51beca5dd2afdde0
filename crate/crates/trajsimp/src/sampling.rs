//! Index sampling under importance weights.
//!
//! The simplifier retains a fixed number of points drawn without replacement
//! with probability proportional to importance. The weighted draw uses the
//! exponential-race formulation: index `i` gets the key `ln(u_i) / w_i` for a
//! uniform `u_i`, and the `m` largest keys win. This is distributed exactly
//! like removing points one at a time with probability proportional to
//! weight. Zero-weight indices only ever fill leftover slots, uniformly at
//! random among themselves.

use crate::error::{Error, Result};
use rand::Rng;

fn validate(weights_len: usize, m: usize) -> Result<()> {
    if m > weights_len {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {weights_len} indices"
        )));
    }
    Ok(())
}

/// Draws `m` distinct indices with probability proportional to their weight,
/// returned in ascending order. Weights must be finite and non-negative;
/// zero-weight indices are used only after every positive weight, chosen
/// uniformly among themselves.
pub fn weighted_indices_without_replacement(
    weights: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    validate(weights.len(), m)?;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight {w} at index {i} is not a finite non-negative number"
            )));
        }
    }
    // One uniform draw per index, in index order, keeps the selection a pure
    // function of (weights, m, rng seed). The same draw doubles as the
    // tie-break among zero-weight indices.
    let mut keyed: Vec<(f64, f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, u, i)
        })
        .collect();
    keyed.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    let mut chosen: Vec<usize> = keyed[..m].iter().map(|&(_, _, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Deterministic alternative to the weighted draw: the `m` highest-weight
/// indices, ties resolved toward the lowest index, returned ascending.
pub fn top_m_indices(weights: &[f64], m: usize) -> Result<Vec<usize>> {
    validate(weights.len(), m)?;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform draw of `m` distinct indices out of `len`, ascending.
pub fn uniform_indices_without_replacement(
    len: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    validate(len, m)?;
    let mut chosen = rand::seq::index::sample(rng, len, m).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Inclusion probabilities under sequential weighted sampling without
    /// replacement, computed by exhaustive enumeration of draw orders. The
    /// race above must be distributed identically.
    fn inclusion_probabilities(weights: &[f64], m: usize) -> Vec<f64> {
        fn recurse(
            weights: &[f64],
            remaining: Vec<usize>,
            m: usize,
            prob: f64,
            acc: &mut [f64],
        ) {
            if m == 0 {
                return;
            }
            let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
            for (pos, &i) in remaining.iter().enumerate() {
                let p = prob * weights[i] / total;
                acc[i] += p;
                let mut rest = remaining.clone();
                rest.remove(pos);
                recurse(weights, rest, m - 1, p, acc);
            }
        }
        let mut acc = vec![0.0; weights.len()];
        recurse(weights, (0..weights.len()).collect(), m, 1.0, &mut acc);
        acc
    }

    #[test]
    fn race_matches_enumerated_inclusion_probabilities() {
        let weights = [1.0, 2.0, 3.0, 0.5];
        let m = 2;
        let expected = inclusion_probabilities(&weights, m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 60_000;
        let mut counts = vec![0usize; weights.len()];
        for _ in 0..trials {
            for i in weighted_indices_without_replacement(&weights, m, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for i in 0..weights.len() {
            let freq = counts[i] as f64 / trials as f64;
            let sigma = (expected[i] * (1.0 - expected[i]) / trials as f64).sqrt();
            assert!(
                (freq - expected[i]).abs() < 4.0 * sigma.max(1e-3),
                "index {i}: freq {freq} vs expected {}",
                expected[i]
            );
        }
    }

    #[test]
    fn zero_weights_fill_last_and_uniformly() {
        let weights = [0.0, 0.0, 0.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 30_000;
        let mut counts = vec![0usize; 4];
        for _ in 0..trials {
            let picked = weighted_indices_without_replacement(&weights, 2, &mut rng).unwrap();
            assert!(picked.contains(&3), "positive weight always wins a slot");
            for i in picked {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[3], trials);
        for i in 0..3 {
            let freq = counts[i] as f64 / trials as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "index {i}: {freq}");
        }
    }

    #[test]
    fn all_zero_weights_degenerate_to_uniform() {
        let weights = [0.0; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 30_000;
        let mut counts = vec![0usize; 5];
        for _ in 0..trials {
            for i in weighted_indices_without_replacement(&weights, 2, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.4).abs() < 0.02, "index {i}: {freq}");
        }
    }

    #[test]
    fn weighted_draw_is_deterministic_under_seed() {
        let weights: Vec<f64> = (0..40).map(|i| (i % 7) as f64 + 0.1).collect();
        let a = weighted_indices_without_replacement(
            &weights,
            15,
            &mut ChaCha8Rng::seed_from_u64(77),
        )
        .unwrap();
        let b = weighted_indices_without_replacement(
            &weights,
            15,
            &mut ChaCha8Rng::seed_from_u64(77),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(weighted_indices_without_replacement(&[1.0], 2, &mut rng).is_err());
        assert!(weighted_indices_without_replacement(&[1.0, -0.1], 1, &mut rng).is_err());
        assert!(weighted_indices_without_replacement(&[f64::NAN], 1, &mut rng).is_err());
        assert!(top_m_indices(&[1.0], 2).is_err());
        assert!(uniform_indices_without_replacement(3, 4, &mut rng).is_err());
    }

    #[test]
    fn top_m_breaks_ties_toward_lower_indices() {
        let weights = [0.5, 2.0, 2.0, 1.0];
        assert_eq!(top_m_indices(&weights, 1).unwrap(), vec![1]);
        assert_eq!(top_m_indices(&weights, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_m_indices(&weights, 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(top_m_indices(&weights, 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn uniform_sample_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trials = 20_000;
        let mut counts = vec![0usize; 6];
        for _ in 0..trials {
            for i in uniform_indices_without_replacement(6, 3, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.02, "index {i}: {freq}");
        }
    }
}
