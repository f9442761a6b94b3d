use rand::seq::IndexedRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VccGraph;
use crate::error::{Result, VccError};
use crate::netcore::argmax;
use crate::oracle::{spatial_dims, FeatureOracle};
use crate::rng::{rng_for, tag};
use crate::tensor::{l2_norm, TensorF32};

/// Subtracts `ε · q/‖q‖` from every spatial position of a `C×H×W` activation.
pub fn suppress_concept(activation: &TensorF32, centroid: &[f32], epsilon: f64) -> Result<TensorF32> {
    let (c, h, w) = activation
        .chw()
        .ok_or_else(|| VccError::InvalidInput(format!("suppression needs C×H×W, got {:?}", activation.shape())))?;
    if centroid.len() != c {
        return Err(VccError::InvalidInput(format!(
            "direction has {} channels, activation has {c}",
            centroid.len()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(VccError::InvalidInput(format!("negative suppression magnitude {epsilon}")));
    }
    let norm = l2_norm(centroid);
    if norm == 0.0 {
        return Err(VccError::InvalidConcept("cannot suppress a zero direction".into()));
    }
    let mut out = activation.clone();
    let plane = h * w;
    for (ch, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let shift = (epsilon * centroid[ch] as f64 / norm) as f32;
        for v in chunk {
            *v -= shift;
        }
    }
    Ok(out)
}

/// A direction to suppress at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionTarget {
    pub layer: usize,
    pub direction: Vec<f32>,
    /// Concept id, or `None` for a random direction.
    pub concept: Option<String>,
}

/// One concept chosen at random from each layer that has any.
pub fn pick_concept_targets(graph: &VccGraph, seed: u64) -> Vec<SuppressionTarget> {
    let mut rng = rng_for(seed, &[tag("suppress-pick")]);
    graph
        .layers
        .iter()
        .filter_map(|l| {
            let c = l.concepts.choose(&mut rng)?;
            Some(SuppressionTarget {
                layer: l.layer,
                direction: c.centroid.clone(),
                concept: Some(c.id.clone()),
            })
        })
        .collect()
}

/// Gaussian random directions at the given layers.
pub fn random_targets(oracle: &dyn FeatureOracle, layers: &[usize], seed: u64) -> Result<Vec<SuppressionTarget>> {
    layers
        .iter()
        .map(|&layer| {
            let (c, _, _) = spatial_dims(oracle, layer)?;
            let mut rng = rng_for(seed, &[tag("suppress-random"), layer as u64]);
            Ok(SuppressionTarget {
                layer,
                direction: (0..c).map(|_| StandardNormal.sample(&mut rng)).collect(),
                concept: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionCurve {
    pub epsilons: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
    pub targets: Vec<SuppressionTarget>,
}

/// Trapezoid area under `y` over `x` rescaled to `[0, 1]`.
pub fn trapezoid_auc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(VccError::InvalidInput("AUC needs at least two paired points".into()));
    }
    let (lo, hi) = (x[0], x[x.len() - 1]);
    if hi <= lo {
        return Err(VccError::InvalidInput("AUC grid has zero extent".into()));
    }
    Ok(x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) / (hi - lo) * (ys[0] + ys[1]) / 2.0)
        .sum())
}

/// Accuracy on `(inputs, labels)` with every target suppressed by each `ε`.
pub fn suppression_curve(
    oracle: &dyn FeatureOracle,
    inputs: &[TensorF32],
    labels: &[usize],
    targets: &[SuppressionTarget],
    epsilons: &[f64],
) -> Result<SuppressionCurve> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(VccError::InvalidInput("suppression needs one label per input".into()));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0)) || epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VccError::InvalidInput("ε grid must be nonnegative and increasing".into()));
    }
    let mut targets = targets.to_vec();
    targets.sort_by_key(|t| t.layer);
    if targets.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(VccError::InvalidInput("one suppression target per layer".into()));
    }
    let last = oracle.layer_count() - 1;
    let accuracy = epsilons
        .iter()
        .map(|&eps| {
            let correct = inputs
                .par_iter()
                .zip(labels)
                .map(|(x, &label)| {
                    let logits = match targets.first() {
                        None => oracle.logits(x)?,
                        Some(first) => {
                            let mut z = suppress_concept(&oracle.forward_to(x, first.layer)?, &first.direction, eps)?;
                            for w in targets.windows(2) {
                                z = oracle.forward_between(&z, w[0].layer, w[1].layer)?;
                                z = suppress_concept(&z, &w[1].direction, eps)?;
                            }
                            let top = targets.last().expect("nonempty").layer;
                            oracle.forward_between(&z, top, last)?.into_data()
                        }
                    };
                    Ok(usize::from(argmax(&logits) == label))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            Ok(correct as f64 / inputs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let auc = trapezoid_auc(epsilons, &accuracy)?;
    Ok(SuppressionCurve {
        epsilons: epsilons.to_vec(),
        accuracy,
        auc,
        targets,
    })
}

/// Concept and random suppression curves for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionRun {
    pub seed: u64,
    pub concept: SuppressionCurve,
    pub random: SuppressionCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSummary {
    pub epsilons: Vec<f64>,
    /// Mean over runs.
    pub concept_auc: f64,
    pub random_auc: f64,
    pub runs: Vec<SuppressionRun>,
}

/// For each of `seeds` runs, suppresses one random concept per layer and
/// random directions at the same layers, and averages the AUCs.
pub fn suppression_experiment(
    oracle: &dyn FeatureOracle,
    graph: &VccGraph,
    inputs: &[TensorF32],
    labels: &[usize],
    epsilons: &[f64],
    seeds: usize,
    seed: u64,
) -> Result<SuppressionSummary> {
    if seeds == 0 {
        return Err(VccError::InvalidInput("suppression needs at least one seed".into()));
    }
    let runs = (0..seeds as u64)
        .map(|s| {
            let run_seed = crate::rng::derive_seed(seed, &[tag("suppress"), s]);
            let concepts = pick_concept_targets(graph, run_seed);
            let layers: Vec<usize> = concepts.iter().map(|t| t.layer).collect();
            let random = random_targets(oracle, &layers, run_seed)?;
            Ok(SuppressionRun {
                seed: s,
                concept: suppression_curve(oracle, inputs, labels, &concepts, epsilons)?,
                random: suppression_curve(oracle, inputs, labels, &random, epsilons)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&SuppressionRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    Ok(SuppressionSummary {
        epsilons: epsilons.to_vec(),
        concept_auc: mean(|r| r.concept.auc),
        random_auc: mean(|r| r.random.auc),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_is_identity() {
        let a = TensorF32::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(suppress_concept(&a, &[1.0, 1.0], 0.0).unwrap(), a);
    }

    #[test]
    fn pooled_projection_drops_by_epsilon() {
        let a = TensorF32::new(vec![2, 2, 1], vec![3.0, 3.0, 4.0, 4.0]).unwrap();
        let q = [3.0f32, 4.0];
        // Pooled z = q, ε = ‖q‖ → 0.
        let s = suppress_concept(&a, &q, 5.0).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1e-6));
        let s = suppress_concept(&a, &q, 1.5).unwrap();
        let pooled = [(s.data()[0] + s.data()[1]) / 2.0, (s.data()[2] + s.data()[3]) / 2.0];
        let proj = (pooled[0] * 0.6 + pooled[1] * 0.8) as f64;
        assert!((proj - (5.0 - 1.5)).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = TensorF32::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(suppress_concept(&a, &[0.0, 0.0], 1.0), Err(VccError::InvalidConcept(_))));
        assert!(suppress_concept(&a, &[1.0], 1.0).is_err());
        assert!(suppress_concept(&a, &[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn auc_normalises_grid() {
        assert!((trapezoid_auc(&[0.0, 5.0, 10.0], &[1.0, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((trapezoid_auc(&[0.0, 2.0], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(trapezoid_auc(&[1.0], &[1.0]).is_err());
    }
}
