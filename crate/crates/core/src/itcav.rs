//! Interlayer concept sensitivities.
//!
//! A concept activation vector (CAV) is the unit normal of a logistic
//! regression separating a source concept's flattened activations from
//! random images. The sensitivity of a deeper concept to it is the rate at
//! which moving a member's shallow activation along the CAV brings its
//! pooled deep feature closer to the deeper concept centroid. An edge
//! weight is the fraction of deep members with positive sensitivity,
//! averaged over CAVs trained against disjoint random negative sets and
//! kept only when a t-test rejects chance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, VccError};
use crate::oracle::FeatureOracle;
use crate::rng::{rng_for, tag};
use crate::tensor::{dot_f32, TensorF32};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub layer: usize,
    /// Unit normal, positive on the concept side.
    pub direction: Vec<f32>,
    pub accuracy: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trains a CAV by full-batch gradient descent on the mean logistic loss
/// plus `l2/2 · ‖w‖²` (bias unpenalised), starting from zero.
///
/// The iterate always lies in the span of the examples, so the descent runs
/// on dual coefficients over the Gram matrix. This is the same sequence of
/// iterates as descending on `w` directly.
pub fn train_cav(layer: usize, pos: &[&[f32]], neg: &[&[f32]], cfg: &CavConfig) -> Result<Cav> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(VccError::InsufficientData(format!(
            "CAV training needs at least 2 examples per side, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let dim = pos[0].len();
    if dim == 0 || pos.iter().chain(neg).any(|x| x.len() != dim) {
        return Err(VccError::InvalidInput("CAV examples have inconsistent dimensions".into()));
    }
    let rows: Vec<&[f32]> = pos.iter().chain(neg).copied().collect();
    let n = rows.len();
    let y: Vec<f64> = (0..n).map(|i| if i < pos.len() { 1.0 } else { 0.0 }).collect();

    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot_f32(rows[i], rows[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }

    let mut alpha = vec![0.0f64; n];
    let mut bias = 0.0f64;
    let mut z = vec![0.0f64; n];
    let lr = cfg.learning_rate;
    for _ in 0..cfg.steps {
        let r: Vec<f64> = z.iter().zip(&y).map(|(&zi, &yi)| sigmoid(zi) - yi).collect();
        let shrink = 1.0 - lr * cfg.l2;
        for (a, ri) in alpha.iter_mut().zip(&r) {
            *a = *a * shrink - lr * ri / n as f64;
        }
        bias -= lr * r.iter().sum::<f64>() / n as f64;
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = gram[i * n..(i + 1) * n].iter().zip(&alpha).map(|(g, a)| g * a).sum::<f64>() + bias;
        }
    }

    let correct = z.iter().zip(&y).filter(|&(&zi, &yi)| (zi > 0.0) == (yi > 0.5)).count();
    let mut w = vec![0.0f64; dim];
    for (row, &a) in rows.iter().zip(&alpha) {
        for (wd, &x) in w.iter_mut().zip(row.iter()) {
            *wd += a * x as f64;
        }
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = rows
        .iter()
        .map(|r| crate::tensor::l2_norm(r))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    // Cancellation to rounding level means the two sides coincide.
    let magnitude = scale * alpha.iter().map(|a| a.abs()).sum::<f64>();
    if !norm.is_finite() || norm <= 1e-9 * magnitude {
        return Err(VccError::ZeroMargin("positive and negative examples are not separable".into()));
    }
    // Orient towards the concept side.
    let side = |set: &[&[f32]]| set.iter().map(|x| w.iter().zip(x.iter()).map(|(a, &b)| a * b as f64).sum::<f64>()).sum::<f64>() / set.len() as f64;
    let sign = if side(pos) >= side(neg) { 1.0 } else { -1.0 };
    Ok(Cav {
        layer,
        direction: w.iter().map(|v| (sign * v / norm) as f32).collect(),
        accuracy: correct as f64 / n as f64,
    })
}

/// Which sign the sensitivity carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// `S = −⟨∇d, V⟩`: positive when moving along the CAV reduces the distance to the centroid.
    #[default]
    Negated,
    /// `S = ⟨∇d, V⟩`.
    Literal,
}

/// Sensitivity from a precomputed distance gradient.
pub fn directional_sensitivity(grad: &[f32], direction: &[f32], sign: SignConvention) -> f64 {
    let d = dot_f32(grad, direction);
    match sign {
        SignConvention::Negated => -d,
        SignConvention::Literal => d,
    }
}

/// Sensitivity of the layer-`l` concept with centroid `centroid` to `cav`
/// for the model input `x`.
pub fn sensitivity(
    oracle: &dyn FeatureOracle,
    x: &TensorF32,
    l: usize,
    centroid: &[f32],
    cav: &Cav,
    sign: SignConvention,
) -> Result<f64> {
    let j = cav.layer;
    let a = oracle.forward_to(x, j)?;
    check_dim(&a, cav)?;
    let g = oracle.distance_grad(&a, j, l, centroid)?;
    Ok(directional_sensitivity(g.data(), &cav.direction, sign))
}

fn check_dim(a: &TensorF32, cav: &Cav) -> Result<()> {
    if a.len() != cav.direction.len() {
        return Err(VccError::InvalidInput(format!(
            "CAV of dimension {} does not match activation of {} values",
            cav.direction.len(),
            a.len()
        )));
    }
    Ok(())
}

/// Fraction of strictly positive values.
pub fn positive_fraction(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(VccError::InvalidInput("no sensitivities to score".into()));
    }
    Ok(values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len() as f64)
}

/// Distance gradients at layer `j` for each deep member input.
pub fn member_gradients(
    oracle: &dyn FeatureOracle,
    inputs: &[TensorF32],
    j: usize,
    l: usize,
    centroid: &[f32],
) -> Result<Vec<TensorF32>> {
    if j >= l {
        return Err(VccError::Ordering { from: j, to: l });
    }
    inputs
        .par_iter()
        .map(|x| {
            let a = oracle.forward_to(x, j)?;
            oracle.distance_grad(&a, j, l, centroid)
        })
        .collect()
}

/// Gradients of logit `class` at layer `j` for each input image.
pub fn class_gradients(oracle: &dyn FeatureOracle, inputs: &[TensorF32], j: usize, class: usize) -> Result<Vec<TensorF32>> {
    inputs
        .par_iter()
        .map(|x| {
            let a = oracle.forward_to(x, j)?;
            oracle.logit_grad(&a, j, class)
        })
        .collect()
}

/// Score of one CAV against precomputed gradients.
pub fn score_gradients(cav: &Cav, grads: &[TensorF32], sign: SignConvention) -> Result<f64> {
    let s: Vec<f64> = grads
        .iter()
        .map(|g| {
            check_dim(g, cav)?;
            Ok(directional_sensitivity(g.data(), &cav.direction, sign))
        })
        .collect::<Result<_>>()?;
    positive_fraction(&s)
}

/// How the per-run scores are tested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullProtocol {
    /// One-sample t-test of the run scores against 0.5.
    #[default]
    MeanVsHalf,
    /// Welch t-test of the run scores against scores of CAVs trained
    /// between two random sets.
    RandomCavs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub runs: usize,
    pub alpha: f64,
    pub negatives_per_run: usize,
    pub protocol: NullProtocol,
    pub sign: SignConvention,
    pub cav: CavConfig,
    pub seed: u64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            alpha: 0.05,
            negatives_per_run: 10,
            protocol: NullProtocol::MeanVsHalf,
            sign: SignConvention::Negated,
            cav: CavConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub src: String,
    pub dst: String,
    /// Mean of the run scores.
    pub weight: f64,
    pub p_value: f64,
    pub runs: Vec<f64>,
    pub significant: bool,
}

/// `sets` disjoint groups of `per_set` pool indices, drawn by a seeded shuffle.
pub fn random_sets(pool_len: usize, sets: usize, per_set: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let needed = sets * per_set;
    if needed > pool_len || per_set == 0 {
        return Err(VccError::InsufficientRandoms {
            needed,
            available: pool_len,
        });
    }
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(&mut rng_for(seed, &[tag("random-sets")]));
    Ok(idx[..needed].chunks(per_set).map(<[usize]>::to_vec).collect())
}

/// One CAV per run, each against its own disjoint negative set.
pub fn run_cavs(layer: usize, pos: &[&[f32]], pool: &[&[f32]], cfg: &EdgeConfig, seed: u64) -> Result<Vec<Cav>> {
    let sets = random_sets(pool.len(), cfg.runs, cfg.negatives_per_run, seed)?;
    sets.par_iter()
        .map(|set| {
            let neg: Vec<&[f32]> = set.iter().map(|&i| pool[i]).collect();
            train_cav(layer, pos, &neg, &cfg.cav)
        })
        .collect()
}

/// CAVs separating one random set from another, for the random-CAV null.
pub fn null_cavs(layer: usize, pool: &[&[f32]], cfg: &EdgeConfig, seed: u64) -> Result<Vec<Cav>> {
    let sets = random_sets(pool.len(), 2 * cfg.runs, cfg.negatives_per_run, seed)?;
    sets.par_chunks(2)
        .map(|pair| {
            let pos: Vec<&[f32]> = pair[0].iter().map(|&i| pool[i]).collect();
            let neg: Vec<&[f32]> = pair[1].iter().map(|&i| pool[i]).collect();
            train_cav(layer, &pos, &neg, &cfg.cav)
        })
        .collect()
}

/// Tests run scores and packages the edge.
pub fn edge_from_scores(src: &str, dst: &str, runs: Vec<f64>, null: Option<&[f64]>, alpha: f64) -> Result<EdgeStat> {
    let p_value = match null {
        None => ttest_two_sided(&runs, 0.5)?,
        Some(null) => welch_ttest(&runs, null)?,
    };
    let weight = runs.iter().sum::<f64>() / runs.len() as f64;
    Ok(EdgeStat {
        src: src.to_string(),
        dst: dst.to_string(),
        weight,
        p_value,
        runs,
        significant: p_value <= alpha,
    })
}

/// A shallow concept: its id, layer and flattened member activations.
#[derive(Debug, Clone, Copy)]
pub struct SourceConcept<'a> {
    pub id: &'a str,
    pub layer: usize,
    pub activations: &'a [&'a [f32]],
}

/// A deeper concept: its id, layer, pooled centroid and member model inputs.
#[derive(Debug, Clone, Copy)]
pub struct TargetConcept<'a> {
    pub id: &'a str,
    pub layer: usize,
    pub centroid: &'a [f32],
    pub inputs: &'a [TensorF32],
}

/// Single-run ITCAV score of `dst` with respect to `src` against `negatives`.
pub fn itcav_score(
    oracle: &dyn FeatureOracle,
    src: SourceConcept<'_>,
    dst: TargetConcept<'_>,
    negatives: &[&[f32]],
    cfg: &EdgeConfig,
) -> Result<f64> {
    if dst.inputs.is_empty() {
        return Err(VccError::InvalidInput(format!("concept {} has no members", dst.id)));
    }
    let cav = train_cav(src.layer, src.activations, negatives, &cfg.cav)?;
    let grads = member_gradients(oracle, dst.inputs, src.layer, dst.layer, dst.centroid)?;
    score_gradients(&cav, &grads, cfg.sign)
}

/// The per-run CAVs of a source concept. Seeded by the concept id so every
/// edge leaving the concept sees the same CAVs.
pub fn source_cavs(src: SourceConcept<'_>, pool: &[&[f32]], cfg: &EdgeConfig) -> Result<Vec<Cav>> {
    let seed = crate::rng::derive_seed(cfg.seed, &[tag("itcav"), tag(src.id)]);
    run_cavs(src.layer, src.activations, pool, cfg, seed)
}

/// Random-vs-random CAVs of a layer when the protocol needs them.
pub fn layer_null_cavs(layer: usize, pool: &[&[f32]], cfg: &EdgeConfig) -> Result<Option<Vec<Cav>>> {
    match cfg.protocol {
        NullProtocol::MeanVsHalf => Ok(None),
        NullProtocol::RandomCavs => {
            let seed = crate::rng::derive_seed(cfg.seed, &[tag("null"), layer as u64]);
            null_cavs(layer, pool, cfg, seed).map(Some)
        }
    }
}

/// Scores precomputed CAVs against precomputed gradients and tests the result.
pub fn edge_from_cavs(
    src: &str,
    dst: &str,
    cavs: &[Cav],
    null: Option<&[Cav]>,
    grads: &[TensorF32],
    sign: SignConvention,
    alpha: f64,
) -> Result<EdgeStat> {
    let score = |set: &[Cav]| set.iter().map(|c| score_gradients(c, grads, sign)).collect::<Result<Vec<_>>>();
    let scores = score(cavs)?;
    let null = null.map(score).transpose()?;
    edge_from_scores(src, dst, scores, null.as_deref(), alpha)
}

/// Full randomised edge test between two adjacent-layer concepts.
/// `pool` holds flattened source-layer activations of the random images.
pub fn itcav_edge(
    oracle: &dyn FeatureOracle,
    src: SourceConcept<'_>,
    dst: TargetConcept<'_>,
    pool: &[&[f32]],
    cfg: &EdgeConfig,
) -> Result<EdgeStat> {
    if dst.inputs.is_empty() {
        return Err(VccError::InvalidInput(format!("concept {} has no members", dst.id)));
    }
    let grads = member_gradients(oracle, dst.inputs, src.layer, dst.layer, dst.centroid)?;
    let cavs = source_cavs(src, pool, cfg)?;
    let null = layer_null_cavs(src.layer, pool, cfg)?;
    edge_from_cavs(src.id, dst.id, &cavs, null.as_deref(), &grads, cfg.sign, cfg.alpha)
}

/// Class node id used for edges into the logit.
pub fn class_node(class: usize) -> String {
    format!("class_{class}")
}

/// Edge from a deepest-layer concept to a class logit: the score is the
/// fraction of class images whose logit increases along the CAV.
pub fn tcav_class_edge(
    oracle: &dyn FeatureOracle,
    src: SourceConcept<'_>,
    class: usize,
    class_inputs: &[TensorF32],
    pool: &[&[f32]],
    cfg: &EdgeConfig,
) -> Result<EdgeStat> {
    if class_inputs.is_empty() {
        return Err(VccError::InvalidInput(format!("no images for class {class}")));
    }
    let grads = class_gradients(oracle, class_inputs, src.layer, class)?;
    let cavs = source_cavs(src, pool, cfg)?;
    let null = layer_null_cavs(src.layer, pool, cfg)?;
    edge_from_cavs(
        src.id,
        &class_node(class),
        &cavs,
        null.as_deref(),
        &grads,
        SignConvention::Literal,
        cfg.alpha,
    )
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Two-sided one-sample t-test p-value. Zero variance gives 1 when the mean
/// equals `mu0` and 0 otherwise.
pub fn ttest_two_sided(samples: &[f64], mu0: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(VccError::InsufficientData(format!("t-test needs 2 samples, got {}", samples.len())));
    }
    let (mean, var) = mean_var(samples);
    if var == 0.0 {
        return Ok(if mean == mu0 { 1.0 } else { 0.0 });
    }
    let t = (mean - mu0) / (var / samples.len() as f64).sqrt();
    Ok(two_sided_p(t, samples.len() as f64 - 1.0))
}

/// Two-sided Welch t-test p-value for a difference in means.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VccError::InsufficientData("Welch test needs 2 samples per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(two_sided_p(t, df))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn one_dimensional_orientation() {
        let pos = vec![vec![1.1f32], vec![0.9], vec![1.0]];
        let neg = vec![vec![-1.0f32], vec![-0.9], vec![-1.1]];
        let cav = train_cav(0, &refs(&pos), &refs(&neg), &CavConfig::default()).unwrap();
        assert_eq!(cav.direction, vec![1.0]);
        assert_eq!(cav.accuracy, 1.0);
    }

    #[test]
    fn separable_2d_is_perfect() {
        let pos: Vec<Vec<f32>> = (0..10).map(|i| vec![2.0 + i as f32 * 0.1, 1.0 - i as f32 * 0.05]).collect();
        let neg: Vec<Vec<f32>> = (0..10).map(|i| vec![-1.0 + i as f32 * 0.07, -2.0 + i as f32 * 0.1]).collect();
        let cav = train_cav(2, &refs(&pos), &refs(&neg), &CavConfig::default()).unwrap();
        assert_eq!(cav.accuracy, 1.0);
        let norm: f64 = cav.direction.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_sets_have_no_margin() {
        let same = vec![vec![1.0f32, 2.0], vec![3.0, -1.0]];
        assert!(matches!(
            train_cav(0, &refs(&same), &refs(&same), &CavConfig::default()),
            Err(VccError::ZeroMargin(_))
        ));
        assert!(matches!(
            train_cav(0, &refs(&same[..1]), &refs(&same), &CavConfig::default()),
            Err(VccError::InsufficientData(_))
        ));
    }

    #[test]
    fn sign_conventions() {
        let g = [1.0f32, -2.0];
        let v = [0.6f32, 0.8];
        let lit = directional_sensitivity(&g, &v, SignConvention::Literal);
        assert!((lit - (0.6 - 1.6)).abs() < 1e-6);
        assert_eq!(directional_sensitivity(&g, &v, SignConvention::Negated), -lit);
    }

    #[test]
    fn positive_fraction_is_strict() {
        assert_eq!(positive_fraction(&[1.0, 0.0, -1.0, 2.0]).unwrap(), 0.5);
        assert!(positive_fraction(&[]).is_err());
    }

    #[test]
    fn ttest_reference_values() {
        // Frozen from an independent statistics package.
        let p = ttest_two_sided(&[0.8, 0.75, 0.9, 0.85, 0.7], 0.5).unwrap();
        assert!((p - 0.0010575646158306863).abs() < 1e-9, "{p}");
        let p = ttest_two_sided(&[0.55, 0.45, 0.6, 0.52, 0.49, 0.51], 0.5).unwrap();
        assert!((p - 0.3841421963848535).abs() < 1e-9, "{p}");
        let p = welch_ttest(&[0.8, 0.75, 0.9, 0.85, 0.7], &[0.5, 0.4, 0.62, 0.55, 0.45, 0.48]).unwrap();
        assert!((p - 0.00016824550569779438).abs() < 1e-9, "{p}");
        let p = welch_ttest(&[0.3, 0.35, 0.2], &[0.5, 0.4, 0.62, 0.55]).unwrap();
        assert!((p - 0.01515586730906065).abs() < 1e-9, "{p}");
    }

    #[test]
    fn ttest_degenerate_rules() {
        assert_eq!(ttest_two_sided(&[0.5; 20], 0.5).unwrap(), 1.0);
        assert_eq!(ttest_two_sided(&[1.0; 20], 0.5).unwrap(), 0.0);
        assert!(ttest_two_sided(&[1.0], 0.5).is_err());
        let e = edge_from_scores("a", "b", vec![1.0; 20], None, 0.05).unwrap();
        assert!(e.significant);
        assert_eq!(e.weight, 1.0);
        let e = edge_from_scores("a", "b", vec![0.5; 20], None, 0.05).unwrap();
        assert!(!e.significant);
        assert_eq!(e.p_value, 1.0);
    }

    #[test]
    fn random_sets_are_disjoint() {
        let sets = random_sets(50, 4, 10, 3).unwrap();
        assert_eq!(sets.len(), 4);
        let mut all: Vec<usize> = sets.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40);
        assert_eq!(sets, random_sets(50, 4, 10, 3).unwrap());
        assert!(matches!(
            random_sets(39, 4, 10, 3),
            Err(VccError::InsufficientRandoms { needed: 40, available: 39 })
        ));
    }
}
