//! Silhouette-based cluster-count selection and masked SLIC-style clustering.

use std::ops::RangeInclusive;

use crate::concepts::{kmeans, Points};
use crate::error::{Result, VccError};
use crate::rng::{derive_seed, tag};
use crate::segment::MaskGrid;
use crate::tensor::TensorF32;

/// Mean silhouette below this selects a single cluster.
pub const SILHOUETTE_FLOOR: f64 = 0.1;

/// Mean silhouette coefficient of a labelling; singleton clusters score 0.
pub fn mean_silhouette(points: &Points, labels: &[usize], k: usize) -> f64 {
    let n = points.len();
    let dist = distance_matrix(points);
    silhouette_from_distances(&dist, n, labels, k)
}

fn distance_matrix(points: &Points) -> Vec<f32> {
    let n = points.len();
    let mut dist = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = crate::tensor::squared_distance(points.row(i), points.row(j)).sqrt() as f32;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    dist
}

fn silhouette_from_distances(dist: &[f32], n: usize, labels: &[usize], k: usize) -> f64 {
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0f64; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = &dist[i * n..(i + 1) * n];
        for (j, &d) in row.iter().enumerate() {
            sums[labels[j]] += d as f64;
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Picks the cluster count in `k_range` maximising the mean silhouette of a
/// k-means labelling. Returns 1 when there are fewer than `2 * k_min`
/// points, when no candidate is admissible, or when the best mean
/// silhouette is below [`SILHOUETTE_FLOOR`].
pub fn choose_k_silhouette(points: &Points, k_range: RangeInclusive<usize>, seed: u64) -> Result<usize> {
    let n = points.len();
    if n == 0 {
        return Err(VccError::InvalidInput("silhouette selection on empty point set".into()));
    }
    let k_min = (*k_range.start()).max(2);
    if n < 2 * k_min {
        return Ok(1);
    }
    let dist = distance_matrix(points);
    let mut best = (1usize, f64::NEG_INFINITY);
    for k in k_min..=*k_range.end() {
        if k >= n {
            break;
        }
        let fit = kmeans(points, k, derive_seed(seed, &[tag("silhouette"), k as u64]))?;
        let score = silhouette_from_distances(&dist, n, &fit.assignments, k);
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(if best.1 < SILHOUETTE_FLOOR { 1 } else { best.0 })
}

/// Per-position l2-normalised feature vectors of the active cells of `region`.
pub(crate) fn region_features(features: &TensorF32, region: &MaskGrid) -> Result<(Vec<usize>, Points)> {
    let (c, h, w) = features
        .chw()
        .ok_or_else(|| VccError::InvalidInput(format!("expected C×H×W features, got {:?}", features.shape())))?;
    if region.height != h || region.width != w {
        return Err(VccError::InvalidInput(format!(
            "region {}×{} does not match features {h}×{w}",
            region.height, region.width
        )));
    }
    let cells: Vec<usize> = region.active_indices().collect();
    let plane = h * w;
    let mut data = Vec::with_capacity(cells.len() * c);
    for &cell in &cells {
        let start = data.len();
        data.extend((0..c).map(|ch| features.data()[ch * plane + cell]));
        normalize(&mut data[start..]);
    }
    Ok((cells, Points::new(c, data)?))
}

fn normalize(v: &mut [f32]) {
    let norm = crate::tensor::l2_norm(v);
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Clusters the active cells of `region` into `k` disjoint masks whose union is
/// the region. The distance is l2 over normalised channel features
/// concatenated with `compactness`-weighted coordinates scaled to `[0, 1]`.
/// A `k` above the active-cell count is reduced to it.
pub fn mask_slic(
    features: &TensorF32,
    region: &MaskGrid,
    k: usize,
    compactness: f32,
    seed: u64,
) -> Result<Vec<MaskGrid>> {
    let (cells, feats) = region_features(features, region)?;
    if cells.is_empty() {
        return Err(VccError::InvalidInput("mask_slic on an empty region".into()));
    }
    if k == 0 {
        return Err(VccError::InvalidK { k, n: cells.len() });
    }
    let k = k.min(cells.len());
    if k == 1 {
        return Ok(vec![region.clone()]);
    }
    let (h, w) = (region.height, region.width);
    let scale = |v: usize, extent: usize| if extent > 1 { v as f32 / (extent - 1) as f32 } else { 0.0 };
    let dim = feats.dim() + 2;
    let mut joint = Vec::with_capacity(cells.len() * dim);
    for (i, &cell) in cells.iter().enumerate() {
        joint.extend_from_slice(feats.row(i));
        joint.push(compactness * scale(cell / w, h));
        joint.push(compactness * scale(cell % w, w));
    }
    let fit = kmeans(&Points::new(dim, joint)?, k, derive_seed(seed, &[tag("maskslic")]))?;
    let mut masks = vec![MaskGrid::empty(h, w); k];
    for (&cell, &label) in cells.iter().zip(&fit.assignments) {
        masks[label].set(cell / w, cell % w, true);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn blobs(seed: u64, centers: &[[f32; 2]], per: usize, sigma: f32) -> Points {
        let mut rng = rng_for(seed, &[]);
        let mut data = Vec::new();
        for c in centers {
            for _ in 0..per {
                data.push(c[0] + sigma * rng.random_range(-1.0f32..1.0));
                data.push(c[1] + sigma * rng.random_range(-1.0f32..1.0));
            }
        }
        Points::new(2, data).unwrap()
    }

    #[test]
    fn three_blobs_select_three() {
        let p = blobs(1, &[[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]], 15, 0.5);
        assert_eq!(choose_k_silhouette(&p, 2..=6, 3).unwrap(), 3);
    }

    #[test]
    fn degenerate_inputs() {
        let two = Points::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(choose_k_silhouette(&two, 2..=6, 0).unwrap(), 1);
        let five = blobs(4, &[[0.0, 0.0]], 5, 1.0);
        let k = choose_k_silhouette(&five, 2..=2, 0).unwrap();
        assert!(k == 1 || k == 2);
        let empty = Points::new(2, vec![]).unwrap();
        assert!(choose_k_silhouette(&empty, 2..=3, 0).is_err());
        let identical = Points::from_rows(&vec![vec![0.5, 0.5]; 30]).unwrap();
        assert_eq!(choose_k_silhouette(&identical, 2..=4, 0).unwrap(), 1);
    }

    #[test]
    fn silhouette_of_perfect_split() {
        let p = Points::from_rows(&[vec![0.0], vec![0.0], vec![10.0], vec![10.0]]).unwrap();
        assert!((mean_silhouette(&p, &[0, 0, 1, 1], 2) - 1.0).abs() < 1e-12);
    }

    fn halves(a: f32, b: f32) -> TensorF32 {
        // 2 channels, 4×4, left half [a, 0] and right half [0, b] before normalisation.
        let mut data = vec![0.0f32; 32];
        for y in 0..4 {
            for x in 0..4 {
                if x < 2 {
                    data[y * 4 + x] = a;
                } else {
                    data[16 + y * 4 + x] = b;
                }
            }
        }
        TensorF32::new(vec![2, 4, 4], data).unwrap()
    }

    #[test]
    fn k_one_returns_region() {
        let region = MaskGrid::full(4, 4);
        assert_eq!(mask_slic(&halves(1.0, 2.0), &region, 1, 0.8, 0).unwrap(), vec![region]);
    }

    #[test]
    fn left_right_split_matches_exhaustive_partition() {
        let features = halves(3.0, 5.0);
        let region = MaskGrid::full(4, 4);
        let masks = mask_slic(&features, &region, 2, 1e-4, 9).unwrap();
        // Exhaustive oracle over all 2-partitions of the 16 cells, same objective.
        let (_, feats) = region_features(&features, &region).unwrap();
        let joint = |i: usize| -> Vec<f64> {
            let mut v: Vec<f64> = feats.row(i).iter().map(|&x| x as f64).collect();
            v.push(1e-4 * (i / 4) as f64 / 3.0);
            v.push(1e-4 * (i % 4) as f64 / 3.0);
            v
        };
        let rows: Vec<Vec<f64>> = (0..16).map(joint).collect();
        let cost = |bits: u32| -> f64 {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<&Vec<f64>> = (0..16).filter(|&i| (bits >> i) & 1 == side).map(|i| &rows[i]).collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
                total += members.iter().map(|m| m.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
            }
            total
        };
        let best = (1..(1u32 << 15)).min_by(|&a, &b| cost(a).partial_cmp(&cost(b)).unwrap()).unwrap();
        let oracle_left: Vec<bool> = (0..16).map(|i| (best >> i) & 1 == (best & 1)).collect();
        let left_mask = masks.iter().find(|m| m.cells()[0]).unwrap();
        assert_eq!(left_mask.cells(), oracle_left.as_slice());
        let expected: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        assert_eq!(left_mask.cells(), expected.as_slice());
    }

    #[test]
    fn partition_respects_region() {
        let mut region = MaskGrid::full(4, 4);
        for y in 0..4 {
            region.set(y, 2, false);
        }
        let masks = mask_slic(&halves(1.0, 1.0), &region, 3, 0.8, 2).unwrap();
        assert_eq!(masks.len(), 3);
        let mut covered = vec![0; 16];
        for m in &masks {
            assert!(m.active_count() > 0);
            for i in m.active_indices() {
                covered[i] += 1;
                assert_ne!(i % 4, 2);
            }
        }
        for (i, &c) in covered.iter().enumerate() {
            assert_eq!(c, usize::from(region.cells()[i]));
        }
        // k larger than the active cells is clamped.
        let mut tiny = MaskGrid::empty(4, 4);
        tiny.set(0, 0, true);
        tiny.set(3, 3, true);
        assert_eq!(mask_slic(&halves(1.0, 1.0), &tiny, 5, 0.8, 0).unwrap().len(), 2);
    }
}
