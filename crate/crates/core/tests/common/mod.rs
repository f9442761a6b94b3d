//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcc_core::itcav::{itcav_score, EdgeConfig, SourceConcept, TargetConcept};
use vcc_core::netcore::{Architecture, LayerParams, LayerSpec, LayeredModel};
use vcc_core::tensor::TensorF32;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- clustering ----

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares of a labelling, centroids at the means.
pub fn wcss(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    points.iter().zip(labels).map(|(p, &l)| sq(p, &means[l])).sum()
}

/// Calls `f(labels, blocks)` for every set partition, as restricted growth strings.
pub fn for_each_partition(n: usize, max_blocks: usize, f: &mut impl FnMut(&[usize], usize)) {
    fn rec(i: usize, labels: &mut Vec<usize>, blocks: usize, max: usize, f: &mut impl FnMut(&[usize], usize)) {
        if i == labels.len() {
            f(labels, blocks);
            return;
        }
        for b in 0..=blocks.min(max - 1) {
            labels[i] = b;
            rec(i + 1, labels, blocks.max(b + 1), max, f);
        }
    }
    let mut labels = vec![0; n];
    rec(0, &mut labels, 0, max_blocks, f);
}

/// Best labelling into exactly `k` nonempty clusters for each `k ≤ max_k`.
pub fn exhaustive_optima(points: &[Vec<f64>], max_k: usize) -> Vec<Option<(f64, Vec<usize>)>> {
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; max_k + 1];
    for_each_partition(points.len(), max_k, &mut |labels, blocks| {
        let v = wcss(points, labels, blocks);
        if best[blocks].as_ref().is_none_or(|(b, _)| v < *b) {
            best[blocks] = Some((v, labels.to_vec()));
        }
    });
    best
}

/// Mean silhouette with Euclidean distances; singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sum[labels[j]] += sq(&points[i], &points[j]).sqrt();
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let d = a.max(b);
        if d > 0.0 {
            total += (b - a) / d;
        }
    }
    total / n as f64
}

/// Three isotropic blobs with `sizes[i]` points each, far apart relative to their spread.
pub fn three_blobs(sizes: [usize; 3], seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let centres = [[0.0, 0.0], [10.0, 1.0], [4.0, 9.0]];
    let mut out = Vec::new();
    for (c, &n) in centres.iter().zip(&sizes) {
        for _ in 0..n {
            out.push(vec![c[0] + r.random_range(-0.5..0.5), c[1] + r.random_range(-0.5..0.5)]);
        }
    }
    out
}

// ---- logistic regression ----

/// Plain full-batch gradient descent on mean logistic loss plus
/// `l2/2 · ‖w‖²`, from zero, returning `(w, b)`.
pub fn logistic_gd(pos: &[Vec<f64>], neg: &[Vec<f64>], steps: usize, lr: f64, l2: f64) -> (Vec<f64>, f64) {
    let dim = pos[0].len();
    let data: Vec<(&Vec<f64>, f64)> = pos.iter().map(|x| (x, 1.0)).chain(neg.iter().map(|x| (x, 0.0))).collect();
    let n = data.len() as f64;
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..steps {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &data {
            let z: f64 = w.iter().zip(x.iter()).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += r * v / n;
            }
            gb += r / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g + l2 * *wi);
        }
        b -= lr * gb;
    }
    (w, b)
}

// ---- linear chain ----

pub fn conv1x1(cin: usize, cout: usize, weight: Vec<f32>, bias: Vec<f32>) -> (LayerSpec, LayerParams) {
    assert_eq!(weight.len(), cin * cout);
    (
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
        LayerParams { weight, bias },
    )
}

/// Input `C0×S×S`, then 1×1 conv `A` (layer 0), 1×1 conv `W` (layer 1),
/// global average pooling (layer 2) and a dense head `H` (layer 3).
/// Every map is affine, so gradients have closed forms.
pub struct LinearChain {
    pub model: LayeredModel,
    pub a: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub w_bias: Vec<f64>,
    pub head: Vec<Vec<f64>>,
    pub side: usize,
}

pub fn linear_chain(c0: usize, c1: usize, c2: usize, classes: usize, side: usize, seed: u64) -> LinearChain {
    let mut r = rng(seed);
    let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| r.random_range(-1.0f32..1.0) as f64).collect())
            .collect()
    };
    let a = mat(c1, c0);
    let w = mat(c2, c1);
    let head = mat(classes, c2);
    let w_bias: Vec<f64> = mat(1, c2).remove(0);
    let a_bias: Vec<f64> = mat(1, c1).remove(0);
    let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().map(|&v| v as f32).collect::<Vec<f32>>();
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let layers = vec![
        conv1x1(c0, c1, flat(&a), f32s(&a_bias)),
        conv1x1(c1, c2, flat(&w), f32s(&w_bias)),
        (LayerSpec::GlobalAvgPool, LayerParams::default()),
        (
            LayerSpec::Dense {
                in_features: c2,
                out_features: classes,
            },
            LayerParams {
                weight: flat(&head),
                bias: vec![0.0; classes],
            },
        ),
    ];
    let (layers, params): (Vec<_>, Vec<_>) = layers.into_iter().unzip();
    let arch = Architecture {
        input_shape: [c0, side, side],
        layers,
        class_count: classes,
        tap_layers: vec![0, 1],
    };
    LinearChain {
        model: LayeredModel::new(arch, params).unwrap(),
        a,
        w,
        w_bias,
        head,
        side,
    }
}

impl LinearChain {
    /// Pooled layer-1 feature of a layer-0 activation: `W · gap(a) + b`.
    pub fn pooled(&self, act: &TensorF32) -> Vec<f64> {
        let g = gap64(act);
        self.w
            .iter()
            .zip(&self.w_bias)
            .map(|(row, b)| row.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>() + b)
            .collect()
    }

    /// `−⟨∇_a ‖W gap(a) + b − q‖, V⟩` in closed form.
    pub fn sensitivity(&self, act: &TensorF32, q: &[f32], v: &[f32]) -> f64 {
        let p = self.pooled(act);
        let resid: Vec<f64> = p.iter().zip(q).map(|(a, &b)| a - b as f64).collect();
        let norm = resid.iter().map(|x| x * x).sum::<f64>().sqrt();
        let plane = self.side * self.side;
        let c1 = self.a.len();
        // Gradient at every position is Wᵀ r̂ / plane.
        let g: Vec<f64> = (0..c1)
            .map(|c| self.w.iter().zip(&resid).map(|(row, r)| row[c] * r / norm).sum::<f64>() / plane as f64)
            .collect();
        let v_sum: Vec<f64> = (0..c1)
            .map(|c| v[c * plane..(c + 1) * plane].iter().map(|&x| x as f64).sum())
            .collect();
        -g.iter().zip(&v_sum).map(|(a, b)| a * b).sum::<f64>()
    }
}

pub fn gap64(act: &TensorF32) -> Vec<f64> {
    let (c, h, w) = act.chw().unwrap();
    let plane = h * w;
    (0..c)
        .map(|ch| act.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect()
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> TensorF32 {
    let n = shape.iter().product();
    TensorF32::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// A `C×S×S` pattern repeating `v` at every position plus uniform noise.
pub fn broadcast(v: &[f64], side: usize, noise: f64, r: &mut ChaCha8Rng) -> Vec<f32> {
    v.iter()
        .flat_map(|&x| std::iter::repeat_n(x, side * side))
        .map(|x| (x + r.random_range(-noise..=noise)) as f32)
        .collect()
}

/// Side of the square inputs of the linear-chain fixtures.
pub const SIDE: usize = 3;

pub fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Members whose pooled layer-1 features sit just off a centroid placed far
/// along `W·d`, so stepping along `d` at layer 0 always approaches it.
pub struct ItcavFixture {
    pub chain: LinearChain,
    pub inputs: Vec<TensorF32>,
    pub centroid: Vec<f32>,
    pub toward: Vec<Vec<f32>>,
    pub away: Vec<Vec<f32>>,
}

pub fn itcav_fixture(seed: u64) -> ItcavFixture {
    let chain = linear_chain(2, 3, 3, 2, SIDE, seed);
    let mut r = rng(seed + 100);
    let inputs: Vec<TensorF32> = (0..6).map(|_| random_tensor(&mut r, &[2, SIDE, SIDE])).collect();
    let d = [1.0, -0.5, 0.25];
    let wd: Vec<f64> = chain.w.iter().map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
    let mean: Vec<f64> = {
        let pooled: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| chain.pooled(&chain.model.forward_to(x, 0).unwrap()))
            .collect();
        (0..3).map(|c| pooled.iter().map(|p| p[c]).sum::<f64>() / pooled.len() as f64).collect()
    };
    let centroid = mean.iter().zip(&wd).map(|(m, w)| (m + 50.0 * w) as f32).collect();
    let toward = (0..8).map(|_| broadcast(&d, SIDE, 0.05, &mut r)).collect();
    let neg_d: Vec<f64> = d.iter().map(|v| -v).collect();
    let away = (0..8).map(|_| broadcast(&neg_d, SIDE, 0.05, &mut r)).collect();
    ItcavFixture {
        chain,
        inputs,
        centroid,
        toward,
        away,
    }
}

impl ItcavFixture {
    /// Single-run score of the target with a CAV trained on `pos` against `neg`.
    pub fn score(&self, pos: &[Vec<f32>], neg: &[Vec<f32>]) -> f64 {
        let pos = refs(pos);
        itcav_score(
            &self.chain.model,
            SourceConcept {
                id: "src",
                layer: 0,
                activations: &pos,
            },
            TargetConcept {
                id: "dst",
                layer: 1,
                centroid: &self.centroid,
                inputs: &self.inputs,
            },
            &refs(neg),
            &EdgeConfig::default(),
        )
        .unwrap()
    }
}

// ---- statistics ----

/// Two-sided one-sample t-test p-values against 0.5, frozen from an
/// independent statistics package.
pub const TTEST_REFERENCE: &[(&[f64], f64)] = &[
    (&[0.8, 0.75, 0.9, 0.85, 0.7], 0.0010575646158306863),
    (&[0.4, 0.55, 0.6, 0.45, 0.5, 0.52], 0.9131407094941042),
    (&[0.1, 0.2, 0.15, 0.3, 0.05, 0.25, 0.2, 0.1], 1.0579275581056322e-05),
    (
        &[
            0.52, 0.48, 0.61, 0.45, 0.5, 0.58, 0.49, 0.53, 0.47, 0.55, 0.6, 0.44, 0.51, 0.5, 0.56, 0.43, 0.54, 0.57,
            0.46, 0.59,
        ],
        0.1385510913959191,
    ),
];
