//! Efficient Robust Augmentation: random transform chains mixed back into
//! the clean image, J-view expansion and the Jensen–Shannon consistency
//! loss.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Rotate,
    Translate,
    Shear,
    HFlip,
    Posterize,
    Solarize,
    Brightness,
    Contrast,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Rotate => "rotate",
            Transform::Translate => "translate",
            Transform::Shear => "shear",
            Transform::HFlip => "hflip",
            Transform::Posterize => "posterize",
            Transform::Solarize => "solarize",
            Transform::Brightness => "brightness",
            Transform::Contrast => "contrast",
        }
    }

    /// Draws the transform's magnitude.
    fn sample_param(self, rng: &mut Rng) -> f64 {
        let signed = |rng: &mut Rng, hi: f64| rng.gen_range(-hi..=hi);
        match self {
            Transform::Identity | Transform::HFlip => 0.0,
            Transform::Rotate => signed(rng, 15f64.to_radians()),
            Transform::Translate => {
                // Packs the (dx, dy) integer shift into one number.
                let dx = rng.gen_range(-3i32..=3);
                let dy = rng.gen_range(-3i32..=3);
                f64::from(dx * 16 + dy)
            }
            Transform::Shear => signed(rng, 0.2),
            Transform::Posterize => f64::from(rng.gen_range(4u32..=6)),
            Transform::Solarize => rng.gen_range(0.5..=1.0),
            Transform::Brightness => signed(rng, 0.2),
            Transform::Contrast => rng.gen_range(0.8..=1.2),
        }
    }

    /// Applies the transform with magnitude `param` to a `C×H×W` image.
    pub fn apply(self, img: &[f64], shape: [usize; 3], param: f64) -> Vec<f64> {
        let out = match self {
            Transform::Identity => img.to_vec(),
            Transform::Rotate => {
                let (s, c) = param.sin_cos();
                warp(img, shape, [c, s, -s, c])
            }
            Transform::Translate => {
                let p = param as i32;
                let dy = (p + 3).rem_euclid(16) - 3;
                let dx = (p - dy) / 16;
                shift(img, shape, dx, dy)
            }
            Transform::Shear => warp(img, shape, [1.0, param, 0.0, 1.0]),
            Transform::HFlip => {
                let [c, h, w] = shape;
                let mut out = vec![0.0; img.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
                        }
                    }
                }
                out
            }
            Transform::Posterize => {
                let levels = f64::from(1u32 << param as u32);
                img.iter()
                    .map(|&v| (v * levels).floor().min(levels - 1.0) / (levels - 1.0))
                    .collect()
            }
            Transform::Solarize => img
                .iter()
                .map(|&v| if v >= param { 1.0 - v } else { v })
                .collect(),
            Transform::Brightness => img.iter().map(|&v| v + param).collect(),
            Transform::Contrast => {
                let [c, h, w] = shape;
                let plane = h * w;
                let mean = (0..plane)
                    .map(|i| {
                        if c == 3 {
                            0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
                        } else {
                            img[i]
                        }
                    })
                    .sum::<f64>()
                    / plane as f64;
                img.iter().map(|&v| (v - mean) * param + mean).collect()
            }
        };
        out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }
}

/// Inverse-mapped affine warp about the image centre with bilinear
/// sampling and edge replication. `m` is the row-major 2×2 matrix mapping
/// output coordinates to source coordinates.
fn warp(img: &[f64], [c, h, w]: [usize; 3], m: [f64; 4]) -> Vec<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let sx = (m[0] * u + m[1] * v + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (m[2] * u + m[3] * v + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn shift(img: &[f64], [c, h, w]: [usize; 3], dx: i32, dy: i32) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as usize;
            for x in 0..w {
                let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as usize;
                out[(ch * h + y) * w + x] = img[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// The pool chains draw from. Names must stay disjoint from the
/// corruption suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub transforms: Vec<Transform>,
}

impl TransformSet {
    pub fn standard() -> Self {
        Self {
            transforms: vec![
                Transform::Rotate,
                Transform::Translate,
                Transform::Shear,
                Transform::HFlip,
                Transform::Posterize,
                Transform::Solarize,
                Transform::Brightness,
                Transform::Contrast,
            ],
        }
    }

    pub fn identity_only() -> Self {
        Self {
            transforms: vec![Transform::Identity],
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.transforms.iter().map(|t| t.name()).collect()
    }

    /// Fails if any transform shares a name with a corruption kind.
    pub fn check_disjoint(&self, corruption_names: &[&str]) -> Result<()> {
        for name in self.names() {
            if corruption_names.contains(&name) {
                return Err(Error::Config(format!(
                    "transform {name} also appears in the corruption suite"
                )));
            }
        }
        Ok(())
    }
}

impl Default for TransformSet {
    fn default() -> Self {
        Self::standard()
    }
}

/// `(W, D, J)`: chains mixed per view, maximum chain depth, and tuple size.
///
/// `J = 1` keeps only the clean view. `J = 0` is the degenerate baseline
/// row of the ablation grid: a single augmented view trained with plain
/// cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub width: usize,
    pub depth: usize,
    pub views: usize,
}

impl ChainParams {
    pub fn new(width: usize, depth: usize, views: usize) -> Self {
        Self {
            width,
            depth,
            views,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "chain width and depth must be at least 1, got ({}, {})",
                self.width, self.depth
            )));
        }
        Ok(())
    }

    /// Images the network sees per input sample.
    pub fn views_per_sample(&self) -> usize {
        self.views.max(1)
    }

    /// Whether view 0 is the untouched input.
    pub fn keeps_clean(&self) -> bool {
        self.views >= 1
    }
}

impl Default for ChainParams {
    fn default() -> Self {
        Self::new(1, 3, 4)
    }
}

/// A composed transform with its magnitudes already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub ops: Vec<(Transform, f64)>,
}

impl Chain {
    /// Applies the chain's ops in order.
    pub fn apply(&self, img: &[f64], shape: [usize; 3]) -> Vec<f64> {
        let mut cur = img.to_vec();
        for &(t, p) in &self.ops {
            cur = t.apply(&cur, shape, p);
        }
        cur
    }

    pub fn depth(&self) -> usize {
        self.ops.len()
    }
}

pub fn sample_chain(rng: &mut Rng, set: &TransformSet, max_depth: usize) -> Result<Chain> {
    if set.transforms.is_empty() {
        return Err(Error::Config("transform set is empty".into()));
    }
    if max_depth == 0 {
        return Err(Error::Config("chain depth must be at least 1".into()));
    }
    let d = rng.gen_range(1..=max_depth);
    let ops = (0..d)
        .map(|_| {
            let t = set.transforms[rng.gen_range(0..set.transforms.len())];
            (t, t.sample_param(rng))
        })
        .collect();
    Ok(Chain { ops })
}

/// Clean-versus-transformed mixing weight; `Forced` pins it for tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    Beta,
    Forced(f64),
}

/// One augmented view: `p·x + (1 − p)·Σ_k m_k A_k(x)` with Dirichlet(1)
/// chain weights `m`. Returns the view and the `p` used.
pub fn mix_view(
    x: &[f64],
    shape: [usize; 3],
    rng: &mut Rng,
    params: &ChainParams,
    set: &TransformSet,
    mixing: Mixing,
) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    let weights: Vec<f64> = if params.width == 1 {
        vec![1.0]
    } else {
        let g = Gamma::new(1.0, 1.0).expect("valid gamma");
        let raw: Vec<f64> = (0..params.width).map(|_| g.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    };
    let mut mixed = vec![0.0; x.len()];
    for &m in &weights {
        let chain = sample_chain(rng, set, params.depth)?;
        for (acc, v) in mixed.iter_mut().zip(chain.apply(x, shape)) {
            *acc += m * v;
        }
    }
    let p = match mixing {
        Mixing::Beta => Beta::new(1.0, 1.0).expect("valid beta").sample(rng),
        Mixing::Forced(p) => p,
    };
    let view = x
        .iter()
        .zip(&mixed)
        .map(|(&c, &a)| (p * c + (1.0 - p) * a).clamp(0.0, 1.0))
        .collect();
    Ok((view, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTuple {
    /// `views[0]` is the clean input unless the tuple was built with `J = 0`.
    pub views: Vec<Vec<f64>>,
    pub label: usize,
}

pub fn expand(
    x: &[f64],
    y: usize,
    shape: [usize; 3],
    rng: &mut Rng,
    params: &ChainParams,
    set: &TransformSet,
) -> Result<AugmentedTuple> {
    expand_with(x, y, shape, rng, params, set, Mixing::Beta)
}

pub fn expand_with(
    x: &[f64],
    y: usize,
    shape: [usize; 3],
    rng: &mut Rng,
    params: &ChainParams,
    set: &TransformSet,
    mixing: Mixing,
) -> Result<AugmentedTuple> {
    params.validate()?;
    let mut views = Vec::with_capacity(params.views_per_sample());
    if params.keeps_clean() {
        views.push(x.to_vec());
    }
    while views.len() < params.views_per_sample() {
        views.push(mix_view(x, shape, rng, params, set, mixing)?.0);
    }
    Ok(AugmentedTuple { views, label: y })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `H(mean_j p_j) − mean_j H(p_j)` in nats.
pub fn jsd(dists: &[Vec<f64>]) -> Result<f64> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Distribution("no distributions given".into()))?;
    let c = first.len();
    for (j, p) in dists.iter().enumerate() {
        if p.len() != c {
            return Err(Error::Distribution(format!(
                "distribution {j} has {} classes, expected {c}",
                p.len()
            )));
        }
        if p.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Distribution(format!(
                "distribution {j} has a negative entry"
            )));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Distribution(format!("distribution {j} sums to {s}")));
        }
    }
    let k = dists.len() as f64;
    let mean: Vec<f64> = (0..c)
        .map(|i| dists.iter().map(|p| p[i]).sum::<f64>() / k)
        .collect();
    let mean_entropy = dists.iter().map(|p| entropy(p)).sum::<f64>() / k;
    Ok((entropy(&mean) - mean_entropy).max(0.0))
}

/// Cross-entropy on view 0 plus `lambda` times the JSD across all views.
///
/// `logits` is `[views·N, C]`, view-major.
pub fn aug_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    views: usize,
    lambda: f64,
) -> Result<Var> {
    let n = labels.len();
    let ce = if views == 1 {
        tape.softmax_cross_entropy(logits, labels)?
    } else {
        let clean = tape.slice_rows(logits, 0, n)?;
        tape.softmax_cross_entropy(clean, labels)?
    };
    if views < 2 || lambda == 0.0 {
        return Ok(ce);
    }
    let js = tape.jsd_from_logits(logits, views)?;
    let js = tape.scale(js, lambda);
    Ok(tape.add(ce, js)?)
}
