//! Common-corruption suite κ(x, s) and robust accuracy.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::par::parallel_map;
use crate::rng::{self, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Pixelate,
    Occlusion,
    SaturationShift,
}

pub const KINDS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Pixelate,
    CorruptionKind::Occlusion,
    CorruptionKind::SaturationShift,
];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::SaturationShift => "saturation_shift",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        KINDS
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {name}")))
    }

    /// Parameter per severity 1..=5, sized for 16×16 images.
    ///
    /// noise: σ; blur: box radius in pixels (fractional edge taps);
    /// pixelate: block size; occlusion: patch side as a fraction of the
    /// image side; saturation: chroma scale (negative values invert hue).
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.06, 0.10, 0.14, 0.19, 0.25],
            CorruptionKind::BoxBlur => [0.75, 1.0, 1.25, 1.5, 2.0],
            CorruptionKind::Pixelate => [2.0, 2.5, 3.0, 4.0, 5.0],
            CorruptionKind::Occlusion => [0.25, 0.3, 0.375, 0.4375, 0.5],
            CorruptionKind::SaturationShift => [0.5, 0.0, -0.5, -1.0, -1.5],
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::Occlusion
        )
    }
}

pub fn kind_names() -> Vec<&'static str> {
    KINDS.iter().map(|k| k.name()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    /// 1..=5 for table entries, 0 for a custom parameter.
    pub severity: u8,
    pub param: f64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!(
                "severity {severity} out of range 1..=5"
            )));
        }
        Ok(Self {
            kind,
            severity,
            param: kind.table()[usize::from(severity) - 1],
        })
    }

    pub fn custom(kind: CorruptionKind, param: f64) -> Self {
        Self {
            kind,
            severity: 0,
            param,
        }
    }

    pub fn label(&self) -> String {
        if self.severity == 0 {
            format!("{}-p{}", self.kind.name(), self.param)
        } else {
            format!("{}-s{}", self.kind.name(), self.severity)
        }
    }
}

/// Every kind at every severity, 25 cells.
pub fn standard_suite() -> Vec<Corruption> {
    KINDS
        .iter()
        .flat_map(|&k| (1..=5).map(move |s| Corruption::new(k, s).expect("valid severity")))
        .collect()
}

/// κ(x, s) for one `C×H×W` image in `[0, 1]`.
pub fn corrupt(x: &[f64], shape: [usize; 3], c: &Corruption, rng: &mut Rng) -> Result<Vec<f64>> {
    if c.severity > 5 {
        return Err(Error::Config(format!(
            "severity {} out of range",
            c.severity
        )));
    }
    let [ch, h, w] = shape;
    if x.len() != ch * h * w {
        return Err(Error::Config(format!(
            "image has {} values, shape {shape:?} needs {}",
            x.len(),
            ch * h * w
        )));
    }
    let out = match c.kind {
        CorruptionKind::GaussianNoise => {
            if c.param == 0.0 {
                x.to_vec()
            } else {
                let n = Normal::new(0.0, c.param)
                    .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
                x.iter().map(|&v| v + n.sample(rng)).collect()
            }
        }
        CorruptionKind::BoxBlur => box_blur(x, shape, c.param),
        CorruptionKind::Pixelate => pixelate(x, shape, c.param),
        CorruptionKind::Occlusion => {
            let side = ((c.param * h.min(w) as f64).round() as usize).min(h.min(w));
            let mut out = x.to_vec();
            if side > 0 {
                let y0 = rng.gen_range(0..=h - side);
                let x0 = rng.gen_range(0..=w - side);
                let fill: Vec<f64> = (0..ch).map(|_| rng.gen::<f64>()).collect();
                for (k, &f) in fill.iter().enumerate() {
                    for y in y0..y0 + side {
                        for xx in x0..x0 + side {
                            out[(k * h + y) * w + xx] = f;
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::SaturationShift => {
            if ch != 3 {
                x.to_vec()
            } else {
                let plane = h * w;
                let mut out = x.to_vec();
                for i in 0..plane {
                    let (r, g, b) = (x[i], x[plane + i], x[2 * plane + i]);
                    let l = 0.299 * r + 0.587 * g + 0.114 * b;
                    for (k, v) in [r, g, b].into_iter().enumerate() {
                        out[k * plane + i] = l + c.param * (v - l);
                    }
                }
                out
            }
        }
    };
    Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Separable box filter with half-width `radius`; the outermost taps get
/// the fractional weight. Edges replicate.
fn box_blur(x: &[f64], [c, h, w]: [usize; 3], radius: f64) -> Vec<f64> {
    if radius <= 0.0 {
        return x.to_vec();
    }
    let full = radius.floor() as i64;
    let frac = radius - full as f64;
    let reach = if frac > 0.0 { full + 1 } else { full };
    let taps: Vec<(i64, f64)> = (-reach..=reach)
        .map(|o| (o, if o.abs() <= full { 1.0 } else { frac }))
        .collect();
    let norm: f64 = taps.iter().map(|t| t.1).sum();
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for k in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for &(o, wt) in &taps {
                    let sx = (xx as i64 + o).clamp(0, w as i64 - 1) as usize;
                    s += wt * x[(k * h + y) * w + sx];
                }
                tmp[(k * h + y) * w + xx] = s / norm;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for &(o, wt) in &taps {
                    let sy = (y as i64 + o).clamp(0, h as i64 - 1) as usize;
                    s += wt * tmp[(k * h + sy) * w + xx];
                }
                out[(k * h + y) * w + xx] = s / norm;
            }
        }
    }
    out
}

/// Area-averages blocks of `block` pixels and blows them back up. A
/// fractional block size blends the two neighbouring integer sizes.
fn pixelate(x: &[f64], shape: [usize; 3], block: f64) -> Vec<f64> {
    let lo = block.floor().max(1.0) as usize;
    let frac = block - lo as f64;
    let a = pixelate_int(x, shape, lo);
    if frac <= 0.0 {
        return a;
    }
    let b = pixelate_int(x, shape, lo + 1);
    a.iter()
        .zip(&b)
        .map(|(u, v)| (1.0 - frac) * u + frac * v)
        .collect()
}

fn pixelate_int(x: &[f64], [c, h, w]: [usize; 3], b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..c {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                let mut s = 0.0;
                for y in by..ye {
                    for xx in bx..xe {
                        s += x[(k * h + y) * w + xx];
                    }
                }
                let m = s / ((ye - by) * (xe - bx)) as f64;
                for y in by..ye {
                    for xx in bx..xe {
                        out[(k * h + y) * w + xx] = m;
                    }
                }
            }
        }
    }
    out
}

/// Corrupts every image of `data`, one rng stream per
/// `(kind, severity, sample)` so the result does not depend on order.
pub fn corrupt_dataset(data: &Dataset, c: &Corruption, seed: u64) -> Result<Dataset> {
    let shape = data.shape();
    let kind_idx = KINDS.iter().position(|&k| k == c.kind).expect("known kind") as u64;
    let mut images = Vec::with_capacity(data.images().len());
    for i in 0..data.len() {
        let mut r = rng::substream(
            seed,
            "corrupt",
            &[kind_idx, u64::from(c.severity), c.param.to_bits(), i as u64],
        );
        images.extend(corrupt(data.image(i), shape, c, &mut r)?);
    }
    data.with_images(images, format!("{}+{}", data.provenance(), c.label()))
}

/// Corrupted copies of one test set, generated once and shared by every
/// evaluation in a run.
#[derive(Debug, Clone)]
pub struct CorruptedSet {
    pub cells: Vec<(Corruption, Dataset)>,
}

impl CorruptedSet {
    pub fn generate(test: &Dataset, suite: &[Corruption], seed: u64) -> Result<Self> {
        if suite.is_empty() {
            return Err(Error::Empty("corruption suite".into()));
        }
        let cells = parallel_map(suite, |c| Ok((*c, corrupt_dataset(test, c, seed)?)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }

    /// Loads cached cells from `dir` when present, otherwise generates and
    /// stores them. Cache files are keyed by seed and test-set digest.
    pub fn cached(test: &Dataset, suite: &[Corruption], seed: u64, dir: &Path) -> Result<Self> {
        if suite.is_empty() {
            return Err(Error::Empty("corruption suite".into()));
        }
        std::fs::create_dir_all(dir)?;
        let digest = test.digest();
        let mut cells = Vec::with_capacity(suite.len());
        for c in suite {
            let path = dir.join(format!("{}-seed{seed}-{}.gds", c.label(), &digest[..12]));
            let d = if path.exists() {
                Dataset::load(&path)?
            } else {
                let d = corrupt_dataset(test, c, seed)?;
                let tmp = path.with_extension("tmp");
                d.save(&tmp)?;
                std::fs::rename(&tmp, &path)?;
                d
            };
            cells.push((*c, d));
        }
        Ok(Self { cells })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    /// Unweighted mean over cells.
    pub a_rob: f64,
    pub cells: Vec<CellAccuracy>,
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let pred = net.predict(data.images(), 256)?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn robust_accuracy_on(net: &Network, set: &CorruptedSet) -> Result<RobustReport> {
    if set.cells.is_empty() {
        return Err(Error::Empty("corruption suite".into()));
    }
    let cells = parallel_map(&set.cells, |(c, d)| {
        Ok(CellAccuracy {
            kind: c.kind,
            severity: c.severity,
            accuracy: accuracy(net, d)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let a_rob = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
    Ok(RobustReport { a_rob, cells })
}

pub fn robust_accuracy(
    net: &Network,
    test: &Dataset,
    suite: &[Corruption],
    seed: u64,
) -> Result<RobustReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    robust_accuracy_on(net, &CorruptedSet::generate(test, suite, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes, ShapesConfig};

    fn probe() -> Dataset {
        gen_shapes(&ShapesConfig {
            seed: 9,
            n_train: 3,
            n_test: 30,
            classes: 3,
            size: 16,
            ..Default::default()
        })
        .unwrap()
        .1
    }

    fn mean_distortion(d: &Dataset, c: &Corruption) -> f64 {
        let out = corrupt_dataset(d, c, 1).unwrap();
        (0..d.len())
            .map(|i| {
                d.image(i)
                    .iter()
                    .zip(out.image(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / d.len() as f64
    }

    #[test]
    fn occlusion_patch_grows_with_severity() {
        for n in [16, 32] {
            let x = vec![0.5; 3 * n * n];
            let areas: Vec<usize> = (1..=5)
                .map(|s| {
                    let c = Corruption::new(CorruptionKind::Occlusion, s).unwrap();
                    let out = corrupt(&x, [3, n, n], &c, &mut rng::substream(0, "o", &[])).unwrap();
                    out[..n * n].iter().filter(|&&v| v != 0.5).count()
                })
                .collect();
            assert!(areas.windows(2).all(|w| w[0] < w[1]), "{n} px: {areas:?}");
        }
    }

    #[test]
    fn severity_is_monotone() {
        let d = probe();
        for k in KINDS {
            let norms: Vec<f64> = (1..=5)
                .map(|s| mean_distortion(&d, &Corruption::new(k, s).unwrap()))
                .collect();
            for pair in norms.windows(2) {
                assert!(pair[1] >= pair[0], "{}: {norms:?}", k.name());
            }
        }
        let noise: Vec<f64> = (2..=4)
            .map(|s| {
                mean_distortion(
                    &d,
                    &Corruption::new(CorruptionKind::GaussianNoise, s).unwrap(),
                )
            })
            .collect();
        assert!(noise[0] < noise[1] && noise[1] < noise[2]);
    }

    #[test]
    fn fixed_points() {
        let d = probe();
        let x = d.image(0);
        let mut r = rng::substream(0, "x", &[]);
        let c = Corruption::custom(CorruptionKind::GaussianNoise, 0.0);
        assert_eq!(corrupt(x, d.shape(), &c, &mut r).unwrap(), x);
        let flat = vec![0.4; 3 * 16 * 16];
        for s in 1..=5 {
            let c = Corruption::new(CorruptionKind::BoxBlur, s).unwrap();
            let y = corrupt(&flat, [3, 16, 16], &c, &mut r).unwrap();
            assert!(y.iter().all(|v| (v - 0.4).abs() < 1e-15));
        }
        assert!(Corruption::new(CorruptionKind::Pixelate, 6).is_err());
        assert!(Corruption::new(CorruptionKind::Pixelate, 0).is_err());
        assert!(CorruptionKind::from_name("fog").is_err());
    }

    #[test]
    fn stochastic_kinds_are_seeded() {
        let d = probe();
        for k in [CorruptionKind::GaussianNoise, CorruptionKind::Occlusion] {
            let c = Corruption::new(k, 3).unwrap();
            assert_eq!(
                corrupt_dataset(&d, &c, 4).unwrap(),
                corrupt_dataset(&d, &c, 4).unwrap()
            );
            assert_ne!(
                corrupt_dataset(&d, &c, 4).unwrap(),
                corrupt_dataset(&d, &c, 5).unwrap()
            );
        }
    }

    #[test]
    fn cache_reloads_identically() {
        let d = probe();
        let dir = tempfile::tempdir().unwrap();
        let suite = vec![
            Corruption::new(CorruptionKind::GaussianNoise, 2).unwrap(),
            Corruption::new(CorruptionKind::Occlusion, 4).unwrap(),
        ];
        let a = CorruptedSet::cached(&d, &suite, 3, dir.path()).unwrap();
        let b = CorruptedSet::cached(&d, &suite, 3, dir.path()).unwrap();
        for ((_, x), (_, y)) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x, y);
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn disjoint_from_transforms() {
        crate::era::TransformSet::standard()
            .check_disjoint(&kind_names())
            .unwrap();
    }
}
