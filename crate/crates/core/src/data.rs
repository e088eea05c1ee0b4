//! Image classification datasets: the procedural shapes generator, the
//! CIFAR-10 binary reader and the on-disk container format.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// `N×C×H×W` images in `[0, 1]` with integer labels.
///
/// Pixels are always representable as `f32`, so the container round trip
/// is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
    split: String,
    provenance: String,
}

impl Dataset {
    pub fn new(
        mut images: Vec<f64>,
        labels: Vec<usize>,
        shape: [usize; 3],
        num_classes: usize,
        split: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Format(format!(
                "{} pixel values for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        for v in images.iter_mut() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
            }
            *v = f64::from(*v as f32);
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
            split: split.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Same labels, new pixels (e.g. a corrupted copy).
    pub fn with_images(&self, images: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        Self::new(
            images,
            self.labels.clone(),
            self.shape,
            self.num_classes,
            self.split.clone(),
            provenance,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split.clone(),
            provenance: format!("{}[subset:{}]", self.provenance, indices.len()),
        }
    }

    fn header_core(&self) -> ContainerCore {
        ContainerCore {
            format: CONTAINER_FORMAT.into(),
            version: 1,
            count: self.len(),
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.images.len() * 4 + self.labels.len() * 4);
        for &v in &self.images {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as i32).to_le_bytes());
        }
        buf
    }

    /// SHA-256 over the canonical header and the payload, hex encoded.
    pub fn digest(&self) -> String {
        digest_of(&self.header_core(), &self.payload())
    }

    pub fn write_container<W: Write>(&self, mut out: W) -> Result<()> {
        let payload = self.payload();
        let core = self.header_core();
        let header = ContainerHeader {
            digest: digest_of(&core, &payload),
            core,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(CONTAINER_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn read_container<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format("not a dataset container".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: ContainerHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        let core = header.core;
        if core.format != CONTAINER_FORMAT {
            return Err(Error::Format(format!("unknown format {}", core.format)));
        }
        let per: usize = core.shape.iter().product();
        let expected = core.count * per * 4 + core.count * 4;
        let mut payload = Vec::with_capacity(expected);
        input.read_to_end(&mut payload)?;
        let computed = digest_of(&core, &payload);
        if computed != header.digest {
            return Err(Error::Digest {
                declared: header.digest,
                computed,
            });
        }
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let (pix, lab) = payload.split_at(core.count * per * 4);
        let images = pix
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let labels = lab
            .chunks_exact(4)
            .map(|b| {
                let v = i32::from_le_bytes(b.try_into().expect("4 bytes"));
                usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            images,
            labels,
            core.shape,
            core.num_classes,
            core.split,
            core.provenance,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_container(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_container(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"GEARDSET";
const CONTAINER_FORMAT: &str = "gearlab-dataset";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerCore {
    format: String,
    version: u32,
    count: usize,
    shape: [usize; 3],
    num_classes: usize,
    split: String,
    provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    #[serde(flatten)]
    core: ContainerCore,
    digest: String,
}

fn digest_of(core: &ContainerCore, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(core).expect("header serializes"));
    h.update(payload);
    hex::encode(h.finalize())
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10 binary records: one label byte followed by the R, G and
/// B planes of a 32×32 image, row-major.
pub fn parse_cifar_binary(bytes: &[u8], split: &str, provenance: &str) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file is truncated: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "record {i}: label byte {} > 9",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(images, labels, [3, 32, 32], 10, split, provenance)
}

pub fn read_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let split = if stem.contains("test") {
        "test"
    } else {
        "train"
    };
    parse_cifar_binary(&bytes, split, &format!("cifar10-binary:sha256={digest}"))
}

/// Parameters of the procedural shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub size: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 3000,
            n_test: 600,
            classes: 3,
            size: 16,
        }
    }
}

pub const MAX_SHAPE_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disk,
    Triangle,
    Bar,
    Ring,
    Cross,
    Square,
}

const SHAPE_KINDS: [ShapeKind; MAX_SHAPE_CLASSES] = [
    ShapeKind::Disk,
    ShapeKind::Triangle,
    ShapeKind::Bar,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Square,
];

/// Renders the train and test splits of the shapes dataset.
pub fn gen_shapes(cfg: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    if ![8, 16, 32].contains(&cfg.size) {
        return Err(Error::Config(format!(
            "size must be 8, 16 or 32, got {}",
            cfg.size
        )));
    }
    if cfg.classes < 2 || cfg.classes > MAX_SHAPE_CLASSES {
        return Err(Error::Config(format!(
            "classes must be in 2..={MAX_SHAPE_CLASSES}, got {}",
            cfg.classes
        )));
    }
    if cfg.n_train < cfg.classes || cfg.n_test < cfg.classes {
        return Err(Error::Config(format!(
            "need at least one sample per class ({}) in each split",
            cfg.classes
        )));
    }
    let prov = format!(
        "shapes:seed={}:classes={}:size={}:n_train={}:n_test={}",
        cfg.seed, cfg.classes, cfg.size, cfg.n_train, cfg.n_test
    );
    let train = render_split(cfg, "train", cfg.n_train, &prov)?;
    let test = render_split(cfg, "test", cfg.n_test, &prov)?;
    Ok((train, test))
}

fn render_split(cfg: &ShapesConfig, split: &str, n: usize, prov: &str) -> Result<Dataset> {
    let mut order_rng = rng::substream(cfg.seed, &format!("shapes-order-{split}"), &[]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut order_rng);
    let per = 3 * cfg.size * cfg.size;
    let mut images = Vec::with_capacity(n * per);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::substream(cfg.seed, &format!("shapes-{split}"), &[i as u64]);
        images.extend(render_one(SHAPE_KINDS[label], cfg.size, &mut r));
    }
    Dataset::new(
        images,
        labels,
        [3, cfg.size, cfg.size],
        cfg.classes,
        split,
        prov,
    )
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Point-in-shape test in the shape's local frame, unit scale.
fn inside(kind: ShapeKind, x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Disk => x * x + y * y <= 1.0,
        ShapeKind::Ring => {
            let r2 = x * x + y * y;
            (0.36..=1.0).contains(&r2)
        }
        ShapeKind::Triangle => {
            // Upward equilateral triangle inscribed in the unit circle.
            let s3 = 3f64.sqrt();
            y >= -0.5 && s3 * x - y >= -1.0 && -s3 * x - y >= -1.0
        }
        ShapeKind::Bar => x.abs() <= 1.0 && y.abs() <= 0.28,
        ShapeKind::Cross => {
            (x.abs() <= 1.0 && y.abs() <= 0.25) || (y.abs() <= 1.0 && x.abs() <= 0.25)
        }
        ShapeKind::Square => x.abs() <= 0.75 && y.abs() <= 0.75,
    }
}

fn render_one(kind: ShapeKind, size: usize, r: &mut impl Rng) -> Vec<f64> {
    let sz = size as f64;
    let bg_luma = r.gen_range(0.25..0.75);
    let bg = hsv(r.gen::<f64>(), r.gen_range(0.0..0.35), bg_luma);
    // Foreground must stand out from the background in luminance.
    let fg = loop {
        let c = hsv(r.gen::<f64>(), r.gen_range(0.5..1.0), r.gen_range(0.1..1.0));
        if (luma(c) - luma(bg)).abs() >= 0.3 {
            break c;
        }
    };
    // Smooth background texture: two low-frequency gratings and a ramp.
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = r.gen::<f64>() * std::f64::consts::PI;
            let freq = r.gen_range(0.5..2.0) * std::f64::consts::TAU / sz;
            (
                angle,
                freq,
                r.gen::<f64>() * std::f64::consts::TAU,
                r.gen_range(0.02..0.06),
            )
        })
        .collect();
    let ramp = (r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1));

    let radius = sz * r.gen_range(0.28..0.4);
    let margin = radius * 0.8;
    let cx = r.gen_range(margin..sz - margin);
    let cy = r.gen_range(margin..sz - margin);
    let theta = r.gen::<f64>() * std::f64::consts::TAU;
    let (st, ct) = theta.sin_cos();

    const SS: usize = 4;
    let mut out = vec![0.0; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let lx = (ct * x + st * y) / radius;
                    let ly = (-st * x + ct * y) / radius;
                    if inside(kind, lx, ly) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SS * SS) as f64;
            let (u, v) = (px as f64, py as f64);
            let mut tex = ramp.0 * (u / sz - 0.5) + ramp.1 * (v / sz - 0.5);
            for &(angle, freq, phase, amp) in &gratings {
                tex += amp * (freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
            }
            for ch in 0..3 {
                let b = (bg[ch] + tex).clamp(0.0, 1.0);
                let val = cover * fg[ch] + (1.0 - cover) * b;
                out[(ch * size + py) * size + px] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ShapesConfig {
        ShapesConfig {
            seed: 5,
            n_train: 30,
            n_test: 12,
            classes: 3,
            size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_deterministic_and_balanced() {
        let (a, b) = gen_shapes(&tiny()).unwrap();
        let (a2, b2) = gen_shapes(&tiny()).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert_eq!(a.digest(), a2.digest());
        assert_eq!(a.class_histogram(), vec![10, 10, 10]);
        assert_eq!(b.class_histogram(), vec![4, 4, 4]);
        assert!(a.images().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.image(0), b.image(0));
    }

    #[test]
    fn shapes_rejects_bad_parameters() {
        let mut c = tiny();
        c.classes = 1;
        assert!(gen_shapes(&c).is_err());
        let mut c = tiny();
        c.size = 12;
        assert!(gen_shapes(&c).is_err());
        let mut c = tiny();
        c.n_test = 2;
        assert!(gen_shapes(&c).is_err());
    }

    #[test]
    fn container_round_trip_and_tamper() {
        let (train, _) = gen_shapes(&tiny()).unwrap();
        let mut buf = Vec::new();
        train.write_container(&mut buf).unwrap();
        let back = Dataset::read_container(&buf[..]).unwrap();
        assert_eq!(back, train);

        let text = String::from_utf8_lossy(&buf[16..80]).into_owned();
        assert!(text.contains("gearlab-dataset"));
        let pos = buf
            .windows(13)
            .position(|w| w == b"\"num_classes\"")
            .unwrap();
        buf[pos + 14] = b'4';
        assert!(matches!(
            Dataset::read_container(&buf[..]),
            Err(Error::Digest { .. })
        ));
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(Dataset::read_container(&b"GEARDSET\x05\0\0\0\0\0\0\0{oops"[..]).is_err());
        assert!(Dataset::read_container(&b"NOTADSET"[..]).is_err());
    }

    #[test]
    fn cifar_fixture_parses() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255; // R(0,0)
        bytes[1 + 1024 + 33] = 51; // G(1,1)
        bytes[CIFAR_RECORD] = 2;
        bytes[CIFAR_RECORD + 1 + 2048 + 1023] = 102; // B(31,31)
        let d = parse_cifar_binary(&bytes, "train", "fixture").unwrap();
        assert_eq!(d.labels(), &[7, 2]);
        assert_eq!(d.image(0)[0], 1.0);
        assert_eq!(d.image(0)[1024 + 33], f64::from((51.0f64 / 255.0) as f32));
        assert_eq!(
            d.image(1)[2048 + 1023],
            f64::from((102.0f64 / 255.0) as f32)
        );
        assert_eq!(d.image(1)[0], 0.0);
    }

    #[test]
    fn cifar_edge_cases() {
        let d = parse_cifar_binary(&[], "train", "empty").unwrap();
        assert!(d.is_empty());
        assert!(parse_cifar_binary(&vec![0u8; 3072], "train", "short").is_err());
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        assert!(parse_cifar_binary(&bad, "train", "bad").is_err());
    }
}
