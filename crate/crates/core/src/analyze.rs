//! Diagnostics: per-layer width statistics of grown networks, Fourier
//! spectra of image perturbations and 1-D filter-normalized loss slices.

use crate::corrupt::{CorruptedSet, Corruption};
use crate::data::Dataset;
use crate::era::{mix_view, ChainParams, Mixing, TransformSet};
use crate::error::{Error, Result};
use crate::nn::{Network, Topology};
use crate::rng;
use crate::tensor::{log_sum_exp, Tensor};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation of each layer's width across runs.
/// A single run has standard deviation 0.
pub fn topology_report(topologies: &[Topology]) -> Result<Vec<LayerStat>> {
    let first = topologies
        .first()
        .ok_or_else(|| Error::Empty("no topologies to report".into()))?;
    let depth = first.depth();
    if let Some(t) = topologies.iter().find(|t| t.depth() != depth) {
        return Err(Error::Topology(format!(
            "depth mismatch: {} layers against {depth}",
            t.depth()
        )));
    }
    let n = topologies.len() as f64;
    Ok((0..depth)
        .map(|l| {
            let mean = topologies.iter().map(|t| t.widths[l] as f64).sum::<f64>() / n;
            let ss: f64 = topologies
                .iter()
                .map(|t| (t.widths[l] as f64 - mean).powi(2))
                .sum();
            let std = if topologies.len() > 1 {
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            LayerStat {
                layer: l,
                mean,
                std,
            }
        })
        .collect())
}

pub fn topology_csv(stats: &[LayerStat]) -> String {
    let mut s = String::from("layer,mean,std\n");
    for r in stats {
        s.push_str(&format!("{},{},{}\n", r.layer, r.mean, r.std));
    }
    s
}

/// Bar chart of mean width per layer with ±1 std whiskers.
pub fn topology_svg(stats: &[LayerStat], title: &str) -> String {
    let (w, h, pad) = (60.0 * stats.len().max(1) as f64 + 80.0, 320.0, 40.0);
    let top = stats.iter().map(|r| r.mean + r.std).fold(1.0_f64, f64::max);
    let plot_h = h - 2.0 * pad;
    let y = |v: f64| h - pad - plot_h * v / top;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad / 2.0
    ));
    for (i, r) in stats.iter().enumerate() {
        let x = pad + 10.0 + 60.0 * i as f64;
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"40\" height=\"{:.2}\" fill=\"#4477aa\"/>\n",
            y(r.mean),
            h - pad - y(r.mean)
        ));
        if r.std > 0.0 {
            s.push_str(&format!(
                "<line x1=\"{0}\" y1=\"{1:.2}\" x2=\"{0}\" y2=\"{2:.2}\" stroke=\"black\"/>\n",
                x + 20.0,
                y(r.mean - r.std),
                y(r.mean + r.std)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"middle\">{:.1}</text>\n",
            x + 20.0,
            y(r.mean + r.std) - 4.0,
            r.mean
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x + 20.0,
            h - pad + 14.0,
            r.layer
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Averaged Fourier spectrum of `modified − clean` on luminance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub size: usize,
    /// Mean `|DFT|`, `size × size`, row-major, DC at `(size/2, size/2)`.
    pub magnitude: Vec<f64>,
    /// Mean power per integer radius bin, DC in bin 0.
    pub radial: Vec<f64>,
    /// Share of the power at frequencies with `|k| ≤ size/4`.
    pub low_fraction: f64,
    /// Mean `Σ|X|² / size²` over samples.
    pub spectral_energy: f64,
    /// Mean `Σ|x|²` over samples.
    pub spatial_energy: f64,
}

impl SpectrumProfile {
    pub fn radial_csv(&self) -> String {
        let mut s = String::from("radius,power\n");
        for (r, p) in self.radial.iter().enumerate() {
            s.push_str(&format!("{r},{p}\n"));
        }
        s
    }

    /// The magnitude grid as a plain-text PGM scaled to its maximum.
    pub fn magnitude_pgm(&self) -> String {
        let n = self.size;
        let max = self.magnitude.iter().cloned().fold(0.0, f64::max);
        let mut s = format!("P2\n{n} {n}\n255\n");
        for row in self.magnitude.chunks(n) {
            let line: Vec<String> = row
                .iter()
                .map(|&m| {
                    let v = if max > 0.0 {
                        (255.0 * m / max).round()
                    } else {
                        0.0
                    };
                    format!("{}", v as u8)
                })
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// ITU-R 601 luma of a `[3, h, w]` image; single-channel images pass through.
pub fn luminance(img: &[f64], shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let hw = h * w;
    if c == 1 {
        return img[..hw].to_vec();
    }
    (0..hw)
        .map(|i| 0.299 * img[i] + 0.587 * img[hw + i] + 0.114 * img[2 * hw + i])
        .collect()
}

/// Unnormalized forward 2-D DFT of an `n × n` real grid.
pub fn dft2(grid: &[f64], n: usize) -> Vec<Complex<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = grid.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    buf
}

/// Spectrum of per-sample differences between two image sets of equal
/// shape. Images must be square with side 16 or 32.
pub fn delta_spectrum(clean: &Dataset, modified: &Dataset) -> Result<SpectrumProfile> {
    if clean.shape() != modified.shape() || clean.len() != modified.len() {
        return Err(Error::Shape(format!(
            "{} images of {:?} against {} of {:?}",
            clean.len(),
            clean.shape(),
            modified.len(),
            modified.shape()
        )));
    }
    let deltas: Vec<Vec<f64>> = (0..clean.len())
        .map(|i| {
            clean
                .image(i)
                .iter()
                .zip(modified.image(i))
                .map(|(a, b)| b - a)
                .collect()
        })
        .collect();
    spectrum_of(&deltas, clean.shape())
}

/// Spectrum of a set of raw images (or image differences).
pub fn spectrum_of(images: &[Vec<f64>], shape: [usize; 3]) -> Result<SpectrumProfile> {
    let [_, h, w] = shape;
    if h != w || !matches!(h, 16 | 32) {
        return Err(Error::Shape(format!(
            "spectra need 16×16 or 32×32 images, got {h}×{w}"
        )));
    }
    if images.is_empty() {
        return Err(Error::Empty("no images for a spectrum".into()));
    }
    let n = h;
    let half = n / 2;
    let mut magnitude = vec![0.0; n * n];
    let mut power = vec![0.0; n * n];
    let mut spatial_energy = 0.0;
    for img in images {
        let lum = luminance(img, shape);
        spatial_energy += lum.iter().map(|v| v * v).sum::<f64>();
        let spec = dft2(&lum, n);
        for y in 0..n {
            for x in 0..n {
                // Shift so DC lands in the centre.
                let dst = ((y + half) % n) * n + (x + half) % n;
                let z = spec[y * n + x];
                magnitude[dst] += z.norm();
                power[dst] += z.norm_sqr();
            }
        }
    }
    let m = images.len() as f64;
    magnitude.iter_mut().for_each(|v| *v /= m);
    power.iter_mut().for_each(|v| *v /= m);
    spatial_energy /= m;
    let total: f64 = power.iter().sum();
    let mut radial = vec![0.0; (half as f64 * std::f64::consts::SQRT_2).ceil() as usize + 1];
    let mut low = 0.0;
    let cutoff = (n / 4) as f64;
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - half as f64, x as f64 - half as f64);
            let r = (dx * dx + dy * dy).sqrt();
            let p = power[y * n + x];
            radial[r.round() as usize] += p;
            if r <= cutoff {
                low += p;
            }
        }
    }
    Ok(SpectrumProfile {
        size: n,
        magnitude,
        radial,
        low_fraction: if total > 0.0 { low / total } else { 0.0 },
        spectral_energy: total / (n * n) as f64,
        spatial_energy,
    })
}

/// One augmented view per image under `params`, mixing weights from Beta(1,1).
pub fn augment_dataset(
    data: &Dataset,
    params: &ChainParams,
    set: &TransformSet,
    seed: u64,
) -> Result<Dataset> {
    let mut r = rng::substream(seed, "analyze-era", &[]);
    let mut images = Vec::with_capacity(data.images().len());
    for i in 0..data.len() {
        images.extend(
            mix_view(
                data.image(i),
                data.shape(),
                &mut r,
                params,
                set,
                Mixing::Beta,
            )?
            .0,
        );
    }
    data.with_images(images, format!("{}+era", data.provenance()))
}

/// Named spectra over the clean images, the augmentation deltas, every
/// corruption cell and the pooled deltas of all cells.
pub fn fourier_report(
    test: &Dataset,
    suite: &[Corruption],
    chain: &ChainParams,
    seed: u64,
) -> Result<Vec<(String, SpectrumProfile)>> {
    let clean: Vec<Vec<f64>> = (0..test.len()).map(|i| test.image(i).to_vec()).collect();
    let mut out = vec![("clean".to_string(), spectrum_of(&clean, test.shape())?)];
    let aug = augment_dataset(test, chain, &TransformSet::standard(), seed)?;
    out.push(("augmentations".into(), delta_spectrum(test, &aug)?));
    let set = CorruptedSet::generate(test, suite, seed)?;
    let mut pooled = Vec::new();
    for (c, d) in &set.cells {
        out.push((c.label(), delta_spectrum(test, d)?));
        pooled.extend((0..test.len()).map(|i| {
            d.image(i)
                .iter()
                .zip(test.image(i))
                .map(|(m, c)| m - c)
                .collect::<Vec<f64>>()
        }));
    }
    out.push((
        "all_corruptions".into(),
        spectrum_of(&pooled, test.shape())?,
    ));
    Ok(out)
}

pub fn fourier_summary_csv(report: &[(String, SpectrumProfile)]) -> String {
    let mut s = String::from("name,low_fraction,spectral_energy,spatial_energy\n");
    for (name, p) in report {
        s.push_str(&format!(
            "{name},{},{},{}\n",
            p.low_fraction, p.spectral_energy, p.spatial_energy
        ));
    }
    s
}

/// Mean softmax cross-entropy of `net` over `data`.
pub fn mean_cross_entropy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("loss over an empty dataset".into()));
    }
    let classes = net.topology().num_classes;
    let per = data.pixels_per_image();
    let mut total = 0.0;
    for (start, part) in data.images().chunks(per * 256).enumerate() {
        let z = net.logits(part)?;
        for (j, row) in z.chunks_exact(classes).enumerate() {
            total += log_sum_exp(row) - row[data.labels()[start * 256 + j]];
        }
    }
    Ok(total / data.len() as f64)
}

/// A Gaussian direction over the network's parameters with every filter
/// rescaled to the norm of the matching filter of `net`. Biases get a zero
/// direction. Conv filters are output channels; head filters are classes.
pub fn filter_normalized_direction(net: &Network, seed: u64) -> Vec<Tensor> {
    let mut r = rng::substream(seed, "loss-slice", &[]);
    let mut out = Vec::new();
    let mut normalize = |w: &Tensor, filters: Vec<Vec<usize>>| {
        let mut d: Vec<f64> = (0..w.numel())
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        for idx in filters {
            let wn = idx.iter().map(|&i| w.data()[i].powi(2)).sum::<f64>().sqrt();
            let dn = idx.iter().map(|&i| d[i].powi(2)).sum::<f64>().sqrt();
            let k = if dn > 0.0 { wn / dn } else { 0.0 };
            for &i in &idx {
                d[i] *= k;
            }
        }
        Tensor::new(w.shape().to_vec(), d).expect("same shape")
    };
    for conv in net.convs() {
        let out_ch = conv.weight.shape()[0];
        let per = conv.weight.numel() / out_ch;
        let filters = (0..out_ch)
            .map(|o| (o * per..(o + 1) * per).collect())
            .collect();
        out.push(normalize(&conv.weight, filters));
        out.push(Tensor::zeros(conv.bias.shape()));
    }
    let head = &net.head().weight;
    let (rows, classes) = (head.shape()[0], head.shape()[1]);
    let filters = (0..classes)
        .map(|k| (0..rows).map(|r| r * classes + k).collect())
        .collect();
    out.push(normalize(head, filters));
    out.push(Tensor::zeros(net.head().bias.shape()));
    out
}

/// Loss along `net + α·d` for `n_points` evenly spaced `α` in `range`,
/// with `d` from [`filter_normalized_direction`].
pub fn loss_slice<F>(
    net: &Network,
    data: &Dataset,
    loss_fn: F,
    n_points: usize,
    range: (f64, f64),
    seed: u64,
) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&Network, &Dataset) -> Result<f64>,
{
    if n_points == 0 {
        return Ok(Vec::new());
    }
    let dir = filter_normalized_direction(net, seed);
    let step = if n_points > 1 {
        (range.1 - range.0) / (n_points - 1) as f64
    } else {
        0.0
    };
    (0..n_points)
        .map(|i| {
            let alpha = range.0 + step * i as f64;
            let mut moved = net.clone();
            if alpha != 0.0 {
                for (p, d) in moved.parameters_mut().into_iter().zip(&dir) {
                    for (w, dv) in p.data_mut().iter_mut().zip(d.data()) {
                        *w += alpha * dv;
                    }
                }
            }
            Ok((alpha, loss_fn(&moved, data)?))
        })
        .collect()
}

pub fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("alpha,loss\n");
    for (a, l) in points {
        s.push_str(&format!("{a},{l}\n"));
    }
    s
}
