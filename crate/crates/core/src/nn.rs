//! Growable plain convolutional classifier.
//!
//! A network is a stack of `conv → activation [→ pool]` blocks followed by a
//! single dense head. Widths are the only structural degree of freedom:
//! [`Network::widen`] appends output channels to one layer and extends the
//! next layer's input slices, [`Network::split`] duplicates a channel.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Activation, PoolKind, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Widths of the reference full model that size fractions are measured against.
pub const REFERENCE_WIDTHS: [usize; 6] = [128, 128, 256, 256, 512, 512];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// Output channels per conv layer.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Zero-based indices of the layers followed by a 2×2 pool.
    pub pool_after: Vec<usize>,
    #[serde(default = "default_pool")]
    pub pool: PoolKind,
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub activation: Activation,
}

fn default_pool() -> PoolKind {
    PoolKind::Max
}

impl Topology {
    /// Plain VGG-style stack with uniform width and a pool after every
    /// second layer.
    pub fn plain(depth: usize, width: usize, num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self {
            widths: vec![width; depth],
            kernel: 3,
            pool_after: (0..depth).filter(|l| l % 2 == 1).collect(),
            pool: PoolKind::Max,
            num_classes,
            input_shape,
            activation: Activation::Relu,
        }
    }

    /// Six layers of width 45 on 16×16 RGB, the desk-scale backbone.
    pub fn desk_backbone(num_classes: usize) -> Self {
        Self::plain(6, 45, num_classes, [3, 16, 16])
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn complexity(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::Topology(format!(
                "depth must be at least 2, got {}",
                self.depth()
            )));
        }
        if let Some(l) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::Topology(format!("layer {l} has zero width")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Topology(format!(
                "kernel {} is not odd",
                self.kernel
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Topology("need at least two classes".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Topology("input shape has a zero extent".into()));
        }
        if let Some(&l) = self.pool_after.iter().find(|&&l| l >= self.depth()) {
            return Err(Error::Topology(format!(
                "pool after layer {l} beyond depth"
            )));
        }
        self.spatial_extents().map(|_| ())
    }

    /// Spatial `(h, w)` at the input of every layer plus the head.
    pub fn spatial_extents(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut out = Vec::with_capacity(self.depth() + 1);
        for l in 0..self.depth() {
            out.push((h, w));
            if self.pool_after.contains(&l) {
                if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                    return Err(Error::Topology(format!(
                        "spatial extent {h}×{w} cannot be pooled after layer {l}"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h < 1 || w < 1 {
            return Err(Error::Topology(
                "spatial extent collapses before the head".into(),
            ));
        }
        out.push((h, w));
        Ok(out)
    }

    pub fn head_spatial(&self) -> usize {
        let (h, w) = *self
            .spatial_extents()
            .expect("validated topology")
            .last()
            .expect("non-empty");
        h * w
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_shape[0]
        } else {
            self.widths[layer - 1]
        }
    }

    /// Trainable parameter count implied by the topology.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv: usize = (0..self.depth())
            .map(|l| self.in_channels(l) * self.widths[l] * k2 + self.widths[l])
            .sum();
        let last = *self.widths.last().expect("non-empty");
        conv + last * self.head_spatial() * self.num_classes + self.num_classes
    }

    /// The full-size model sizes are reported against: the same layout
    /// with [`REFERENCE_WIDTHS`] (cycled on the last entry for other depths).
    pub fn reference_full(&self) -> Topology {
        let widths = (0..self.depth())
            .map(|l| REFERENCE_WIDTHS[l.min(REFERENCE_WIDTHS.len() - 1)])
            .collect();
        Topology {
            widths,
            ..self.clone()
        }
    }

    pub fn size_report(&self) -> SizeReport {
        let reference = self.reference_full();
        let params = self.param_count();
        SizeReport {
            width_sum: self.complexity(),
            params,
            width_fraction: self.complexity() as f64 / reference.complexity() as f64,
            param_fraction: params as f64 / reference.param_count() as f64,
        }
    }

    /// Builds the forward graph. Layer widths are read off the weight
    /// shapes, so the same routine serves enlarged candidate networks.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let pad = (self.kernel - 1) / 2;
        let mut h = x;
        for (l, &(w, b)) in params.convs.iter().enumerate() {
            h = tape.conv2d(h, w, b, 1, pad)?;
            h = tape.activation(h, self.activation);
            if self.pool_after.contains(&l) {
                h = tape.pool2x2(h, self.pool)?;
            }
        }
        let n = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat])?;
        Ok(tape.dense(h, params.head.0, params.head.1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub width_sum: usize,
    pub params: usize,
    pub width_fraction: f64,
    pub param_fraction: f64,
}

/// Tape handles for every parameter of a network.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub convs: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, K, K]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[w_L · spatial, classes]`, rows grouped by channel.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A new output channel for [`Network::widen`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronInit {
    /// `[in, K, K]` for the widened layer.
    pub incoming: Vec<f64>,
    pub bias: f64,
    /// `[next_out, K, K]` when a conv layer follows, otherwise
    /// `[spatial, classes]` rows for the head.
    pub outgoing: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: Topology,
    convs: Vec<ConvLayer>,
    head: Head,
    seed: u64,
}

impl Network {
    /// He-initialised network, deterministic in `seed`.
    pub fn build(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = rng::substream(seed, "init", &[]);
        let k = topology.kernel;
        let mut convs = Vec::with_capacity(topology.depth());
        for l in 0..topology.depth() {
            let (cin, cout) = (topology.in_channels(l), topology.widths[l]);
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..cout * cin * k * k)
                .map(|_| normal.sample(&mut rng))
                .collect();
            convs.push(ConvLayer {
                weight: Tensor::new(vec![cout, cin, k, k], data)?,
                bias: Tensor::zeros(&[cout]),
            });
        }
        let rows = topology.widths[topology.depth() - 1] * topology.head_spatial();
        let c = topology.num_classes;
        let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive std");
        let data = (0..rows * c).map(|_| normal.sample(&mut rng)).collect();
        let head = Head {
            weight: Tensor::new(vec![rows, c], data)?,
            bias: Tensor::zeros(&[c]),
        };
        Ok(Self {
            topology,
            convs,
            head,
            seed,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn complexity(&self) -> usize {
        self.topology.complexity()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    pub fn size_report(&self) -> SizeReport {
        self.topology.size_report()
    }

    /// Parameters in declaration order: conv weight/bias pairs, then the head.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.convs.len() {
            out.push(format!("conv{l}.weight"));
            out.push(format!("conv{l}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    /// Puts every parameter on the tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(&t.clone().with_grad())
            } else {
                tape.leaf(t)
            }
        };
        let convs = self
            .convs
            .iter()
            .map(|c| (put(&c.weight), put(&c.bias)))
            .collect();
        let head = (put(&self.head.weight), put(&self.head.bias));
        ParamVars { convs, head }
    }

    /// Declaration-ordered vars, matching [`Network::parameters`].
    pub fn flatten_vars(params: &ParamVars) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &params.convs {
            out.push(w);
            out.push(b);
        }
        out.push(params.head.0);
        out.push(params.head.1);
        out
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        self.topology.forward(tape, params, x)
    }

    fn input_var(&self, tape: &mut Tape, images: &[f64]) -> Result<Var> {
        let [c, h, w] = self.topology.input_shape;
        let per = c * h * w;
        if images.len() % per != 0 {
            return Err(Error::Config(format!(
                "image buffer of {} values is not a multiple of {per}",
                images.len()
            )));
        }
        Ok(tape.constant(&[images.len() / per, c, h, w], images.to_vec())?)
    }

    /// Inference logits `[N, C]` for a flat `N×C×H×W` buffer.
    pub fn logits(&self, images: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = self.input_var(&mut tape, images)?;
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Predicted class per sample, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, images: &[f64], chunk: usize) -> Result<Vec<usize>> {
        let [c, h, w] = self.topology.input_shape;
        let per = c * h * w;
        let classes = self.topology.num_classes;
        let mut out = Vec::with_capacity(images.len() / per);
        for part in images.chunks(per * chunk.max(1)) {
            let z = self.logits(part)?;
            out.extend(z.chunks_exact(classes).map(argmax));
        }
        Ok(out)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.convs.len() {
            return Err(Error::Growth(format!(
                "layer {layer} out of range for depth {}",
                self.convs.len()
            )));
        }
        Ok(())
    }

    /// Length of a [`NeuronInit::outgoing`] slice for `layer`.
    pub fn outgoing_len(&self, layer: usize) -> usize {
        let k2 = self.topology.kernel * self.topology.kernel;
        if layer + 1 < self.convs.len() {
            self.topology.widths[layer + 1] * k2
        } else {
            self.topology.head_spatial() * self.topology.num_classes
        }
    }

    pub fn incoming_len(&self, layer: usize) -> usize {
        self.topology.in_channels(layer) * self.topology.kernel * self.topology.kernel
    }

    /// Appends `additions` as new output channels of `layer`. Existing
    /// parameters are left untouched; the following layer (or the head)
    /// gains the corresponding input slices.
    pub fn widen(&mut self, layer: usize, additions: &[NeuronInit]) -> Result<()> {
        self.check_layer(layer)?;
        let (inc, outc) = (self.incoming_len(layer), self.outgoing_len(layer));
        for (i, a) in additions.iter().enumerate() {
            if a.incoming.len() != inc {
                return Err(Error::Growth(format!(
                    "addition {i}: incoming slice has {} values, layer {layer} needs {inc}",
                    a.incoming.len()
                )));
            }
            if a.outgoing.len() != outc {
                return Err(Error::Growth(format!(
                    "addition {i}: outgoing slice has {} values, layer {layer} needs {outc}",
                    a.outgoing.len()
                )));
            }
        }
        if additions.is_empty() {
            return Ok(());
        }
        let k = self.topology.kernel;
        let k2 = k * k;
        let cin = self.topology.in_channels(layer);
        let old = self.topology.widths[layer];
        let new = old + additions.len();

        let conv = &mut self.convs[layer];
        let mut w = std::mem::take(&mut conv.weight).into_data();
        let mut b = std::mem::take(&mut conv.bias).into_data();
        for a in additions {
            w.extend_from_slice(&a.incoming);
            b.push(a.bias);
        }
        conv.weight = Tensor::new(vec![new, cin, k, k], w)?;
        conv.bias = Tensor::new(vec![new], b)?;

        if layer + 1 < self.convs.len() {
            let next = &mut self.convs[layer + 1];
            let f = next.weight.shape()[0];
            let old_w = std::mem::take(&mut next.weight).into_data();
            let mut w = Vec::with_capacity(f * new * k2);
            for r in 0..f {
                w.extend_from_slice(&old_w[r * old * k2..(r + 1) * old * k2]);
                for a in additions {
                    w.extend_from_slice(&a.outgoing[r * k2..(r + 1) * k2]);
                }
            }
            next.weight = Tensor::new(vec![f, new, k, k], w)?;
        } else {
            let s = self.topology.head_spatial();
            let c = self.topology.num_classes;
            let mut w = std::mem::take(&mut self.head.weight).into_data();
            for a in additions {
                w.extend_from_slice(&a.outgoing);
            }
            self.head.weight = Tensor::new(vec![new * s, c], w)?;
        }
        self.topology.widths[layer] = new;
        Ok(())
    }

    /// Duplicates `channel` of `layer`: the original keeps `W − delta`, the
    /// copy gets `W + delta`, and both carry half the original outgoing
    /// weights. With `delta = 0` the network function is unchanged.
    pub fn split(&mut self, layer: usize, channel: usize, delta: &[f64]) -> Result<()> {
        self.check_layer(layer)?;
        let width = self.topology.widths[layer];
        if channel >= width {
            return Err(Error::Growth(format!(
                "channel {channel} out of range for layer {layer} of width {width}"
            )));
        }
        let inc = self.incoming_len(layer);
        if delta.len() != inc {
            return Err(Error::Growth(format!(
                "split delta has {} values, layer {layer} needs {inc}",
                delta.len()
            )));
        }
        let k2 = self.topology.kernel * self.topology.kernel;
        let row = &mut self.convs[layer].weight.data_mut()[channel * inc..(channel + 1) * inc];
        let original = row.to_vec();
        for (w, d) in row.iter_mut().zip(delta) {
            *w -= d;
        }
        let incoming: Vec<f64> = original.iter().zip(delta).map(|(w, d)| w + d).collect();
        let bias = self.convs[layer].bias.data()[channel];

        let outgoing = if layer + 1 < self.convs.len() {
            let next = &mut self.convs[layer + 1].weight;
            let f = next.shape()[0];
            let data = next.data_mut();
            let mut out = Vec::with_capacity(f * k2);
            for r in 0..f {
                let start = (r * width + channel) * k2;
                for v in &mut data[start..start + k2] {
                    *v *= 0.5;
                }
                out.extend_from_slice(&data[start..start + k2]);
            }
            out
        } else {
            let s = self.topology.head_spatial();
            let c = self.topology.num_classes;
            let data = self.head.weight.data_mut();
            let block = &mut data[channel * s * c..(channel + 1) * s * c];
            for v in block.iter_mut() {
                *v *= 0.5;
            }
            block.to_vec()
        };
        self.widen(
            layer,
            &[NeuronInit {
                incoming,
                bias,
                outgoing,
            }],
        )
    }

    /// Writes the checkpoint container: magic, header length, JSON header,
    /// then raw little-endian `f64` parameter blocks in declaration order.
    pub fn write_checkpoint<W: Write>(
        &self,
        mut out: W,
        counters: &serde_json::Value,
    ) -> Result<()> {
        let blocks: Vec<BlockInfo> = self
            .parameter_names()
            .into_iter()
            .zip(self.parameters())
            .map(|(name, t)| BlockInfo {
                name,
                shape: t.shape().to_vec(),
                bytes: t.numel() * 8,
            })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            topology: self.topology.clone(),
            seed: self.seed,
            counters: counters.clone(),
            blocks,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in self.parameters() {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, serde_json::Value)> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown format {}", header.format)));
        }
        let mut net = Network::build(header.topology.clone(), header.seed)?;
        let names = net.parameter_names();
        if names.len() != header.blocks.len() {
            return Err(Error::Format("block count does not match topology".into()));
        }
        for ((t, name), info) in net
            .parameters_mut()
            .into_iter()
            .zip(&names)
            .zip(&header.blocks)
        {
            if &info.name != name || info.shape != t.shape() || info.bytes != t.numel() * 8 {
                return Err(Error::Format(format!(
                    "block {} does not match topology",
                    info.name
                )));
            }
            let mut buf = vec![0u8; info.bytes];
            input.read_exact(&mut buf)?;
            for (dst, src) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
            }
        }
        Ok((net, header.counters))
    }

    pub fn save(&self, path: &Path, counters: &serde_json::Value) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w, counters)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GEARCKPT";
const CHECKPOINT_FORMAT: &str = "gearlab-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    topology: Topology,
    seed: u64,
    counters: serde_json::Value,
    blocks: Vec<BlockInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
    bytes: usize,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Topology {
        Topology {
            widths: vec![4, 5, 3],
            kernel: 3,
            pool_after: vec![0, 2],
            pool: PoolKind::Max,
            num_classes: 3,
            input_shape: [3, 8, 8],
            activation: Activation::Relu,
        }
    }

    fn batch(n: usize, per: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::substream(seed, "test-batch", &[]);
        (0..n * per).map(|_| r.gen::<f64>()).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn complexity_is_width_sum() {
        let t = Topology::plain(4, 45, 3, [3, 16, 16]);
        assert_eq!(t.complexity(), 180);
        assert_eq!(Topology::desk_backbone(3).complexity(), 270);
    }

    #[test]
    fn conv_layer_param_count_closed_form() {
        let t = Topology {
            widths: vec![45, 45],
            kernel: 3,
            pool_after: vec![],
            pool: PoolKind::Max,
            num_classes: 3,
            input_shape: [45, 4, 4],
            activation: Activation::Relu,
        };
        let second_layer = t.param_count() - (45 * 45 * 9 + 45) - (45 * 16 * 3 + 3);
        assert_eq!(second_layer, 18270);
    }

    #[test]
    fn build_is_deterministic_and_runs() {
        let t = Topology::desk_backbone(3);
        let a = Network::build(t.clone(), 11).unwrap();
        let b = Network::build(t.clone(), 11).unwrap();
        assert_eq!(a, b);
        let c = Network::build(t, 12).unwrap();
        assert_ne!(a, c);
        let z = a.logits(&batch(2, 3 * 16 * 16, 1)).unwrap();
        assert_eq!(z.len(), 2 * 3);
        assert!(z.iter().all(|v| v.is_finite()));
        assert_eq!(a.param_count(), a.topology().param_count());
    }

    #[test]
    fn build_rejects_collapsed_spatial() {
        let mut t = small();
        t.input_shape = [3, 2, 2];
        assert!(matches!(Network::build(t, 0), Err(Error::Topology(_))));
        let mut t = small();
        t.kernel = 2;
        assert!(Network::build(t, 0).is_err());
        let mut t = small();
        t.widths = vec![4];
        assert!(Network::build(t, 0).is_err());
    }

    #[test]
    fn size_report_against_reference() {
        let t = Topology::desk_backbone(3);
        let r = t.size_report();
        assert_eq!(r.width_sum, 270);
        assert!((r.width_fraction - 270.0 / 1792.0).abs() < 1e-12);
        assert!(r.param_fraction > 0.0 && r.param_fraction < r.width_fraction);
    }

    #[test]
    fn zero_outgoing_widen_preserves_function() {
        let mut net = Network::build(small(), 3).unwrap();
        let x = batch(5, 3 * 64, 2);
        let before = net.logits(&x).unwrap();
        let snapshot = net.clone();
        let mut r = rng::substream(9, "t", &[]);
        for layer in 0..3 {
            let adds: Vec<NeuronInit> = (0..2)
                .map(|_| NeuronInit {
                    incoming: (0..net.incoming_len(layer))
                        .map(|_| r.gen::<f64>() - 0.5)
                        .collect(),
                    bias: 0.1,
                    outgoing: vec![0.0; net.outgoing_len(layer)],
                })
                .collect();
            net.widen(layer, &adds).unwrap();
        }
        assert!(max_abs_diff(&before, &net.logits(&x).unwrap()) <= 1e-12);
        assert_eq!(net.complexity(), snapshot.complexity() + 6);
        // Untouched slices are bitwise preserved.
        let w0 = &net.convs()[0].weight.data()[..snapshot.convs()[0].weight.numel()];
        assert_eq!(w0, snapshot.convs()[0].weight.data());
    }

    #[test]
    fn split_with_zero_delta_preserves_function() {
        let mut net = Network::build(small(), 4).unwrap();
        let x = batch(4, 3 * 64, 3);
        let before = net.logits(&x).unwrap();
        for layer in 0..3 {
            let zero = vec![0.0; net.incoming_len(layer)];
            net.split(layer, 1, &zero).unwrap();
        }
        assert!(max_abs_diff(&before, &net.logits(&x).unwrap()) <= 1e-9);
        assert_eq!(net.topology().widths, vec![5, 6, 4]);
    }

    #[test]
    fn widen_by_seventy_adds_seventy() {
        let mut net = Network::build(Topology::plain(3, 6, 3, [3, 8, 8]), 1).unwrap();
        let c0 = net.complexity();
        let adds = vec![
            NeuronInit {
                incoming: vec![0.0; net.incoming_len(1)],
                bias: 0.0,
                outgoing: vec![0.0; net.outgoing_len(1)],
            };
            70
        ];
        net.widen(1, &adds).unwrap();
        assert_eq!(net.complexity(), c0 + 70);
        assert_eq!(net.topology().widths[1], 76);
        assert_eq!(net.convs()[2].weight.shape(), &[6, 76, 3, 3]);
    }

    #[test]
    fn widen_rejects_inconsistent_slices() {
        let mut net = Network::build(small(), 1).unwrap();
        let bad = NeuronInit {
            incoming: vec![0.0; 3],
            bias: 0.0,
            outgoing: vec![0.0; net.outgoing_len(0)],
        };
        assert!(matches!(net.widen(0, &[bad]), Err(Error::Growth(_))));
        assert!(net.widen(7, &[]).is_err());
        assert!(net.split(0, 99, &vec![0.0; net.incoming_len(0)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = Network::build(small(), 5).unwrap();
        net.split(1, 0, &vec![0.01; net.incoming_len(1)]).unwrap();
        let counters = serde_json::json!({"steps": 12});
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf, &counters).unwrap();
        let (back, c) = Network::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert_eq!(c, counters);
        buf[0] = b'X';
        assert!(Network::read_checkpoint(&buf[..]).is_err());
    }
}
