//! Fully convolutional U-Net mapping a diffusivity field to a solution field
//! of the same extent.
//!
//! Encoder level `l` applies conv, batch norm and leaky ReLU, keeps the result
//! as a skip connection and halves the extent by mean pooling. Decoder level
//! `l` runs its up path (initially a single stride-2 transposed conv with
//! batch norm and activation), concatenates the skip and merges with a conv
//! block. A final conv and sigmoid produce one channel in `(0, 1)`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm, concat_channels, conv, conv_transpose, downsample2, leaky_relu, sigmoid, BnStats, Pool, StatReducer,
    Tape, Tensor, Var,
};

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_filters: usize,
    pub spatial_rank: usize,
    pub leaky_slope: f64,
    pub kernel_size: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            depth: 3,
            base_filters: 16,
            spatial_rank: 2,
            leaky_slope: 0.01,
            kernel_size: 3,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("unet", msg));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.base_filters < 1 {
            return bad("base_filters must be at least 1".into());
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial_rank must be 2 or 3, found {}", self.spatial_rank));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, found {}", self.kernel_size));
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }

    /// Channels produced at encoder/decoder level `l`.
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Smallest admissible input extent.
    pub fn min_extent(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

/// Convolution (or transposed convolution) optionally followed by batch
/// norm and leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: Option<Norm>,
}

/// Layout descriptor of a layer, enough to rebuild it without weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub norm: bool,
}

impl Layer {
    fn new(shape: LayerShape, spec: &UNetSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.kernel_size;
        let taps = k.pow(spec.spatial_rank as u32);
        let mut kshape = match shape.kind {
            LayerKind::Conv => vec![shape.cout, shape.cin],
            LayerKind::ConvTranspose => vec![shape.cin, shape.cout],
        };
        kshape.extend(std::iter::repeat_n(k, spec.spatial_rank));
        let bound = (6.0 / (shape.cin * taps) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let kernel = Tensor::from_fn(&kshape, |_| dist.sample(rng));
        Layer {
            kind: shape.kind,
            cin: shape.cin,
            cout: shape.cout,
            stride: shape.stride,
            kernel,
            bias: Tensor::zeros(&[shape.cout]),
            norm: shape.norm.then(|| Norm {
                gamma: Tensor::full(&[shape.cout], 1.0),
                beta: Tensor::zeros(&[shape.cout]),
                stats: BnStats::new(shape.cout),
            }),
        }
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            kind: self.kind,
            cin: self.cin,
            cout: self.cout,
            stride: self.stride,
            norm: self.norm.is_some(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.kernel, &self.bias];
        if let Some(n) = &self.norm {
            p.push(&n.gamma);
            p.push(&n.beta);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.kernel, &mut self.bias];
        if let Some(n) = &mut self.norm {
            p.push(&mut n.gamma);
            p.push(&mut n.beta);
        }
        p
    }
}

/// One adaptation event: the up-path layer that was removed and the layers appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub seed: u64,
    pub removed: LayerShape,
    pub added: Vec<LayerShape>,
}

/// Network weights, batch-norm running statistics and architecture history.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    spec: UNetSpec,
    encoder: Vec<Layer>,
    /// Up path of each decoder level, indexed by level.
    up: Vec<Vec<Layer>>,
    decoder: Vec<Layer>,
    head: Layer,
    history: Vec<Adaptation>,
}

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Default)]
pub enum Mode {
    /// Normalize with running statistics.
    #[default]
    Eval,
    /// Normalize with mini-batch statistics, optionally pooled across workers.
    Train(Option<Arc<dyn StatReducer>>),
}

/// Result of recording a forward pass on a tape.
pub struct Recorded {
    pub output: Var,
    /// One leaf per parameter tensor, in declaration order.
    pub params: Vec<Var>,
}

fn layer_shapes_initial(spec: &UNetSpec) -> (Vec<LayerShape>, Vec<LayerShape>, Vec<LayerShape>, LayerShape) {
    let block = |kind, cin, cout, stride| LayerShape {
        kind,
        cin,
        cout,
        stride,
        norm: true,
    };
    let d = spec.depth;
    let encoder = (0..d)
        .map(|l| {
            let cin = if l == 0 { 1 } else { spec.filters(l - 1) };
            block(LayerKind::Conv, cin, spec.filters(l), 1)
        })
        .collect();
    let up = (0..d)
        .map(|l| {
            let cin = if l + 1 == d { spec.filters(d - 1) } else { spec.filters(l + 1) };
            block(LayerKind::ConvTranspose, cin, spec.filters(l), 2)
        })
        .collect();
    let decoder = (0..d)
        .map(|l| block(LayerKind::Conv, 2 * spec.filters(l), spec.filters(l), 1))
        .collect();
    let head = LayerShape {
        kind: LayerKind::Conv,
        cin: spec.filters(0),
        cout: 1,
        stride: 1,
        norm: false,
    };
    (encoder, up, decoder, head)
}

/// Layers appended when `removed` is dropped from the finest up path.
fn adaptation_shapes(removed: &LayerShape) -> Vec<LayerShape> {
    let block = |kind, cin, cout, stride| LayerShape {
        kind,
        cin,
        cout,
        stride,
        norm: true,
    };
    vec![
        block(LayerKind::Conv, removed.cin, removed.cin, 1),
        block(LayerKind::ConvTranspose, removed.cin, removed.cout, removed.stride),
        block(LayerKind::ConvTranspose, removed.cout, removed.cout, 1),
    ]
}

/// Parameters of a layer with the given layout.
pub fn layer_parameter_count(shape: &LayerShape, spec: &UNetSpec) -> usize {
    let taps = spec.kernel_size.pow(spec.spatial_rank as u32);
    shape.cin * shape.cout * taps + shape.cout + if shape.norm { 2 * shape.cout } else { 0 }
}

impl ModelState {
    /// Fresh network with Kaiming-uniform kernels drawn from `seed`.
    pub fn build(spec: &UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, up, dec, head) = layer_shapes_initial(spec);
        let encoder = enc.into_iter().map(|s| Layer::new(s, spec, &mut rng)).collect();
        // Decoder layers are drawn in declaration order: deepest level first.
        let mut up_layers: Vec<Vec<Layer>> = vec![Vec::new(); spec.depth];
        let mut decoder: Vec<Option<Layer>> = vec![None; spec.depth];
        for l in (0..spec.depth).rev() {
            up_layers[l].push(Layer::new(up[l], spec, &mut rng));
            decoder[l] = Some(Layer::new(dec[l], spec, &mut rng));
        }
        let head = Layer::new(head, spec, &mut rng);
        Ok(ModelState {
            spec: spec.clone(),
            encoder,
            up: up_layers,
            decoder: decoder.into_iter().map(Option::unwrap).collect(),
            head,
            history: Vec::new(),
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn history(&self) -> &[Adaptation] {
        &self.history
    }

    /// All layers in declaration order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out: Vec<&Layer> = self.encoder.iter().collect();
        for l in (0..self.spec.depth).rev() {
            out.extend(self.up[l].iter());
            out.push(&self.decoder[l]);
        }
        out.push(&self.head);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut out: Vec<&mut Layer> = self.encoder.iter_mut().collect();
        let mut ups: Vec<_> = self.up.iter_mut().map(Some).collect();
        let mut decs: Vec<_> = self.decoder.iter_mut().map(Some).collect();
        for l in (0..self.spec.depth).rev() {
            out.extend(ups[l].take().unwrap().iter_mut());
            out.push(decs[l].take().unwrap());
        }
        out.push(&mut self.head);
        out
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut().into_iter().flat_map(Layer::params_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters flattened in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let count = self.parameter_count();
        if flat.len() != count {
            return Err(Error::shape("set_flat_params", "parameters", count, flat.len()));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Running statistics of every batch-norm layer in declaration order.
    pub fn bn_stats(&self) -> Vec<&BnStats> {
        self.layers().into_iter().filter_map(|l| l.norm.as_ref().map(|n| &n.stats)).collect()
    }

    pub fn bn_stats_mut(&mut self) -> Vec<&mut BnStats> {
        self.layers_mut()
            .into_iter()
            .filter_map(|l| l.norm.as_mut().map(|n| &mut n.stats))
            .collect()
    }

    /// Hash of the architecture and adaptation history; changes exactly when the
    /// layer structure does.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for a in &self.history {
            h.update(serde_json::to_vec(&(a.removed, &a.added)).expect("shapes serialize"));
        }
        hex(&h.finalize())
    }

    /// Hash of every parameter and running statistic, bitwise.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for s in self.bn_stats() {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checks that an input has one channel and equal power-of-two extents of
    /// at least the minimum size.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = self.spec.spatial_rank;
        if shape.len() != rank + 2 {
            return Err(Error::invalid(
                "unet",
                format!("expected a rank-{rank} field batch, found shape {shape:?}"),
            ));
        }
        if shape[1] != 1 {
            return Err(Error::shape("unet", "channels", 1, shape[1]));
        }
        let n = shape[2];
        if shape[2..].iter().any(|&e| e != n) {
            return Err(Error::invalid("unet", format!("spatial extents differ: {:?}", &shape[2..])));
        }
        if !n.is_power_of_two() || n < self.spec.min_extent() {
            return Err(Error::invalid(
                "unet",
                format!(
                    "extent {n} must be a power of two of at least {}",
                    self.spec.min_extent()
                ),
            ));
        }
        Ok(())
    }

    /// Records the network applied to `input` on `tape`. In training mode the
    /// parameters are gradient leaves and the running statistics are updated.
    pub fn record(&mut self, tape: &mut Tape, input: Var, mode: &Mode) -> Result<Recorded> {
        let (rec, stats) = self.run(tape, input, mode)?;
        if let Mode::Train(_) = mode {
            for (dst, src) in self.bn_stats_mut().into_iter().zip(stats) {
                *dst = src;
            }
        }
        Ok(rec)
    }

    /// Output field for a batch of diffusivities, using running statistics.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (rec, _) = self.run(&mut tape, x, &Mode::Eval)?;
        Ok(tape.value(rec.output).clone())
    }

    fn run(&self, tape: &mut Tape, input: Var, mode: &Mode) -> Result<(Recorded, Vec<BnStats>)> {
        self.check_input(tape.value(input).shape())?;
        let training = matches!(mode, Mode::Train(_));
        let reducer = match mode {
            Mode::Train(r) => r.as_ref(),
            Mode::Eval => None,
        };
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let slope = self.spec.leaky_slope;
        let mut apply = |tape: &mut Tape, layer: &Layer, x: Var| -> Result<Var> {
            let k = tape.leaf(layer.kernel.clone(), training);
            let b = tape.leaf(layer.bias.clone(), training);
            params.extend([k, b]);
            let pad = self.spec.kernel_size / 2;
            let y = match layer.kind {
                LayerKind::Conv => conv(tape, x, k, b, layer.stride, pad)?,
                LayerKind::ConvTranspose => conv_transpose(tape, x, k, b, layer.stride, pad)?,
            };
            let Some(norm) = &layer.norm else {
                return Ok(y);
            };
            let g = tape.leaf(norm.gamma.clone(), training);
            let be = tape.leaf(norm.beta.clone(), training);
            params.extend([g, be]);
            let mut s = norm.stats.clone();
            let y = batchnorm(tape, y, g, be, &mut s, training, BN_MOMENTUM, reducer)?;
            stats.push(s);
            Ok(leaky_relu(tape, y, slope))
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for layer in &self.encoder {
            let y = apply(tape, layer, x)?;
            skips.push(y);
            x = downsample2(tape, y, Pool::Mean)?;
        }
        for l in (0..self.spec.depth).rev() {
            for layer in &self.up[l] {
                x = apply(tape, layer, x)?;
            }
            let skip = skips[l];
            let (a, b) = (tape.value(x).spatial(), tape.value(skip).spatial());
            if a != b {
                return Err(Error::invalid(
                    "unet",
                    format!("skip connection at level {l} joins extents {a:?} and {b:?}"),
                ));
            }
            let merged = concat_channels(tape, x, skip)?;
            x = apply(tape, &self.decoder[l], merged)?;
        }
        let y = apply(tape, &self.head, x)?;
        let output = sigmoid(tape, y);
        Ok((Recorded { output, params }, stats))
    }

    /// Replaces the last layer of the finest up path with a conv block and
    /// two transposed-conv blocks that preserve the output shape. Retained
    /// layers keep their weights; new layers are initialized from `seed`.
    pub fn adapt(&self, seed: u64) -> Result<Self> {
        if self.spec.depth < 2 {
            return Err(Error::invalid("adapt", "adaptation requires a network of depth at least 2"));
        }
        let mut next = self.clone();
        let removed = next.up[0].pop().expect("up path is never empty").shape();
        let added = adaptation_shapes(&removed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &added {
            next.up[0].push(Layer::new(*s, &self.spec, &mut rng));
        }
        next.history.push(Adaptation { seed, removed, added });
        Ok(next)
    }

    /// Rebuilds the layer structure from an architecture and adaptation history, with
    /// freshly initialized weights.
    pub(crate) fn skeleton(spec: &UNetSpec, history: &[Adaptation]) -> Result<Self> {
        let mut state = Self::build(spec, 0)?;
        for a in history {
            if state.up[0].last().map(Layer::shape) != Some(a.removed) || adaptation_shapes(&a.removed) != a.added {
                return Err(Error::Format("adaptation history does not match the architecture".into()));
            }
            state = state.adapt(a.seed)?;
        }
        Ok(state)
    }
}

/// Analytic parameter count of an unadapted network.
pub fn analytic_parameter_count(spec: &UNetSpec) -> usize {
    let (enc, up, dec, head) = layer_shapes_initial(spec);
    enc.iter()
        .chain(&up)
        .chain(&dec)
        .chain(std::iter::once(&head))
        .map(|s| layer_parameter_count(s, spec))
        .sum()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
