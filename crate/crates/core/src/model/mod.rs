//! Trained-network representation, forward evaluation and block partition.
//!
//! Feature maps are flattened in (channel, row, col) row-major order at every
//! layer boundary, so a boundary vector is always a plain `Vec<f64>` and a
//! batch of them is a [`Matrix`] with one sample per row.

mod idx;
mod schema;

pub use idx::{load_mnist_idx, pool_input_9x9, write_idx_images, write_idx_labels, Sample};
pub use schema::{load_model, model_from_json, model_to_json};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{LinalgError, Matrix, Vector};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("layer {layer}: {message}")]
    Field { layer: usize, message: String },
    #[error("layer {layer}: unknown layer kind {kind:?}")]
    UnknownKind { layer: usize, kind: String },
    #[error("layer {layer} ({kind}): {message}")]
    Shape { layer: usize, kind: &'static str, message: String },
    #[error("shape chain broken between layer {from} ({from_kind}) and layer {to} ({to_kind}): {message}")]
    ShapeChain { from: usize, from_kind: &'static str, to: usize, to_kind: &'static str, message: String },
    #[error("input has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("{path}: bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: {message}")]
    Idx { path: String, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Shape of the tensor at a layer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", try_from = "Vec<usize>")]
pub enum Shape {
    Flat(usize),
    Spatial { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Spatial { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        (*self).into()
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Vec<usize> {
        match s {
            Shape::Flat(n) => vec![n],
            Shape::Spatial { channels, height, width } => vec![channels, height, width],
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = String;

    fn try_from(v: Vec<usize>) -> std::result::Result<Self, String> {
        match v.as_slice() {
            &[n] => Ok(Shape::Flat(n)),
            &[channels, height, width] => Ok(Shape::Spatial { channels, height, width }),
            other => Err(format!("shape must be [n] or [c, h, w], got {other:?}")),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Flat(n) => write!(f, "[{n}]"),
            Shape::Spatial { channels, height, width } => write!(f, "[{channels}, {height}, {width}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out × in
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// out_channels × in_channels × kh × kw, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool2d(Pool),
    AvgPool2d(Pool),
    Activation(Activation),
    Flatten,
}

fn window_out(len: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if window == 0 || stride == 0 || padded < window {
        None
    } else {
        Some((padded - window) / stride + 1)
    }
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::MaxPool2d(_) => "maxpool2d",
            LayerSpec::AvgPool2d(_) => "avgpool2d",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, LayerSpec::MaxPool2d(_) | LayerSpec::AvgPool2d(_))
    }

    /// Output shape for the given input shape, or a description of why the
    /// input is not acceptable.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match self {
            LayerSpec::Dense(d) => {
                if input.len() != d.weight.cols() {
                    return Err(format!("expects {} inputs, receives shape {input}", d.weight.cols()));
                }
                Ok(Shape::Flat(d.weight.rows()))
            }
            LayerSpec::Conv2d(c) => {
                let Shape::Spatial { channels, height, width } = input else {
                    return Err(format!("needs a [c, h, w] input, receives {input}"));
                };
                if channels != c.in_channels {
                    return Err(format!("expects {} input channels, receives {input}", c.in_channels));
                }
                let h = window_out(height, c.padding.0, c.kernel.0, c.stride.0);
                let w = window_out(width, c.padding.1, c.kernel.1, c.stride.1);
                match (h, w) {
                    (Some(height), Some(width)) => Ok(Shape::Spatial { channels: c.out_channels, height, width }),
                    _ => Err(format!("kernel {:?} does not fit input {input}", c.kernel)),
                }
            }
            LayerSpec::MaxPool2d(p) | LayerSpec::AvgPool2d(p) => {
                let Shape::Spatial { channels, height, width } = input else {
                    return Err(format!("needs a [c, h, w] input, receives {input}"));
                };
                let h = window_out(height, 0, p.window.0, p.stride.0);
                let w = window_out(width, 0, p.window.1, p.stride.1);
                match (h, w) {
                    (Some(height), Some(width)) => Ok(Shape::Spatial { channels, height, width }),
                    _ => Err(format!("window {:?} does not fit input {input}", p.window)),
                }
            }
            LayerSpec::Activation(_) => Ok(input),
            LayerSpec::Flatten => Ok(Shape::Flat(input.len())),
        }
    }

    /// Applies the layer to every row of `batch` (one flattened sample per
    /// row). Each sample is processed independently of the others.
    pub fn apply_batch(&self, input: Shape, output: Shape, batch: &Matrix) -> Matrix {
        debug_assert_eq!(batch.cols(), input.len());
        match self {
            LayerSpec::Dense(d) => {
                let mut out = d.weight.mul_rows(batch).expect("shape chain validated at load");
                let n = out.cols();
                for s in 0..out.rows() {
                    for (j, b) in d.bias.iter().enumerate() {
                        out[(s, j)] += b;
                    }
                }
                debug_assert_eq!(n, output.len());
                out
            }
            LayerSpec::Conv2d(c) => per_sample(batch, output.len(), |x, y| conv2d(c, input, output, x, y)),
            LayerSpec::MaxPool2d(p) => per_sample(batch, output.len(), |x, y| pool(p, input, output, x, y, true)),
            LayerSpec::AvgPool2d(p) => per_sample(batch, output.len(), |x, y| pool(p, input, output, x, y, false)),
            LayerSpec::Activation(a) => {
                let data = batch.as_slice().iter().map(|&v| a.apply(v)).collect();
                Matrix::from_vec_unchecked(batch.rows(), batch.cols(), data)
            }
            LayerSpec::Flatten => batch.clone(),
        }
    }
}

fn per_sample(batch: &Matrix, out_len: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Matrix {
    let mut data = vec![0.0; batch.rows() * out_len];
    for (s, y) in data.chunks_exact_mut(out_len.max(1)).enumerate().take(batch.rows()) {
        f(batch.row(s), y);
    }
    Matrix::from_vec_unchecked(batch.rows(), out_len, data)
}

fn spatial(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Spatial { channels, height, width } => (channels, height, width),
        Shape::Flat(n) => (1, 1, n),
    }
}

fn conv2d(c: &Conv2d, input: Shape, output: Shape, x: &[f64], y: &mut [f64]) {
    let (ic, ih, iw) = spatial(input);
    let (oc, oh, ow) = spatial(output);
    let (kh, kw) = c.kernel;
    let (sh, sw) = c.stride;
    let (ph, pw) = (c.padding.0 as isize, c.padding.1 as isize);
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = c.bias[o];
                for i in 0..ic {
                    let wbase = (o * ic + i) * kh * kw;
                    let xbase = i * ih * iw;
                    for ky in 0..kh {
                        let yy = (oy * sh + ky) as isize - ph;
                        if yy < 0 || yy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (ox * sw + kx) as isize - pw;
                            if xx < 0 || xx >= iw as isize {
                                continue;
                            }
                            acc += c.weight[wbase + ky * kw + kx] * x[xbase + yy as usize * iw + xx as usize];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

fn pool(p: &Pool, input: Shape, output: Shape, x: &[f64], y: &mut [f64], max: bool) {
    let (_, ih, iw) = spatial(input);
    let (oc, oh, ow) = spatial(output);
    let area = (p.window.0 * p.window.1) as f64;
    for c in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..p.window.0 {
                    for kx in 0..p.window.1 {
                        let v = x[(c * ih + oy * p.stride.0 + ky) * iw + ox * p.stride.1 + kx];
                        if max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                y[(c * oh + oy) * ow + ox] = if max { acc } else { acc / area };
            }
        }
    }
}

/// A validated feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    name: String,
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    /// Shape at every layer boundary; `shapes[0]` is the input shape.
    shapes: Vec<Shape>,
}

impl NetworkModel {
    pub fn new(name: impl Into<String>, input_shape: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::Invalid("a model needs at least one layer".into()));
        }
        if input_shape.is_empty() {
            return Err(ModelError::Invalid("input shape has zero elements".into()));
        }
        let mut shapes = vec![input_shape];
        for (i, layer) in layers.iter().enumerate() {
            let input = shapes[i];
            let out = layer.output_shape(input).map_err(|message| {
                if i == 0 {
                    ModelError::Shape {
                        layer: 0,
                        kind: layer.kind(),
                        message: format!("model input {input}: {message}"),
                    }
                } else {
                    ModelError::ShapeChain {
                        from: i - 1,
                        from_kind: layers[i - 1].kind(),
                        to: i,
                        to_kind: layer.kind(),
                        message,
                    }
                }
            })?;
            if out.is_empty() {
                return Err(ModelError::Shape {
                    layer: i,
                    kind: layer.kind(),
                    message: "produces an empty output".into(),
                });
            }
            shapes.push(out);
        }
        Ok(Self { name: name.into(), input_shape, layers, shapes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.len()
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(0, Shape::len)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Shapes of all `layers + 1` boundaries.
    pub fn boundary_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Runs layers `first..=last` on a batch of flattened samples.
    pub fn run_layers_batch(&self, first: usize, last: usize, batch: &Matrix) -> Result<Matrix> {
        let expected = self.shapes[first].len();
        if batch.cols() != expected {
            return Err(ModelError::InputLength { expected, got: batch.cols() });
        }
        let mut cur = batch.clone();
        for i in first..=last {
            cur = self.layers[i].apply_batch(self.shapes[i], self.shapes[i + 1], &cur);
        }
        Ok(cur)
    }
}

/// Output of [`forward`]: one flattened vector per layer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub output: Vector,
    /// `trace[0]` is the input and `trace[layers]` the output.
    pub trace: Vec<Vector>,
}

pub fn forward(model: &NetworkModel, x: &[f64]) -> Result<ForwardTrace> {
    let traces = forward_batch(model, &Matrix::new(1, x.len(), x.to_vec())?)?;
    let trace: Vec<Vector> = traces.into_iter().map(|m| Vector::from_vec_unchecked(m.into_vec())).collect();
    Ok(ForwardTrace { output: trace.last().cloned().expect("at least one layer"), trace })
}

/// Forward pass of a batch (one sample per row), returning the batch at
/// every boundary.
pub fn forward_batch(model: &NetworkModel, batch: &Matrix) -> Result<Vec<Matrix>> {
    if batch.cols() != model.input_len() {
        return Err(ModelError::InputLength { expected: model.input_len(), got: batch.cols() });
    }
    let mut out = Vec::with_capacity(model.layers.len() + 1);
    out.push(batch.clone());
    for (i, layer) in model.layers.iter().enumerate() {
        let next = layer.apply_batch(model.shapes[i], model.shapes[i + 1], &out[i]);
        out.push(next);
    }
    Ok(out)
}

/// Block category by input/output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    /// input smaller than output
    S2L,
    /// input larger than output
    L2S,
    /// input equal to output
    E2E,
}

impl Category {
    pub fn of(in_dim: usize, out_dim: usize) -> Self {
        match in_dim.cmp(&out_dim) {
            std::cmp::Ordering::Less => Category::S2L,
            std::cmp::Ordering::Greater => Category::L2S,
            std::cmp::Ordering::Equal => Category::E2E,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A contiguous run of layers treated as one subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    /// Inclusive `[first, last]` layer indices.
    pub layer_range: [usize; 2],
    pub in_dim: usize,
    pub out_dim: usize,
    pub category: Category,
    /// Flattened dimension of every boundary from the block input to its
    /// output, inclusive.
    pub layer_dims: Vec<usize>,
    pub input_shape: Shape,
    pub output_shape: Shape,
}

impl Block {
    pub fn first(&self) -> usize {
        self.layer_range[0]
    }

    pub fn last(&self) -> usize {
        self.layer_range[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Splits the model into blocks; `ranges` must tile `0..layers` in order.
pub fn partition(model: &NetworkModel, ranges: &[[usize; 2]]) -> Result<BlockPartition> {
    let n = model.layers.len();
    if ranges.is_empty() {
        return Err(ModelError::Partition("no blocks given".into()));
    }
    let mut next = 0;
    let mut blocks = Vec::with_capacity(ranges.len());
    for (id, &[first, last]) in ranges.iter().enumerate() {
        if first != next {
            let what = if first > next { "gap" } else { "overlap" };
            return Err(ModelError::Partition(format!(
                "{what} before block {id}: it starts at layer {first}, expected {next}"
            )));
        }
        if last < first {
            return Err(ModelError::Partition(format!("block {id} ends ({last}) before it starts ({first})")));
        }
        if last >= n {
            return Err(ModelError::Partition(format!("block {id} ends at layer {last} but the model has {n} layers")));
        }
        let layer_dims: Vec<usize> = model.shapes[first..=last + 1].iter().map(Shape::len).collect();
        let (in_dim, out_dim) = (layer_dims[0], *layer_dims.last().unwrap());
        blocks.push(Block {
            id,
            layer_range: [first, last],
            in_dim,
            out_dim,
            category: Category::of(in_dim, out_dim),
            layer_dims,
            input_shape: model.shapes[first],
            output_shape: model.shapes[last + 1],
        });
        next = last + 1;
    }
    if next != n {
        return Err(ModelError::Partition(format!("layers {next}..{} are not covered", n - 1)));
    }
    Ok(BlockPartition { blocks })
}

/// One block per layer.
pub fn per_layer_ranges(model: &NetworkModel) -> Vec<[usize; 2]> {
    (0..model.layers.len()).map(|i| [i, i]).collect()
}

/// One block per weight or pooling layer, each absorbing the activation and
/// flatten layers that follow it. Layers before the first weight or pooling
/// layer join the first block.
pub fn grouped_layer_ranges(model: &NetworkModel) -> Vec<[usize; 2]> {
    let n = model.layers.len();
    let starts: Vec<usize> =
        (0..n).filter(|&i| !matches!(model.layers[i], LayerSpec::Activation(_) | LayerSpec::Flatten)).collect();
    if starts.is_empty() {
        return vec![[0, n - 1]];
    }
    let mut bounds: Vec<usize> = starts.clone();
    bounds[0] = 0;
    bounds.push(n);
    bounds.windows(2).map(|w| [w[0], w[1] - 1]).collect()
}

/// Coarse role of a block: the most specific layer kind it contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockFamily {
    Conv,
    Dense,
    Pool,
    Other,
}

impl BlockFamily {
    pub fn of(model: &NetworkModel, block: &Block) -> Self {
        let layers = &model.layers[block.first()..=block.last()];
        if layers.iter().any(|l| matches!(l, LayerSpec::Conv2d(_))) {
            BlockFamily::Conv
        } else if layers.iter().any(|l| matches!(l, LayerSpec::Dense(_))) {
            BlockFamily::Dense
        } else if layers.iter().any(LayerSpec::is_pool) {
            BlockFamily::Pool
        } else {
            BlockFamily::Other
        }
    }
}

/// Layer kinds of a block joined by `+`, e.g. `conv2d+tanh`.
pub fn block_name(model: &NetworkModel, block: &Block) -> String {
    model.layers[block.first()..=block.last()]
        .iter()
        .map(|l| match l {
            LayerSpec::Activation(a) => a.name(),
            other => other.kind(),
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Predicted class (arg-max of the output) for each row of `batch`.
pub fn classify_batch(model: &NetworkModel, batch: &Matrix) -> Result<Vec<usize>> {
    let out = model.run_layers_batch(0, model.layers.len() - 1, batch)?;
    Ok((0..out.rows())
        .map(|r| {
            let row = out.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Fraction of samples classified correctly, evaluated in batches.
pub fn accuracy(model: &NetworkModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in samples.chunks(1024) {
        let data = chunk.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let batch = Matrix::new(chunk.len(), model.input_len(), data)?;
        let pred = classify_batch(model, &batch)?;
        correct += pred.iter().zip(chunk).filter(|(p, (_, l))| **p == usize::from(*l)).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn block_forward(model: &NetworkModel, block: &Block, x: &[f64]) -> Result<Vector> {
    let out = block_forward_batch(model, block, &Matrix::new(1, x.len(), x.to_vec())?)?;
    Ok(Vector::from_vec_unchecked(out.into_vec()))
}

pub fn block_forward_batch(model: &NetworkModel, block: &Block, batch: &Matrix) -> Result<Matrix> {
    if batch.cols() != block.in_dim {
        return Err(ModelError::InputLength { expected: block.in_dim, got: batch.cols() });
    }
    model.run_layers_batch(block.first(), block.last(), batch)
}

/// Output-channel layout of a block that ends in a convolution (optionally
/// followed by element-wise activations): channel `c` owns output rows
/// `row_ranges[c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMeta {
    pub out_channels: usize,
    pub row_ranges: Vec<[usize; 2]>,
}

pub fn conv_meta(model: &NetworkModel, block: &Block) -> Option<ConvMeta> {
    let layers = &model.layers[block.first()..=block.last()];
    let last_conv = layers.iter().rposition(|l| matches!(l, LayerSpec::Conv2d(_)))?;
    if !layers[last_conv + 1..].iter().all(|l| matches!(l, LayerSpec::Activation(_))) {
        return None;
    }
    let Shape::Spatial { channels, height, width } = block.output_shape else {
        return None;
    };
    let per = height * width;
    Some(ConvMeta { out_channels: channels, row_ranges: (0..channels).map(|c| [c * per, (c + 1) * per]).collect() })
}
