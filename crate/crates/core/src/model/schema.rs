//! JSON model files.
//!
//! ```json
//! {"name": "net", "input_shape": [1, 28, 28], "layers": [
//!   {"kind": "conv2d", "out_channels": 6, "in_channels": 1, "kernel": [5, 5],
//!    "stride": [1, 1], "padding": [0, 0], "weight": [[[[...]]]], "bias": [...]},
//!   {"kind": "activation", "fn": "tanh"},
//!   {"kind": "maxpool2d", "window": [2, 2], "stride": [2, 2]},
//!   {"kind": "flatten"},
//!   {"kind": "dense", "out": 10, "in": 864, "weight": [[...]], "bias": [...]}
//! ]}
//! ```
//!
//! Every layer may also carry `"output_shape"`; when present it is checked
//! against the shape the loader derives.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Activation, Conv2d, Dense, LayerSpec, ModelError, NetworkModel, Pool, Result, Shape};
use crate::linalg::Matrix;

const KINDS: [&str; 6] = ["dense", "conv2d", "maxpool2d", "avgpool2d", "activation", "flatten"];

/// Arbitrarily nested arrays of numbers.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Nested {
    Number(f64),
    List(Vec<Nested>),
}

impl Nested {
    /// Flattens to row-major order, checking the nesting against `dims`.
    /// A single flat list holding the full element count is accepted too.
    fn flatten(&self, dims: &[usize]) -> std::result::Result<Vec<f64>, String> {
        let total: usize = dims.iter().product();
        if let Nested::List(items) = self {
            if dims.len() > 1 && items.iter().all(|i| matches!(i, Nested::Number(_))) {
                if items.len() != total {
                    return Err(format!("declared {dims:?} needs {total} numbers, got {}", items.len()));
                }
                return Ok(items.iter().map(|i| if let Nested::Number(v) = i { *v } else { 0.0 }).collect());
            }
        }
        let mut out = Vec::with_capacity(total);
        self.walk(dims, &mut Vec::new(), &mut out)?;
        Ok(out)
    }

    fn walk(&self, dims: &[usize], at: &mut Vec<usize>, out: &mut Vec<f64>) -> std::result::Result<(), String> {
        match (self, dims.split_first()) {
            (Nested::Number(v), None) => {
                out.push(*v);
                Ok(())
            }
            (Nested::List(items), Some((&d, rest))) => {
                if items.len() != d {
                    return Err(format!("array at {at:?} has {} entries, declared {d}", items.len()));
                }
                for (i, item) in items.iter().enumerate() {
                    at.push(i);
                    item.walk(rest, at, out)?;
                    at.pop();
                }
                Ok(())
            }
            (Nested::Number(_), Some(_)) => Err(format!("expected an array at {at:?}, found a number")),
            (Nested::List(_), None) => Err(format!("expected a number at {at:?}, found an array")),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDense {
    #[allow(dead_code)]
    kind: String,
    out: usize,
    #[serde(rename = "in")]
    inp: usize,
    weight: Nested,
    bias: Vec<f64>,
    output_shape: Option<Shape>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConv {
    #[allow(dead_code)]
    kind: String,
    out_channels: usize,
    in_channels: usize,
    kernel: [usize; 2],
    #[serde(default = "unit_pair")]
    stride: [usize; 2],
    #[serde(default)]
    padding: [usize; 2],
    weight: Nested,
    bias: Vec<f64>,
    output_shape: Option<Shape>,
}

fn unit_pair() -> [usize; 2] {
    [1, 1]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPool {
    #[allow(dead_code)]
    kind: String,
    window: [usize; 2],
    stride: Option<[usize; 2]>,
    output_shape: Option<Shape>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActivation {
    #[allow(dead_code)]
    kind: String,
    #[serde(rename = "fn")]
    func: Activation,
    output_shape: Option<Shape>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlatten {
    #[allow(dead_code)]
    kind: String,
    output_shape: Option<Shape>,
}

#[derive(Deserialize)]
struct RawModel {
    name: String,
    input_shape: Shape,
    layers: Vec<Value>,
}

fn field<T: DeserializeOwned>(layer: usize, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| ModelError::Field { layer, message: e.to_string() })
}

fn check_finite(layer: usize, kind: &'static str, what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(ModelError::Shape { layer, kind, message: format!("{what}[{i}] is not finite") }),
        None => Ok(()),
    }
}

fn parse_layer(index: usize, v: &Value) -> Result<(LayerSpec, Option<Shape>)> {
    let kind = v
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| ModelError::Field { layer: index, message: "missing string field `kind`".into() })?;
    if !KINDS.contains(&kind) {
        return Err(ModelError::UnknownKind { layer: index, kind: kind.to_string() });
    }
    let shape_err = |kind: &'static str, message: String| ModelError::Shape { layer: index, kind, message };
    Ok(match kind {
        "dense" => {
            let raw: RawDense = field(index, v)?;
            let weight =
                raw.weight.flatten(&[raw.out, raw.inp]).map_err(|m| shape_err("dense", format!("weight: {m}")))?;
            if raw.bias.len() != raw.out {
                return Err(shape_err(
                    "dense",
                    format!("bias has {} entries, declared out = {}", raw.bias.len(), raw.out),
                ));
            }
            check_finite(index, "dense", "weight", &weight)?;
            check_finite(index, "dense", "bias", &raw.bias)?;
            let weight = Matrix::new(raw.out, raw.inp, weight)?;
            (LayerSpec::Dense(Dense { weight, bias: raw.bias }), raw.output_shape)
        }
        "conv2d" => {
            let raw: RawConv = field(index, v)?;
            let dims = [raw.out_channels, raw.in_channels, raw.kernel[0], raw.kernel[1]];
            let weight = raw.weight.flatten(&dims).map_err(|m| shape_err("conv2d", format!("weight: {m}")))?;
            if raw.bias.len() != raw.out_channels {
                return Err(shape_err(
                    "conv2d",
                    format!("bias has {} entries, declared out_channels = {}", raw.bias.len(), raw.out_channels),
                ));
            }
            if raw.stride.contains(&0) {
                return Err(shape_err("conv2d", "stride must be positive".into()));
            }
            check_finite(index, "conv2d", "weight", &weight)?;
            check_finite(index, "conv2d", "bias", &raw.bias)?;
            let conv = Conv2d {
                out_channels: raw.out_channels,
                in_channels: raw.in_channels,
                kernel: (raw.kernel[0], raw.kernel[1]),
                stride: (raw.stride[0], raw.stride[1]),
                padding: (raw.padding[0], raw.padding[1]),
                weight,
                bias: raw.bias,
            };
            (LayerSpec::Conv2d(conv), raw.output_shape)
        }
        "maxpool2d" | "avgpool2d" => {
            let raw: RawPool = field(index, v)?;
            let stride = raw.stride.unwrap_or(raw.window);
            if stride.contains(&0) || raw.window.contains(&0) {
                return Err(shape_err(
                    if kind == "maxpool2d" { "maxpool2d" } else { "avgpool2d" },
                    "window and stride must be positive".into(),
                ));
            }
            let pool = Pool { window: (raw.window[0], raw.window[1]), stride: (stride[0], stride[1]) };
            let layer = if kind == "maxpool2d" { LayerSpec::MaxPool2d(pool) } else { LayerSpec::AvgPool2d(pool) };
            (layer, raw.output_shape)
        }
        "activation" => {
            let raw: RawActivation = field(index, v)?;
            (LayerSpec::Activation(raw.func), raw.output_shape)
        }
        _ => {
            let raw: RawFlatten = field(index, v)?;
            (LayerSpec::Flatten, raw.output_shape)
        }
    })
}

/// Parses a model document.
pub fn model_from_json(text: &str) -> Result<NetworkModel> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ModelError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let raw: RawModel =
        serde_json::from_value(doc).map_err(|e| ModelError::Parse { line: 0, column: 0, message: e.to_string() })?;
    let mut layers = Vec::with_capacity(raw.layers.len());
    let mut declared = Vec::with_capacity(raw.layers.len());
    for (i, v) in raw.layers.iter().enumerate() {
        let (layer, shape) = parse_layer(i, v)?;
        layers.push(layer);
        declared.push(shape);
    }
    let model = NetworkModel::new(raw.name, raw.input_shape, layers)?;
    for (i, shape) in declared.into_iter().enumerate() {
        if let Some(shape) = shape {
            let derived = model.boundary_shapes()[i + 1];
            if shape != derived {
                return Err(ModelError::Shape {
                    layer: i,
                    kind: model.layers()[i].kind(),
                    message: format!("declared output_shape {shape} but the layer produces {derived}"),
                });
            }
        }
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    model_from_json(&text)
}

#[derive(Serialize)]
struct Out<'a> {
    name: &'a str,
    input_shape: Shape,
    layers: Vec<Value>,
}

/// Serializes a model, including every layer's `output_shape`.
pub fn model_to_json(model: &NetworkModel) -> String {
    let layers = model
        .layers()
        .iter()
        .zip(&model.boundary_shapes()[1..])
        .map(|(layer, shape)| {
            let mut v = match layer {
                LayerSpec::Dense(d) => {
                    let rows: Vec<&[f64]> = (0..d.weight.rows()).map(|i| d.weight.row(i)).collect();
                    json!({"kind": "dense", "out": d.weight.rows(), "in": d.weight.cols(), "weight": rows, "bias": d.bias})
                }
                LayerSpec::Conv2d(c) => {
                    let (kh, kw) = c.kernel;
                    let nested: Vec<Vec<Vec<&[f64]>>> = (0..c.out_channels)
                        .map(|o| {
                            (0..c.in_channels)
                                .map(|i| {
                                    let base = (o * c.in_channels + i) * kh * kw;
                                    (0..kh).map(|r| &c.weight[base + r * kw..base + (r + 1) * kw]).collect()
                                })
                                .collect()
                        })
                        .collect();
                    json!({
                        "kind": "conv2d", "out_channels": c.out_channels, "in_channels": c.in_channels,
                        "kernel": [kh, kw], "stride": [c.stride.0, c.stride.1],
                        "padding": [c.padding.0, c.padding.1], "weight": nested, "bias": c.bias,
                    })
                }
                LayerSpec::MaxPool2d(p) | LayerSpec::AvgPool2d(p) => json!({
                    "kind": layer.kind(), "window": [p.window.0, p.window.1], "stride": [p.stride.0, p.stride.1],
                }),
                LayerSpec::Activation(a) => json!({"kind": "activation", "fn": a}),
                LayerSpec::Flatten => json!({"kind": "flatten"}),
            };
            v["output_shape"] = json!(shape);
            v
        })
        .collect();
    serde_json::to_string(&Out { name: model.name(), input_shape: model.input_shape(), layers })
        .expect("model values are finite")
}
