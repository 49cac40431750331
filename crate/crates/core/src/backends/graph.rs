//! Minimal operator-graph runtime.
//!
//! A graph file is JSON:
//!
//! ```json
//! {
//!   "inputs": ["image"],
//!   "outputs": ["logits"],
//!   "tensors": {"w1": {"dims": [8, 3, 3, 3], "data": [...]}},
//!   "nodes": [
//!     {"op": "conv2d", "inputs": ["image"], "output": "h", "weight": "w1", "padding": 1},
//!     {"op": "relu", "inputs": ["h"], "output": "logits"}
//!   ]
//! }
//! ```
//!
//! Values are `N×C×H×W` tensors; vectors are stored as `N×C×1×1`. Nodes run in
//! file order. A `conv2d` node may name an adapter bundle file (relative to
//! the graph) instead of a weight, in which case the merged weight is used.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convlora::{conv2d, AdapterBundle, Conv2dParams, Tensor4};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv2d {
        #[serde(default)]
        weight: Option<String>,
        #[serde(default)]
        bias: Option<String>,
        #[serde(default)]
        adapter: Option<PathBuf>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    Relu,
    Relu6,
    Sigmoid,
    Add,
    Mul,
    /// Channel concatenation.
    Concat,
    /// Mean over the spatial dims, giving `N×C×1×1`.
    GlobalAvgPool,
    Flatten,
    /// `y = W·x + b` with `W` shaped `[out, in]`.
    Linear {
        weight: String,
        #[serde(default)]
        bias: Option<String>,
    },
    /// Nearest-neighbour resize to a fixed size or by an integer factor.
    ResizeNearest {
        #[serde(default)]
        size: Option<(usize, usize)>,
        #[serde(default)]
        scale: Option<usize>,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphFile {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub tensors: BTreeMap<String, GraphTensor>,
    pub nodes: Vec<Node>,
}

enum Prepared {
    Conv { weight: Tensor4, bias: Option<Vec<f64>>, params: Conv2dParams },
    Linear { weight: Tensor4, bias: Option<Vec<f64>> },
    Other,
}

/// A loaded, validated graph ready to run.
pub struct Graph {
    file: GraphFile,
    prepared: Vec<Prepared>,
}

fn as_tensor4(name: &str, t: &GraphTensor) -> Result<Tensor4> {
    let mut dims = [1usize; 4];
    if t.dims.len() > 4 || t.dims.is_empty() {
        return Err(Error::Shape(format!("tensor '{name}' has rank {}", t.dims.len())));
    }
    dims[..t.dims.len()].copy_from_slice(&t.dims);
    Tensor4::new(dims, t.data.clone()).map_err(|e| Error::Shape(format!("tensor '{name}': {e}")))
}

impl Graph {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let file: GraphFile = serde_json::from_str(&text)?;
        Self::from_file(file, path.parent())
    }

    /// Validates `file`; adapter paths resolve against `base`.
    pub fn from_file(file: GraphFile, base: Option<&Path>) -> Result<Self> {
        let lookup = |name: &str| {
            file.tensors.get(name).ok_or_else(|| Error::Config(format!("graph references unknown tensor '{name}'")))
        };
        let vector = |name: &Option<String>| -> Result<Option<Vec<f64>>> {
            name.as_deref().map(|n| lookup(n).map(|t| t.data.clone())).transpose()
        };
        let mut prepared = Vec::with_capacity(file.nodes.len());
        for node in &file.nodes {
            prepared.push(match &node.op {
                Op::Conv2d { weight, bias, adapter, stride, padding, groups } => {
                    let params = Conv2dParams { stride: *stride, padding: *padding, groups: *groups };
                    match (weight, adapter) {
                        (Some(w), None) => {
                            Prepared::Conv { weight: as_tensor4(w, lookup(w)?)?, bias: vector(bias)?, params }
                        }
                        (None, Some(a)) => {
                            let p = base.map_or_else(|| a.clone(), |b| b.join(a));
                            let adapter = AdapterBundle::load(&p)?.into_adapter()?;
                            let bias = match vector(bias)? {
                                Some(b) => Some(b),
                                None => adapter.bias().map(<[f64]>::to_vec),
                            };
                            Prepared::Conv { weight: adapter.merge(), bias, params: adapter.params() }
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "conv2d node '{}' needs exactly one of weight / adapter",
                                node.output
                            )))
                        }
                    }
                }
                Op::Linear { weight, bias } => {
                    Prepared::Linear { weight: as_tensor4(weight, lookup(weight)?)?, bias: vector(bias)? }
                }
                Op::ResizeNearest { size, scale } => {
                    if size.is_some() == scale.is_some() || *scale == Some(0) {
                        return Err(Error::Config(format!(
                            "resize_nearest node '{}' needs exactly one of size / non-zero scale",
                            node.output
                        )));
                    }
                    Prepared::Other
                }
                _ => Prepared::Other,
            });
        }
        Ok(Self { file, prepared })
    }

    pub fn inputs(&self) -> &[String] {
        &self.file.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.file.outputs
    }

    /// Runs the graph, returning the declared outputs in order.
    pub fn run(&self, feeds: &[(&str, Tensor4)]) -> Result<Vec<Tensor4>> {
        let mut values: HashMap<&str, Tensor4> = HashMap::new();
        for name in &self.file.inputs {
            let (_, t) = feeds
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::backend("graph", format!("missing input '{name}'")))?;
            values.insert(name, t.clone());
        }
        for (node, prep) in self.file.nodes.iter().zip(&self.prepared) {
            let args = node
                .inputs
                .iter()
                .map(|n| {
                    values
                        .get(n.as_str())
                        .ok_or_else(|| Error::backend("graph", format!("node '{}' reads undefined '{n}'", node.output)))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = eval(&node.op, prep, &args)
                .map_err(|e| Error::backend("graph", format!("node '{}': {e}", node.output)))?;
            values.insert(&node.output, out);
        }
        self.file
            .outputs
            .iter()
            .map(|n| {
                values.remove(n.as_str()).ok_or_else(|| Error::backend("graph", format!("output '{n}' never produced")))
            })
            .collect()
    }
}

fn arity(args: &[&Tensor4], n: usize) -> Result<()> {
    if args.len() != n {
        return Err(Error::Shape(format!("expected {n} inputs, got {}", args.len())));
    }
    Ok(())
}

fn map(t: &Tensor4, f: impl Fn(f64) -> f64) -> Tensor4 {
    Tensor4 { dims: t.dims, data: t.data.iter().map(|&v| f(v)).collect() }
}

fn broadcast(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
    if a.dims == b.dims {
        return Ok(Tensor4 { dims: a.dims, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() });
    }
    // per-channel scaling: b is N×C×1×1
    let [n, c, _, _] = a.dims;
    if b.dims == [n, c, 1, 1] {
        return Ok(Tensor4::from_fn(a.dims, |i| f(a.at(i), b.at([i[0], i[1], 0, 0]))));
    }
    Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a.dims, b.dims)))
}

fn eval(op: &Op, prep: &Prepared, args: &[&Tensor4]) -> Result<Tensor4> {
    match (op, prep) {
        (Op::Conv2d { .. }, Prepared::Conv { weight, bias, params }) => {
            arity(args, 1)?;
            conv2d(args[0], weight, bias.as_deref(), *params)
        }
        (Op::Relu, _) => {
            arity(args, 1)?;
            Ok(map(args[0], |v| v.max(0.0)))
        }
        (Op::Relu6, _) => {
            arity(args, 1)?;
            Ok(map(args[0], |v| v.clamp(0.0, 6.0)))
        }
        (Op::Sigmoid, _) => {
            arity(args, 1)?;
            Ok(map(args[0], |v| 1.0 / (1.0 + (-v).exp())))
        }
        (Op::Add, _) => {
            arity(args, 2)?;
            broadcast(args[0], args[1], |x, y| x + y)
        }
        (Op::Mul, _) => {
            arity(args, 2)?;
            broadcast(args[0], args[1], |x, y| x * y)
        }
        (Op::Concat, _) => {
            if args.is_empty() {
                return Err(Error::Shape("concat of nothing".into()));
            }
            let [n, _, h, w] = args[0].dims;
            if args.iter().any(|t| t.dims[0] != n || t.dims[2] != h || t.dims[3] != w) {
                return Err(Error::Shape("concat inputs differ outside the channel dim".into()));
            }
            let c: usize = args.iter().map(|t| t.dims[1]).sum();
            let mut data = Vec::with_capacity(n * c * h * w);
            for b in 0..n {
                for t in args {
                    let plane = t.dims[1] * h * w;
                    data.extend_from_slice(&t.data[b * plane..(b + 1) * plane]);
                }
            }
            Tensor4::new([n, c, h, w], data)
        }
        (Op::GlobalAvgPool, _) => {
            arity(args, 1)?;
            let [n, c, h, w] = args[0].dims;
            let hw = (h * w) as f64;
            Ok(Tensor4::from_fn([n, c, 1, 1], |i| {
                let start = args[0].index([i[0], i[1], 0, 0]);
                args[0].data[start..start + h * w].iter().sum::<f64>() / hw
            }))
        }
        (Op::Flatten, _) => {
            arity(args, 1)?;
            let [n, c, h, w] = args[0].dims;
            Tensor4::new([n, c * h * w, 1, 1], args[0].data.clone())
        }
        (Op::Linear { .. }, Prepared::Linear { weight, bias }) => {
            arity(args, 1)?;
            let x = args[0];
            let n = x.dims[0];
            let fan_in = x.len() / n.max(1);
            let [out, inp, _, _] = weight.dims;
            if inp != fan_in {
                return Err(Error::Shape(format!("linear expects {inp} features, got {fan_in}")));
            }
            if bias.as_ref().is_some_and(|b| b.len() != out) {
                return Err(Error::Shape("linear bias length mismatch".into()));
            }
            Ok(Tensor4::from_fn([n, out, 1, 1], |i| {
                let row = &weight.data[i[1] * inp..(i[1] + 1) * inp];
                let xs = &x.data[i[0] * fan_in..(i[0] + 1) * fan_in];
                let dot: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
                dot + bias.as_ref().map_or(0.0, |b| b[i[1]])
            }))
        }
        (Op::ResizeNearest { size, scale }, _) => {
            arity(args, 1)?;
            let [n, c, h, w] = args[0].dims;
            let (ow, oh) = match (size, scale) {
                (Some(s), _) => *s,
                (None, Some(k)) => (w * k, h * k),
                _ => unreachable!("validated at load"),
            };
            Ok(resize_nearest(args[0], [n, c, oh, ow]))
        }
        _ => unreachable!("prepared state matches op"),
    }
}

pub(crate) fn resize_nearest(t: &Tensor4, dims: [usize; 4]) -> Tensor4 {
    let [_, _, h, w] = t.dims;
    let ys = crate::imgproc::nearest_index_map(h, dims[2]);
    let xs = crate::imgproc::nearest_index_map(w, dims[3]);
    Tensor4::from_fn(dims, |i| t.at([i[0], i[1], ys[i[2]], xs[i[3]]]))
}
