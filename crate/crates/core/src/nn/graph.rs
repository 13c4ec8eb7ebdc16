use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, IxDyn, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, conv2d_input_grad, depthwise2d, depthwise2d_input_grad};
use super::pool::{avg_pool, avg_pool_input_grad, max_pool, max_pool_input_grad};
use super::{Padding, ParamStore, Window};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Per-sample activation shape, `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// Fixed per-channel affine map `out[c] = scale[c] * in[source[c]] + offset[c]`.
    Preprocess {
        source: Vec<usize>,
        scale: Vec<f64>,
        offset: Vec<f64>,
    },
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        use_bias: bool,
    },
    DepthwiseConv2d {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    /// Depthwise followed by a pointwise convolution, as one layer.
    SeparableConv2d {
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
        use_bias: bool,
    },
    BatchNorm {
        epsilon: f64,
        center: bool,
        scale: bool,
    },
    Relu,
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    AvgPool {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    ZeroPad {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: FeatureShape,
}

/// How a parameter tensor is initialised when no pretrained file is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A static layer graph in topological order. Node 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
    last_use: Vec<NodeId>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.nodes[self.output].shape
    }

    /// Every parameter tensor the graph needs, in node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            let cin = node.inputs.first().map(|&i| self.nodes[i].shape.channels).unwrap_or(0);
            let spec = |name: &str, shape: Vec<usize>, init| ParamSpec {
                key: format!("{}/{}", node.name, name),
                shape,
                init,
            };
            match node.op {
                Op::Conv2d {
                    filters,
                    kernel: (kh, kw),
                    use_bias,
                    ..
                } => {
                    let init = Init::GlorotUniform {
                        fan_in: kh * kw * cin,
                        fan_out: kh * kw * filters,
                    };
                    specs.push(spec("kernel", vec![kh, kw, cin, filters], init));
                    if use_bias {
                        specs.push(spec("bias", vec![filters], Init::Zeros));
                    }
                }
                Op::DepthwiseConv2d { kernel: (kh, kw), .. } => {
                    let init = Init::GlorotUniform {
                        fan_in: kh * kw * cin,
                        fan_out: kh * kw,
                    };
                    specs.push(spec("depthwise_kernel", vec![kh, kw, cin, 1], init));
                }
                Op::SeparableConv2d {
                    filters,
                    kernel: (kh, kw),
                    use_bias,
                    ..
                } => {
                    let dw = Init::GlorotUniform {
                        fan_in: kh * kw * cin,
                        fan_out: kh * kw,
                    };
                    let pw = Init::GlorotUniform {
                        fan_in: cin,
                        fan_out: filters,
                    };
                    specs.push(spec("depthwise_kernel", vec![kh, kw, cin, 1], dw));
                    specs.push(spec("pointwise_kernel", vec![1, 1, cin, filters], pw));
                    if use_bias {
                        specs.push(spec("bias", vec![filters], Init::Zeros));
                    }
                }
                Op::BatchNorm { center, scale, .. } => {
                    let c = node.shape.channels;
                    if scale {
                        specs.push(spec("gamma", vec![c], Init::Ones));
                    }
                    if center {
                        specs.push(spec("beta", vec![c], Init::Zeros));
                    }
                    specs.push(spec("moving_mean", vec![c], Init::Zeros));
                    specs.push(spec("moving_variance", vec![c], Init::Ones));
                }
                _ => {}
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Draws every parameter from its initialiser, in node order.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for p in self.param_specs() {
            let n: usize = p.shape.iter().product();
            let values: Vec<f64> = match p.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::GlorotUniform { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            let t = ndarray::ArrayD::from_shape_vec(IxDyn(&p.shape), values).expect("length matches shape");
            store.insert(p.key, t);
        }
        store
    }
}

/// Builds a [`Graph`] with shape inference. The first error is remembered
/// and reported by [`GraphBuilder::finish`], so architecture code can chain
/// calls without threading `?` through every layer.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    error: Option<Error>,
    counters: HashMap<&'static str, usize>,
}

impl GraphBuilder {
    pub fn new(input: FeatureShape) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                shape: input,
            }],
            error: None,
            counters: HashMap::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id].shape
    }

    /// Framework-style automatic name: `conv2d`, `conv2d_1`, `conv2d_2`, ...
    pub fn auto_name(&mut self, prefix: &'static str) -> String {
        let n = self.counters.entry(prefix).or_insert(0);
        let name = if *n == 0 {
            prefix.to_string()
        } else {
            format!("{prefix}_{n}")
        };
        *n += 1;
        name
    }

    fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let name = name.into();
        let shape = if self.error.is_some() {
            FeatureShape::new(0, 0, 0)
        } else {
            match self.infer(&op, &inputs) {
                Ok(s) => s,
                Err(e) => {
                    self.error = Some(Error::Shape(format!("layer {name}: {e}")));
                    FeatureShape::new(0, 0, 0)
                }
            }
        };
        self.nodes.push(Node {
            name,
            op,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    fn infer(&self, op: &Op, inputs: &[NodeId]) -> Result<FeatureShape> {
        let first = self.nodes[inputs[0]].shape;
        let (h, w, c) = first.dim();
        Ok(match *op {
            Op::Input => unreachable!("only node 0 is an input"),
            Op::Preprocess { ref source, .. } => {
                if source.len() != c || source.iter().any(|&s| s >= c) {
                    return Err(Error::Shape("channel map does not match input".into()));
                }
                first
            }
            Op::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (oh, ow) = Window::new((h, w), kernel, stride, padding)?.output();
                FeatureShape::new(oh, ow, filters)
            }
            Op::DepthwiseConv2d {
                kernel,
                stride,
                padding,
            } => {
                let (oh, ow) = Window::new((h, w), kernel, stride, padding)?.output();
                FeatureShape::new(oh, ow, c)
            }
            Op::SeparableConv2d {
                filters,
                kernel,
                padding,
                ..
            } => {
                let (oh, ow) = Window::new((h, w), kernel, (1, 1), padding)?.output();
                FeatureShape::new(oh, ow, filters)
            }
            Op::BatchNorm { .. } | Op::Relu => first,
            Op::MaxPool { pool, stride, padding } | Op::AvgPool { pool, stride, padding } => {
                let (oh, ow) = Window::new((h, w), pool, stride, padding)?.output();
                FeatureShape::new(oh, ow, c)
            }
            Op::ZeroPad {
                top,
                bottom,
                left,
                right,
            } => FeatureShape::new(h + top + bottom, w + left + right, c),
            Op::Add => {
                if inputs.iter().any(|&i| self.nodes[i].shape != first) {
                    return Err(Error::Shape("add operands differ in shape".into()));
                }
                first
            }
            Op::Concat => {
                let mut channels = 0;
                for &i in inputs {
                    let s = self.nodes[i].shape;
                    if (s.height, s.width) != (h, w) {
                        return Err(Error::Shape("concat operands differ spatially".into()));
                    }
                    channels += s.channels;
                }
                FeatureShape::new(h, w, channels)
            }
        })
    }

    pub fn preprocess(&mut self, x: NodeId, source: Vec<usize>, scale: Vec<f64>, offset: Vec<f64>) -> NodeId {
        self.push("preprocess", Op::Preprocess { source, scale, offset }, vec![x])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        use_bias: bool,
    ) -> NodeId {
        self.push(
            name,
            Op::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                use_bias,
            },
            vec![x],
        )
    }

    pub fn depthwise(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> NodeId {
        self.push(
            name,
            Op::DepthwiseConv2d {
                kernel,
                stride,
                padding,
            },
            vec![x],
        )
    }

    pub fn separable(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
        use_bias: bool,
    ) -> NodeId {
        self.push(
            name,
            Op::SeparableConv2d {
                filters,
                kernel,
                padding,
                use_bias,
            },
            vec![x],
        )
    }

    pub fn batch_norm(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        epsilon: f64,
        center: bool,
        scale: bool,
    ) -> NodeId {
        self.push(name, Op::BatchNorm { epsilon, center, scale }, vec![x])
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Relu, vec![x])
    }

    pub fn max_pool(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> NodeId {
        self.push(name, Op::MaxPool { pool, stride, padding }, vec![x])
    }

    pub fn avg_pool(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> NodeId {
        self.push(name, Op::AvgPool { pool, stride, padding }, vec![x])
    }

    pub fn zero_pad(&mut self, name: impl Into<String>, x: NodeId, pad: (usize, usize, usize, usize)) -> NodeId {
        let (top, bottom, left, right) = pad;
        self.push(
            name,
            Op::ZeroPad {
                top,
                bottom,
                left,
                right,
            },
            vec![x],
        )
    }

    pub fn add(&mut self, name: impl Into<String>, inputs: &[NodeId]) -> NodeId {
        self.push(name, Op::Add, inputs.to_vec())
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: &[NodeId]) -> NodeId {
        self.push(name, Op::Concat, inputs.to_vec())
    }

    pub fn finish(self, output: NodeId) -> Result<Graph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut last_use: Vec<NodeId> = (0..self.nodes.len()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = last_use[j].max(i);
            }
        }
        last_use[output] = usize::MAX;
        Ok(Graph {
            nodes: self.nodes,
            output,
            last_use,
        })
    }
}

/// Parameters of one node, laid out for computation.
#[derive(Debug, Clone, PartialEq)]
enum Kernel {
    None,
    Conv {
        kernel: Array2<f64>,
        bias: Option<Array1<f64>>,
        window: Window,
    },
    Depthwise {
        kernel: Array4<f64>,
        window: Window,
    },
    Separable {
        depthwise: Array4<f64>,
        pointwise: Array2<f64>,
        bias: Option<Array1<f64>>,
        window: Window,
        pointwise_window: Window,
    },
    Norm {
        raw: Vec<Array1<f64>>,
        scale: Array1<f64>,
        shift: Array1<f64>,
    },
    Pool(Window),
}

impl Kernel {
    fn scalar_count(&self) -> usize {
        match self {
            Kernel::None | Kernel::Pool(_) => 0,
            Kernel::Conv { kernel, bias, .. } => kernel.len() + bias.as_ref().map_or(0, |b| b.len()),
            Kernel::Depthwise { kernel, .. } => kernel.len(),
            Kernel::Separable {
                depthwise,
                pointwise,
                bias,
                ..
            } => depthwise.len() + pointwise.len() + bias.as_ref().map_or(0, |b| b.len()),
            Kernel::Norm { raw, .. } => raw.iter().map(|a| a.len()).sum(),
        }
    }

    fn scalars(&self, out: &mut Vec<f64>) {
        match self {
            Kernel::None | Kernel::Pool(_) => {}
            Kernel::Conv { kernel, bias, .. } => {
                out.extend(kernel.iter());
                out.extend(bias.iter().flatten());
            }
            Kernel::Depthwise { kernel, .. } => out.extend(kernel.iter()),
            Kernel::Separable {
                depthwise,
                pointwise,
                bias,
                ..
            } => {
                out.extend(depthwise.iter());
                out.extend(pointwise.iter());
                out.extend(bias.iter().flatten());
            }
            Kernel::Norm { raw, .. } => raw.iter().for_each(|a| out.extend(a.iter())),
        }
    }
}

fn to1(t: &ndarray::ArrayD<f64>) -> Array1<f64> {
    t.iter().copied().collect()
}

/// All activations of one forward pass, indexed by node.
pub type Trace = Vec<Array3<f64>>;

/// A [`Graph`] bound to concrete parameter values. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    graph: Graph,
    kernels: Vec<Kernel>,
}

impl Network {
    pub fn new(graph: Graph, params: &ParamStore) -> Result<Self> {
        let mut kernels = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let in_shape = node.inputs.first().map(|&i| graph.nodes[i].shape);
            let key = |p: &str| format!("{}/{}", node.name, p);
            let kernel = match node.op {
                Op::Conv2d {
                    filters,
                    kernel: (kh, kw),
                    stride,
                    padding,
                    use_bias,
                } => {
                    let s = in_shape.expect("conv has an input");
                    let k = params.require(&key("kernel"), &[kh, kw, s.channels, filters])?;
                    let bias = if use_bias {
                        Some(to1(params.require(&key("bias"), &[filters])?))
                    } else {
                        None
                    };
                    Kernel::Conv {
                        kernel: Array2::from_shape_vec((kh * kw * s.channels, filters), k.iter().copied().collect())
                            .expect("sizes agree"),
                        bias,
                        window: Window::new((s.height, s.width), (kh, kw), stride, padding)?,
                    }
                }
                Op::DepthwiseConv2d {
                    kernel: (kh, kw),
                    stride,
                    padding,
                } => {
                    let s = in_shape.expect("depthwise has an input");
                    let k = params.require(&key("depthwise_kernel"), &[kh, kw, s.channels, 1])?;
                    Kernel::Depthwise {
                        kernel: k.clone().into_dimensionality().expect("4-d"),
                        window: Window::new((s.height, s.width), (kh, kw), stride, padding)?,
                    }
                }
                Op::SeparableConv2d {
                    filters,
                    kernel: (kh, kw),
                    padding,
                    use_bias,
                } => {
                    let s = in_shape.expect("separable has an input");
                    let dw = params.require(&key("depthwise_kernel"), &[kh, kw, s.channels, 1])?;
                    let pw = params.require(&key("pointwise_kernel"), &[1, 1, s.channels, filters])?;
                    let bias = if use_bias {
                        Some(to1(params.require(&key("bias"), &[filters])?))
                    } else {
                        None
                    };
                    let window = Window::new((s.height, s.width), (kh, kw), (1, 1), padding)?;
                    let (oh, ow) = window.output();
                    Kernel::Separable {
                        depthwise: dw.clone().into_dimensionality().expect("4-d"),
                        pointwise: Array2::from_shape_vec((s.channels, filters), pw.iter().copied().collect())
                            .expect("sizes agree"),
                        bias,
                        window,
                        pointwise_window: Window::new((oh, ow), (1, 1), (1, 1), Padding::Valid)?,
                    }
                }
                Op::BatchNorm { epsilon, center, scale } => {
                    let c = node.shape.channels;
                    let mut raw = Vec::new();
                    let gamma = if scale {
                        let g = to1(params.require(&key("gamma"), &[c])?);
                        raw.push(g.clone());
                        g
                    } else {
                        Array1::ones(c)
                    };
                    let beta = if center {
                        let b = to1(params.require(&key("beta"), &[c])?);
                        raw.push(b.clone());
                        b
                    } else {
                        Array1::zeros(c)
                    };
                    let mean = to1(params.require(&key("moving_mean"), &[c])?);
                    let var = to1(params.require(&key("moving_variance"), &[c])?);
                    let factor = &gamma / &var.mapv(|v| (v + epsilon).sqrt());
                    let shift = &beta - &(&mean * &factor);
                    raw.push(mean);
                    raw.push(var);
                    Kernel::Norm {
                        raw,
                        scale: factor,
                        shift,
                    }
                }
                Op::MaxPool { pool, stride, padding } | Op::AvgPool { pool, stride, padding } => {
                    let s = in_shape.expect("pool has an input");
                    Kernel::Pool(Window::new((s.height, s.width), pool, stride, padding)?)
                }
                _ => Kernel::None,
            };
            kernels.push(kernel);
        }
        Ok(Self { graph, kernels })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Number of scalars actually held, equal to `graph().param_count()`.
    pub fn scalar_count(&self) -> usize {
        self.kernels.iter().map(Kernel::scalar_count).sum()
    }

    /// Every stored parameter value, in node order.
    pub fn scalars(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        self.kernels.iter().for_each(|k| k.scalars(&mut out));
        out
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<()> {
        let want = self.graph.input_shape().dim();
        if x.dim() != want {
            return Err(Error::Shape(format!(
                "network expects input {:?}, got {:?}",
                want,
                x.dim()
            )));
        }
        Ok(())
    }

    fn eval_node(&self, i: usize, acts: &[Option<Array3<f64>>]) -> Array3<f64> {
        let node = &self.graph.nodes[i];
        let arg = |k: usize| {
            acts[node.inputs[k]]
                .as_ref()
                .expect("inputs computed before use")
                .view()
        };
        match (&node.op, &self.kernels[i]) {
            (Op::Input, _) => unreachable!("input is seeded"),
            (Op::Preprocess { source, scale, offset }, _) => {
                let x = arg(0);
                let mut out = Array3::zeros(x.dim());
                for (c, ((&src, &a), &b)) in source.iter().zip(scale).zip(offset).enumerate() {
                    Zip::from(out.slice_mut(s![.., .., c]))
                        .and(x.slice(s![.., .., src]))
                        .for_each(|o, &v| *o = a * v + b);
                }
                out
            }
            (_, Kernel::Conv { kernel, bias, window }) => {
                conv2d(arg(0), kernel.view(), bias.as_ref().map(|b| b.view()), window)
            }
            (_, Kernel::Depthwise { kernel, window }) => depthwise2d(arg(0), kernel.view(), window),
            (
                _,
                Kernel::Separable {
                    depthwise,
                    pointwise,
                    bias,
                    window,
                    pointwise_window,
                },
            ) => {
                let mid = depthwise2d(arg(0), depthwise.view(), window);
                conv2d(
                    mid.view(),
                    pointwise.view(),
                    bias.as_ref().map(|b| b.view()),
                    pointwise_window,
                )
            }
            (_, Kernel::Norm { scale, shift, .. }) => {
                let mut out = arg(0).to_owned();
                out *= scale;
                out += shift;
                out
            }
            (Op::Relu, _) => arg(0).mapv(|v| v.max(0.0)),
            (Op::MaxPool { .. }, Kernel::Pool(w)) => max_pool(arg(0), w),
            (Op::AvgPool { .. }, Kernel::Pool(w)) => avg_pool(arg(0), w),
            (Op::ZeroPad { top, left, .. }, _) => {
                let x = arg(0);
                let (h, w, _) = x.dim();
                let mut out = Array3::zeros(node.shape.dim());
                out.slice_mut(s![*top..*top + h, *left..*left + w, ..]).assign(&x);
                out
            }
            (Op::Add, _) => {
                let mut out = arg(0).to_owned();
                for k in 1..node.inputs.len() {
                    out += &arg(k);
                }
                out
            }
            (Op::Concat, _) => {
                let views: Vec<_> = (0..node.inputs.len()).map(arg).collect();
                ndarray::concatenate(Axis(2), &views).expect("shapes checked at build time")
            }
            (op, k) => unreachable!("op {op:?} with kernel {k:?}"),
        }
    }

    /// Forward pass for one sample, releasing intermediates as soon as
    /// their last consumer has run.
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check_input(&x)?;
        let n = self.graph.nodes.len();
        let mut acts: Vec<Option<Array3<f64>>> = vec![None; n];
        acts[0] = Some(x.to_owned());
        for i in 1..n {
            let out = self.eval_node(i, &acts);
            acts[i] = Some(out);
            for &j in &self.graph.nodes[i].inputs {
                if self.graph.last_use[j] == i {
                    acts[j] = None;
                }
            }
        }
        Ok(acts[self.graph.output].take().expect("output retained"))
    }

    /// Forward pass keeping every activation, for a later backward pass.
    pub fn forward_trace(&self, x: ArrayView3<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let n = self.graph.nodes.len();
        let mut acts: Vec<Option<Array3<f64>>> = vec![None; n];
        acts[0] = Some(x.to_owned());
        for i in 1..n {
            acts[i] = Some(self.eval_node(i, &acts));
        }
        Ok(acts.into_iter().map(|a| a.expect("all computed")).collect())
    }

    pub fn output_of<'a>(&self, trace: &'a Trace) -> &'a Array3<f64> {
        &trace[self.graph.output]
    }

    /// Gradient of `<output, grad_out>` with respect to the network input.
    pub fn input_gradient(&self, trace: &Trace, grad_out: Array3<f64>) -> Result<Array3<f64>> {
        if grad_out.dim() != self.graph.output_shape().dim() {
            return Err(Error::Shape("output gradient has the wrong shape".into()));
        }
        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Array3<f64>>> = vec![None; n];
        grads[self.graph.output] = Some(grad_out);
        for i in (1..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.graph.nodes[i];
            let mut accumulate = |j: NodeId, v: Array3<f64>| match &mut grads[j] {
                Some(acc) => *acc += &v,
                slot @ None => *slot = Some(v),
            };
            match (&node.op, &self.kernels[i]) {
                (Op::Preprocess { source, scale, .. }, _) => {
                    let mut gin = Array3::zeros(trace[node.inputs[0]].dim());
                    for (c, (&src, &a)) in source.iter().zip(scale).enumerate() {
                        Zip::from(gin.slice_mut(s![.., .., src]))
                            .and(g.slice(s![.., .., c]))
                            .for_each(|d, &v| *d += a * v);
                    }
                    accumulate(node.inputs[0], gin);
                }
                (_, Kernel::Conv { kernel, window, .. }) => {
                    let cin = trace[node.inputs[0]].dim().2;
                    accumulate(node.inputs[0], conv2d_input_grad(g.view(), kernel.view(), window, cin));
                }
                (_, Kernel::Depthwise { kernel, window }) => {
                    accumulate(node.inputs[0], depthwise2d_input_grad(g.view(), kernel.view(), window));
                }
                (
                    _,
                    Kernel::Separable {
                        depthwise,
                        pointwise,
                        window,
                        pointwise_window,
                        ..
                    },
                ) => {
                    let cin = pointwise.nrows();
                    let gmid = conv2d_input_grad(g.view(), pointwise.view(), pointwise_window, cin);
                    accumulate(
                        node.inputs[0],
                        depthwise2d_input_grad(gmid.view(), depthwise.view(), window),
                    );
                }
                (_, Kernel::Norm { scale, .. }) => accumulate(node.inputs[0], g * scale),
                (Op::Relu, _) => {
                    let mut gin = g;
                    Zip::from(&mut gin).and(&trace[i]).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(node.inputs[0], gin);
                }
                (Op::MaxPool { .. }, Kernel::Pool(w)) => {
                    let x = trace[node.inputs[0]].view();
                    accumulate(node.inputs[0], max_pool_input_grad(x, g.view(), w));
                }
                (Op::AvgPool { .. }, Kernel::Pool(w)) => accumulate(node.inputs[0], avg_pool_input_grad(g.view(), w)),
                (Op::ZeroPad { top, left, .. }, _) => {
                    let (h, w, _) = trace[node.inputs[0]].dim();
                    let inner = g.slice(s![*top..*top + h, *left..*left + w, ..]).to_owned();
                    accumulate(node.inputs[0], inner);
                }
                (Op::Add, _) => {
                    for &j in &node.inputs {
                        accumulate(j, g.clone());
                    }
                }
                (Op::Concat, _) => {
                    let mut start = 0;
                    for &j in &node.inputs {
                        let c = trace[j].dim().2;
                        accumulate(j, g.slice(s![.., .., start..start + c]).to_owned());
                        start += c;
                    }
                }
                (op, _) => unreachable!("no gradient rule for {op:?}"),
            }
        }
        Ok(grads[0]
            .take()
            .unwrap_or_else(|| Array3::zeros(self.graph.input_shape().dim())))
    }

    /// Forward pass over a batch `(n, h, w, c)`, samples in parallel.
    pub fn forward_batch(&self, xs: ArrayView4<f64>) -> Result<Array4<f64>> {
        let outs: Vec<Array3<f64>> = xs
            .outer_iter()
            .into_par_iter()
            .map(|x| self.forward(x))
            .collect::<Result<_>>()?;
        let shape = self.graph.output_shape();
        let mut batch = Array4::zeros((outs.len(), shape.height, shape.width, shape.channels));
        for (mut dst, src) in batch.outer_iter_mut().zip(outs) {
            dst.assign(&src);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_graph() -> Graph {
        let mut b = GraphBuilder::new(FeatureShape::new(6, 6, 2));
        let x = b.input();
        let p = b.preprocess(x, vec![1, 0], vec![2.0, -1.0], vec![0.5, 0.0]);
        let c = b.conv("c1", p, 4, (3, 3), (2, 2), Padding::Same, true);
        let n = b.batch_norm("bn1", c, 1e-3, true, true);
        let r = b.relu("r1", n);
        let s = b.separable("sep", r, 4, (3, 3), Padding::Same, false);
        let a = b.add("add", &[s, r]);
        let m = b.max_pool("mp", a, (2, 2), (1, 1), Padding::Valid);
        let v = b.avg_pool("ap", m, (3, 3), (1, 1), Padding::Same);
        let z = b.zero_pad("zp", v, (1, 0, 0, 1));
        let d = b.depthwise("dw", z, (2, 2), (1, 1), Padding::Valid);
        let out = b.concat("cat", &[d, d]);
        b.finish(out).unwrap()
    }

    fn network(seed: u64) -> Network {
        let g = small_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = g.init_params(&mut rng);
        // non-trivial BN statistics
        params.insert("bn1/moving_mean", ndarray::arr1(&[0.1, -0.2, 0.3, 0.0]).into_dyn());
        params.insert("bn1/moving_variance", ndarray::arr1(&[0.5, 2.0, 1.5, 1.0]).into_dyn());
        Network::new(g, &params).unwrap()
    }

    #[test]
    fn shapes_and_counts() {
        let net = network(1);
        assert_eq!(net.graph().output_shape(), FeatureShape::new(2, 2, 8));
        assert_eq!(net.scalar_count(), net.graph().param_count());
        assert_eq!(net.scalars().len(), net.scalar_count());
        // conv 3*3*2*4 + 4, bn 4*4, separable 3*3*4 + 4*4, depthwise 2*2*4
        assert_eq!(net.graph().param_count(), 72 + 4 + 16 + 36 + 16 + 16);
    }

    #[test]
    fn forward_and_trace_agree() {
        let net = network(2);
        let x = Array3::from_shape_fn((6, 6, 2), |(i, j, k)| ((i * 13 + j * 7 + k * 3) % 10) as f64 / 10.0);
        let y = net.forward(x.view()).unwrap();
        let trace = net.forward_trace(x.view()).unwrap();
        assert_eq!(&y, net.output_of(&trace));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = network(3);
        let x = Array3::from_shape_fn((6, 6, 2), |(i, j, k)| {
            ((i * 13 + j * 7 + k * 3) % 10) as f64 / 10.0 - 0.31
        });
        let weights = Array3::from_shape_fn(net.graph().output_shape().dim(), |(i, j, k)| {
            (i as f64 - j as f64 * 0.5 + k as f64 * 0.25).sin()
        });
        let objective = |x: &Array3<f64>| (&net.forward(x.view()).unwrap() * &weights).sum();
        let trace = net.forward_trace(x.view()).unwrap();
        let grad = net.input_gradient(&trace, weights.clone()).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            worst = worst.max((fd - grad[idx]).abs() / (1.0 + fd.abs()));
        }
        assert!(worst < 1e-5, "worst error {worst}");
    }

    #[test]
    fn builder_reports_first_shape_error() {
        let mut b = GraphBuilder::new(FeatureShape::new(2, 2, 1));
        let x = b.input();
        let c = b.conv("too_big", x, 1, (3, 3), (1, 1), Padding::Valid, false);
        let r = b.relu("r", c);
        let err = b.finish(r).unwrap_err();
        assert!(err.to_string().contains("too_big"));
    }

    #[test]
    fn auto_names_follow_framework_counters() {
        let mut b = GraphBuilder::new(FeatureShape::new(1, 1, 1));
        assert_eq!(b.auto_name("conv2d"), "conv2d");
        assert_eq!(b.auto_name("conv2d"), "conv2d_1");
        assert_eq!(b.auto_name("batch_normalization"), "batch_normalization");
    }
}
