//! Reverse-mode automatic differentiation with support for higher-order
//! gradients.
//!
//! Every backward rule is written in terms of the same differentiable ops the
//! forward pass uses, so a gradient computed with `create_graph = true` is
//! itself a node of the graph and can be differentiated again. This is what
//! lets a loss on saliency maps (which are input or feature-map gradients) be
//! minimized with respect to the model parameters.
//!
//! Graphs are built from `Rc` nodes and are confined to the thread that
//! created them. Node ids grow monotonically per thread, so sorting by
//! descending id is a valid reverse topological order.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn recording() -> bool {
    RECORDING.with(|c| c.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    previous: bool,
}

pub fn no_grad() -> NoGradGuard {
    set_recording(false)
}

fn set_recording(on: bool) -> NoGradGuard {
    let previous = RECORDING.with(|c| c.replace(on));
    NoGradGuard { previous }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        RECORDING.with(|c| c.set(self.previous));
    }
}

#[derive(Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MulConst(Rc<Tensor>),
    Relu,
    Abs,
    Exp,
    Gather {
        index: Rc<Vec<usize>>,
        input_shape: Vec<usize>,
    },
    ScatterAdd {
        index: Rc<Vec<usize>>,
        input_shape: Vec<usize>,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
    MatMul,
    Transpose,
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    LogSoftmax,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<(Op, Vec<Var>)>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A differentiable leaf.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
        }))
    }

    fn from_op(value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = recording() && inputs.iter().any(|v| v.requires_grad());
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: requires_grad.then_some((op, inputs)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b, "add")?;
    let v = zip_map(a.value(), b.value(), |x, y| x + y);
    Ok(Var::from_op(v, Op::Add, vec![a.clone(), b.clone()]))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b, "sub")?;
    let v = zip_map(a.value(), b.value(), |x, y| x - y);
    Ok(Var::from_op(v, Op::Sub, vec![a.clone(), b.clone()]))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b, "mul")?;
    let v = zip_map(a.value(), b.value(), |x, y| x * y);
    Ok(Var::from_op(v, Op::Mul, vec![a.clone(), b.clone()]))
}

pub fn div(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b, "div")?;
    let v = zip_map(a.value(), b.value(), |x, y| x / y);
    Ok(Var::from_op(v, Op::Div, vec![a.clone(), b.clone()]))
}

pub fn scale(a: &Var, c: f64) -> Var {
    Var::from_op(a.value().map(|x| x * c), Op::Scale(c), vec![a.clone()])
}

/// Elementwise product with a tensor that is not differentiated.
pub fn mul_const(a: &Var, m: Rc<Tensor>) -> Result<Var> {
    if a.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "mul_const: {:?} vs {:?}",
            a.shape(),
            m.shape()
        )));
    }
    let v = zip_map(a.value(), &m, |x, y| x * y);
    Ok(Var::from_op(v, Op::MulConst(m), vec![a.clone()]))
}

pub fn relu(a: &Var) -> Var {
    Var::from_op(a.value().map(|x| x.max(0.0)), Op::Relu, vec![a.clone()])
}

pub fn abs(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::abs), Op::Abs, vec![a.clone()])
}

pub fn exp(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::exp), Op::Exp, vec![a.clone()])
}

/// `out[j] = a[index[j]]`, reshaped to `shape`.
pub fn gather(a: &Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
    if shape.iter().product::<usize>() != index.len() {
        return Err(Error::Shape(format!(
            "gather: {} indices for shape {:?}",
            index.len(),
            shape
        )));
    }
    let src = a.value().data();
    if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
        return Err(Error::Shape(format!(
            "gather index {bad} out of range for {} values",
            src.len()
        )));
    }
    let data = index.iter().map(|&i| src[i]).collect();
    let v = Tensor::new(shape, data)?;
    Ok(Var::from_op(
        v,
        Op::Gather {
            index,
            input_shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    ))
}

/// `out[index[j]] += a[j]` into a zero tensor of `shape`.
pub fn scatter_add(a: &Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
    if index.len() != a.value().len() {
        return Err(Error::Shape(format!(
            "scatter_add: {} indices for {} values",
            index.len(),
            a.value().len()
        )));
    }
    let mut out = Tensor::zeros(shape);
    let n = out.len();
    {
        let dst = out.data_mut();
        for (&i, &x) in index.iter().zip(a.value().data()) {
            if i >= n {
                return Err(Error::Shape(format!("scatter index {i} out of range {n}")));
            }
            dst[i] += x;
        }
    }
    Ok(Var::from_op(
        out,
        Op::ScatterAdd {
            index,
            input_shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    ))
}

pub fn reshape(a: &Var, shape: Vec<usize>) -> Result<Var> {
    let v = a.value().clone().reshape(shape)?;
    Ok(Var::from_op(
        v,
        Op::Reshape {
            input_shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    ))
}

pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = kernels::matmul(m, k, n, a.value().data(), b.value().data());
    let v = Tensor::new(vec![m, n], data)?;
    Ok(Var::from_op(v, Op::MatMul, vec![a.clone(), b.clone()]))
}

pub fn transpose(a: &Var) -> Result<Var> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("transpose of {:?}", s)));
    }
    let (r, c) = (s[0], s[1]);
    let src = a.value().data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Ok(Var::from_op(
        Tensor::new(vec![c, r], data)?,
        Op::Transpose,
        vec![a.clone()],
    ))
}

fn check_conv(g: &ConvGeom, x: &[usize], w: &[usize]) -> Result<()> {
    if x != g.input_shape().as_slice() || w != g.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv2d input {:?} / weight {:?} do not match geometry {:?}",
            x, w, g
        )));
    }
    Ok(())
}

/// Infers convolution geometry from input and weight shapes.
pub fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
        return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", x, w)));
    }
    if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(Error::Shape(format!(
            "conv2d kernel {} stride {stride} pad {pad} does not fit input {:?}",
            w[2], x
        )));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_channels: x[1],
        in_h: x[2],
        in_w: x[3],
        out_channels: w[0],
        kernel: w[2],
        stride,
        pad,
    })
}

/// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
    let g = conv_geom(x.shape(), w.shape(), stride, pad)?;
    let v = Tensor::new(
        g.output_shape(),
        kernels::conv2d(&g, x.value().data(), w.value().data()),
    )?;
    Ok(Var::from_op(v, Op::Conv(g), vec![x.clone(), w.clone()]))
}

fn conv_input_grad(dy: &Var, w: &Var, g: ConvGeom) -> Result<Var> {
    if dy.shape() != g.output_shape().as_slice() || w.shape() != g.weight_shape().as_slice() {
        return Err(Error::Shape("conv input grad shapes".into()));
    }
    let v = Tensor::new(
        g.input_shape(),
        kernels::conv2d_input_grad(&g, dy.value().data(), w.value().data()),
    )?;
    Ok(Var::from_op(v, Op::ConvInputGrad(g), vec![dy.clone(), w.clone()]))
}

fn conv_weight_grad(x: &Var, dy: &Var, g: ConvGeom) -> Result<Var> {
    check_conv(&g, x.shape(), &g.weight_shape())?;
    if dy.shape() != g.output_shape().as_slice() {
        return Err(Error::Shape("conv weight grad shapes".into()));
    }
    let v = Tensor::new(
        g.weight_shape(),
        kernels::conv2d_weight_grad(&g, x.value().data(), dy.value().data()),
    )?;
    Ok(Var::from_op(v, Op::ConvWeightGrad(g), vec![x.clone(), dy.clone()]))
}

/// Row-wise log-softmax of a `[N, C]` matrix.
pub fn log_softmax(a: &Var) -> Result<Var> {
    let s = a.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::Shape(format!("log_softmax of {:?}", s)));
    }
    let c = s[1];
    let mut data = a.value().data().to_vec();
    for row in data.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Ok(Var::from_op(
        Tensor::new(s.to_vec(), data)?,
        Op::LogSoftmax,
        vec![a.clone()],
    ))
}

// ---------------------------------------------------------------------------
// Composite helpers

/// Sum of all elements, as a `[1]` tensor.
pub fn sum(a: &Var) -> Result<Var> {
    let n = a.value().len();
    scatter_add(a, Rc::new(vec![0; n]), vec![1])
}

pub fn mean(a: &Var) -> Result<Var> {
    let n = a.value().len().max(1);
    Ok(scale(&sum(a)?, 1.0 / n as f64))
}

/// Sums `[rows, cols]`-shaped data over its columns, giving `[rows]`.
pub fn row_sums(a: &Var, rows: usize, cols: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..rows * cols).map(|i| i / cols).collect();
    scatter_add(a, Rc::new(idx), vec![rows])
}

/// Repeats each entry of a `[rows]` vector `cols` times, giving `[rows, cols]`.
pub fn repeat_rows(a: &Var, rows: usize, cols: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..rows * cols).map(|i| i / cols).collect();
    gather(a, Rc::new(idx), vec![rows, cols])
}

/// Adds a per-channel bias `[C]` to an `[N, C, ...]` tensor.
pub fn add_channel_bias(x: &Var, bias: &Var) -> Result<Var> {
    let s = x.shape();
    if s.len() < 2 || bias.shape() != [s[1]] {
        return Err(Error::Shape(format!(
            "bias {:?} for activations {:?}",
            bias.shape(),
            s
        )));
    }
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let idx: Vec<usize> = (0..x.value().len()).map(|i| (i / inner) % c).collect();
    let b = gather(bias, Rc::new(idx), s.to_vec())?;
    add(x, &b)
}

// ---------------------------------------------------------------------------
// Backward

fn backward_op(op: &Op, inputs: &[Var], out: &Var, g: &Var) -> Result<Vec<Option<Var>>> {
    let need = |i: usize| inputs[i].requires_grad();
    Ok(match op {
        Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
        Op::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| scale(g, -1.0))],
        Op::Mul => vec![
            if need(0) { Some(mul(g, &inputs[1])?) } else { None },
            if need(1) { Some(mul(g, &inputs[0])?) } else { None },
        ],
        Op::Div => vec![
            if need(0) { Some(div(g, &inputs[1])?) } else { None },
            if need(1) {
                Some(scale(&div(&mul(g, out)?, &inputs[1])?, -1.0))
            } else {
                None
            },
        ],
        Op::Scale(c) => vec![Some(scale(g, *c))],
        Op::MulConst(m) => vec![Some(mul_const(g, m.clone())?)],
        Op::Relu => {
            let mask = inputs[0].value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
            vec![Some(mul_const(g, Rc::new(mask))?)]
        }
        Op::Abs => {
            let sign = inputs[0].value().map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![Some(mul_const(g, Rc::new(sign))?)]
        }
        Op::Exp => vec![Some(mul(g, out)?)],
        Op::Gather { index, input_shape } => {
            vec![Some(scatter_add(g, index.clone(), input_shape.clone())?)]
        }
        Op::ScatterAdd { index, input_shape } => {
            vec![Some(gather(g, index.clone(), input_shape.clone())?)]
        }
        Op::Reshape { input_shape } => vec![Some(reshape(g, input_shape.clone())?)],
        Op::MatMul => vec![
            if need(0) {
                Some(matmul(g, &transpose(&inputs[1])?)?)
            } else {
                None
            },
            if need(1) {
                Some(matmul(&transpose(&inputs[0])?, g)?)
            } else {
                None
            },
        ],
        Op::Transpose => vec![Some(transpose(g)?)],
        Op::Conv(geom) => vec![
            if need(0) { Some(conv_input_grad(g, &inputs[1], *geom)?) } else { None },
            if need(1) { Some(conv_weight_grad(&inputs[0], g, *geom)?) } else { None },
        ],
        // z = conv_input_grad(dy, w): linear in dy and in w.
        Op::ConvInputGrad(geom) => vec![
            if need(0) {
                Some(conv2d(g, &inputs[1], geom.stride, geom.pad)?)
            } else {
                None
            },
            if need(1) { Some(conv_weight_grad(g, &inputs[0], *geom)?) } else { None },
        ],
        // v = conv_weight_grad(x, dy): linear in x and in dy.
        Op::ConvWeightGrad(geom) => vec![
            if need(0) { Some(conv_input_grad(&inputs[1], g, *geom)?) } else { None },
            if need(1) {
                Some(conv2d(&inputs[0], g, geom.stride, geom.pad)?)
            } else {
                None
            },
        ],
        Op::LogSoftmax => {
            let (rows, cols) = (out.shape()[0], out.shape()[1]);
            let soft = exp(out);
            let rs = repeat_rows(&row_sums(g, rows, cols)?, rows, cols)?;
            vec![Some(sub(g, &mul(&soft, &rs)?)?)]
        }
    })
}

/// Gradients of a single-element `output` with respect to each of `wrt`.
///
/// Targets the output does not depend on get a zero tensor. With
/// `create_graph` the returned gradients are differentiable graph nodes.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.value().len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient requires a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();

    // Keep only nodes lying on a path from some target to the output.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut nodes: HashMap<u64, Var> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        let id = v.id();
        if relevant.contains_key(&id) && !expanded {
            continue;
        }
        if !v.requires_grad() {
            relevant.insert(id, false);
            continue;
        }
        match (&v.0.op, expanded) {
            (Some((_, inputs)), false) => {
                relevant.insert(id, false);
                stack.push((v.clone(), true));
                for p in inputs {
                    if !relevant.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
            (Some((_, inputs)), true) => {
                let r = targets.contains(&id)
                    || inputs.iter().any(|p| relevant.get(&p.id()).copied().unwrap_or(false));
                relevant.insert(id, r);
                if r {
                    nodes.insert(id, v.clone());
                }
            }
            (None, _) => {
                let r = targets.contains(&id);
                relevant.insert(id, r);
                if r {
                    nodes.insert(id, v.clone());
                }
            }
        }
    }

    let mut order: Vec<Var> = nodes.into_values().collect();
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    let _mode = set_recording(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::full(output.shape().to_vec(), 1.0)));
    let mut found: HashMap<u64, Var> = HashMap::new();

    for node in order {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if targets.contains(&node.id()) {
            found.insert(node.id(), g.clone());
        }
        let Some((op, inputs)) = &node.0.op else {
            continue;
        };
        let input_grads = backward_op(op, inputs, &node, &g)?;
        for (inp, ig) in inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !relevant.get(&inp.id()).copied().unwrap_or(false) {
                continue;
            }
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => add(&prev, &ig)?,
                None => ig,
            };
            grads.insert(inp.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|v| {
            found
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape().to_vec())))
        })
        .collect())
}

/// Convenience wrapper returning plain tensors.
pub fn grad_values(output: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
    Ok(grad(output, wrt, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect())
}
