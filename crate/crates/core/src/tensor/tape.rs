use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Primitive, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone)]
struct Operand {
    node: Option<usize>,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

enum Kind {
    Leaf,
    Op(Primitive, Vec<Operand>),
}

struct Node {
    kind: Kind,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

/// Append-only record of primitives for one backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates primitives without recording anything.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `value` as a differentiable input.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        if !self.recording {
            return value.detach();
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            kind: Kind::Leaf,
            shape: value.shape.clone(),
            value: Arc::clone(&value.data),
        });
        Tensor::from_parts(
            value.shape.clone(),
            Arc::clone(&value.data),
            Some(NodeId { tape: self.id, index }),
        )
    }

    fn operand(&self, t: &Tensor) -> Result<Operand> {
        let node = match t.node {
            Some(id) if id.tape != self.id => return Err(TensorError::ForeignTensor),
            Some(id) => Some(id.index),
            None => None,
        };
        Ok(Operand {
            node,
            shape: t.shape.clone(),
            value: Arc::clone(&t.data),
        })
    }

    /// Evaluates `prim` on `inputs`, recording it when any input is tracked.
    pub fn apply(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ops = inputs
            .iter()
            .map(|t| self.operand(t))
            .collect::<Result<Vec<_>>>()?;
        let (shape, value) = forward(&prim, &ops)?;
        let value = Arc::new(value);
        let tracked = self.recording && ops.iter().any(|o| o.node.is_some());
        if !tracked {
            return Ok(Tensor::from_parts(shape, value, None));
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            kind: Kind::Op(prim, ops),
            shape: shape.clone(),
            value: Arc::clone(&value),
        });
        Ok(Tensor::from_parts(
            shape,
            value,
            Some(NodeId { tape: self.id, index }),
        ))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(&mut self, root: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape.clone()));
        }
        let root_idx = match root.node {
            Some(id) if id.tape != self.id => return Err(TensorError::ForeignTensor),
            Some(id) => Some(id.index),
            None => None,
        };
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if let Some(r) = root_idx {
            grads[r] = Some(vec![1.0]);
            for i in (0..=r).rev() {
                let Some(g) = grads[i].take() else { continue };
                if let Kind::Op(prim, ops) = &self.nodes[i].kind {
                    vjp(prim, ops, &self.nodes[i].value, &g, &mut grads);
                }
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        self.nodes.clear();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
        self.apply(Primitive::Conv2d { stride }, &[x, w, b])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }

    /// `a - b`, built from `add` and `mul`.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, &neg)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.mul(a, &Tensor::scalar(c))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn one_hot(&mut self, index: usize, depth: usize) -> Result<Tensor> {
        self.apply(Primitive::OneHot { index, depth }, &[])
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
}

/// Result of a backward sweep, indexed by the tensors of the originating tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `t`; zeros when `t` did not influence the root.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match t.node {
            Some(id) if id.tape == self.tape => match &self.grads[id.index] {
                Some(g) => Tensor::from_parts(self.shapes[id.index].clone(), Arc::new(g.clone()), None),
                None => Tensor::zeros(&self.shapes[id.index]),
            },
            _ => Tensor::zeros(t.shape()),
        }
    }

    /// Gradient of node `index`, shaped like the node's output.
    pub fn of_node(&self, index: usize) -> Option<Tensor> {
        let shape = self.shapes.get(index)?.clone();
        Some(match &self.grads[index] {
            Some(g) => Tensor::from_parts(shape, Arc::new(g.clone()), None),
            None => Tensor::zeros(&shape),
        })
    }

    pub fn node_count(&self) -> usize {
        self.shapes.len()
    }
}

fn mismatch(primitive: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { primitive, detail }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Second operand is a scalar.
    Scalar,
    /// Second operand repeats along leading axes.
    Rows,
    /// First operand is a scalar.
    ScalarFirst,
}

fn add_broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if numel(b) == 1 {
        Some(Broadcast::Scalar)
    } else if numel(a) == 1 {
        Some(Broadcast::ScalarFirst)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(Broadcast::Rows)
    } else {
        None
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    if b.len() != 2 {
        return None;
    }
    let (k2, m) = (b[0], b[1]);
    match *a {
        [k] if k == k2 => Some((1, k, m, vec![m])),
        [n, k] if k == k2 => Some((n, k, m, vec![n, m])),
        _ => None,
    }
}

fn conv_dims(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Option<(usize, ConvGeom)> {
    let (batch, c, h, wd) = match *x {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return None,
    };
    let [f, wc, k1, k2] = *w else { return None };
    if wc != c || k1 != k2 || b != [f] || stride == 0 || k1 > h || k1 > wd {
        return None;
    }
    Some((
        batch,
        ConvGeom {
            channels: c,
            height: h,
            width: wd,
            filters: f,
            kernel: k1,
            stride,
        },
    ))
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(prim: &Primitive, ops: &[Operand]) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = prim.name();
    let arity = match prim {
        Primitive::OneHot { .. } => Some(0),
        Primitive::MatMul | Primitive::Add | Primitive::Mul => Some(2),
        Primitive::Conv2d { .. } => Some(3),
        Primitive::Concat { .. } => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if ops.len() != n {
            return Err(mismatch(name, format!("expected {n} inputs, got {}", ops.len())));
        }
    }
    let out = match prim {
        Primitive::MatMul => {
            let (a, b) = (&ops[0], &ops[1]);
            let (n, k, m, shape) = matmul_dims(&a.shape, &b.shape)
                .ok_or_else(|| mismatch(name, format!("{:?} x {:?}", a.shape, b.shape)))?;
            (shape, kernels::matmul(&a.value, &b.value, n, k, m))
        }
        Primitive::Conv2d { stride } => {
            let (x, w, b) = (&ops[0], &ops[1], &ops[2]);
            let (batch, g) = conv_dims(&x.shape, &w.shape, &b.shape, *stride).ok_or_else(|| {
                mismatch(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}, stride {stride}", x.shape, w.shape, b.shape),
                )
            })?;
            let mut shape = vec![g.filters, g.out_h(), g.out_w()];
            if x.shape.len() == 4 {
                shape.insert(0, batch);
            }
            (shape, kernels::conv2d(&x.value, &w.value, &b.value, batch, g))
        }
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (&ops[0], &ops[1]);
            let bc = add_broadcast(&a.shape, &b.shape)
                .filter(|bc| !matches!((prim, bc), (Primitive::Mul, Broadcast::Rows)))
                .ok_or_else(|| mismatch(name, format!("{:?} vs {:?}", a.shape, b.shape)))?;
            let f = |x: f64, y: f64| if *prim == Primitive::Add { x + y } else { x * y };
            match bc {
                Broadcast::Same => (
                    a.shape.clone(),
                    a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect(),
                ),
                Broadcast::Scalar => {
                    let s = b.value[0];
                    (a.shape.clone(), a.value.iter().map(|&x| f(x, s)).collect())
                }
                Broadcast::ScalarFirst => {
                    let s = a.value[0];
                    (b.shape.clone(), b.value.iter().map(|&y| f(s, y)).collect())
                }
                Broadcast::Rows => {
                    let m = b.value.len();
                    (
                        a.shape.clone(),
                        a.value
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| f(x, b.value[i % m]))
                            .collect(),
                    )
                }
            }
        }
        Primitive::Relu => unary(&ops[0], |x| x.max(0.0)),
        Primitive::Sigmoid => unary(&ops[0], kernels::sigmoid),
        Primitive::Tanh => unary(&ops[0], f64::tanh),
        Primitive::Log => unary(&ops[0], |x| x.max(f64::MIN_POSITIVE).ln()),
        Primitive::Softmax => {
            let a = &ops[0];
            let m = *a.shape.last().expect("non-empty shape");
            (a.shape.clone(), kernels::softmax_rows(&a.value, m))
        }
        Primitive::Sum => (vec![1], vec![ops[0].value.iter().sum()]),
        Primitive::Mean => {
            let v = &ops[0].value;
            (vec![1], vec![v.iter().sum::<f64>() / v.len() as f64])
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = ops
                .first()
                .ok_or_else(|| mismatch(name, "no inputs".to_string()))?;
            let rank = first.shape.len();
            if axis >= rank {
                return Err(mismatch(name, format!("axis {axis} for rank {rank}")));
            }
            let mut shape = first.shape.clone();
            shape[axis] = 0;
            for o in ops {
                let compatible = o.shape.len() == rank
                    && o.shape
                        .iter()
                        .zip(&first.shape)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(mismatch(name, format!("{:?} vs {:?} on axis {axis}", first.shape, o.shape)));
                }
                shape[axis] += o.shape[axis];
            }
            let (outer, _, _) = axis_split(&first.shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for r in 0..outer {
                for o in ops {
                    let chunk = o.value.len() / outer;
                    data.extend_from_slice(&o.value[r * chunk..(r + 1) * chunk]);
                }
            }
            (shape, data)
        }
        Primitive::OneHot { index, depth } => {
            if index >= depth {
                return Err(mismatch(name, format!("index {index} >= depth {depth}")));
            }
            let mut v = vec![0.0; *depth];
            v[*index] = 1.0;
            (vec![*depth], v)
        }
        Primitive::Slice { axis, start, end } => {
            let a = &ops[0];
            let (axis, start, end) = (*axis, *start, *end);
            if axis >= a.shape.len() || start >= end || end > a.shape[axis] {
                return Err(mismatch(
                    name,
                    format!("[{start}, {end}) on axis {axis} of {:?}", a.shape),
                ));
            }
            let (outer, len, inner) = axis_split(&a.shape, axis);
            let mut shape = a.shape.clone();
            shape[axis] = end - start;
            let mut data = Vec::with_capacity(numel(&shape));
            for r in 0..outer {
                let base = r * len * inner;
                data.extend_from_slice(&a.value[base + start * inner..base + end * inner]);
            }
            (shape, data)
        }
        Primitive::Reshape { shape } => {
            let a = &ops[0];
            if numel(shape) != a.value.len() || shape.contains(&0) {
                return Err(mismatch(name, format!("{:?} -> {shape:?}", a.shape)));
            }
            (shape.clone(), a.value.as_ref().clone())
        }
    };
    Ok(out)
}

fn unary(a: &Operand, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    (a.shape.clone(), a.value.iter().map(|&x| f(x)).collect())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], op: &Operand, g: Vec<f64>) {
    let Some(i) = op.node else { return };
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], op: &Operand) -> Option<&'a mut [f64]> {
    let i = op.node?;
    let len = op.value.len();
    Some(grads[i].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn vjp(prim: &Primitive, ops: &[Operand], out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match prim {
        Primitive::MatMul => {
            let (a, b) = (&ops[0], &ops[1]);
            let (n, k, m, _) = matmul_dims(&a.shape, &b.shape).expect("validated in forward");
            let mut da = a.node.map(|_| vec![0.0; a.value.len()]);
            let mut db = b.node.map(|_| vec![0.0; b.value.len()]);
            kernels::matmul_backward(&a.value, &b.value, g, n, k, m, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                accumulate(grads, a, da);
            }
            if let Some(db) = db {
                accumulate(grads, b, db);
            }
        }
        Primitive::Conv2d { stride } => {
            let (x, w, b) = (&ops[0], &ops[1], &ops[2]);
            let (batch, geom) = conv_dims(&x.shape, &w.shape, &b.shape, *stride).expect("validated in forward");
            let mut dx = x.node.map(|_| vec![0.0; x.value.len()]);
            let mut dw = w.node.map(|_| vec![0.0; w.value.len()]);
            let mut db = b.node.map(|_| vec![0.0; b.value.len()]);
            kernels::conv2d_backward(
                &x.value,
                &w.value,
                g,
                batch,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (op, d) in [(x, dx), (w, dw), (b, db)] {
                if let Some(d) = d {
                    accumulate(grads, op, d);
                }
            }
        }
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (&ops[0], &ops[1]);
            let bc = add_broadcast(&a.shape, &b.shape).expect("validated in forward");
            let is_mul = *prim == Primitive::Mul;
            // da
            if let Some(da) = grad_slot(grads, a) {
                match (bc, is_mul) {
                    (_, false) if matches!(bc, Broadcast::ScalarFirst) => da[0] += g.iter().sum::<f64>(),
                    (_, false) => da.iter_mut().zip(g).for_each(|(d, &x)| *d += x),
                    (Broadcast::Same, true) => da
                        .iter_mut()
                        .zip(g.iter().zip(b.value.iter()))
                        .for_each(|(d, (&x, &y))| *d += x * y),
                    (Broadcast::Scalar, true) => {
                        let s = b.value[0];
                        da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
                    }
                    (Broadcast::ScalarFirst, true) => {
                        da[0] += g.iter().zip(b.value.iter()).map(|(x, y)| x * y).sum::<f64>()
                    }
                    (Broadcast::Rows, true) => unreachable!("mul does not row-broadcast"),
                }
            }
            if let Some(db) = grad_slot(grads, b) {
                match (bc, is_mul) {
                    (Broadcast::Same, false) | (Broadcast::ScalarFirst, false) => {
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                    }
                    (Broadcast::Scalar, false) => db[0] += g.iter().sum::<f64>(),
                    (Broadcast::Rows, false) => {
                        let m = db.len();
                        for (i, &x) in g.iter().enumerate() {
                            db[i % m] += x;
                        }
                    }
                    (Broadcast::Same, true) => db
                        .iter_mut()
                        .zip(g.iter().zip(a.value.iter()))
                        .for_each(|(d, (&x, &y))| *d += x * y),
                    (Broadcast::Scalar, true) => {
                        db[0] += g.iter().zip(a.value.iter()).map(|(x, y)| x * y).sum::<f64>()
                    }
                    (Broadcast::ScalarFirst, true) => {
                        let s = a.value[0];
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
                    }
                    (Broadcast::Rows, true) => unreachable!("mul does not row-broadcast"),
                }
            }
        }
        Primitive::Relu => {
            let a = &ops[0];
            if let Some(da) = grad_slot(grads, a) {
                for ((d, &x), &gv) in da.iter_mut().zip(a.value.iter()).zip(g) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Primitive::Sigmoid => {
            if let Some(da) = grad_slot(grads, &ops[0]) {
                for ((d, &y), &gv) in da.iter_mut().zip(out).zip(g) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        Primitive::Tanh => {
            if let Some(da) = grad_slot(grads, &ops[0]) {
                for ((d, &y), &gv) in da.iter_mut().zip(out).zip(g) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Primitive::Log => {
            let a = &ops[0];
            if let Some(da) = grad_slot(grads, a) {
                for ((d, &x), &gv) in da.iter_mut().zip(a.value.iter()).zip(g) {
                    *d += gv / x.max(f64::MIN_POSITIVE);
                }
            }
        }
        Primitive::Softmax => {
            let a = &ops[0];
            let m = *a.shape.last().expect("non-empty shape");
            if let Some(da) = grad_slot(grads, a) {
                for ((d, y), gv) in da.chunks_mut(m).zip(out.chunks(m)).zip(g.chunks(m)) {
                    let s = kernels::dot(y, gv);
                    for ((dv, &yv), &gj) in d.iter_mut().zip(y).zip(gv) {
                        *dv += yv * (gj - s);
                    }
                }
            }
        }
        Primitive::Sum | Primitive::Mean => {
            let a = &ops[0];
            let scale = if *prim == Primitive::Mean {
                g[0] / a.value.len() as f64
            } else {
                g[0]
            };
            if let Some(da) = grad_slot(grads, a) {
                da.iter_mut().for_each(|d| *d += scale);
            }
        }
        Primitive::Concat { axis } => {
            let (outer, _, _) = axis_split(&ops[0].shape, *axis);
            let total = g.len() / outer;
            let mut offset = 0;
            for o in ops {
                let chunk = o.value.len() / outer;
                if let Some(d) = grad_slot(grads, o) {
                    for r in 0..outer {
                        let src = &g[r * total + offset..r * total + offset + chunk];
                        d[r * chunk..(r + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += chunk;
            }
        }
        Primitive::Slice { axis, start, end } => {
            let a = &ops[0];
            let (outer, len, inner) = axis_split(&a.shape, *axis);
            let width = (end - start) * inner;
            if let Some(d) = grad_slot(grads, a) {
                for r in 0..outer {
                    let base = r * len * inner + start * inner;
                    d[base..base + width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Primitive::Reshape { .. } => {
            if let Some(d) = grad_slot(grads, &ops[0]) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Primitive::OneHot { .. } => {}
    }
}
