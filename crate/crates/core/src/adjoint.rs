//! Reverse-mode differentiation: a flat parameter store, the primitive adjoint
//! kernels, an operation tape, and a central-difference checker.
//!
//! Parameters live in one contiguous array split into named blocks, so a
//! gradient buffer is just a `Vec<f64>` with the same layout. Workers fill
//! their own buffers and the caller reduces them in a fixed order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Box constraint re-applied after every optimizer step.
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<BlockInfo>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        self.add_block(name, shape, values, None)
    }

    pub fn add_bounded(&mut self, name: &str, shape: &[usize], values: Vec<f64>, lo: f64, hi: f64) -> Result<ParamId> {
        self.add_block(name, shape, values, Some((lo, hi)))
    }

    fn add_block(&mut self, name: &str, shape: &[usize], values: Vec<f64>, bounds: Option<(f64, f64)>) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Shape(format!(
                "block '{name}' has shape {shape:?} but {} values",
                values.len()
            )));
        }
        if self.find(name).is_some() {
            return Err(Error::Shape(format!("duplicate parameter block '{name}'")));
        }
        let offset = self.values.len();
        self.values.extend(values);
        self.grads.resize(self.values.len(), 0.0);
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
            bounds,
        });
        Ok(ParamId(self.blocks.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block(&self, id: ParamId) -> &BlockInfo {
        &self.blocks[id.0]
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let b = &self.blocks[id.0];
        b.offset..b.offset + b.len
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[self.range(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.values[r]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[self.range(id)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn values_and_grads_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    /// Adds a worker's gradient buffer into the store.
    pub fn accumulate(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.grads.len(), "gradient buffer layout mismatch");
        for (g, d) in self.grads.iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Clamps every bounded block into its box.
    pub fn project(&mut self) {
        for b in &self.blocks {
            if let Some((lo, hi)) = b.bounds {
                for v in &mut self.values[b.offset..b.offset + b.len] {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }
}

/// Dense kernels shared by the tape and by the fused per-sample code paths.
pub mod kernels {
    /// `out = W x + b` with `W` row-major `out.len() x x.len()`.
    #[inline]
    pub fn affine_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        let cols = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = b[r];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *o = acc;
        }
    }

    /// Accumulates `dW += dout x^T`, `db += dout` and optionally `dx += W^T dout`.
    #[inline]
    pub fn affine_backward(w: &[f64], x: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
        let cols = x.len();
        for (r, &g) in dout.iter().enumerate() {
            db[r] += g;
            if g == 0.0 {
                continue;
            }
            let row = &mut dw[r * cols..(r + 1) * cols];
            for (d, xv) in row.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
        if let Some(dx) = dx {
            for (r, &g) in dout.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &w[r * cols..(r + 1) * cols];
                for (d, wv) in dx.iter_mut().zip(row) {
                    *d += g * wv;
                }
            }
        }
    }

    fn neighbors(dims: [usize; 3], x: usize, y: usize, z: usize, mut f: impl FnMut(usize, usize)) {
        let [nx, ny, nz] = dims;
        for kz in 0..3 {
            let zz = z as isize + kz as isize - 1;
            if zz < 0 || zz >= nz as isize {
                continue;
            }
            for ky in 0..3 {
                let yy = y as isize + ky as isize - 1;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = x as isize + kx as isize - 1;
                    if xx < 0 || xx >= nx as isize {
                        continue;
                    }
                    let tap = kz * 9 + ky * 3 + kx;
                    let v = (zz as usize * ny + yy as usize) * nx + xx as usize;
                    f(tap, v);
                }
            }
        }
    }

    /// 3x3x3 convolution, stride 1, zero padding 1. Volumes are x-fastest with
    /// channels innermost; weights are `[cout][cin][27]`.
    pub fn conv3_forward(
        input: &[f64],
        dims: [usize; 3],
        cin: usize,
        weight: &[f64],
        bias: &[f64],
        cout: usize,
        out: &mut [f64],
    ) {
        // [tap][cin][cout] so the innermost loop runs over output channels.
        let mut wt = vec![0.0; 27 * cin * cout];
        for o in 0..cout {
            for c in 0..cin {
                for tap in 0..27 {
                    wt[(tap * cin + c) * cout + o] = weight[(o * cin + c) * 27 + tap];
                }
            }
        }
        let [nx, ny, nz] = dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (z * ny + y) * nx + x;
                    let dst = &mut out[v * cout..(v + 1) * cout];
                    dst.copy_from_slice(bias);
                    neighbors(dims, x, y, z, |tap, nb| {
                        let src = &input[nb * cin..(nb + 1) * cin];
                        for (c, &iv) in src.iter().enumerate() {
                            if iv == 0.0 {
                                continue;
                            }
                            let wrow = &wt[(tap * cin + c) * cout..(tap * cin + c + 1) * cout];
                            for (d, wv) in dst.iter_mut().zip(wrow) {
                                *d += wv * iv;
                            }
                        }
                    });
                }
            }
        }
    }

    /// Accumulating adjoint of [`conv3_forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn conv3_backward(
        input: &[f64],
        dims: [usize; 3],
        cin: usize,
        weight: &[f64],
        cout: usize,
        dout: &[f64],
        mut dinput: Option<&mut [f64]>,
        dweight: &mut [f64],
        dbias: &mut [f64],
    ) {
        let mut wt = vec![0.0; 27 * cin * cout];
        for o in 0..cout {
            for c in 0..cin {
                for tap in 0..27 {
                    wt[(tap * cin + c) * cout + o] = weight[(o * cin + c) * 27 + tap];
                }
            }
        }
        let mut dwt = vec![0.0; 27 * cin * cout];
        let [nx, ny, nz] = dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (z * ny + y) * nx + x;
                    let g = &dout[v * cout..(v + 1) * cout];
                    if g.iter().all(|&d| d == 0.0) {
                        continue;
                    }
                    for (db, gv) in dbias.iter_mut().zip(g) {
                        *db += gv;
                    }
                    neighbors(dims, x, y, z, |tap, nb| {
                        for c in 0..cin {
                            let iv = input[nb * cin + c];
                            let k = (tap * cin + c) * cout;
                            let wrow = &wt[k..k + cout];
                            let dwrow = &mut dwt[k..k + cout];
                            let mut acc = 0.0;
                            for o in 0..cout {
                                dwrow[o] += g[o] * iv;
                                acc += wrow[o] * g[o];
                            }
                            if let Some(di) = dinput.as_deref_mut() {
                                di[nb * cin + c] += acc;
                            }
                        }
                    });
                }
            }
        }
        for o in 0..cout {
            for c in 0..cin {
                for tap in 0..27 {
                    dweight[(o * cin + c) * 27 + tap] += dwt[(tap * cin + c) * cout + o];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Lerp { a: NodeId, b: NodeId, t: NodeId },
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Slice { src: NodeId, start: usize },
    Affine { w: NodeId, x: NodeId, b: NodeId },
    Conv3 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dims: [usize; 3],
        cin: usize,
        cout: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Append-only record of vector-valued operations. Inputs always precede the
/// node that consumes them, so a single reverse sweep visits each record once.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[f64]> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_slice())
            .ok_or_else(|| Error::Tape(format!("node {} is not on this tape", id.0)))
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<usize> {
        let (la, lb) = (self.check(a)?.len(), self.check(b)?.len());
        if la != lb {
            return Err(Error::Shape(format!("{what}: operand lengths {la} and {lb} differ")));
        }
        Ok(la)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    /// Leaf holding a copy of a parameter block; its adjoint flows into the
    /// store's gradient layout at that block's offset.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let offset = store.range(id).start;
        self.push(store.get(id).to_vec(), Op::Param { offset })
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        self.same_len(a, b, what)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(value, op))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let value = self.check(a)?.iter().map(|&x| f(x)).collect();
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `a + t (b - a)`, elementwise.
    pub fn lerp(&mut self, a: NodeId, b: NodeId, t: NodeId) -> Result<NodeId> {
        let n = self.same_len(a, b, "lerp")?;
        if self.check(t)?.len() != n {
            return Err(Error::Shape("lerp: weight length differs from operands".into()));
        }
        let value = (0..n)
            .map(|i| {
                let (x, y, w) = (self.nodes[a.0].value[i], self.nodes[b.0].value[i], self.nodes[t.0].value[i]);
                x + w * (y - x)
            })
            .collect();
        Ok(self.push(value, Op::Lerp { a, b, t }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "dot")?;
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![v], Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.check(a)?.iter().sum();
        Ok(self.push(vec![v], Op::Sum(a)))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.check(src)?;
        if start + len > s.len() {
            return Err(Error::Shape(format!("slice {start}..{} of length {}", start + len, s.len())));
        }
        let value = s[start..start + len].to_vec();
        Ok(self.push(value, Op::Slice { src, start }))
    }

    /// `W x + b`, `W` row-major with `b.len()` rows.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (lw, lx, lb) = (self.check(w)?.len(), self.check(x)?.len(), self.check(b)?.len());
        if lx == 0 || lw != lx * lb {
            return Err(Error::Shape(format!(
                "affine: weight of length {lw} does not map {lx} inputs to {lb} outputs"
            )));
        }
        let mut out = vec![0.0; lb];
        kernels::affine_forward(&self.nodes[w.0].value, &self.nodes[b.0].value, &self.nodes[x.0].value, &mut out);
        Ok(self.push(out, Op::Affine { w, x, b }))
    }

    pub fn conv3(&mut self, input: NodeId, weight: NodeId, bias: NodeId, dims: [usize; 3], cin: usize) -> Result<NodeId> {
        let cout = self.check(bias)?.len();
        let voxels: usize = dims.iter().product();
        if self.check(input)?.len() != voxels * cin {
            return Err(Error::Shape(format!("conv3: input is not {dims:?} x {cin}")));
        }
        if self.check(weight)?.len() != cout * cin * 27 {
            return Err(Error::Shape(format!("conv3: weight is not {cout} x {cin} x 27")));
        }
        let mut out = vec![0.0; voxels * cout];
        kernels::conv3_forward(
            &self.nodes[input.0].value,
            dims,
            cin,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            cout,
            &mut out,
        );
        Ok(self.push(
            out,
            Op::Conv3 {
                input,
                weight,
                bias,
                dims,
                cin,
                cout,
            },
        ))
    }

    /// Seeds a scalar output and accumulates parameter gradients into `store`.
    pub fn backward(&self, output: NodeId, seed: f64, store: &mut ParamStore) -> Result<()> {
        if self.check(output)?.len() != 1 {
            return Err(Error::Tape("backward needs a scalar output".into()));
        }
        self.backward_vec(output, &[seed], store.grads_mut())
    }

    /// Vector-seeded sweep writing into a gradient buffer with store layout.
    pub fn backward_vec(&self, output: NodeId, seed: &[f64], grads: &mut [f64]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward operation".into()));
        }
        let out_len = self.check(output)?.len();
        if seed.len() != out_len {
            return Err(Error::Shape(format!("seed of length {} for output of length {out_len}", seed.len())));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.to_vec());

        fn acc<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut [f64] {
            adj[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()])
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            let val = |id: NodeId| &self.nodes[id.0].value;
            match node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (d, gv) in grads[offset..offset + g.len()].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, &self.nodes, a), &g, 1.0);
                    add_into(acc(&mut adj, &self.nodes, b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, &self.nodes, a), &g, 1.0);
                    add_into(acc(&mut adj, &self.nodes, b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a).clone(), val(b).clone());
                    mul_into(acc(&mut adj, &self.nodes, a), &g, &vb);
                    mul_into(acc(&mut adj, &self.nodes, b), &g, &va);
                }
                Op::Div(a, b) => {
                    let vb = val(b).clone();
                    let da = acc(&mut adj, &self.nodes, a);
                    for k in 0..g.len() {
                        da[k] += g[k] / vb[k];
                    }
                    let db = acc(&mut adj, &self.nodes, b);
                    for k in 0..g.len() {
                        db[k] -= g[k] * y[k] / vb[k];
                    }
                }
                Op::Neg(a) => add_into(acc(&mut adj, &self.nodes, a), &g, -1.0),
                Op::Exp(a) => mul_into(acc(&mut adj, &self.nodes, a), &g, y),
                Op::Log(a) => {
                    let va = val(a).clone();
                    let da = acc(&mut adj, &self.nodes, a);
                    for k in 0..g.len() {
                        da[k] += g[k] / va[k];
                    }
                }
                Op::Relu(a) => {
                    let va = val(a).clone();
                    let da = acc(&mut adj, &self.nodes, a);
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            da[k] += g[k];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let da = acc(&mut adj, &self.nodes, a);
                    for k in 0..g.len() {
                        da[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Lerp { a, b, t } => {
                    let (va, vb, vt) = (val(a).clone(), val(b).clone(), val(t).clone());
                    let da = acc(&mut adj, &self.nodes, a);
                    for k in 0..g.len() {
                        da[k] += g[k] * (1.0 - vt[k]);
                    }
                    mul_into(acc(&mut adj, &self.nodes, b), &g, &vt);
                    let dt = acc(&mut adj, &self.nodes, t);
                    for k in 0..g.len() {
                        dt[k] += g[k] * (vb[k] - va[k]);
                    }
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (val(a).clone(), val(b).clone());
                    add_into(acc(&mut adj, &self.nodes, a), &vb, g[0]);
                    add_into(acc(&mut adj, &self.nodes, b), &va, g[0]);
                }
                Op::Sum(a) => {
                    for d in acc(&mut adj, &self.nodes, a) {
                        *d += g[0];
                    }
                }
                Op::Slice { src, start } => {
                    let ds = acc(&mut adj, &self.nodes, src);
                    add_into(&mut ds[start..start + g.len()], &g, 1.0);
                }
                Op::Affine { w, x, b } => {
                    let (vw, vx) = (val(w).clone(), val(x).clone());
                    let mut dw = vec![0.0; vw.len()];
                    let mut db = vec![0.0; g.len()];
                    let mut dx = vec![0.0; vx.len()];
                    kernels::affine_backward(&vw, &vx, &g, &mut dw, &mut db, Some(&mut dx));
                    add_into(acc(&mut adj, &self.nodes, w), &dw, 1.0);
                    add_into(acc(&mut adj, &self.nodes, b), &db, 1.0);
                    add_into(acc(&mut adj, &self.nodes, x), &dx, 1.0);
                }
                Op::Conv3 {
                    input,
                    weight,
                    bias,
                    dims,
                    cin,
                    cout,
                } => {
                    let (vi, vw) = (val(input), val(weight));
                    let mut dw = vec![0.0; vw.len()];
                    let mut db = vec![0.0; cout];
                    let needs_input = !matches!(self.nodes[input.0].op, Op::Constant);
                    let mut di = if needs_input { vec![0.0; vi.len()] } else { Vec::new() };
                    kernels::conv3_backward(
                        vi,
                        dims,
                        cin,
                        vw,
                        cout,
                        &g,
                        needs_input.then_some(di.as_mut_slice()),
                        &mut dw,
                        &mut db,
                    );
                    add_into(acc(&mut adj, &self.nodes, weight), &dw, 1.0);
                    add_into(acc(&mut adj, &self.nodes, bias), &db, 1.0);
                    if needs_input {
                        add_into(acc(&mut adj, &self.nodes, input), &di, 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

#[inline]
fn mul_into(dst: &mut [f64], g: &[f64], m: &[f64]) {
    for k in 0..g.len() {
        dst[k] += g[k] * m[k];
    }
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest relative error over the checked (non-excluded) parameters.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Parameters with a kink within `2 eps`; not scored.
    pub excluded: Vec<usize>,
    /// Parameters whose gradient is below the difference quotient's rounding
    /// noise (`FD_NOISE_FLOOR * max(1, |f|) / eps`); not scored.
    pub below_noise: Vec<usize>,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub const FD_NOISE_FLOOR: f64 = 1e-11;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f(store, Some(grad))` must return the loss and accumulate its gradient
/// into `grad` (store layout); `f(store, None)` returns the loss only.
///
/// Each parameter is also probed at `2 eps`. For a smooth function the
/// one-sided slopes and the two central estimates obey Taylor relations up
/// to `O(eps^2)`; a parameter violating them has a kink within `2 eps` and
/// is excluded.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> FdReport
where
    F: FnMut(&ParamStore, Option<&mut [f64]>) -> f64,
{
    let n = store.len();
    let mut analytic = vec![0.0; n];
    f(store, Some(&mut analytic));
    let f0 = f(store, None);
    let mut numeric = vec![0.0; n];
    let mut excluded = Vec::new();
    let mut below_noise = Vec::new();
    let scale = f0.abs().max(1.0);
    let floor = FD_NOISE_FLOOR * scale / eps;
    let mut max_rel = 0.0;
    let mut worst = None;
    for i in 0..n {
        let v = store.values()[i];
        let mut at = |store: &mut ParamStore, d: f64| {
            store.values_mut()[i] = v + d;
            f(store, None)
        };
        let (fp, fm) = (at(store, eps), at(store, -eps));
        let (fp2, fm2) = (at(store, 2.0 * eps), at(store, -2.0 * eps));
        store.values_mut()[i] = v;
        let c1 = (fp - fm) / (2.0 * eps);
        let c2 = (fp2 - fm2) / (4.0 * eps);
        numeric[i] = c1;
        let d1 = (fp - f0) / eps - (f0 - fm) / eps;
        let d2 = (fp2 - f0) / (2.0 * eps) - (f0 - fm2) / (2.0 * eps);
        let tol = 1e-7 * (c1.abs() + c2.abs()) + 1e-9 * scale;
        if (c1 - c2).abs() > tol || (d2 - 2.0 * d1).abs() > tol {
            excluded.push(i);
            continue;
        }
        if analytic[i].abs() + numeric[i].abs() < floor {
            below_noise.push(i);
            continue;
        }
        let rel = relative_error(analytic[i], numeric[i]);
        if rel > max_rel || worst.is_none() {
            max_rel = rel.max(max_rel);
            worst = Some(i);
        }
    }
    FdReport {
        max_rel_error: max_rel,
        worst_index: worst,
        checked: n - excluded.len() - below_noise.len(),
        excluded,
        below_noise,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tape_grad(store: &mut ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let out = build(&mut tape, store);
        tape.backward(out, 1.0, store).unwrap();
        tape.scalar(out)
    }

    #[test]
    fn sigmoid_value_and_slope() {
        let mut store = ParamStore::new();
        let x = store.add("x", &[1], vec![0.0]).unwrap();
        let y = tape_grad(&mut store, |t, s| {
            let p = t.param(s, x);
            t.sigmoid(p).unwrap()
        });
        assert_eq!(y, 0.5);
        assert_eq!(store.grad(x), &[0.25]);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", &[1], vec![3.0]).unwrap();
        tape_grad(&mut store, |t, s| {
            let p = t.param(s, x);
            t.mul(p, p).unwrap()
        });
        assert_eq!(store.grad(x), &[6.0]);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", &[2], vec![1.0, 2.0]).unwrap();
        let unused = store.add("unused", &[3], vec![1.0; 3]).unwrap();
        tape_grad(&mut store, |t, s| {
            let p = t.param(s, x);
            t.dot(p, p).unwrap()
        });
        assert_eq!(store.grad(unused), &[0.0; 3]);
        assert_eq!(store.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_doubles() {
        let mut store = ParamStore::new();
        let x = store.add("x", &[1], vec![1.3]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, x);
        let e = tape.exp(p).unwrap();
        tape.backward(e, 1.0, &mut store).unwrap();
        let once = store.grad(x)[0];
        tape.backward(e, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(x)[0], 2.0 * once);
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::new();
        let tape = Tape::new();
        assert!(matches!(tape.backward(NodeId(0), 1.0, &mut store), Err(Error::Tape(_))));
        let mut tape = Tape::new();
        let v = tape.constant(vec![1.0, 2.0]);
        assert!(tape.backward(v, 1.0, &mut store).is_err());
    }

    #[test]
    fn shape_mismatch_at_record_time() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0]);
        let b = tape.constant(vec![1.0]);
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(tape.dot(a, b).is_err());
        let w = tape.constant(vec![0.0; 5]);
        assert!(tape.affine(w, a, b).is_err());
        assert!(tape.slice(a, 1, 2).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", &[1], vec![0.0]).unwrap();
        tape_grad(&mut store, |t, s| {
            let p = t.param(s, x);
            let r = t.relu(p).unwrap();
            t.sum(r).unwrap()
        });
        assert_eq!(store.grad(x), &[0.0]);
    }

    #[test]
    fn quadratic_fd_is_tight() {
        let mut store = ParamStore::new();
        store.add("x", &[3], vec![0.3, -1.2, 2.5]).unwrap();
        let report = finite_diff_check(&mut store, 1e-5, |s, g| {
            let v = s.values();
            let f = 3.0 * v[0] * v[0] + v[0] * v[1] - 0.5 * v[2] * v[2] + v[1];
            if let Some(g) = g {
                g[0] += 6.0 * v[0] + v[1];
                g[1] += v[0] + 1.0;
                g[2] += -v[2];
            }
            f
        });
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut store = ParamStore::new();
        store.add("x", &[2], vec![0.0, 0.7]).unwrap();
        let report = finite_diff_check(&mut store, 1e-5, |s, g| {
            let v = s.values();
            if let Some(g) = g {
                g[0] += if v[0] > 0.0 { 1.0 } else { 0.0 };
                g[1] += 2.0 * v[1];
            }
            v[0].max(0.0) + v[1] * v[1]
        });
        assert_eq!(report.excluded, vec![0]);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }

    fn rng_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn three_layer_mlp_matches_fd() {
        let sizes = [5, 7, 6, 3];
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let wi = store.add(&format!("w{l}"), &[w[1], w[0]], rng_vec(l as u64, w[0] * w[1], 0.8)).unwrap();
            let bi = store.add(&format!("b{l}"), &[w[1]], rng_vec(10 + l as u64, w[1], 0.3)).unwrap();
            layers.push((wi, bi));
        }
        let input = rng_vec(99, 5, 1.0);
        let forward = |s: &ParamStore, g: Option<&mut [f64]>| {
            let mut t = Tape::new();
            let mut h = t.constant(input.clone());
            for (l, &(w, b)) in layers.iter().enumerate() {
                let (wn, bn) = (t.param(s, w), t.param(s, b));
                h = t.affine(wn, h, bn).unwrap();
                h = if l + 1 < layers.len() { t.relu(h).unwrap() } else { t.sigmoid(h).unwrap() };
            }
            let l = t.log(h).unwrap();
            let out = t.sum(l).unwrap();
            if let Some(g) = g {
                t.backward_vec(out, &[1.0], g).unwrap();
            }
            t.scalar(out)
        };
        let report = finite_diff_check(&mut store, 1e-5, forward);
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn conv3_matches_fd() {
        let dims = [4, 3, 5];
        let (cin, cout) = (2, 3);
        let voxels = 60;
        let mut store = ParamStore::new();
        let w = store.add("w", &[cout, cin, 27], rng_vec(1, cout * cin * 27, 0.5)).unwrap();
        let b = store.add("b", &[cout], rng_vec(2, cout, 0.5)).unwrap();
        let x = store.add("x", &[voxels * cin], rng_vec(3, voxels * cin, 1.0)).unwrap();
        let weights = rng_vec(4, voxels * cout, 1.0);
        let report = finite_diff_check(&mut store, 1e-5, |s, g| {
            let mut t = Tape::new();
            let (wn, bn, xn) = (t.param(s, w), t.param(s, b), t.param(s, x));
            let y = t.conv3(xn, wn, bn, dims, cin).unwrap();
            let y2 = t.mul(y, y).unwrap();
            let c = t.constant(weights.clone());
            let out = t.dot(y2, c).unwrap();
            if let Some(g) = g {
                t.backward_vec(out, &[1.0], g).unwrap();
            }
            t.scalar(out)
        });
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn conv3_center_tap_is_identity() {
        let dims = [3, 3, 3];
        let input: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let mut out = vec![0.0; 27];
        kernels::conv3_forward(&input, dims, 1, &w, &[0.0], 1, &mut out);
        assert_eq!(out, input);
    }

    fn elementwise_graph(t: &mut Tape, p: NodeId, q: NodeId, r: NodeId) -> NodeId {
        let a = t.add(p, q).unwrap();
        let b = t.sub(a, r).unwrap();
        let c = t.mul(b, q).unwrap();
        let e = t.exp(r).unwrap();
        let d = t.div(c, e).unwrap();
        let n = t.neg(d).unwrap();
        let s = t.sigmoid(n).unwrap();
        let pq = t.mul(p, p).unwrap();
        let one = t.constant(vec![1.0; 3]);
        let pq1 = t.add(pq, one).unwrap();
        let lg = t.log(pq1).unwrap();
        let tt = t.sigmoid(r).unwrap();
        let lp = t.lerp(s, lg, tt).unwrap();
        let rl = t.relu(q).unwrap();
        let sl = t.slice(lp, 1, 2).unwrap();
        let sr = t.slice(rl, 0, 2).unwrap();
        let x = t.dot(sl, sr).unwrap();
        let y = t.sum(lp).unwrap();
        t.add(x, y).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_primitive_matches_fd(vals in proptest::collection::vec(-2.0f64..2.0, 9)) {
            prop_assume!(vals[3..6].iter().all(|v| v.abs() > 1e-3));
            let mut store = ParamStore::new();
            let p = store.add("p", &[3], vals[0..3].to_vec()).unwrap();
            let q = store.add("q", &[3], vals[3..6].to_vec()).unwrap();
            let r = store.add("r", &[3], vals[6..9].to_vec()).unwrap();
            let report = finite_diff_check(&mut store, 1e-5, |s, g| {
                let mut t = Tape::new();
                let (pn, qn, rn) = (t.param(s, p), t.param(s, q), t.param(s, r));
                let out = elementwise_graph(&mut t, pn, qn, rn);
                if let Some(g) = g {
                    t.backward_vec(out, &[1.0], g).unwrap();
                }
                t.scalar(out)
            });
            // Entries small enough that the difference quotient's rounding
            // error dominates are judged by absolute error instead.
            for i in 0..store.len() {
                if report.excluded.contains(&i) {
                    continue;
                }
                let (a, n) = (report.analytic[i], report.numeric[i]);
                prop_assert!(relative_error(a, n) < 1e-6 || (a - n).abs() < 1e-9, "{:?}", report);
            }
        }

        #[test]
        fn gradient_is_linear(vals in proptest::collection::vec(-2.0f64..2.0, 9), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut store = ParamStore::new();
            let p = store.add("p", &[3], vals[0..3].to_vec()).unwrap();
            let q = store.add("q", &[3], vals[3..6].to_vec()).unwrap();
            let r = store.add("r", &[3], vals[6..9].to_vec()).unwrap();
            let grad_of = |s: &ParamStore, wf: f64, wg: f64| {
                let mut t = Tape::new();
                let (pn, qn, rn) = (t.param(s, p), t.param(s, q), t.param(s, r));
                let f = elementwise_graph(&mut t, pn, qn, rn);
                let g = t.dot(pn, rn).unwrap();
                let cf = t.scalar_constant(wf);
                let cg = t.scalar_constant(wg);
                let sf = t.mul(f, cf).unwrap();
                let sg = t.mul(g, cg).unwrap();
                let out = t.add(sf, sg).unwrap();
                let mut grad = vec![0.0; s.len()];
                t.backward_vec(out, &[1.0], &mut grad).unwrap();
                grad
            };
            let combined = grad_of(&store, a, b);
            let gf = grad_of(&store, 1.0, 0.0);
            let gg = grad_of(&store, 0.0, 1.0);
            for i in 0..combined.len() {
                let want = a * gf[i] + b * gg[i];
                prop_assert!((combined[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
            store.zero_grads();
            prop_assert!(store.grads().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn store_layout_and_projection() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[2, 2], vec![1.0; 4]).unwrap();
        let b = s.add_bounded("b", &[3], vec![-0.5, 0.5, 1.5], 0.0, 1.0).unwrap();
        assert_eq!(s.range(b), 4..7);
        assert!(s.add("a", &[1], vec![0.0]).is_err());
        assert!(s.add("c", &[2], vec![0.0]).is_err());
        s.project();
        assert_eq!(s.get(b), &[0.0, 0.5, 1.0]);
        assert_eq!(s.get(a), &[1.0; 4]);
        assert_eq!(s.find("b"), Some(b));
    }
}
