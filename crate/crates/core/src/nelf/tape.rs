//! Batched reverse-mode automatic differentiation over row-major matrices.
//!
//! Every node holds a `rows × cols` matrix. Per-view tensors use one row per
//! (sample, view) pair, grouped by sample through an offsets table
//! (`groups[g]..groups[g+1]` are the rows of group `g`).

use std::rc::Rc;

use crate::volrender::composite_backward;

use super::params::Layer;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `C = beta·C + A·B` where `A` is `m×k` and `B` is `k×n`, each optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe the dense buffers whose lengths the
    // callers size as m·k, k·n and m·n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rays for the compositor: ray `r` owns samples `rays[r]..rays[r+1]`.
#[derive(Clone, Debug)]
pub struct RayLayout {
    pub rays: Vec<usize>,
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
}

enum Op {
    Input,
    Affine {
        x: Var,
        layer: Layer,
    },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
        groups: Rc<[usize]>,
    },
    GroupSoftmax {
        x: Var,
        groups: Rc<[usize]>,
    },
    GroupNormalize {
        x: Var,
        groups: Rc<[usize]>,
    },
    GroupWeightedSum {
        values: Var,
        weights: Var,
        groups: Rc<[usize]>,
    },
    MulChannels {
        x: Var,
        rgb: Var,
    },
    Relight {
        x: Var,
        env: Rc<[f64]>,
    },
    Composite {
        sigma: Var,
        color: Var,
        layout: Rc<RayLayout>,
    },
    L1 {
        x: Var,
        target: Rc<[f64]>,
        weights: Option<Rc<[f64]>>,
        scale: f64,
    },
    Sum(Vec<Var>),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Records a computation over a parameter vector and replays it backwards.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Signs at every non-differentiable point of the recorded graph: ReLU
    /// inputs and L1 residuals. Two evaluations with equal patterns lie on
    /// the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.data.iter().map(|v| *v > 0.0)),
                Op::L1 { x, target, .. } => out.extend(
                    self.nodes[x.0]
                        .value
                        .data
                        .iter()
                        .zip(target.iter())
                        .map(|(a, b)| a > b),
                ),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m, false)
    }

    /// `x Wᵀ + b` with the layer's weights read from the parameter vector.
    pub fn affine(&mut self, x: Var, layer: Layer) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols, layer.inputs, "affine input width");
        let m = xv.rows;
        let mut out = Matrix::zeros(m, layer.outputs);
        let bias = &self.params[layer.bias..layer.bias + layer.outputs];
        for r in 0..m {
            out.row_mut(r).copy_from_slice(bias);
        }
        let w = &self.params[layer.weight..layer.weight + layer.inputs * layer.outputs];
        gemm(
            m,
            layer.inputs,
            layer.outputs,
            &xv.data,
            false,
            w,
            true,
            1.0,
            &mut out.data,
        );
        self.push(Op::Affine { x, layer }, out, true)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Matrix::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect());
        let needs = self.needs(x);
        self.push(op, out, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            (av.rows, av.cols),
            (bv.rows, bv.cols),
            "elementwise shape mismatch"
        );
        let out = Matrix::from_vec(
            av.rows,
            av.cols,
            av.data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(op, out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Op::Concat(parts.to_vec()), out, needs)
    }

    /// Columns `start..start+len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.cols, "slice out of range");
        let mut out = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let needs = self.needs(x);
        self.push(Op::Slice { x, start }, out, needs)
    }

    /// Broadcasts row `g` of `x` to every row of group `g`.
    pub fn repeat_rows(&mut self, x: Var, groups: &Rc<[usize]>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rows + 1, groups.len(), "one row per group");
        let total = *groups.last().unwrap();
        let mut out = Matrix::zeros(total, xv.cols);
        for g in 0..xv.rows {
            for r in groups[g]..groups[g + 1] {
                out.row_mut(r).copy_from_slice(xv.row(g));
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::RepeatRows {
                x,
                groups: groups.clone(),
            },
            out,
            needs,
        )
    }

    /// Softmax over the rows of each group, independently per column.
    pub fn group_softmax(&mut self, x: Var, groups: &Rc<[usize]>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for g in 0..groups.len() - 1 {
            let (lo, hi) = (groups[g], groups[g + 1]);
            for c in 0..xv.cols {
                let max = (lo..hi)
                    .map(|r| xv.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in lo..hi {
                    let e = (xv.get(r, c) - max).exp();
                    out.data[r * xv.cols + c] = e;
                    sum += e;
                }
                for r in lo..hi {
                    out.data[r * xv.cols + c] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::GroupSoftmax {
                x,
                groups: groups.clone(),
            },
            out,
            needs,
        )
    }

    /// Divides each single-column entry by its group sum.
    pub fn group_normalize(&mut self, x: Var, groups: &Rc<[usize]>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols, 1, "group_normalize takes a column");
        let mut out = Matrix::zeros(xv.rows, 1);
        for g in 0..groups.len() - 1 {
            let (lo, hi) = (groups[g], groups[g + 1]);
            let sum: f64 = xv.data[lo..hi].iter().sum();
            for r in lo..hi {
                out.data[r] = xv.data[r] / sum;
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::GroupNormalize {
                x,
                groups: groups.clone(),
            },
            out,
            needs,
        )
    }

    /// `out[g] = Σ_{r∈g} w[r] ⊙ v[r]`. Weight column `j` scales value columns
    /// `j·s .. (j+1)·s` with `s = value_cols / weight_cols`.
    pub fn group_weighted_sum(&mut self, values: Var, weights: Var, groups: &Rc<[usize]>) -> Var {
        let (vv, wv) = (&self.nodes[values.0].value, &self.nodes[weights.0].value);
        assert_eq!(vv.rows, wv.rows, "weighted sum rows");
        assert_eq!(
            vv.cols % wv.cols,
            0,
            "weight columns must divide value columns"
        );
        let span = vv.cols / wv.cols;
        let ng = groups.len() - 1;
        let mut out = Matrix::zeros(ng, vv.cols);
        for g in 0..ng {
            let o = &mut out.data[g * vv.cols..(g + 1) * vv.cols];
            for r in groups[g]..groups[g + 1] {
                let vrow = vv.row(r);
                let wrow = wv.row(r);
                if span == vv.cols {
                    let w = wrow[0];
                    o.iter_mut().zip(vrow).for_each(|(a, b)| *a += w * b);
                } else {
                    for (c, a) in o.iter_mut().enumerate() {
                        *a += wrow[c / span] * vrow[c];
                    }
                }
            }
        }
        let needs = self.needs(values) || self.needs(weights);
        self.push(
            Op::GroupWeightedSum {
                values,
                weights,
                groups: groups.clone(),
            },
            out,
            needs,
        )
    }

    /// Multiplies channel-interleaved columns by a per-row RGB triple.
    pub fn mul_channels(&mut self, x: Var, rgb: Var) -> Var {
        let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[rgb.0].value);
        assert_eq!(cv.cols, 3, "rgb has three columns");
        assert_eq!(xv.cols % 3, 0, "interleaved channels");
        let mut out = xv.clone();
        for r in 0..xv.rows {
            let c = [cv.get(r, 0), cv.get(r, 1), cv.get(r, 2)];
            for (i, v) in out.row_mut(r).iter_mut().enumerate() {
                *v *= c[i % 3];
            }
        }
        let needs = self.needs(x) || self.needs(rgb);
        self.push(Op::MulChannels { x, rgb }, out, needs)
    }

    /// Per-channel dot product of each transport row with a fixed environment.
    pub fn relight(&mut self, x: Var, env: &Rc<[f64]>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols, env.len(), "transport and environment sizes");
        let mut out = Matrix::zeros(xv.rows, 3);
        for r in 0..xv.rows {
            let rgb = crate::envmap::relight_slices(xv.row(r), env);
            out.row_mut(r).copy_from_slice(&rgb);
        }
        let needs = self.needs(x);
        self.push(
            Op::Relight {
                x,
                env: env.clone(),
            },
            out,
            needs,
        )
    }

    /// Alpha-composites samples into per-ray `[r, g, b, depth, alpha]`.
    pub fn composite(&mut self, sigma: Var, color: Var, layout: &Rc<RayLayout>) -> Var {
        let (sv, cv) = (&self.nodes[sigma.0].value, &self.nodes[color.0].value);
        assert_eq!(sv.cols, 1);
        assert_eq!(cv.cols, 3);
        let nr = layout.rays.len() - 1;
        let mut out = Matrix::zeros(nr, 5);
        for r in 0..nr {
            let mut trans = 1.0;
            let o = out.row_mut(r);
            for i in layout.rays[r]..layout.rays[r + 1] {
                let a = 1.0 - (-sv.data[i] * layout.delta[i]).exp();
                let w = trans * a;
                for ch in 0..3 {
                    o[ch] += w * cv.get(i, ch);
                }
                o[3] += w * layout.u[i];
                o[4] += w;
                trans *= 1.0 - a;
            }
        }
        let needs = self.needs(sigma) || self.needs(color);
        self.push(
            Op::Composite {
                sigma,
                color,
                layout: layout.clone(),
            },
            out,
            needs,
        )
    }

    /// `scale · Σ w_i |x_i − t_i|` as a 1×1 node.
    pub fn l1(&mut self, x: Var, target: Rc<[f64]>, weights: Option<Rc<[f64]>>, scale: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.data.len(), target.len(), "l1 target size");
        let mut s = 0.0;
        for (i, (a, b)) in xv.data.iter().zip(target.iter()).enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            s += w * (a - b).abs();
        }
        let needs = self.needs(x);
        self.push(
            Op::L1 {
                x,
                target,
                weights,
                scale,
            },
            Matrix::from_vec(1, 1, vec![scale * s]),
            needs,
        )
    }

    /// Sum of 1×1 nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|p| self.nodes[p.0].value.data[0]).sum();
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Op::Sum(parts.to_vec()),
            Matrix::from_vec(1, 1, vec![s]),
            needs,
        )
    }

    /// Back-propagates `∂root/∂root = 1` and accumulates parameter gradients
    /// into `grads`. Each node is visited once, in reverse creation order.
    pub fn backward(&self, root: Var, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let root_value = &self.nodes[root.0].value;
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::from_vec(
            root_value.rows,
            root_value.cols,
            vec![1.0; root_value.data.len()],
        ));
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut adj, grads);
        }
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.needs(v) {
            return;
        }
        let value = &self.nodes[v.0].value;
        let slot = adj[v.0].get_or_insert_with(|| Matrix::zeros(value.rows, value.cols));
        f(slot);
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Matrix,
        adj: &mut [Option<Matrix>],
        grads: &mut [f64],
    ) {
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Affine { x, layer } => {
                let xv = &self.nodes[x.0].value;
                let (m, k, n) = (xv.rows, layer.inputs, layer.outputs);
                // dW (n×k) += gᵀ (n×m) · x (m×k)
                gemm(
                    n,
                    m,
                    k,
                    &g.data,
                    true,
                    &xv.data,
                    false,
                    1.0,
                    &mut grads[layer.weight..layer.weight + n * k],
                );
                let db = &mut grads[layer.bias..layer.bias + n];
                for r in 0..m {
                    db.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                let w = &self.params[layer.weight..layer.weight + n * k];
                self.accumulate(adj, *x, |dx| {
                    gemm(m, n, k, &g.data, false, w, false, 1.0, &mut dx.data)
                });
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                self.accumulate(adj, *x, |dx| {
                    for i in 0..g.data.len() {
                        if xv.data[i] > 0.0 {
                            dx.data[i] += g.data[i];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[x.0].value;
                self.accumulate(adj, *x, |dx| {
                    for i in 0..g.data.len() {
                        dx.data[i] += g.data[i] * sigmoid(xv.data[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(adj, *x, |dx| {
                    for i in 0..g.data.len() {
                        let s = out.data[i];
                        dx.data[i] += g.data[i] * s * (1.0 - s);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(adj, *x, |dx| {
                    dx.data
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(a, b)| *a += s * b)
                });
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, |d| {
                    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                self.accumulate(adj, *b, |d| {
                    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, |d| {
                    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                self.accumulate(adj, *b, |d| {
                    d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(adj, *a, |d| {
                    for i in 0..g.data.len() {
                        d.data[i] += g.data[i] * bv.data[i];
                    }
                });
                self.accumulate(adj, *b, |d| {
                    for i in 0..g.data.len() {
                        d.data[i] += g.data[i] * av.data[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols;
                    self.accumulate(adj, *p, |d| {
                        for r in 0..g.rows {
                            let src = &g.row(r)[offset..offset + cols];
                            d.row_mut(r).iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += cols;
                }
            }
            Op::Slice { x, start } => {
                self.accumulate(adj, *x, |d| {
                    for r in 0..g.rows {
                        let dst = &mut d.row_mut(r)[*start..*start + g.cols];
                        dst.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::RepeatRows { x, groups } => {
                self.accumulate(adj, *x, |d| {
                    for gi in 0..groups.len() - 1 {
                        for r in groups[gi]..groups[gi + 1] {
                            d.row_mut(gi)
                                .iter_mut()
                                .zip(g.row(r))
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::GroupSoftmax { x, groups } => {
                self.accumulate(adj, *x, |d| {
                    for gi in 0..groups.len() - 1 {
                        let (lo, hi) = (groups[gi], groups[gi + 1]);
                        for c in 0..out.cols {
                            let dot: f64 = (lo..hi).map(|r| g.get(r, c) * out.get(r, c)).sum();
                            for r in lo..hi {
                                d.data[r * out.cols + c] += out.get(r, c) * (g.get(r, c) - dot);
                            }
                        }
                    }
                });
            }
            Op::GroupNormalize { x, groups } => {
                let xv = &self.nodes[x.0].value;
                self.accumulate(adj, *x, |d| {
                    for gi in 0..groups.len() - 1 {
                        let (lo, hi) = (groups[gi], groups[gi + 1]);
                        let sum: f64 = xv.data[lo..hi].iter().sum();
                        let dot: f64 = (lo..hi).map(|r| g.data[r] * out.data[r]).sum();
                        for r in lo..hi {
                            d.data[r] += (g.data[r] - dot) / sum;
                        }
                    }
                });
            }
            Op::GroupWeightedSum {
                values,
                weights,
                groups,
            } => {
                let (vv, wv) = (&self.nodes[values.0].value, &self.nodes[weights.0].value);
                let span = vv.cols / wv.cols;
                self.accumulate(adj, *values, |d| {
                    for gi in 0..groups.len() - 1 {
                        let grow = g.row(gi);
                        for r in groups[gi]..groups[gi + 1] {
                            let wrow = wv.row(r);
                            let drow = &mut d.data[r * vv.cols..(r + 1) * vv.cols];
                            for (c, a) in drow.iter_mut().enumerate() {
                                *a += wrow[c / span] * grow[c];
                            }
                        }
                    }
                });
                self.accumulate(adj, *weights, |d| {
                    for gi in 0..groups.len() - 1 {
                        let grow = g.row(gi);
                        for r in groups[gi]..groups[gi + 1] {
                            let vrow = vv.row(r);
                            for (c, (gv, v)) in grow.iter().zip(vrow).enumerate() {
                                d.data[r * wv.cols + c / span] += gv * v;
                            }
                        }
                    }
                });
            }
            Op::MulChannels { x, rgb } => {
                let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[rgb.0].value);
                self.accumulate(adj, *x, |d| {
                    for r in 0..xv.rows {
                        let c = [cv.get(r, 0), cv.get(r, 1), cv.get(r, 2)];
                        let grow = g.row(r);
                        for (i, a) in d.row_mut(r).iter_mut().enumerate() {
                            *a += grow[i] * c[i % 3];
                        }
                    }
                });
                self.accumulate(adj, *rgb, |d| {
                    for r in 0..xv.rows {
                        let (grow, xrow) = (g.row(r), xv.row(r));
                        for i in 0..xv.cols {
                            d.data[r * 3 + i % 3] += grow[i] * xrow[i];
                        }
                    }
                });
            }
            Op::Relight { x, env } => {
                self.accumulate(adj, *x, |d| {
                    for r in 0..g.rows {
                        let gr = [g.get(r, 0), g.get(r, 1), g.get(r, 2)];
                        for (i, a) in d.row_mut(r).iter_mut().enumerate() {
                            *a += gr[i % 3] * env[i];
                        }
                    }
                });
            }
            Op::Composite {
                sigma,
                color,
                layout,
            } => {
                let (sv, cv) = (&self.nodes[sigma.0].value, &self.nodes[color.0].value);
                let mut ds_all = vec![0.0; sv.rows];
                let mut dc_all = vec![[0.0; 3]; sv.rows];
                for r in 0..layout.rays.len() - 1 {
                    let (lo, hi) = (layout.rays[r], layout.rays[r + 1]);
                    if lo == hi {
                        continue;
                    }
                    let colors: Vec<[f64; 3]> = (lo..hi)
                        .map(|i| [cv.get(i, 0), cv.get(i, 1), cv.get(i, 2)])
                        .collect();
                    let gr = g.row(r);
                    let (ds, dc) = composite_backward(
                        &sv.data[lo..hi],
                        &colors,
                        &layout.u[lo..hi],
                        &layout.delta[lo..hi],
                        [gr[0], gr[1], gr[2]],
                        gr[3],
                        gr[4],
                    );
                    ds_all[lo..hi].copy_from_slice(&ds);
                    dc_all[lo..hi].copy_from_slice(&dc);
                }
                self.accumulate(adj, *sigma, |d| {
                    d.data.iter_mut().zip(&ds_all).for_each(|(a, b)| *a += b)
                });
                self.accumulate(adj, *color, |d| {
                    for (i, c) in dc_all.iter().enumerate() {
                        for ch in 0..3 {
                            d.data[i * 3 + ch] += c[ch];
                        }
                    }
                });
            }
            Op::L1 {
                x,
                target,
                weights,
                scale,
            } => {
                let xv = &self.nodes[x.0].value;
                let up = g.data[0] * scale;
                self.accumulate(adj, *x, |d| {
                    for i in 0..xv.data.len() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        let diff = xv.data[i] - target[i];
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d.data[i] += up * w * s;
                    }
                });
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.accumulate(adj, *p, |d| d.data[0] += g.data[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nelf::params::Layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Builds a graph touching every op and returns a scalar root.
    fn graph(tape: &mut Tape<'_>, x: &Matrix, rgb: &Matrix) -> Var {
        let l1 = Layer {
            weight: 0,
            bias: 12,
            inputs: 4,
            outputs: 3,
        };
        let l2 = Layer {
            weight: 15,
            bias: 24,
            inputs: 3,
            outputs: 3,
        };
        let groups: Rc<[usize]> = Rc::from(vec![0, 2, 5]);
        let xi = tape.input(x.clone());
        let ci = tape.input(rgb.clone());
        let h = tape.affine(xi, l1);
        let h = tape.softplus(h);
        let h2 = tape.affine(h, l2);
        let r = tape.relu(h2);
        let s = tape.sigmoid(h2);
        let prod = tape.mul(r, s);
        let sum = tape.add(prod, h);
        let diff = tape.sub(sum, s);
        let sc = tape.scale(diff, 0.7);
        let cat = tape.concat(&[sc, h]);
        let sl = tape.slice(cat, 1, 3);
        let w = tape.slice(s, 0, 1);
        let wn = tape.group_normalize(w, &groups);
        let mean = tape.group_weighted_sum(sl, wn, &groups);
        let back = tape.repeat_rows(mean, &groups);
        let centered = tape.sub(sl, back);
        let sm = tape.group_softmax(centered, &groups);
        let per_col = tape.group_weighted_sum(sc, sm, &groups);
        let logits = tape.slice(h2, 1, 1);
        let sm1 = tape.group_softmax(logits, &groups);
        let blended = tape.group_weighted_sum(h, sm1, &groups);
        let ch = tape.mul_channels(sl, ci);
        let env: Rc<[f64]> = Rc::from(vec![0.3, 0.9, 0.5]);
        let lit = tape.relight(ch, &env);
        let sigma = tape.slice(lit, 0, 1);
        let sigma = tape.softplus(sigma);
        let color = tape.slice(ch, 0, 3);
        let layout = Rc::new(RayLayout {
            rays: vec![0, 3, 5],
            u: vec![0.1, 0.4, 0.7, 0.2, 0.5],
            delta: vec![0.3; 5],
        });
        let comp = tape.composite(sigma, color, &layout);
        let a = tape.l1(per_col, Rc::from(vec![0.05; 6]), None, 0.5);
        let b = tape.l1(
            blended,
            Rc::from(vec![-0.1; 6]),
            Some(Rc::from(vec![1.0, 0.0, 2.0, 1.0, 1.0, 0.5])),
            1.0,
        );
        let c = tape.l1(comp, Rc::from(vec![0.02; 10]), None, 1.0);
        tape.sum_scalars(&[a, b, c])
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let params: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = random(5, 4, &mut rng);
            let rgb = Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(0.1..1.0)).collect());
            let mut tape = Tape::new(&params);
            let root = graph(&mut tape, &x, &rgb);
            let mut grads = vec![0.0; params.len()];
            tape.backward(root, &mut grads);
            let h = 1e-6;
            let eval = |p: &[f64]| {
                let mut t = Tape::new(p);
                let r = graph(&mut t, &x, &rgb);
                t.value(r).data[0]
            };
            let mut num = 0.0;
            let mut den: f64 = 0.0;
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                let up = eval(&p);
                p[i] -= 2.0 * h;
                let down = eval(&p);
                let fd = (up - down) / (2.0 * h);
                num += (fd - grads[i]).powi(2);
                den = den.max(fd.abs()).max(grads[i].abs());
            }
            assert!(
                num.sqrt() / den <= 1e-5,
                "relative error {}",
                num.sqrt() / den
            );
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        for x in [-800.0, -50.0, -1.0, 0.0, 1.0, 50.0, 800.0] {
            let s = softplus(x);
            assert!(s.is_finite() && s >= 0.0);
        }
        assert!(softplus(-30.0) > 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn backward_skips_unreachable_nodes() {
        let params = vec![0.5, -0.25, 0.1];
        let layer = Layer {
            weight: 0,
            bias: 2,
            inputs: 2,
            outputs: 1,
        };
        let mut tape = Tape::new(&params);
        let x = tape.input(Matrix::from_vec(1, 2, vec![2.0, 4.0]));
        let y = tape.affine(x, layer);
        let _unused = tape.relu(y);
        let mut grads = vec![0.0; 3];
        tape.backward(y, &mut grads);
        assert_eq!(grads, vec![2.0, 4.0, 1.0]);
        assert_eq!(tape.value(y).data, vec![0.5 * 2.0 - 0.25 * 4.0 + 0.1]);
    }
}
