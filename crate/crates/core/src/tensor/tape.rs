use super::{matmul_at_into, matmul_bt_into, matmul_into, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Train/eval switch for stochastic operations (dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Recorded operations whose local gradient rule was applied.
    pub ops_visited: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice { x: Var, row: usize, col: usize },
    Embedding { table: Var, ids: Vec<usize> },
    SlidingWindow { x: Var, filter: Var, seg_len: usize, width: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, seg_len: usize },
    MaskedMean { x: Var, mask: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    PickPerRow { x: Var, cols: Vec<usize> },
    MaskedLogSumExp { x: Var, mask: Vec<bool> },
    ArcMargin { x: Var, targets: Vec<usize>, margin: f64 },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Records a forward computation so it can be differentiated.
///
/// A tape is single-use: build the graph, call [`Tape::backward`] once on a
/// scalar, read gradients with [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    op_count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of recorded (non-leaf) operations.
    pub fn op_count(&self) -> usize {
        self.op_count
    }

    pub(crate) fn push(&mut self, op_name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.op_count += 1;
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Gradients add across fan-out.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if self.op_count == 0 {
            return Err(TensorError::EmptyTape);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.apply_rule(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(BackwardStats {
            ops_visited: visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn apply_rule(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let (r, c) = g.dims2();
                self.accumulate_with(grads, *b, |gb| {
                    let d = gb.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (r, k) = av.dims2();
                let c = bv.cols();
                self.accumulate_with(grads, *a, |ga| {
                    matmul_bt_into(g.data(), bv.data(), ga.data_mut(), r, c, k)
                });
                self.accumulate_with(grads, *b, |gb| {
                    matmul_at_into(av.data(), g.data(), gb.data_mut(), r, k, c)
                });
            }
            Op::MatMulBt(a, b) => {
                // out = a·bᵀ, a: r×k, b: c×k
                let (av, bv) = (self.val(*a), self.val(*b));
                let (r, k) = av.dims2();
                let c = bv.rows();
                self.accumulate_with(grads, *a, |ga| {
                    matmul_into(g.data(), bv.data(), ga.data_mut(), r, c, k)
                });
                self.accumulate_with(grads, *b, |gb| {
                    matmul_at_into(g.data(), av.data(), gb.data_mut(), r, c, k)
                });
            }
            Op::Transpose(a) => {
                let shape = self.val(*a).shape().to_vec();
                let gt = g.transpose().reshape(shape).expect("transpose shape");
                self.accumulate(grads, *a, gt);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.val(*p).cols();
                    self.accumulate_with(grads, *p, |gp| {
                        let d = gp.data_mut();
                        for i in 0..rows {
                            for j in 0..pc {
                                d[i * pc + j] += g.data()[i * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    let slice = &g.data()[offset..offset + n];
                    self.accumulate_with(grads, *p, |gp| {
                        for (d, s) in gp.data_mut().iter_mut().zip(slice) {
                            *d += s;
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, row, col } => {
                let (row, col) = (*row, *col);
                let (r, c) = out.dims2();
                let xc = self.val(*x).cols();
                self.accumulate_with(grads, *x, |gx| {
                    let d = gx.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            d[(row + i) * xc + col + j] += g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.val(*table).cols();
                self.accumulate_with(grads, *table, |gt| {
                    let td = gt.data_mut();
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            td[id * d + j] += g.data()[i * d + j];
                        }
                    }
                });
            }
            Op::SlidingWindow {
                x,
                filter,
                seg_len,
                width,
            } => {
                let (xv, fv) = (self.val(*x), self.val(*filter));
                let d = xv.cols();
                let f = fv.cols();
                let k = width * d;
                let segments = xv.rows() / seg_len;
                let per = seg_len - width + 1;
                self.accumulate_with(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for s in 0..segments {
                        for t in 0..per {
                            let out_row = s * per + t;
                            let base = (s * seg_len + t) * d;
                            let go = &g.data()[out_row * f..(out_row + 1) * f];
                            matmul_bt_into(go, fv.data(), &mut gxd[base..base + k], 1, f, k);
                        }
                    }
                });
                self.accumulate_with(grads, *filter, |gf| {
                    let gfd = gf.data_mut();
                    for s in 0..segments {
                        for t in 0..per {
                            let out_row = s * per + t;
                            let base = (s * seg_len + t) * d;
                            let window = &xv.data()[base..base + k];
                            let go = &g.data()[out_row * f..(out_row + 1) * f];
                            matmul_at_into(window, go, gfd, 1, k, f);
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax, .. } => {
                let c = out.cols();
                self.accumulate_with(grads, *x, |gx| {
                    let d = gx.data_mut();
                    for (o, &src_row) in argmax.iter().enumerate() {
                        let j = o % c;
                        d[src_row * c + j] += g.data()[o];
                    }
                });
            }
            Op::SegmentMean { x, seg_len } => {
                let seg_len = *seg_len;
                let c = out.cols();
                let inv = 1.0 / seg_len as f64;
                self.accumulate_with(grads, *x, |gx| {
                    let d = gx.data_mut();
                    let rows = d.len() / c;
                    for i in 0..rows {
                        let s = i / seg_len;
                        for j in 0..c {
                            d[i * c + j] += g.data()[s * c + j] * inv;
                        }
                    }
                });
            }
            Op::MaskedMean { x, mask } => {
                let c = out.len();
                let total: f64 = mask.iter().sum();
                self.accumulate_with(grads, *x, |gx| {
                    let d = gx.data_mut();
                    for (i, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            d[i * c + j] += g.data()[j] * m / total;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, zip_map(g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y));
            }
            Op::Log(a) => {
                let av = self.val(*a);
                self.accumulate(grads, *a, zip_map(g, av, |gv, x| gv / x));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, gx).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = gy[j] - y[j].exp() * s;
                    }
                }
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, gx).unwrap());
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = out.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (gy[j] - y[j] * dot) / norms[i];
                    }
                }
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, gx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::filled(self.val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *a, Tensor::filled(self.val(*a).shape(), gv));
            }
            Op::RowSum(a) => {
                let c = self.val(*a).cols();
                self.accumulate_with(grads, *a, |ga| {
                    for (i, chunk) in ga.data_mut().chunks_mut(c).enumerate() {
                        for v in chunk {
                            *v += g.data()[i];
                        }
                    }
                });
            }
            Op::PickPerRow { x, cols } => {
                let c = self.val(*x).cols();
                self.accumulate_with(grads, *x, |gx| {
                    let d = gx.data_mut();
                    for (i, &j) in cols.iter().enumerate() {
                        d[i * c + j] += g.data()[i];
                    }
                });
            }
            Op::MaskedLogSumExp { x, mask } => {
                let xv = self.val(*x);
                let lse = out.item();
                let gv = g.item();
                let gx = xv
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { gv * (v - lse).exp() } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::ArcMargin { x, targets, margin } => {
                let xv = self.val(*x);
                let c = xv.cols();
                let m = *margin;
                let mut gx = g.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let k = i * c + t;
                    gx.data_mut()[k] *= arc_margin_derivative(xv.data()[k], m);
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `cos(min(acos x, π − m) + m)`.
pub(crate) fn arc_margin_value(x: f64, m: f64) -> f64 {
    if m == 0.0 {
        return x;
    }
    let theta = x.clamp(-1.0, 1.0).acos();
    if theta + m >= std::f64::consts::PI {
        -1.0
    } else {
        (theta + m).cos()
    }
}

fn arc_margin_derivative(x: f64, m: f64) -> f64 {
    if m == 0.0 {
        return 1.0;
    }
    let theta = x.clamp(-1.0, 1.0).acos();
    if theta + m >= std::f64::consts::PI {
        return 0.0;
    }
    // d/dx cos(acos x + m) = sin(θ + m) / sin θ
    (theta + m).sin() / theta.sin().max(1e-6)
}
