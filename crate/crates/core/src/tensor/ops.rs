use rand::Rng;

use super::tape::{arc_margin_value, zip_map, Mode, Op, Tape, Var};
use super::{matmul_bt_into, matmul_into, Result, Tensor, TensorError};

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push("scale", Op::Scale(a, k), v, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push("add_scalar", Op::AddScalar(a), v, &[a])
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = xv.dims2();
        if bv.len() != c {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv.data()[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_row", Op::AddRow(x, b), v, &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = av.dims2();
        let (k2, c) = bv.dims2();
        if k != k2 || bv.shape().len() != 2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(av.data(), bv.data(), &mut out, r, k, c);
        let v = Tensor::matrix(r, c, out)?;
        self.push("matmul", Op::MatMul(a, b), v, &[a, b])
    }

    /// `a · bᵀ`, with `b` given row-major as `c×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = av.dims2();
        let (c, k2) = bv.dims2();
        if k != k2 {
            return Err(mismatch("matmul_bt", av, bv));
        }
        let mut out = vec![0.0; r * c];
        matmul_bt_into(av.data(), bv.data(), &mut out, r, k, c);
        let v = Tensor::matrix(r, c, out)?;
        self.push("matmul_bt", Op::MatMulBt(a, b), v, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), v, &[a])
    }

    /// Joins matrices side by side; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), v, parts)
    }

    /// Stacks matrices vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols;
        let v = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), v, parts)
    }

    /// Rectangular block `[row, row+nrows) × [col, col+ncols)`.
    pub fn slice(&mut self, x: Var, row: usize, nrows: usize, col: usize, ncols: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if row + nrows > r || col + ncols > c || nrows == 0 || ncols == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "slice rows {row}+{nrows} cols {col}+{ncols} of {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in row..row + nrows {
            data.extend_from_slice(&xv.row(i)[col..col + ncols]);
        }
        let v = Tensor::matrix(nrows, ncols, data)?;
        self.push("slice", Op::Slice { x, row, col }, v, &[x])
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let v = Tensor::matrix(ids.len(), d, data)?;
        self.push(
            "embedding",
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            v,
            &[table],
        )
    }

    /// Sliding-window filter over each length-`seg_len` block of rows of `x`.
    ///
    /// `filter` is `(width·d) × f`. Each window of `width` consecutive rows is
    /// flattened (the unfold) and multiplied by the filter, giving
    /// `seg_len - width + 1` output rows per block.
    pub fn sliding_window(&mut self, x: Var, filter: Var, seg_len: usize, width: usize) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(filter));
        let (rows, d) = xv.dims2();
        let (k, f) = fv.dims2();
        if width == 0 || seg_len < width || rows % seg_len != 0 || k != width * d {
            return Err(mismatch("sliding_window", xv, fv));
        }
        let segments = rows / seg_len;
        let per = seg_len - width + 1;
        let mut out = vec![0.0; segments * per * f];
        for s in 0..segments {
            for t in 0..per {
                let base = (s * seg_len + t) * d;
                let o = (s * per + t) * f;
                matmul_into(&xv.data()[base..base + k], fv.data(), &mut out[o..o + f], 1, k, f);
            }
        }
        let v = Tensor::matrix(segments * per, f, out)?;
        self.push(
            "sliding_window",
            Op::SlidingWindow {
                x,
                filter,
                seg_len,
                width,
            },
            v,
            &[x, filter],
        )
    }

    /// Column-wise max over each block of `seg_len` rows. Ties go to the
    /// lowest row.
    pub fn segment_max(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv.dims2();
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "segment_max: {rows} rows not divisible by {seg_len}"
            )));
        }
        let segments = rows / seg_len;
        let mut out = vec![0.0; segments * c];
        let mut argmax = vec![0; segments * c];
        for s in 0..segments {
            for j in 0..c {
                let mut best = s * seg_len;
                for i in s * seg_len + 1..(s + 1) * seg_len {
                    if xv.data()[i * c + j] > xv.data()[best * c + j] {
                        best = i;
                    }
                }
                out[s * c + j] = xv.data()[best * c + j];
                argmax[s * c + j] = best;
            }
        }
        let v = Tensor::matrix(segments, c, out)?;
        self.push("segment_max", Op::SegmentMax { x, argmax }, v, &[x])
    }

    /// Row mean over each block of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv.dims2();
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "segment_mean: {rows} rows not divisible by {seg_len}"
            )));
        }
        let segments = rows / seg_len;
        let mut out = vec![0.0; segments * c];
        for i in 0..rows {
            let s = i / seg_len;
            for j in 0..c {
                out[s * c + j] += xv.data()[i * c + j];
            }
        }
        let inv = 1.0 / seg_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let v = Tensor::matrix(segments, c, out)?;
        self.push("segment_mean", Op::SegmentMean { x, seg_len }, v, &[x])
    }

    /// Weighted mean of rows, `Σ mᵢ xᵢ / Σ mᵢ`, as a vector.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let total: f64 = mask.iter().sum();
        if mask.len() != r || total <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "masked_mean: mask of length {} (sum {total}) for {r} rows",
                mask.len()
            )));
        }
        let mut out = vec![0.0; c];
        for (i, &m) in mask.iter().enumerate() {
            for j in 0..c {
                out[j] += m * xv.data()[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        let v = Tensor::vector(out);
        self.push(
            "masked_mean",
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            v,
            &[x],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", Op::Relu(a), v, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", Op::Tanh(a), v, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), v, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push("log", Op::Log(a), v, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax", Op::SoftmaxRows(a), v, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push("log_softmax", Op::LogSoftmaxRows(a), v, &[a])
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::ZeroNorm { op: "l2_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("l2_normalize", Op::L2NormalizeRows { x, norms }, v, &[x])
    }

    /// Row-by-row cosine similarity matrix `|a| × |b|`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize_rows(a)?;
        let bn = if a == b { an } else { self.l2_normalize_rows(b)? };
        self.matmul_bt(an, bn)
    }

    /// Inverted dropout; identity in [`Mode::Eval`] or at rate 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", Op::Dropout { x, mask }, v, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let v = Tensor::scalar(av.data().iter().sum::<f64>() / av.len() as f64);
        self.push("mean", Op::Mean(a), v, &[a])
    }

    /// Sum of each row, as a vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let v = Tensor::vector(av.data().chunks(c).map(|r| r.iter().sum()).collect());
        self.push("row_sum", Op::RowSum(a), v, &[a])
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if cols.len() != r {
            return Err(TensorError::InvalidArgument(format!(
                "pick_per_row: {} indices for {r} rows",
                cols.len()
            )));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: j,
                    bound: c,
                });
            }
            out.push(xv.data()[i * c + j]);
        }
        let v = Tensor::vector(out);
        self.push(
            "pick_per_row",
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            v,
            &[x],
        )
    }

    /// `log Σ exp(xₖ)` over the entries where `mask` is set.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() || !mask.iter().any(|&m| m) {
            return Err(TensorError::InvalidArgument(
                "masked_logsumexp needs at least one selected entry".into(),
            ));
        }
        let max = xv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v - max).exp())
            .sum();
        let v = Tensor::scalar(max + sum.ln());
        self.push(
            "masked_logsumexp",
            Op::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
            },
            v,
            &[x],
        )
    }

    /// Replaces `x[i, targets[i]] = cos θ` by `cos(θ + m)`, with θ clamped so
    /// that `θ + m ≤ π`.
    pub fn arc_margin(&mut self, x: Var, targets: &[usize], margin: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(TensorError::InvalidArgument("arc_margin targets".into()));
        }
        let mut data = xv.data().to_vec();
        for (i, &t) in targets.iter().enumerate() {
            data[i * c + t] = arc_margin_value(data[i * c + t], margin);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "arc_margin",
            Op::ArcMargin {
                x,
                targets: targets.to_vec(),
                margin,
            },
            v,
            &[x],
        )
    }
}
