//! Dense `f32` arrays with reverse-mode automatic differentiation.
//!
//! Tensors are 1-D or 2-D, row-major, single-precision. Every forward
//! operation records enough of the graph to run a reverse pass when any
//! input has `requires_grad` set; tensors with `requires_grad=false` never
//! accumulate gradient. Parameters are mutated only through
//! [`Tensor::apply_update`], everything else is immutable after construction.

mod grad_check;

pub use grad_check::grad_check;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = Guard(prev);
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Scale(Tensor, f32),
    Transpose(Tensor),
    SliceCols(Tensor, usize, usize),
    ConcatCols(Vec<Tensor>),
    GatherRows(Tensor, Vec<usize>),
    /// Rows of each part scattered to `placement[part][row]` in the output.
    InterleaveRows(Vec<Tensor>, Vec<Vec<usize>>),
    MulElem(Tensor, Tensor),
    Silu(Tensor),
    SumAll(Tensor),
    LayerNormRows(Tensor, Tensor, Tensor, f32),
    SoftmaxRows(Tensor, f32, bool),
    CrossEntropyRows(Tensor, Vec<u32>, Vec<bool>),
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    op: Op,
}

/// A dense single-precision array participating in the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], data_len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Dimension(format!(
            "tensors are 1-D or 2-D, got {shape:?}"
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} needs {numel} elements, got {data_len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f32>, op: Op) -> Tensor {
        let requires = grad_enabled()
            && match &op {
                Op::Leaf => false,
                _ => op_parents(&op).iter().any(|p| p.requires_grad()),
            };
        let op = if requires { op } else { Op::Leaf };
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: requires,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Construct a constant (non-trainable) tensor.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: false,
            grad: RefCell::new(None),
            op: Op::Leaf,
        })))
    }

    /// Construct a trainable leaf parameter.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: true,
            grad: RefCell::new(None),
            op: Op::Leaf,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(&[1], vec![v]).expect("scalar shape is valid")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    /// Row count (1 for 1-D tensors).
    pub fn rows(&self) -> usize {
        if self.0.shape.len() == 2 {
            self.0.shape[0]
        } else {
            1
        }
    }

    /// Column count (the length for 1-D tensors).
    pub fn cols(&self) -> usize {
        *self.0.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// The single element of a length-1 tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the data buffer in place. This is the optimizer-update path;
    /// calling it on a tensor that is part of a live graph invalidates that
    /// graph's saved forward values.
    pub fn apply_update(&self, data: &[f32]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::Dimension(format!(
                "update length {} does not match tensor length {}",
                data.len(),
                self.len()
            )));
        }
        self.0.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    fn accumulate_grad(&self, g: &[f32]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss, seeding with `d(loss)/d(loss) = 1`.
    pub fn backward(&self) -> Result<()> {
        self.backward_scaled(1.0)
    }

    /// Reverse pass with a custom seed, used to average losses across a batch.
    pub fn backward_scaled(&self, seed: f32) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        self.accumulate_grad(&[seed]);
        let order = topo_order(self);
        for t in order.iter().rev() {
            let grad_out = match t.0.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            backward_node(t, &grad_out);
            // Interior node grads are only needed transiently.
            if !matches!(t.0.op, Op::Leaf) {
                t.zero_grad();
            }
        }
        Ok(())
    }
}

fn op_parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b) | Op::Add(a, b) | Op::MulElem(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(x, _)
        | Op::Transpose(x)
        | Op::SliceCols(x, _, _)
        | Op::GatherRows(x, _)
        | Op::Silu(x)
        | Op::SumAll(x)
        | Op::SoftmaxRows(x, _, _)
        | Op::CrossEntropyRows(x, _, _) => vec![x.clone()],
        Op::ConcatCols(parts) | Op::InterleaveRows(parts, _) => parts.clone(),
        Op::LayerNormRows(x, g, b, _) => vec![x.clone(), g.clone(), b.clone()],
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in op_parents(&t.0.op) {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Forward kernels and their reverse rules.
// ---------------------------------------------------------------------------

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row with temperature and an optional
/// visibility limit (`visible` = number of leading entries that participate).
fn softmax_row_into(xs: &[f32], temperature: f32, visible: usize, out: &mut [f32]) {
    let vis = &xs[..visible];
    let max = vis.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for (o, &x) in out[..visible].iter_mut().zip(vis) {
        let e = (((x - max) / temperature) as f64).exp();
        *o = e as f32;
        denom += e;
    }
    let inv = (1.0 / denom) as f32;
    for o in out[..visible].iter_mut() {
        *o *= inv;
    }
    for o in out[visible..].iter_mut() {
        *o = 0.0;
    }
}

/// Log-sum-exp of a row, then the negative log-likelihood of `target`.
fn nll_row(logits: &[f32], target: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for &x in logits {
        sum += ((x - max) as f64).exp();
    }
    let lse = max as f64 + sum.ln();
    (lse - logits[target] as f64) as f32
}

impl Tensor {
    /// Matrix product of an `m×k` and a `k×n` tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul requires matrices, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = matmul_kernel(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose requires a matrix, got {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            Op::Transpose(self.clone()),
        ))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > n || len == 0 {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of 0..{n}",
                start + len
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(Tensor::from_op(
            vec![m, len],
            data,
            Op::SliceCols(self.clone(), start, len),
        ))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::MulElem(self.clone(), other.clone()),
        ))
    }

    /// Smooth self-gated nonlinearity `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Silu(self.clone()))
    }

    /// Sum of all elements as a length-1 tensor.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(vec![1], vec![total as f32], Op::SumAll(self.clone()))
    }
}

/// Concatenate matrices with equal row counts along the column axis.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat of zero parts".into()));
    }
    let m = parts[0].rows();
    for p in parts {
        if p.rows() != m {
            return Err(Error::Dimension(format!(
                "concat row counts differ: {} vs {}",
                m,
                p.rows()
            )));
        }
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * n);
    let borrowed: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for i in 0..m {
        for (p, d) in parts.iter().zip(&borrowed) {
            let c = p.cols();
            data.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
    }
    drop(borrowed);
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        Op::ConcatCols(parts.to_vec()),
    ))
}

/// Select rows of `x` by index; duplicate indices are allowed (the reverse
/// pass scatter-adds into the source rows).
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    if idx.is_empty() {
        return Err(Error::Dimension("gather of zero rows".into()));
    }
    for &i in idx {
        if i >= m {
            return Err(Error::Index(format!("row {i} out of 0..{m}")));
        }
    }
    let src = x.data();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(&src[i * n..(i + 1) * n]);
    }
    drop(src);
    Ok(Tensor::from_op(
        vec![idx.len(), n],
        data,
        Op::GatherRows(x.clone(), idx.to_vec()),
    ))
}

/// Scatter rows of several parts into one matrix: row `r` of part `p` lands
/// at output row `placement[p][r]`. The placements must tile the output rows
/// exactly once.
pub fn interleave_rows(parts: &[Tensor], placement: &[Vec<usize>]) -> Result<Tensor> {
    if parts.is_empty() || parts.len() != placement.len() {
        return Err(Error::Dimension(
            "interleave needs one placement per part".into(),
        ));
    }
    let n = parts[0].cols();
    let total: usize = placement.iter().map(|p| p.len()).sum();
    let mut seen = vec![false; total];
    for (p, place) in parts.iter().zip(placement) {
        if p.cols() != n || p.rows() != place.len() {
            return Err(Error::Dimension(format!(
                "interleave part shape {:?} does not match placement of {} rows",
                p.shape(),
                place.len()
            )));
        }
        for &dst in place {
            if dst >= total || seen[dst] {
                return Err(Error::Index(format!(
                    "placement row {dst} out of range or duplicated"
                )));
            }
            seen[dst] = true;
        }
    }
    let mut data = vec![0.0f32; total * n];
    for (p, place) in parts.iter().zip(placement) {
        let src = p.data();
        for (r, &dst) in place.iter().enumerate() {
            data[dst * n..(dst + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
    }
    Ok(Tensor::from_op(
        vec![total, n],
        data,
        Op::InterleaveRows(parts.to_vec(), placement.to_vec()),
    ))
}

/// Layer normalization over the last axis of each row:
/// `gamma ⊙ (x − mean)/sqrt(var + eps) + beta`.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm scale/shift length {} and {} vs width {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let m = x.rows();
    let src = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mut data = vec![0.0f32; m * d];
    for i in 0..m {
        let row = &src[i * d..(i + 1) * d];
        let (mean, var) = row_mean_var(row);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            data[i * d + j] = g[j] * ((row[j] - mean) * inv) + b[j];
        }
    }
    drop((src, g, b));
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        Op::LayerNormRows(x.clone(), gamma.clone(), beta.clone(), eps),
    ))
}

fn row_mean_var(row: &[f32]) -> (f32, f32) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    (mean as f32, var as f32)
}

/// Row-wise softmax with temperature. With `causal=true` the tensor must be
/// square and row `i` only sees columns `0..=i`; hidden columns are zero.
pub fn softmax_rows(x: &Tensor, temperature: f32, causal: bool) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (m, n) = (x.rows(), x.cols());
    if causal && m != n {
        return Err(Error::Dimension(format!(
            "causal softmax requires a square matrix, got {:?}",
            x.shape()
        )));
    }
    let src = x.data();
    if src.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to softmax".into()));
    }
    let mut data = vec![0.0f32; m * n];
    for i in 0..m {
        let visible = if causal { i + 1 } else { n };
        softmax_row_into(
            &src[i * n..(i + 1) * n],
            temperature,
            visible,
            &mut data[i * n..(i + 1) * n],
        );
    }
    drop(src);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        Op::SoftmaxRows(x.clone(), temperature, causal),
    ))
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, restricted to rows with `mask` set. Per-row values are summed in
/// double precision.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    let (m, v) = (logits.rows(), logits.cols());
    if targets.len() != m || mask.len() != m {
        return Err(Error::Dimension(format!(
            "{} targets / {} mask entries for {m} rows",
            targets.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyLoss("no unmasked rows".into()));
    }
    for (i, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
        if keep && t as usize >= v {
            return Err(Error::Index(format!(
                "target {t} out of vocabulary 0..{v} at row {i}"
            )));
        }
    }
    let src = logits.data();
    if src.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits in cross entropy".into()));
    }
    let mut total = 0.0f64;
    for i in 0..m {
        if mask[i] {
            total += nll_row(&src[i * v..(i + 1) * v], targets[i] as usize) as f64;
        }
    }
    drop(src);
    Ok(Tensor::from_op(
        vec![1],
        vec![total as f32],
        Op::CrossEntropyRows(logits.clone(), targets.to_vec(), mask.to_vec()),
    ))
}

/// Negative log-likelihood of one target id under the softmax of a single
/// logit row.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<Tensor> {
    if logits.rows() != 1 {
        return Err(Error::Dimension(format!(
            "cross_entropy expects a single row, got {:?}",
            logits.shape()
        )));
    }
    if target >= logits.cols() {
        return Err(Error::Index(format!(
            "target {target} out of vocabulary 0..{}",
            logits.cols()
        )));
    }
    cross_entropy_rows(logits, &[target as u32], &[true])
}

/// Per-target negative log-likelihoods for next-token prediction: the logit
/// row at position `t` scores target `ids[t+1]`, so the result has one entry
/// per target, `len(ids) − 1`. Shares the kernel with [`cross_entropy_rows`]
/// but records no gradients.
pub fn nll_shifted(logits: &Tensor, ids: &[u32]) -> Result<Vec<f32>> {
    let (m, v) = (logits.rows(), logits.cols());
    if ids.len() != m {
        return Err(Error::Dimension(format!(
            "{} ids vs {m} logit rows",
            ids.len()
        )));
    }
    if m < 2 {
        return Err(Error::Dimension("need at least 2 positions".into()));
    }
    let src = logits.data();
    let mut out = Vec::with_capacity(m - 1);
    for t in 0..m - 1 {
        let target = ids[t + 1] as usize;
        if target >= v {
            return Err(Error::Index(format!("target {target} out of 0..{v}")));
        }
        out.push(nll_row(&src[t * v..(t + 1) * v], target));
    }
    Ok(out)
}

/// Stable softmax of a plain slice with temperature (no autodiff).
pub fn softmax(xs: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if xs.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to softmax".into()));
    }
    let mut out = vec![0.0f32; xs.len()];
    softmax_row_into(xs, temperature, xs.len(), &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reverse rules.
// ---------------------------------------------------------------------------

fn backward_node(t: &Tensor, g: &[f32]) {
    match &t.0.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.requires_grad() {
                // dA = G · Bᵀ
                let bd = b.data();
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut s = 0.0f32;
                        for (gj, bj) in grow.iter().zip(brow) {
                            s += gj * bj;
                        }
                        da[i * k + p] = s;
                    }
                }
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = Aᵀ · G
                let ad = a.data();
                let mut db = vec![0.0f32; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (dj, gj) in drow.iter_mut().zip(grow) {
                            *dj += aip * gj;
                        }
                    }
                }
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::Add(a, b) => {
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        }
        Op::Scale(x, c) => {
            if x.requires_grad() {
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Transpose(x) => {
            if x.requires_grad() {
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::SliceCols(x, start, len) => {
            if x.requires_grad() {
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::ConcatCols(parts) => {
            let n: usize = parts.iter().map(|p| p.cols()).sum();
            let m = parts[0].rows();
            let mut offset = 0;
            for p in parts {
                let c = p.cols();
                if p.requires_grad() {
                    let mut dp = Vec::with_capacity(m * c);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * n + offset..i * n + offset + c]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += c;
            }
        }
        Op::GatherRows(x, idx) => {
            if x.requires_grad() {
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0f32; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::InterleaveRows(parts, placement) => {
            let n = parts[0].cols();
            for (p, place) in parts.iter().zip(placement) {
                if p.requires_grad() {
                    let mut dp = Vec::with_capacity(place.len() * n);
                    for &dst in place {
                        dp.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                    }
                    p.accumulate_grad(&dp);
                }
            }
        }
        Op::MulElem(a, b) => {
            if a.requires_grad() {
                let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(gv, bv)| gv * bv).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f32> = g.iter().zip(a.data().iter()).map(|(gv, av)| gv * av).collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Silu(x) => {
            if x.requires_grad() {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(x.data().iter())
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s * (1.0 + xv * (1.0 - s)))
                    })
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::SumAll(x) => {
            if x.requires_grad() {
                let dx = vec![g[0]; x.len()];
                x.accumulate_grad(&dx);
            }
        }
        Op::LayerNormRows(x, gamma, beta, eps) => {
            let (m, d) = (x.rows(), x.cols());
            let src = x.data();
            let gm = gamma.data();
            let mut dx = vec![0.0f32; m * d];
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            for i in 0..m {
                let row = &src[i * d..(i + 1) * d];
                let grow = &g[i * d..(i + 1) * d];
                let (mean, var) = row_mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                let mut mean_gg = 0.0f64;
                let mut mean_ggx = 0.0f64;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let gg = grow[j] * gm[j];
                    mean_gg += gg as f64;
                    mean_ggx += (gg * xhat) as f64;
                    dgamma[j] += grow[j] * xhat;
                    dbeta[j] += grow[j];
                }
                let mean_gg = (mean_gg / d as f64) as f32;
                let mean_ggx = (mean_ggx / d as f64) as f32;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let gg = grow[j] * gm[j];
                    dx[i * d + j] = inv * (gg - mean_gg - xhat * mean_ggx);
                }
            }
            drop((src, gm));
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(&dgamma);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(&dbeta);
            }
        }
        Op::SoftmaxRows(x, temperature, causal) => {
            if x.requires_grad() {
                let (m, n) = (x.rows(), x.cols());
                let src = x.data();
                let mut probs = vec![0.0f32; n];
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let visible = if *causal { i + 1 } else { n };
                    softmax_row_into(&src[i * n..(i + 1) * n], *temperature, visible, &mut probs);
                    let grow = &g[i * n..(i + 1) * n];
                    let mut dot = 0.0f64;
                    for j in 0..visible {
                        dot += (probs[j] * grow[j]) as f64;
                    }
                    let dot = dot as f32;
                    for j in 0..visible {
                        dx[i * n + j] = probs[j] * (grow[j] - dot) / temperature;
                    }
                }
                drop(src);
                x.accumulate_grad(&dx);
            }
        }
        Op::CrossEntropyRows(logits, targets, mask) => {
            if logits.requires_grad() {
                let (m, v) = (logits.rows(), logits.cols());
                let src = logits.data();
                let mut dx = vec![0.0f32; m * v];
                let mut probs = vec![0.0f32; v];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    softmax_row_into(&src[i * v..(i + 1) * v], 1.0, v, &mut probs);
                    let row = &mut dx[i * v..(i + 1) * v];
                    for j in 0..v {
                        row[j] = g[0] * probs[j];
                    }
                    row[targets[i] as usize] -= g[0];
                }
                drop(src);
                logits.accumulate_grad(&dx);
            }
        }
    }
}

#[cfg(test)]
mod tests;
