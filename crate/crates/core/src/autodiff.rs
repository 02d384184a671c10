//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`DiffArray`] is a reference-counted node holding its values, an optional
//! gradient, and the operation that produced it. Leaves created with
//! [`DiffArray::leaf`] accumulate gradients when [`DiffArray::backward`] is
//! called on a scalar that depends on them; intermediate gradients live only
//! for the duration of one backward pass.
//!
//! Arrays are at most two-dimensional (`[rows, cols]`); scalars have shape `[]`.
//! Shape mismatches inside an operation are programming errors and panic.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::cloud::Point3;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone)]
pub struct DiffArray(Rc<Node>);

struct Node {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(DiffArray, DiffArray),
    Sub(DiffArray, DiffArray),
    Mul(DiffArray, DiffArray),
    Scale(DiffArray, f64),
    AddRow(DiffArray, DiffArray),
    MatMul(DiffArray, DiffArray),
    GatherRows(DiffArray, Rc<[usize]>),
    /// `argmax[o]` is the flat input index that produced output element `o`.
    MaxGroup(DiffArray, Vec<usize>),
    ConcatCols(DiffArray, DiffArray),
    LeakyRelu(DiffArray, f64),
    NormalizeRows(DiffArray, f64),
    RowNorm(DiffArray),
    RowSum(DiffArray),
    CrossRows(DiffArray, DiffArray),
    Exp(DiffArray),
    /// `take_first[i]` is true where the first operand was selected.
    MinSelect(DiffArray, DiffArray, Vec<bool>),
    Sum(DiffArray),
    Mean(DiffArray),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl std::fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// `c = a·b + beta·c` for row-major-with-strides operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides passed below (all callers describe dense row-major buffers or
    // their transposes), and `c` does not alias `a` or `b`.
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

impl DiffArray {
    fn from_op(shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), value.len());
        DiffArray(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.len() > 2 || numel(shape) != len {
            return Err(Error::invalid(format!(
                "shape {shape:?} does not describe {len} values"
            )));
        }
        Ok(())
    }

    /// A trainable leaf that accumulates gradients.
    pub fn leaf(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape, values.len())?;
        Ok(Self::from_op(shape.to_vec(), values, Op::Leaf, true))
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape, values.len())?;
        Ok(Self::from_op(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_op(Vec::new(), vec![v], Op::Leaf, false)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let v = vec![0.0; numel(shape)];
        Self::from_op(shape.to_vec(), v, Op::Leaf, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            _ => self.0.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            2 => self.0.shape[1],
            1 => 1,
            _ => 1,
        }
    }

    pub fn len(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on array of shape {:?}", self.shape());
        self.0.value.borrow()[0]
    }

    /// Overwrites leaf values in place (used by optimizers and checkpoint loading).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("only leaves can be assigned"));
        }
        if values.len() != self.len() {
            return Err(Error::invalid(format!(
                "assigning {} values to array of shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.0.value.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_op(self.0.shape.clone(), self.to_vec(), Op::Leaf, false)
    }

    fn same_identity(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn rg2(a: &Self, b: &Self) -> bool {
        a.requires_grad() || b.requires_grad()
    }

    fn assert_same_shape(&self, other: &Self, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let a = self.values();
        let b = other.values();
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "add");
        let v = self.zip_with(other, |x, y| x + y);
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::Add(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "sub");
        let v = self.zip_with(other, |x, y| x - y);
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::Sub(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "mul");
        let v = self.zip_with(other, |x, y| x * y);
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::Mul(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    pub fn scale(&self, factor: f64) -> Self {
        let v = self.values().iter().map(|x| x * factor).collect();
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::Scale(self.clone(), factor),
            self.requires_grad(),
        )
    }

    /// Adds a `[1, cols]` (or `[cols]`) row to every row of a `[rows, cols]` array.
    pub fn add_row(&self, row: &Self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(
            row.len(),
            c,
            "add_row: row of {} for {c} columns",
            row.len()
        );
        let mut v = self.to_vec();
        {
            let b = row.values();
            for chunk in v.chunks_exact_mut(c.max(1)).take(r) {
                for (x, y) in chunk.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
        }
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::AddRow(self.clone(), row.clone()),
            Self::rg2(self, row),
        )
    }

    /// Matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.shape().len(), 2, "matmul: left operand must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul: right operand must be 2-D");
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            &self.values(),
            (k as isize, 1),
            &other.values(),
            (m as isize, 1),
            0.0,
            &mut out,
        );
        Self::from_op(
            vec![n, m],
            out,
            Op::MatMul(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    /// Row `i` of the result is row `indices[i]` of `self`.
    pub fn gather_rows(&self, indices: Rc<[usize]>) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let src = self.values();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            assert!(i < r, "gather_rows: index {i} out of {r} rows");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        drop(src);
        Self::from_op(
            vec![indices.len(), c],
            out,
            Op::GatherRows(self.clone(), indices),
            self.requires_grad(),
        )
    }

    /// Channel-wise max over consecutive groups of `group` rows:
    /// `[n*group, c] -> [n, c]`. Ties go to the earliest row of the group.
    pub fn max_group(&self, group: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        assert!(
            group > 0 && r % group == 0,
            "max_group: {r} rows not divisible by {group}"
        );
        let n = r / group;
        let src = self.values();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for g in 0..n {
            let o = &mut out[g * c..(g + 1) * c];
            let a = &mut argmax[g * c..(g + 1) * c];
            for t in 0..group {
                let base = (g * group + t) * c;
                for ch in 0..c {
                    let v = src[base + ch];
                    if t == 0 || v > o[ch] {
                        o[ch] = v;
                        a[ch] = base + ch;
                    }
                }
            }
        }
        drop(src);
        Self::from_op(
            vec![n, c],
            out,
            Op::MaxGroup(self.clone(), argmax),
            self.requires_grad(),
        )
    }

    /// Column concatenation `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&self, other: &Self) -> Self {
        let n = self.rows();
        assert_eq!(n, other.rows(), "concat_cols: row counts differ");
        let (ca, cb) = (self.cols(), other.cols());
        let (a, b) = (self.values(), other.values());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&a[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b[i * cb..(i + 1) * cb]);
        }
        drop((a, b));
        Self::from_op(
            vec![n, ca + cb],
            out,
            Op::ConcatCols(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let v = self
            .values()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::LeakyRelu(self.clone(), slope),
            self.requires_grad(),
        )
    }

    /// Divides each row by `max(|row|, eps)`.
    pub fn normalize_rows(&self, eps: f64) -> Self {
        let c = self.cols();
        let mut v = self.to_vec();
        for row in v.chunks_exact_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::NormalizeRows(self.clone(), eps),
            self.requires_grad(),
        )
    }

    /// Euclidean norm of each row, `[n, c] -> [n, 1]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norm(&self) -> Self {
        let c = self.cols();
        let v: Vec<f64> = self
            .values()
            .chunks_exact(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self::from_op(
            vec![v.len(), 1],
            v,
            Op::RowNorm(self.clone()),
            self.requires_grad(),
        )
    }

    /// Sum of each row, `[n, c] -> [n, 1]`.
    pub fn row_sum(&self) -> Self {
        let c = self.cols();
        let v: Vec<f64> = self
            .values()
            .chunks_exact(c)
            .map(|r| r.iter().sum())
            .collect();
        Self::from_op(
            vec![v.len(), 1],
            v,
            Op::RowSum(self.clone()),
            self.requires_grad(),
        )
    }

    /// Row-wise cross product of two `[n, 3]` arrays.
    pub fn cross_rows(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "cross_rows");
        assert_eq!(self.cols(), 3, "cross_rows needs 3 columns");
        let (a, b) = (self.values(), other.values());
        let mut out = Vec::with_capacity(a.len());
        for (u, v) in a.chunks_exact(3).zip(b.chunks_exact(3)) {
            out.push(u[1] * v[2] - u[2] * v[1]);
            out.push(u[2] * v[0] - u[0] * v[2]);
            out.push(u[0] * v[1] - u[1] * v[0]);
        }
        drop((a, b));
        Self::from_op(
            self.0.shape.clone(),
            out,
            Op::CrossRows(self.clone(), other.clone()),
            Self::rg2(self, other),
        )
    }

    pub fn exp(&self) -> Self {
        let v = self.values().iter().map(|x| x.exp()).collect();
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::Exp(self.clone()),
            self.requires_grad(),
        )
    }

    /// Elementwise minimum; on ties the first operand is selected and
    /// receives the gradient.
    pub fn min_select(&self, other: &Self) -> Self {
        self.assert_same_shape(other, "min_select");
        let (a, b) = (self.values(), other.values());
        let take_first: Vec<bool> = a.iter().zip(b.iter()).map(|(x, y)| x <= y).collect();
        let v = a
            .iter()
            .zip(b.iter())
            .zip(&take_first)
            .map(|((&x, &y), &t)| if t { x } else { y })
            .collect();
        drop((a, b));
        Self::from_op(
            self.0.shape.clone(),
            v,
            Op::MinSelect(self.clone(), other.clone(), take_first),
            Self::rg2(self, other),
        )
    }

    pub fn sum(&self) -> Self {
        let s = self.values().iter().sum();
        Self::from_op(
            Vec::new(),
            vec![s],
            Op::Sum(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Self {
        let n = self.len().max(1) as f64;
        let s = self.values().iter().sum::<f64>() / n;
        Self::from_op(
            Vec::new(),
            vec![s],
            Op::Mean(self.clone()),
            self.requires_grad(),
        )
    }

    /// `[n, 3]` array of point coordinates.
    pub fn from_points(points: &[Point3], requires_grad: bool) -> Self {
        let v = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Self::from_op(vec![points.len(), 3], v, Op::Leaf, requires_grad)
    }

    /// Rows of a `[n, 3]` array as points.
    pub fn to_points(&self) -> Vec<Point3> {
        assert_eq!(self.cols(), 3, "to_points needs 3 columns");
        self.values()
            .chunks_exact(3)
            .map(|r| Point3::new(r[0], r[1], r[2]))
            .collect()
    }

    /// Reverse-mode sweep from a scalar. Gradients are added to the `grad`
    /// buffers of all reachable trainable leaves; call [`zero_grad`] to reset.
    ///
    /// [`zero_grad`]: DiffArray::zero_grad
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            if node.is_leaf() {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            } else {
                node.propagate(&g, &mut grads);
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients, parents before children.
    fn topological_order(&self) -> Vec<DiffArray> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in node.parents() {
                if parent.requires_grad() && !seen.contains(&parent.0.id) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }

    fn parents(&self) -> Vec<&DiffArray> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCols(a, b)
            | Op::CrossRows(a, b)
            | Op::MinSelect(a, b, _) => vec![a, b],
            Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::MaxGroup(a, _)
            | Op::LeakyRelu(a, _)
            | Op::NormalizeRows(a, _)
            | Op::RowNorm(a)
            | Op::RowSum(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
        }
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        fn acc<'m>(
            grads: &'m mut HashMap<u64, Vec<f64>>,
            target: &DiffArray,
        ) -> Option<&'m mut Vec<f64>> {
            if !target.requires_grad() {
                return None;
            }
            Some(
                grads
                    .entry(target.0.id)
                    .or_insert_with(|| vec![0.0; target.len()]),
            )
        }

        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if a.same_identity(b) {
                    let av = a.values();
                    if let Some(ga) = acc(grads, a) {
                        for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                            *x += 2.0 * y * v;
                        }
                    }
                    return;
                }
                if a.requires_grad() {
                    let bv = b.values();
                    let ga = acc(grads, a).expect("requires grad");
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *x += y * v;
                    }
                }
                if b.requires_grad() {
                    let av = a.values();
                    let gb = acc(grads, b).expect("requires grad");
                    for ((x, &y), &v) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *x += y * v;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = a.cols();
                if let Some(gr) = acc(grads, row) {
                    for chunk in g.chunks_exact(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (a.rows(), a.cols());
                let m = b.cols();
                if a.requires_grad() {
                    // dA[n,k] = dC[n,m] · Bᵀ[m,k]
                    let bv = b.values();
                    let ga = acc(grads, a).expect("requires grad");
                    gemm(n, m, k, g, (m as isize, 1), &bv, (1, m as isize), 1.0, ga);
                }
                if b.requires_grad() {
                    // dB[k,m] = Aᵀ[k,n] · dC[n,m]
                    let av = a.values();
                    let gb = acc(grads, b).expect("requires grad");
                    gemm(k, n, m, &av, (1, k as isize), g, (m as isize, 1), 1.0, gb);
                }
            }
            Op::GatherRows(a, indices) => {
                let c = a.cols();
                if let Some(ga) = acc(grads, a) {
                    for (row, &i) in g.chunks_exact(c).zip(indices.iter()) {
                        ga[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MaxGroup(a, argmax) => {
                if let Some(ga) = acc(grads, a) {
                    for (&src, &y) in argmax.iter().zip(g) {
                        ga[src] += y;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (a.cols(), b.cols());
                if let Some(ga) = acc(grads, a) {
                    for (i, row) in g.chunks_exact(ca + cb).enumerate() {
                        ga[i * ca..(i + 1) * ca]
                            .iter_mut()
                            .zip(&row[..ca])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = acc(grads, b) {
                    for (i, row) in g.chunks_exact(ca + cb).enumerate() {
                        gb[i * cb..(i + 1) * cb]
                            .iter_mut()
                            .zip(&row[ca..])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = a.values();
                if let Some(ga) = acc(grads, a) {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *x += if v > 0.0 { y } else { slope * y };
                    }
                }
            }
            Op::NormalizeRows(a, eps) => {
                let c = a.cols();
                let av = a.values();
                if let Some(ga) = acc(grads, a) {
                    for ((gx, gy), x) in ga
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(av.chunks_exact(c))
                    {
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            // (I - u uᵀ) gy / |x|
                            let dot: f64 = x.iter().zip(gy).map(|(u, v)| u * v).sum::<f64>() / norm;
                            for i in 0..c {
                                gx[i] += (gy[i] - x[i] / norm * dot) / norm;
                            }
                        } else {
                            for i in 0..c {
                                gx[i] += gy[i] / eps;
                            }
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                let c = a.cols();
                let av = a.values();
                let out = self.values();
                if let Some(ga) = acc(grads, a) {
                    for (i, (gx, x)) in ga.chunks_exact_mut(c).zip(av.chunks_exact(c)).enumerate() {
                        let norm = out[i];
                        if norm > 0.0 {
                            for j in 0..c {
                                gx[j] += g[i] * x[j] / norm;
                            }
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                let c = a.cols();
                if let Some(ga) = acc(grads, a) {
                    for (gx, &y) in ga.chunks_exact_mut(c).zip(g) {
                        gx.iter_mut().for_each(|x| *x += y);
                    }
                }
            }
            Op::CrossRows(a, b) => {
                // d(u×v) = du×v + u×dv; adjoints: gu = v×g, gv = g×u
                let (av, bv) = (a.values(), b.values());
                if a.requires_grad() {
                    let ga = acc(grads, a).expect("requires grad");
                    for ((gx, v), gy) in ga
                        .chunks_exact_mut(3)
                        .zip(bv.chunks_exact(3))
                        .zip(g.chunks_exact(3))
                    {
                        gx[0] += v[1] * gy[2] - v[2] * gy[1];
                        gx[1] += v[2] * gy[0] - v[0] * gy[2];
                        gx[2] += v[0] * gy[1] - v[1] * gy[0];
                    }
                }
                if b.requires_grad() {
                    let gb = acc(grads, b).expect("requires grad");
                    for ((gx, u), gy) in gb
                        .chunks_exact_mut(3)
                        .zip(av.chunks_exact(3))
                        .zip(g.chunks_exact(3))
                    {
                        gx[0] += gy[1] * u[2] - gy[2] * u[1];
                        gx[1] += gy[2] * u[0] - gy[0] * u[2];
                        gx[2] += gy[0] * u[1] - gy[1] * u[0];
                    }
                }
            }
            Op::Exp(a) => {
                let out = self.values();
                if let Some(ga) = acc(grads, a) {
                    for ((x, &y), &e) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *x += y * e;
                    }
                }
            }
            Op::MinSelect(a, b, take_first) => {
                if let Some(ga) = acc(grads, a) {
                    for ((x, &y), &t) in ga.iter_mut().zip(g).zip(take_first) {
                        if t {
                            *x += y;
                        }
                    }
                }
                if let Some(gb) = acc(grads, b) {
                    for ((x, &y), &t) in gb.iter_mut().zip(g).zip(take_first) {
                        if !t {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = a.len().max(1) as f64;
                if let Some(ga) = acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = DiffArray::leaf(vec![1.0, 2.0], &[2]).unwrap();
        x.mul(&x).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates() {
        let x = DiffArray::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = DiffArray::leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            x.scale(2.0).backward(),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn max_routes_to_argmax_only() {
        // two groups of three rows, one column
        let x = DiffArray::leaf(vec![1.0, 5.0, 2.0, 7.0, 7.0, 3.0], &[6, 1]).unwrap();
        let m = x.max_group(3);
        assert_eq!(m.to_vec(), vec![5.0, 7.0]);
        m.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn min_select_tie_takes_first() {
        let a = DiffArray::leaf(vec![1.0, 3.0], &[2]).unwrap();
        let b = DiffArray::leaf(vec![1.0, 2.0], &[2]).unwrap();
        a.min_select(&b).sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn matmul_values_and_grads() {
        let a = DiffArray::leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = DiffArray::leaf(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.to_vec(), vec![4.0, 5.0, 10.0, 11.0]);
        c.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let c = DiffArray::constant(vec![3.0], &[1]).unwrap();
        let x = DiffArray::leaf(vec![2.0], &[1]).unwrap();
        x.mul(&c).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        let x = DiffArray::leaf(vec![3.0], &[1]).unwrap();
        let y = x.scale(2.0);
        y.add(&y).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn leaf_shape_checked() {
        assert!(DiffArray::leaf(vec![1.0; 5], &[2, 3]).is_err());
        assert!(DiffArray::leaf(vec![1.0; 8], &[2, 2, 2]).is_err());
    }
}
