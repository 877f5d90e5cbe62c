//! Computation graph: tensors, forward ops and reverse-mode backward.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: given the output gradient and the output values, produce
/// one gradient contribution per parent (None for parents without grad).
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to an immutable node of the computation graph. Cloning is cheap
/// (reference counted). Values never change after construction; gradients
/// are filled in by [`Tensor::backward`].
pub struct Tensor {
    node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.node.shape, self.node.requires_grad
        )
    }
}

fn assert_finite(values: &[f64], op: &str) {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        panic!("{op}: non-finite value {v} produced");
    }
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        assert_finite(&values, "op");
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                values,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn leaf(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf: shape {shape:?} does not match {} values",
            values.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                values,
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf: participates in backward and accumulates a gradient.
    pub fn leaf_grad(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf_grad: shape {shape:?} does not match {} values",
            values.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                values,
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.node.values
    }

    pub fn len(&self) -> usize {
        self.node.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient (after [`backward`](Self::backward)); zeros if
    /// the node was never reached.
    pub fn grad(&self) -> Vec<f64> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.node.values.len()])
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.node.shape.as_slice() {
            [r, c] => (*r, *c),
            s => panic!("expected a 2-D tensor, got shape {s:?}"),
        }
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution.iter()) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse accumulation from a scalar loss: seeds the output gradient
    /// with 1 and pushes gradients to every reachable trainable leaf.
    pub fn backward(&self) {
        assert_eq!(
            self.node.values.len(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            self.node.shape
        );
        // iterative post-order DFS: leaves first, root last
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                let parent = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if parent.node.requires_grad && visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            let Some(backward) = &t.node.backward else {
                continue;
            };
            let grad = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let contributions = backward(&grad, &t.node.values, &t.node.parents);
            debug_assert_eq!(contributions.len(), t.node.parents.len());
            for (parent, c) in t.node.parents.iter().zip(contributions) {
                if let Some(c) = c {
                    if parent.node.requires_grad {
                        debug_assert_eq!(c.len(), parent.node.values.len());
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _, _| {
                vec![Some(g.to_vec()), Some(g.to_vec())]
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "sub: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _, _| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            })),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _, parents| {
                let a = parents[0].values();
                let b = parents[1].values();
                vec![
                    Some(g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v * c).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                vec![Some(g.iter().map(|v| v * c).collect())]
            })),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v + c).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(|g, _, _| vec![Some(g.to_vec())])),
        )
    }

    pub fn exp(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| v.exp()).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(|g, out, _| {
                vec![Some(g.iter().zip(out).map(|(g, y)| g * y).collect())]
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| sigmoid(*v)).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(|g, out, _| {
                vec![Some(
                    g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                )]
            })),
        )
    }

    pub fn gelu(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| gelu(*v)).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(|g, _, parents| {
                let x = parents[0].values();
                vec![Some(
                    g.iter().zip(x).map(|(g, x)| g * gelu_prime(*x)).collect(),
                )]
            })),
        )
    }

    pub fn silu(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| v * sigmoid(*v)).collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone()],
            Some(Box::new(|g, _, parents| {
                let x = parents[0].values();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                )]
            })),
        )
    }

    /// Elementwise binary cross entropy from logits against constant
    /// targets in [0, 1]; numerically stable log-sum-exp form.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            targets.shape(),
            "bce_with_logits: shape mismatch {:?} vs {:?}",
            self.shape(),
            targets.shape()
        );
        let values: Vec<f64> = self
            .values()
            .iter()
            .zip(targets.values())
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        Tensor::make(
            self.node.shape.clone(),
            values,
            vec![self.clone(), targets.clone()],
            Some(Box::new(|g, _, parents| {
                let z = parents[0].values();
                let y = parents[1].values();
                vec![
                    Some(
                        g.iter()
                            .zip(z.iter().zip(y))
                            .map(|(g, (z, y))| g * (sigmoid(*z) - y))
                            .collect(),
                    ),
                    None,
                ]
            })),
        )
    }

    // ---- broadcasting over rows ----

    /// `[N, H] + [H]`, the vector added to every row.
    pub fn add_row(&self, v: &Tensor) -> Tensor {
        let (n, h) = self.rows_cols();
        assert_eq!(
            v.shape(),
            &[h],
            "add_row: {:?} + {:?}",
            self.shape(),
            v.shape()
        );
        let vv = v.values();
        let values = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv[i % h])
            .collect();
        Tensor::make(
            vec![n, h],
            values,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dv = vec![0.0; h];
                for (i, gi) in g.iter().enumerate() {
                    dv[i % h] += gi;
                }
                vec![Some(g.to_vec()), Some(dv)]
            })),
        )
    }

    /// `[N, H] * [H]`, the vector scaling every row elementwise.
    pub fn mul_row(&self, v: &Tensor) -> Tensor {
        let (n, h) = self.rows_cols();
        assert_eq!(
            v.shape(),
            &[h],
            "mul_row: {:?} * {:?}",
            self.shape(),
            v.shape()
        );
        let vv = v.values();
        let values = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, a)| a * vv[i % h])
            .collect();
        Tensor::make(
            vec![n, h],
            values,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _, parents| {
                let x = parents[0].values();
                let vv = parents[1].values();
                let mut dx = vec![0.0; g.len()];
                let mut dv = vec![0.0; h];
                for (i, gi) in g.iter().enumerate() {
                    dx[i] = gi * vv[i % h];
                    dv[i % h] += gi * x[i];
                }
                vec![Some(dx), Some(dv)]
            })),
        )
    }

    /// Repeats a vector `[H]` as `n` identical rows, `[n, H]`.
    pub fn broadcast_row(&self, n: usize) -> Tensor {
        let h = match self.shape() {
            [h] => *h,
            s => panic!("broadcast_row: expected a vector, got shape {s:?}"),
        };
        let mut values = Vec::with_capacity(n * h);
        for _ in 0..n {
            values.extend_from_slice(self.values());
        }
        Tensor::make(
            vec![n, h],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dv = vec![0.0; h];
                for (i, gi) in g.iter().enumerate() {
                    dv[i % h] += gi;
                }
                vec![Some(dv)]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        assert_eq!(
            k, k2,
            "matmul: inner dims disagree, {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let values = mm(self.values(), other.values(), m, k, n);
        Tensor::make(
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _, parents| {
                let a = parents[0].values();
                let b = parents[1].values();
                vec![Some(mm_nt(g, b, m, n, k)), Some(mm_tn(a, g, m, k, n))]
            })),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = x[i * n + j];
            }
        }
        Tensor::make(
            vec![n, m],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape: {:?} incompatible with {:?}",
            self.shape(),
            shape
        );
        Tensor::make(
            shape,
            self.values().to_vec(),
            vec![self.clone()],
            Some(Box::new(|g, _, _| vec![Some(g.to_vec())])),
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let (m, n) = self.rows_cols();
        assert!(
            start < end && end <= m,
            "slice_rows: {start}..{end} out of range for {:?}",
            self.shape()
        );
        let values = self.values()[start * n..end * n].to_vec();
        Tensor::make(
            vec![end - start, n],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(g);
                vec![Some(dx)]
            })),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (m, n) = self.rows_cols();
        assert!(
            start < end && end <= n,
            "slice_cols: {start}..{end} out of range for {:?}",
            self.shape()
        );
        let w = end - start;
        let x = self.values();
        let mut values = Vec::with_capacity(m * w);
        for i in 0..m {
            values.extend_from_slice(&x[i * n + start..i * n + end]);
        }
        Tensor::make(
            vec![m, w],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let len = self.len();
        Tensor::make(
            vec![1],
            vec![s],
            vec![self.clone()],
            Some(Box::new(move |g, _, _| vec![Some(vec![g[0]; len])])),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let len = self.len();
        let s: f64 = self.values().iter().sum::<f64>() / len as f64;
        Tensor::make(
            vec![1],
            vec![s],
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                vec![Some(vec![g[0] / len as f64; len])]
            })),
        )
    }

    /// Column means of `[N, H]`, yielding `[H]`.
    pub fn mean_rows(&self) -> Tensor {
        let (n, h) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; h];
        for i in 0..n {
            for j in 0..h {
                values[j] += x[i * h + j];
            }
        }
        for v in values.iter_mut() {
            *v /= n as f64;
        }
        Tensor::make(
            vec![h],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n * h];
                for i in 0..n {
                    for j in 0..h {
                        dx[i * h + j] = g[j] / n as f64;
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Scalar mean and population variance of all entries, `[2]`.
    pub fn mean_var_all(&self) -> Tensor {
        let len = self.len() as f64;
        let mean = self.values().iter().sum::<f64>() / len;
        let var = self
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / len;
        Tensor::make(
            vec![2],
            vec![mean, var],
            vec![self.clone()],
            Some(Box::new(move |g, _, parents| {
                let x = parents[0].values();
                let mean = x.iter().sum::<f64>() / len;
                vec![Some(
                    x.iter()
                        .map(|v| g[0] / len + g[1] * 2.0 * (v - mean) / len)
                        .collect(),
                )]
            })),
        )
    }

    // ---- normalization and attention pieces ----

    /// Row-wise layer normalization without affine parameters:
    /// `(x - mean) / sqrt(var + eps)` per row.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let (n, h) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; n * h];
        for i in 0..n {
            let row = &x[i * h..(i + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..h {
                values[i * h + j] = (row[j] - mean) * inv;
            }
        }
        Tensor::make(
            vec![n, h],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, out, parents| {
                let x = parents[0].values();
                let mut dx = vec![0.0; n * h];
                for i in 0..n {
                    let row = &x[i * h..(i + 1) * h];
                    let y = &out[i * h..(i + 1) * h];
                    let gi = &g[i * h..(i + 1) * h];
                    let mean = row.iter().sum::<f64>() / h as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gi.iter().sum::<f64>() / h as f64;
                    let gy_mean =
                        gi.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / h as f64;
                    for j in 0..h {
                        dx[i * h + j] = inv * (gi[j] - g_mean - y[j] * gy_mean);
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Row-wise softmax (last axis), max-shifted for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, h) = self.rows_cols();
        let x = self.values();
        let mut values = vec![0.0; n * h];
        for i in 0..n {
            let row = &x[i * h..(i + 1) * h];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..h {
                let e = (row[j] - max).exp();
                values[i * h + j] = e;
                sum += e;
            }
            for j in 0..h {
                values[i * h + j] /= sum;
            }
        }
        Tensor::make(
            vec![n, h],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, out, _| {
                let mut dx = vec![0.0; n * h];
                for i in 0..n {
                    let y = &out[i * h..(i + 1) * h];
                    let gi = &g[i * h..(i + 1) * h];
                    let dot: f64 = gi.iter().zip(y).map(|(g, y)| g * y).sum();
                    for j in 0..h {
                        dx[i * h + j] = y[j] * (gi[j] - dot);
                    }
                }
                vec![Some(dx)]
            })),
        )
    }

    // ---- lookup and convolution ----

    /// Gathers rows of a `[V, H]` table, `indices -> [N, H]`; the gradient
    /// scatters back into the table rows.
    pub fn embedding_lookup(&self, indices: &[usize]) -> Tensor {
        let (v, h) = self.rows_cols();
        for &i in indices {
            assert!(i < v, "embedding_lookup: index {i} out of range for {v} rows");
        }
        let x = self.values();
        let mut values = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            values.extend_from_slice(&x[i * h..(i + 1) * h]);
        }
        let idx: Vec<usize> = indices.to_vec();
        Tensor::make(
            vec![indices.len(), h],
            values,
            vec![self.clone()],
            Some(Box::new(move |g, _, _| {
                let mut dt = vec![0.0; v * h];
                for (n, &i) in idx.iter().enumerate() {
                    for j in 0..h {
                        dt[i * h + j] += g[n * h + j];
                    }
                }
                vec![Some(dt)]
            })),
        )
    }

    /// 1-D convolution over the row axis, stride 1, zero "same" padding.
    /// Input `[L, Cin]`, weight `[K * Cin, Cout]` (kernel-tap major), bias
    /// `[Cout]`; output `[L, Cout]`. K must be odd.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, kernel: usize) -> Tensor {
        assert!(kernel % 2 == 1, "conv1d: kernel size {kernel} must be odd");
        let (l, cin) = self.rows_cols();
        let (kc, cout) = weight.rows_cols();
        assert_eq!(
            kc,
            kernel * cin,
            "conv1d: weight shape {:?} does not match kernel {kernel} x input {:?}",
            weight.shape(),
            self.shape()
        );
        assert_eq!(
            bias.shape(),
            &[cout],
            "conv1d: bias shape {:?} vs {cout} output channels",
            bias.shape()
        );
        let half = kernel / 2;
        let x = self.values();
        let w = weight.values();
        let b = bias.values();
        let mut values = vec![0.0; l * cout];
        for pos in 0..l {
            let out_row = &mut values[pos * cout..(pos + 1) * cout];
            out_row.copy_from_slice(b);
            for k in 0..kernel {
                let src = pos as i64 + k as i64 - half as i64;
                if src < 0 || src >= l as i64 {
                    continue;
                }
                let xrow = &x[src as usize * cin..(src as usize + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                    for (o, wv) in wrow.iter().enumerate() {
                        out_row[o] += xv * wv;
                    }
                }
            }
        }
        Tensor::make(
            vec![l, cout],
            values,
            vec![self.clone(), weight.clone(), bias.clone()],
            Some(Box::new(move |g, _, parents| {
                let x = parents[0].values();
                let w = parents[1].values();
                let mut dx = vec![0.0; l * cin];
                let mut dw = vec![0.0; kernel * cin * cout];
                let mut db = vec![0.0; cout];
                for pos in 0..l {
                    let grow = &g[pos * cout..(pos + 1) * cout];
                    for (o, gv) in grow.iter().enumerate() {
                        db[o] += gv;
                    }
                    for k in 0..kernel {
                        let src = pos as i64 + k as i64 - half as i64;
                        if src < 0 || src >= l as i64 {
                            continue;
                        }
                        let s = src as usize;
                        for ci in 0..cin {
                            let widx = (k * cin + ci) * cout;
                            let xv = x[s * cin + ci];
                            let mut acc = 0.0;
                            for (o, gv) in grow.iter().enumerate() {
                                acc += gv * w[widx + o];
                                dw[widx + o] += gv * xv;
                            }
                            dx[s * cin + ci] += acc;
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            })),
        )
    }
}

/// Stacks 2-D tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows: no inputs");
    let n = parts[0].rows_cols().1;
    let mut rows = 0;
    let mut values = Vec::new();
    for p in parts {
        let (r, c) = p.rows_cols();
        assert_eq!(
            c,
            n,
            "concat_rows: column mismatch {:?} vs {n} cols",
            p.shape()
        );
        rows += r;
        values.extend_from_slice(p.values());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
    Tensor::make(
        vec![rows, n],
        values,
        parts.iter().map(|p| (*p).clone()).collect(),
        Some(Box::new(move |g, _, _| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for &s in &sizes {
                out.push(Some(g[offset..offset + s].to_vec()));
                offset += s;
            }
            out
        })),
    )
}

/// Concatenates 2-D tensors with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols: no inputs");
    let rows = parts[0].rows_cols().0;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (r, c) = p.rows_cols();
            assert_eq!(
                r,
                rows,
                "concat_cols: row mismatch {:?} vs {rows} rows",
                p.shape()
            );
            c
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut values = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            values.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
        }
    }
    let widths_b = widths.clone();
    Tensor::make(
        vec![rows, total],
        values,
        parts.iter().map(|p| (*p).clone()).collect(),
        Some(Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f64>> = widths_b.iter().map(|&w| vec![0.0; rows * w]).collect();
            for i in 0..rows {
                let mut offset = 0;
                for (pi, &w) in widths_b.iter().enumerate() {
                    grads[pi][i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    offset += w;
                }
            }
            grads.into_iter().map(Some).collect()
        })),
    )
}

const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features of a scalar time `t` in [0, 1], `[dim]` with
/// interleaved sin/cos at log-spaced frequencies. Smooth and differentiable
/// in `t`.
pub fn sinusoidal_time_features(t: &Tensor, dim: usize) -> Tensor {
    assert_eq!(
        t.shape(),
        &[1],
        "sinusoidal_time_features: t must be a scalar, got {:?}",
        t.shape()
    );
    assert!(dim % 2 == 0, "sinusoidal_time_features: dim {dim} must be even");
    let half = dim / 2;
    let u = t.values()[0] * TIME_SCALE;
    let freq = move |i: usize| (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
    let mut values = vec![0.0; dim];
    for i in 0..half {
        let f = freq(i);
        values[2 * i] = (u * f).sin();
        values[2 * i + 1] = (u * f).cos();
    }
    Tensor::make(
        vec![dim],
        values,
        vec![t.clone()],
        Some(Box::new(move |g, _, parents| {
            let u = parents[0].values()[0] * TIME_SCALE;
            let mut dt = 0.0;
            for i in 0..half {
                let f = freq(i);
                dt += g[2 * i] * (u * f).cos() * f * TIME_SCALE;
                dt -= g[2 * i + 1] * (u * f).sin() * f * TIME_SCALE;
            }
            vec![Some(vec![dt])]
        })),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a (m x k) * b (k x n)`, row-major.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m x n) * b^T (n x k)` where `b` is `k x n`: gradient w.r.t. the left
/// matmul operand.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// `a^T (k x m) * g (m x n)` where `a` is `m x k`: gradient w.r.t. the right
/// matmul operand.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward_ones() {
        let x = Tensor::leaf_grad(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = x.sum_all();
        loss.backward();
        assert_eq!(x.grad(), vec![1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let x = Tensor::leaf_grad(vec![3], vec![1.0, -2.0, 0.5]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::leaf(vec![5, 7], a.clone());
        let tb = Tensor::leaf(vec![7, 3], b.clone());
        let c = ta.matmul(&tb);
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..7 {
                    want += a[i * 7 + k] * b[k * 3 + j];
                }
                assert!((c.values()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::leaf(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 2.0).collect());
        let y = x.softmax_rows();
        for i in 0..3 {
            let s: f64 = y.values()[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = Tensor::leaf(vec![2, 8], (0..16).map(|i| (i as f64).sin() * 3.0).collect());
        let y = x.layer_norm(1e-9);
        for i in 0..2 {
            let row = &y.values()[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_reuse_accumulates_both_paths() {
        // y = x + x; dy/dx = 2
        let x = Tensor::leaf_grad(vec![2], vec![1.0, 2.0]);
        let loss = x.add(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_forward_drops_parents() {
        let x = Tensor::leaf(vec![2, 2], vec![1.0; 4]);
        let y = x.matmul(&x);
        assert!(!y.requires_grad());
        assert!(y.node.parents.is_empty());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_panics_on_shape_mismatch() {
        let a = Tensor::leaf(vec![2, 2], vec![0.0; 4]);
        let b = Tensor::leaf(vec![2, 3], vec![0.0; 6]);
        let _ = a.add(&b);
    }

    #[test]
    #[should_panic(expected = "must be a scalar")]
    fn backward_rejects_non_scalar() {
        let a = Tensor::leaf_grad(vec![2], vec![1.0, 2.0]);
        a.backward();
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let x = Tensor::leaf_grad(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let before = x.values().to_vec();
        let _ = x.scale(5.0).add_scalar(1.0).gelu().sum_all();
        assert_eq!(x.values(), before.as_slice());
    }

    #[test]
    fn time_features_deterministic_and_distinct() {
        let t0 = sinusoidal_time_features(&Tensor::scalar(0.0), 16);
        let t0b = sinusoidal_time_features(&Tensor::scalar(0.0), 16);
        let t1 = sinusoidal_time_features(&Tensor::scalar(1.0), 16);
        assert_eq!(t0.values(), t0b.values());
        let dot: f64 = t0.values().iter().zip(t1.values()).map(|(a, b)| a * b).sum();
        let na: f64 = t0.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = t1.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(1.0 - dot / (na * nb) > 0.01, "t=0 and t=1 nearly identical");
    }
}
