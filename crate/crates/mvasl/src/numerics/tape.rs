//! Reverse-mode differentiation over a recording tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its value and one
//! VJP closure per parent. [`Tape::backward`] replays the tape in reverse,
//! accumulating gradients. Nodes are appended in topological order by
//! construction, so a single reverse sweep suffices.

use std::cell::RefCell;

use super::tensor::{
    self, gelu_grad, layer_norm_rows, matmul, sigmoid, softmax_rows, NumericsError, Result, Tensor,
};

type VjpFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<(usize, VjpFn)>,
}

/// Recording tape. One tape per differentiated computation (e.g. one
/// training step); values on it are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when the loss does not
    /// depend on it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, VjpFn)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_clone(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Record a constant or parameter leaf.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        value.ensure_finite("leaf")?;
        Ok(self.push(value, Vec::new()))
    }

    /// Reverse sweep seeded with `d(output)/d(output) = seed` for each pair.
    /// Seeds for the same node accumulate. Used directly when differentiating
    /// vector-valued outputs; [`Tape::backward`] is the scalar-loss form.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)]) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            if nodes[v.id].value.shape() != seed.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "backward_seeded",
                    detail: format!(
                        "seed shape {:?} vs value shape {:?}",
                        seed.shape(),
                        nodes[v.id].value.shape()
                    ),
                });
            }
            match &mut grads[v.id] {
                Some(acc) => *acc = acc.add(seed)?,
                slot => *slot = Some(seed.clone()),
            }
        }
        for id in (0..nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            for (pid, vjp) in &nodes[id].parents {
                let contrib = vjp(&g)?;
                match &mut grads[*pid] {
                    Some(acc) => *acc = acc.add(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar loss with respect to everything on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let seed = Tensor::full(shape, 1.0);
        self.backward_seeded(&[(loss, seed)])
    }
}

/// Gradients of a scalar `loss` with respect to the given leaves, zeros
/// where the loss does not depend on a leaf.
pub fn grad_of(loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Tensor>> {
    let grads = loss.tape.backward(loss)?;
    Ok(params.iter().map(|p| grads.wrt_or_zeros(*p)).collect())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_clone(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.scalar_value()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Tensor| Ok(g.clone())) as VjpFn),
                (other.id, Box::new(|g: &Tensor| Ok(g.clone()))),
            ],
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Tensor| Ok(g.clone())) as VjpFn),
                (other.id, Box::new(|g: &Tensor| g.affine(-1.0, 0.0))),
            ],
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.mul(&b)?;
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(move |g: &Tensor| g.mul(&b)) as VjpFn),
                (other.id, Box::new(move |g: &Tensor| g.mul(&a))),
            ],
        ))
    }

    /// Elementwise max; on ties the gradient routes to `self`.
    pub fn max_elem(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.max_elem(&b)?;
        let mask_a: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| if x >= y { 1.0 } else { 0.0 }).collect();
        let mask_a = Tensor::new(a.shape().to_vec(), mask_a)?;
        let mask_b = mask_a.affine(-1.0, 1.0)?;
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(move |g: &Tensor| g.mul(&mask_a)) as VjpFn),
                (other.id, Box::new(move |g: &Tensor| g.mul(&mask_b))),
            ],
        ))
    }

    /// `k * x + c` elementwise.
    pub fn affine(self, k: f64, c: f64) -> Result<Var<'t>> {
        let out = self.value().affine(k, c)?;
        Ok(self
            .tape
            .push(out, vec![(self.id, Box::new(move |g: &Tensor| g.affine(k, 0.0)) as VjpFn)]))
    }

    /// Broadcast-add a bias row over every row of a matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let out = x.add_bias(&b)?;
        let b_shape = b.shape().to_vec();
        let cols = b.numel();
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Tensor| Ok(g.clone())) as VjpFn),
                (
                    bias.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; cols];
                        for row in g.data().chunks_exact(cols) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::new(b_shape.clone(), acc)
                    }),
                ),
            ],
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = matmul(&a, &b)?;
        Ok(self.tape.push(
            out,
            vec![
                (self.id, Box::new(move |g: &Tensor| matmul(g, &b.transpose()?)) as VjpFn),
                (other.id, Box::new(move |g: &Tensor| matmul(&a.transpose()?, g))),
            ],
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(out, vec![(self.id, Box::new(|g: &Tensor| g.transpose()) as VjpFn)]))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let y = self.value().sigmoid()?;
        let y_cap = y.clone();
        Ok(self.tape.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let dfdx: Vec<f64> = y_cap.data().iter().map(|&p| p * (1.0 - p)).collect();
                    g.mul(&Tensor::new(y_cap.shape().to_vec(), dfdx)?)
                }) as VjpFn,
            )],
        ))
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.softplus()?;
        Ok(self.tape.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let dfdx: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
                    g.mul(&Tensor::new(x.shape().to_vec(), dfdx)?)
                }) as VjpFn,
            )],
        ))
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.gelu()?;
        Ok(self.tape.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let dfdx: Vec<f64> = x.data().iter().map(|&v| gelu_grad(v)).collect();
                    g.mul(&Tensor::new(x.shape().to_vec(), dfdx)?)
                }) as VjpFn,
            )],
        ))
    }

    /// Elementwise `x^q`; inputs must be strictly positive.
    pub fn powf(self, q: f64) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.powf_elem(q)?;
        Ok(self.tape.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let dfdx: Vec<f64> = x.data().iter().map(|&v| q * v.powf(q - 1.0)).collect();
                    g.mul(&Tensor::new(x.shape().to_vec(), dfdx)?)
                }) as VjpFn,
            )],
        ))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let y = softmax_rows(&self.value())?;
        let y_cap = y.clone();
        Ok(self.tape.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    // dx = y * (g - rowdot(g, y))
                    let c = y_cap.cols();
                    let mut out = Vec::with_capacity(y_cap.numel());
                    for (g_row, y_row) in g.data().chunks_exact(c).zip(y_cap.data().chunks_exact(c)) {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        out.extend(g_row.iter().zip(y_row).map(|(gv, yv)| yv * (gv - dot)));
                    }
                    Tensor::new(y_cap.shape().to_vec(), out)
                }) as VjpFn,
            )],
        ))
    }

    pub fn layer_norm_rows(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let gn = gain.value();
        let out = layer_norm_rows(&x, &gn, &bias.value(), eps)?;
        let c = x.cols();
        // Normalized rows and inverse stds, captured for all three VJPs.
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in x.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
        let xhat_g = xhat.clone();
        let xhat_x = xhat.clone();
        let gn_shape = gn.shape().to_vec();
        let bias_shape = gn_shape.clone();
        Ok(self.tape.push(
            out,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Tensor| {
                        let mut out = Vec::with_capacity(g.numel());
                        for (r, (g_row, xh_row)) in
                            g.data().chunks_exact(c).zip(xhat_x.data().chunks_exact(c)).enumerate()
                        {
                            let h: Vec<f64> = g_row.iter().zip(gn.data()).map(|(a, b)| a * b).collect();
                            let mean_h = h.iter().sum::<f64>() / c as f64;
                            let mean_hx = h.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            let inv = inv_std[r];
                            out.extend(
                                h.iter().zip(xh_row).map(|(hv, xv)| inv * (hv - mean_h - xv * mean_hx)),
                            );
                        }
                        Tensor::new(g.shape().to_vec(), out)
                    }) as VjpFn,
                ),
                (
                    gain.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; c];
                        for (g_row, xh_row) in g.data().chunks_exact(c).zip(xhat_g.data().chunks_exact(c)) {
                            for ((a, gv), xv) in acc.iter_mut().zip(g_row).zip(xh_row) {
                                *a += gv * xv;
                            }
                        }
                        Tensor::new(gn_shape.clone(), acc)
                    }),
                ),
                (
                    bias.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = vec![0.0; c];
                        for g_row in g.data().chunks_exact(c) {
                            for (a, gv) in acc.iter_mut().zip(g_row) {
                                *a += gv;
                            }
                        }
                        Tensor::new(bias_shape.clone(), acc)
                    }),
                ),
            ],
        ))
    }

    /// log-sum-exp over all elements, producing a `[1, 1]` scalar.
    pub fn logsumexp_all(self) -> Result<Var<'t>> {
        let x = self.value();
        let lse = tensor::logsumexp_all(&x)?;
        let weights: Vec<f64> = x.data().iter().map(|&v| (v - lse).exp()).collect();
        let weights = Tensor::new(x.shape().to_vec(), weights)?;
        Ok(self.tape.push(
            Tensor::scalar(lse),
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let gs = g.scalar_value()?;
                    weights.affine(gs, 0.0)
                }) as VjpFn,
            )],
        ))
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        Ok(self.tape.push(
            Tensor::scalar(s),
            vec![(
                self.id,
                Box::new(move |g: &Tensor| Ok(Tensor::full(shape.clone(), g.scalar_value()?))) as VjpFn,
            )],
        ))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.shape().iter().product::<usize>() as f64;
        self.sum_all()?.affine(1.0 / n, 0.0)
    }

    /// Mean over groups of `group` consecutive rows.
    pub fn row_group_mean(self, group: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.row_group_mean(group)?;
        let c = x.cols();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let inv = 1.0 / group as f64;
                    let mut data = Vec::with_capacity(in_shape.iter().product());
                    for g_row in g.data().chunks_exact(c) {
                        for _ in 0..group {
                            data.extend(g_row.iter().map(|v| v * inv));
                        }
                    }
                    Tensor::new(in_shape.clone(), data)
                }) as VjpFn,
            )],
        ))
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.slice_rows(r0, r1)?;
        let c = x.cols();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let mut data = vec![0.0; in_shape.iter().product()];
                    data[r0 * c..r1 * c].copy_from_slice(g.data());
                    Tensor::new(in_shape.clone(), data)
                }) as VjpFn,
            )],
        ))
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.slice_cols(c0, c1)?;
        let (r, c) = (x.rows(), x.cols());
        Ok(self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        data[i * c + c0..i * c + c1].copy_from_slice(g.row(i));
                    }
                    Tensor::new(vec![r, c], data)
                }) as VjpFn,
            )],
        ))
    }

    /// Gather `(row, col)` entries into an `[n, 1]` column; duplicate
    /// positions accumulate gradient.
    pub fn gather(self, positions: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.gather(positions)?;
        let (r, c) = (x.rows(), x.cols());
        let pos = positions.to_vec();
        Ok(self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Tensor| {
                    let mut data = vec![0.0; r * c];
                    for (&(i, j), &gv) in pos.iter().zip(g.data()) {
                        data[i * c + j] += gv;
                    }
                    Tensor::new(vec![r, c], data)
                }) as VjpFn,
            )],
        ))
    }
}

/// Stack vars vertically into one matrix.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let out = Tensor::concat_rows(&refs)?;
    let mut parents: Vec<(usize, VjpFn)> = Vec::with_capacity(parts.len());
    let mut row = 0;
    for (part, value) in parts.iter().zip(&values) {
        let (r0, r1) = (row, row + value.rows());
        row = r1;
        parents.push((
            part.id,
            Box::new(move |g: &Tensor| g.slice_rows(r0, r1)) as VjpFn,
        ));
    }
    Ok(tape.push(out, parents))
}

/// Stack vars horizontally into one matrix.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let out = Tensor::concat_cols(&refs)?;
    let mut parents: Vec<(usize, VjpFn)> = Vec::with_capacity(parts.len());
    let mut col = 0;
    for (part, value) in parts.iter().zip(&values) {
        let (c0, c1) = (col, col + value.cols());
        col = c1;
        parents.push((
            part.id,
            Box::new(move |g: &Tensor| g.slice_cols(c0, c1)) as VjpFn,
        ));
    }
    Ok(tape.push(out, parents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_square_is_two_theta() {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let loss = theta.mul(theta).unwrap();
        let grads = grad_of(loss, &[theta]).unwrap();
        assert!((grads[0].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_softplus_at_zero_is_half() {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::zeros(vec![1, 4])).unwrap();
        let loss = theta.softplus().unwrap().sum_all().unwrap();
        let grads = grad_of(loss, &[theta]).unwrap();
        for g in grads[0].data() {
            assert!((g - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(tape.backward(v), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let used = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let unused = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let loss = used.mul(used).unwrap();
        let grads = grad_of(loss, &[used, unused]).unwrap();
        assert_eq!(grads[1].shape(), &[2, 3]);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_accumulates_duplicate_positions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let g = x.gather(&[(0, 0), (0, 0), (0, 1)]).unwrap();
        let loss = g.sum_all().unwrap();
        let grads = grad_of(loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 1.0]);
    }

    #[test]
    fn matmul_gradient_matches_hand_derivation() {
        // loss = sum(A @ B) => dA = ones @ B^T, dB = A^T @ ones
        let tape = Tape::new();
        let a_t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b_t = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let a = tape.leaf(a_t.clone()).unwrap();
        let b = tape.leaf(b_t.clone()).unwrap();
        let loss = a.matmul(b).unwrap().sum_all().unwrap();
        let grads = grad_of(loss, &[a, b]).unwrap();
        let ones = Tensor::full(vec![2, 2], 1.0);
        let expect_da = matmul(&ones, &b_t.transpose().unwrap()).unwrap();
        let expect_db = matmul(&a_t.transpose().unwrap(), &ones).unwrap();
        assert_eq!(grads[0], expect_da);
        assert_eq!(grads[1], expect_db);
    }
}
