//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its variables; calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates adjoints. The contract is numerical: gradients of any
//! composition of the exported primitives match central finite differences
//! at relative tolerance 1e-4 (see the module tests and the trainer's
//! gradient checker).

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    LayerNormRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MeanPoolRows(Var),
    L2NormalizeRows(Var),
    Gelu(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Dot(Var, Var),
    MeanAll(Var),
    Pick(Var, usize),
    DivScalar(Var, Var),
    MulScalar(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul_elem(self.value(a), self.value(b))?;
        Ok(self.push(Op::MulElem(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = tensor::scale(self.value(a), c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = tensor::add_row(self.value(a), self.value(row))?;
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = tensor::mul_row(self.value(a), self.value(row))?;
        Ok(self.push(Op::MulRow(a, row), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::layer_norm_rows(self.value(a))?;
        Ok(self.push(Op::LayerNormRows(a), value))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::log_softmax_rows(self.value(a))?;
        Ok(self.push(Op::LogSoftmaxRows(a), value))
    }

    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::mean_pool_rows(self.value(a))?;
        Ok(self.push(Op::MeanPoolRows(a), value))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::l2_normalize_rows(self.value(a))?;
        Ok(self.push(Op::L2NormalizeRows(a), value))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = tensor::gelu(self.value(a));
        self.push(Op::Gelu(a), value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let value = tensor::slice_cols(self.value(a), start, width)?;
        Ok(self.push(Op::SliceCols(a, start, width), value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let value = tensor::slice_rows(self.value(a), start, count)?;
        Ok(self.push(Op::SliceRows(a, start, count), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_cols(&tensors)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::dot(self.value(a), self.value(b))?;
        Ok(self.push(Op::Dot(a, b), value))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = tensor::mean_all(self.value(a));
        self.push(Op::MeanAll(a), value)
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = tensor::pick(self.value(a), index)?;
        Ok(self.push(Op::Pick(a, index), value))
    }

    /// Scalar division a / b; both operands must be one-element tensors.
    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        let num = self.value(a).item()?;
        let den = self.value(b).item()?;
        Ok(self.push(Op::DivScalar(a, b), Tensor::scalar(num / den)))
    }

    /// Broadcast-multiply a tensor by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let value = tensor::scale(self.value(a), factor);
        Ok(self.push(Op::MulScalar(a, s), value))
    }

    /// Adjoints of a scalar output with respect to `wrt`, in order.
    ///
    /// Variables that do not influence the output get zero gradients of their
    /// own shape.
    pub fn backward(&self, out: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for i in (0..=out.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            adj[i] = Some(g.clone());
            self.propagate(i, &g, &mut adj)?;
        }

        Ok(wrt
            .iter()
            .map(|v| match adj[v.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.value(*v).shape()),
            })
            .collect())
    }

    fn accumulate(adj: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        match &mut adj[v.0] {
            Some(existing) => {
                *existing = tensor::add(existing, &delta)?;
            }
            slot @ None => {
                *slot = Some(delta);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let acc = Self::accumulate;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone())?;
                acc(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone())?;
                acc(adj, *b, tensor::scale(g, -1.0))?;
            }
            Op::MulElem(a, b) => {
                acc(adj, *a, tensor::mul_elem(g, self.value(*b))?)?;
                acc(adj, *b, tensor::mul_elem(g, self.value(*a))?)?;
            }
            Op::Scale(a, c) => {
                acc(adj, *a, tensor::scale(g, *c))?;
            }
            Op::AddRow(a, row) => {
                acc(adj, *a, g.clone())?;
                acc(adj, *row, column_sums(g)?)?;
            }
            Op::MulRow(a, row) => {
                let x = self.value(*a);
                let r = self.value(*row);
                acc(adj, *a, broadcast_mul_row(g, r)?)?;
                acc(adj, *row, column_sums(&tensor::mul_elem(g, x)?)?)?;
            }
            Op::MatMul(a, b) => {
                acc(adj, *a, tensor::matmul_nt(g, self.value(*b))?)?;
                acc(adj, *b, tensor::matmul_tn(self.value(*a), g)?)?;
            }
            Op::MatMulNt(a, b) => {
                acc(adj, *a, tensor::matmul(g, self.value(*b))?)?;
                acc(adj, *b, tensor::matmul_tn(g, self.value(*a))?)?;
            }
            Op::LayerNormRows(a) => {
                acc(adj, *a, layer_norm_backward(self.value(*a), self.value(Var(i)), g)?)?;
            }
            Op::SoftmaxRows(a) => {
                acc(adj, *a, softmax_backward(self.value(Var(i)), g)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                acc(adj, *a, log_softmax_backward(self.value(Var(i)), g)?)?;
            }
            Op::MeanPoolRows(a) => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = g.data()[c] / rows as f64;
                    }
                }
                acc(adj, *a, dx)?;
            }
            Op::L2NormalizeRows(a) => {
                acc(adj, *a, l2_normalize_backward(self.value(*a), self.value(Var(i)), g)?)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (dv, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *dv *= tensor::gelu_grad_scalar(xv);
                }
                acc(adj, *a, dx)?;
            }
            Op::SliceCols(a, start, width) => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    for c in 0..*width {
                        dx.data_mut()[r * cols + start + c] = g.data()[r * width + c];
                    }
                }
                acc(adj, *a, dx)?;
            }
            Op::SliceRows(a, start, count) => {
                let (rows, cols) = self.value(*a).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                dx.data_mut()[start * cols..(start + count) * cols].copy_from_slice(g.data());
                acc(adj, *a, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2()?;
                    acc(adj, *p, tensor::slice_cols(g, offset, w)?)?;
                    offset += w;
                }
            }
            Op::Dot(a, b) => {
                let gv = g.item()?;
                acc(adj, *a, tensor::scale(self.value(*b), gv))?;
                acc(adj, *b, tensor::scale(self.value(*a), gv))?;
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(adj, *a, Tensor::filled(self.value(*a).shape(), g.item()? / n))?;
            }
            Op::Pick(a, index) => {
                let mut dx = Tensor::zeros(self.value(*a).shape());
                dx.data_mut()[*index] = g.item()?;
                acc(adj, *a, dx)?;
            }
            Op::DivScalar(a, b) => {
                let gv = g.item()?;
                let num = self.value(*a).item()?;
                let den = self.value(*b).item()?;
                acc(adj, *a, Tensor::scalar(gv / den))?;
                acc(adj, *b, Tensor::scalar(-gv * num / (den * den)))?;
            }
            Op::MulScalar(a, s) => {
                let factor = self.value(*s).item()?;
                acc(adj, *a, tensor::scale(g, factor))?;
                let inner = tensor::mul_elem(g, self.value(*a))?;
                acc(adj, *s, Tensor::scalar(inner.data().iter().sum()))?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = g.as_rows()?;
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += g.data()[r * cols + c];
        }
    }
    Ok(Tensor::vector(out))
}

fn broadcast_mul_row(g: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (rows, cols) = g.as_rows()?;
    let mut out = g.clone();
    for r in 0..rows {
        for c in 0..cols {
            out.data_mut()[r * cols + c] *= row.data()[c];
        }
    }
    Ok(out)
}

fn layer_norm_backward(x: &Tensor, y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.as_rows()?;
    let mut dx = x.clone();
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + tensor::LAYER_NORM_EPS).sqrt();
        let g_mean = gr.iter().sum::<f64>() / cols as f64;
        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        for c in 0..cols {
            dx.data_mut()[r * cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
        }
    }
    Ok(dx)
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.as_rows()?;
    let mut dx = y.clone();
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            dx.data_mut()[r * cols + c] = yr[c] * (gr[c] - inner);
        }
    }
    Ok(dx)
}

fn log_softmax_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.as_rows()?;
    let mut dx = y.clone();
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let g_sum: f64 = gr.iter().sum();
        for c in 0..cols {
            dx.data_mut()[r * cols + c] = gr[c] - yr[c].exp() * g_sum;
        }
    }
    Ok(dx)
}

fn l2_normalize_backward(x: &Tensor, y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.as_rows()?;
    let mut dx = x.clone();
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &g.data()[r * cols..(r + 1) * cols];
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            dx.data_mut()[r * cols + c] = (gr[c] - yr[c] * yg) / norm;
        }
    }
    Ok(dx)
}

/// Evaluate a scalar function of the given parameter tensors and return its
/// value together with one gradient tensor per parameter (same shapes).
pub fn evaluate_with_gradients<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out, &vars)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_stream;

    /// Central finite differences of `f` over every entry of every parameter.
    fn finite_diff<F>(params: &[Tensor], f: &F, h: f64) -> Vec<Tensor>
    where
        F: Fn(&[Tensor]) -> f64,
    {
        let mut grads = Vec::with_capacity(params.len());
        for pi in 0..params.len() {
            let mut grad = Tensor::zeros(params[pi].shape());
            for j in 0..params[pi].len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[j] -= h;
                grad.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            grads.push(grad);
        }
        grads
    }

    fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
        let mut worst = 0.0_f64;
        for (a, n) in analytic.iter().zip(numeric) {
            for (&av, &nv) in a.data().iter().zip(n.data()) {
                let denom = av.abs().max(nv.abs()).max(1e-6);
                worst = worst.max((av - nv).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn square_has_analytic_gradient() {
        let w = Tensor::vector(vec![3.0]);
        let (value, grads) = evaluate_with_gradients(&[w], |t, vars| t.dot(vars[0], vars[0]))
            .unwrap();
        assert_eq!(value, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        // -log softmax(logits)[target]; at uniform logits the closed form
        // gradient is softmax - onehot = [1/S .. 1/S] with -(S-1)/S at target.
        let s = 4;
        let target = 1;
        let logits = Tensor::vector(vec![0.0; s]);
        let (value, grads) = evaluate_with_gradients(&[logits], |t, vars| {
            let lsm = t.log_softmax_rows(vars[0])?;
            let picked = t.pick(lsm, target)?;
            Ok(t.scale(picked, -1.0))
        })
        .unwrap();
        assert!((value - (s as f64).ln()).abs() < 1e-12);
        for (k, &gv) in grads[0].data().iter().enumerate() {
            let expect = if k == target {
                1.0 / s as f64 - 1.0
            } else {
                1.0 / s as f64
            };
            assert!((gv - expect).abs() < 1e-12, "grad[{k}] = {gv}");
        }
    }

    #[test]
    fn random_compositions_match_finite_differences() {
        // Three-op chains over d=8 inputs drawn from [-2, 2].
        let d = 8;
        let mut stream = seeded_stream(2024, "compose");
        for case in 0..40 {
            let a = {
                let mut t = Tensor::zeros(&[d, d]);
                for v in t.data_mut() {
                    *v = stream.uniform() * 4.0 - 2.0;
                }
                t
            };
            let b = {
                let mut t = Tensor::zeros(&[d, d]);
                for v in t.data_mut() {
                    *v = stream.uniform() * 4.0 - 2.0;
                }
                t
            };
            let ops: Vec<usize> = (0..3).map(|_| stream.index(6)).collect();

            let build = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
                let mut x = vars[0];
                for &op in &ops {
                    x = match op {
                        0 => t.gelu(x),
                        1 => t.layer_norm_rows(x)?,
                        2 => t.softmax_rows(x)?,
                        3 => t.matmul(x, vars[1])?,
                        4 => t.add(x, vars[1])?,
                        5 => t.mul_elem(x, vars[1])?,
                        _ => unreachable!(),
                    };
                }
                Ok(t.mean_all(x))
            };

            let params = vec![a.clone(), b.clone()];
            let (_, analytic) = evaluate_with_gradients(&params, build).unwrap();
            let scalar_fn = |ps: &[Tensor]| -> f64 {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
                let out = build(&mut tape, &vars).unwrap();
                tape.value(out).item().unwrap()
            };
            let numeric = finite_diff(&params, &scalar_fn, 1e-5);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "case {case} ops {ops:?}: max rel err {err:e}");
        }
    }

    #[test]
    fn pooled_normalized_chain_matches_finite_differences() {
        let mut stream = seeded_stream(7, "chain");
        let x = stream.normal_tensor(&[3, 5], 1.0);
        let w = stream.normal_tensor(&[5, 5], 0.5);
        let build = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
            let h = t.matmul(vars[0], vars[1])?;
            let h = t.gelu(h);
            let pooled = t.mean_pool_rows(h)?;
            let unit = t.l2_normalize_rows(pooled)?;
            let d = t.dot(unit, unit)?;
            let sm = t.softmax_rows(unit)?;
            let p0 = t.pick(sm, 0)?;
            t.add(d, p0)
        };
        let params = vec![x, w];
        let (_, analytic) = evaluate_with_gradients(&params, build).unwrap();
        let scalar_fn = |ps: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).item().unwrap()
        };
        let numeric = finite_diff(&params, &scalar_fn, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x, &[x]), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        let (_, grads) = evaluate_with_gradients(&[a, b], |t, vars| t.dot(vars[0], vars[0]))
            .unwrap();
        assert_eq!(grads[1].data(), &[0.0]);
    }
}
