//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! The tape is a Wengert list: forward operations append nodes, and
//! [`GradTape::backward`] walks the list once in reverse creation order
//! (which is reverse topological order, since inputs always exist before
//! outputs). A tape lives for one training batch and is confined to one
//! client task; it is never shared across threads.

use std::cell::RefCell;

use super::{dot, logsumexp, matmul, norm2, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Tanh {
        a: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
        split: usize,
    },
    /// `out[i][j] = 1 - cos(row_i(a), anchor_j)` against constant anchors.
    CosineDistToConst {
        a: usize,
        anchors: Tensor,
        eps: f64,
    },
    /// `out[i][j] = cos(row_i(a), row_j(a))` within one trainable matrix.
    PairwiseCosine {
        a: usize,
        eps: f64,
    },
    /// `-(1/N) Σ_i Σ_j targets[i][j] · log softmax(logits[i])[j]`.
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Tensor,
    },
    /// `(1/N) Σ_i (1 - cos(row_i(a), row_i(b)))`.
    RowCosineMean {
        a: usize,
        b: usize,
        eps: f64,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sum {
        a: usize,
    },
    SumSquares {
        a: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so that one backward sweep yields
/// gradients with respect to every input leaf.
pub struct GradTape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            idx: nodes.len() - 1,
        }
    }

    /// Registers a tensor as an input leaf.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Current value of a node (cloned).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            matmul(&nodes[a.idx].value, &nodes[b.idx].value)?
        };
        Ok(self.push(value, Op::MatMul { a: a.idx, b: b.idx }))
    }

    /// Adds a bias row vector to every row of a matrix.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.idx].value;
            let b = &nodes[bias.idx].value;
            if m.cols() != b.data().len() {
                return Err(Error::Shape(format!(
                    "bias length {} vs {} columns",
                    b.data().len(),
                    m.cols()
                )));
            }
            let cols = m.cols();
            let data: Vec<f64> = m
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data()[i % cols])
                .collect();
            Tensor::new(m.shape(), data)?
        };
        Ok(self.push(
            value,
            Op::AddBias {
                a: a.idx,
                bias: bias.idx,
            },
        ))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.idx].value;
            Tensor::new(m.shape(), m.data().iter().map(|x| x.tanh()).collect()).unwrap()
        };
        self.push(value, Op::Tanh { a: a.idx })
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (value, split) = {
            let nodes = self.nodes.borrow();
            let left = &nodes[a.idx].value;
            (left.concat_cols(&nodes[b.idx].value)?, left.cols())
        };
        Ok(self.push(
            value,
            Op::ConcatCols {
                a: a.idx,
                b: b.idx,
                split,
            },
        ))
    }

    /// Cosine-distance matrix of trainable rows against constant anchors:
    /// `out[i][j] = 1 - cos(row_i, anchor_j)`. Values lie in [0, 2].
    pub fn cosine_dist_to_const(&self, a: Var, anchors: &Tensor, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.idx].value;
            if m.cols() != anchors.cols() {
                return Err(Error::Shape(format!(
                    "cosine distance: {} vs {} columns",
                    m.cols(),
                    anchors.cols()
                )));
            }
            let (n, k) = (m.rows(), anchors.rows());
            let mut data = Vec::with_capacity(n * k);
            for i in 0..n {
                let ri = m.row(i);
                let ni = norm2(ri).max(eps);
                for j in 0..k {
                    let aj = anchors.row(j);
                    let nj = norm2(aj).max(eps);
                    data.push(1.0 - dot(ri, aj) / (ni * nj));
                }
            }
            Tensor::new(&[n, k], data)?
        };
        Ok(self.push(
            value,
            Op::CosineDistToConst {
                a: a.idx,
                anchors: anchors.clone(),
                eps,
            },
        ))
    }

    /// Pairwise cosine-similarity matrix among the rows of one matrix.
    pub fn pairwise_cosine(&self, a: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.idx].value;
            let n = m.rows();
            let mut data = Vec::with_capacity(n * n);
            for i in 0..n {
                let ni = norm2(m.row(i)).max(eps);
                for j in 0..n {
                    let nj = norm2(m.row(j)).max(eps);
                    data.push(dot(m.row(i), m.row(j)) / (ni * nj));
                }
            }
            Tensor::new(&[n, n], data)?
        };
        Ok(self.push(value, Op::PairwiseCosine { a: a.idx, eps }))
    }

    /// Mean soft cross entropy between constant target rows and row-wise
    /// softmax of the logits. Targets are gradient-stopped by construction.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &Tensor) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let l = &nodes[logits.idx].value;
            if l.shape() != targets.shape() {
                return Err(Error::Shape(format!(
                    "cross entropy: logits {:?} vs targets {:?}",
                    l.shape(),
                    targets.shape()
                )));
            }
            l.ensure_finite("cross-entropy logits")?;
            let n = l.rows();
            let mut total = 0.0;
            for i in 0..n {
                let row = l.row(i);
                let lse = logsumexp(row);
                for (j, &t) in targets.row(i).iter().enumerate() {
                    if t != 0.0 {
                        total += t * (lse - row[j]);
                    }
                }
            }
            Tensor::scalar(total / n as f64)
        };
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: logits.idx,
                targets: targets.clone(),
            },
        ))
    }

    /// `(1/N) Σ_i (1 - cos(row_i(a), row_i(b)))` — both sides trainable.
    pub fn row_cosine_mean(&self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ma, mb) = (&nodes[a.idx].value, &nodes[b.idx].value);
            if ma.shape() != mb.shape() {
                return Err(Error::Shape(format!(
                    "row cosine: {:?} vs {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
            let n = ma.rows();
            let mut total = 0.0;
            for i in 0..n {
                let (ra, rb) = (ma.row(i), mb.row(i));
                let c = dot(ra, rb) / (norm2(ra).max(eps) * norm2(rb).max(eps));
                total += 1.0 - c;
            }
            Tensor::scalar(total / n as f64)
        };
        Ok(self.push(
            value,
            Op::RowCosineMean {
                a: a.idx,
                b: b.idx,
                eps,
            },
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.idx].value;
            Tensor::new(m.shape(), m.data().iter().map(|x| c * x).collect()).unwrap()
        };
        self.push(value, Op::Scale { a: a.idx, c })
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ma, mb) = (&nodes[a.idx].value, &nodes[b.idx].value);
            if ma.shape() != mb.shape() {
                return Err(Error::Shape(format!(
                    "add: {:?} vs {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
            let data = ma
                .data()
                .iter()
                .zip(mb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(ma.shape(), data)?
        };
        Ok(self.push(value, Op::Add { a: a.idx, b: b.idx }))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.idx].value.data().iter().sum())
        };
        self.push(value, Op::Sum { a: a.idx })
    }

    pub fn sum_squares(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.idx].value.data().iter().map(|x| x * x).sum())
        };
        self.push(value, Op::SumSquares { a: a.idx })
    }

    /// Propagates adjoints from a scalar output back to every node,
    /// visiting nodes exactly once in reverse topological order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.idx].value.data().len() != 1 {
            return Err(Error::Contract("backward requires a scalar output".into()));
        }
        let mut adj: Vec<Vec<f64>> = nodes
            .iter()
            .map(|n| vec![0.0; n.value.data().len()])
            .collect();
        adj[output.idx][0] = 1.0;

        for idx in (0..nodes.len()).rev() {
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA += g @ Bᵀ ; dB += Aᵀ @ g
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv.data()[l * n + j];
                            }
                            adj[*a][i * k + l] += acc;
                        }
                    }
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.data()[i * k + l] * g[i * n + j];
                            }
                            adj[*b][l * n + j] += acc;
                        }
                    }
                }
                Op::AddBias { a, bias } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let cols = nodes[*a].value.cols();
                    for (i, gi) in g.iter().enumerate() {
                        adj[*a][i] += gi;
                        adj[*bias][i % cols] += gi;
                    }
                }
                Op::Tanh { a } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let out = nodes[idx].value.data();
                    for (i, gi) in g.iter().enumerate() {
                        adj[*a][i] += gi * (1.0 - out[i] * out[i]);
                    }
                }
                Op::ConcatCols { a, b, split } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let total = nodes[idx].value.cols();
                    let right = total - split;
                    for row in 0..nodes[idx].value.rows() {
                        for c in 0..*split {
                            adj[*a][row * split + c] += g[row * total + c];
                        }
                        for c in 0..right {
                            adj[*b][row * right + c] += g[row * total + split + c];
                        }
                    }
                }
                Op::CosineDistToConst { a, anchors, eps } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let m = &nodes[*a].value;
                    let (n, d, k) = (m.rows(), m.cols(), anchors.rows());
                    for i in 0..n {
                        let ri = m.row(i);
                        let raw = norm2(ri);
                        let ni = raw.max(*eps);
                        let active = raw > *eps;
                        for j in 0..k {
                            let gij = g[i * k + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let aj = anchors.row(j);
                            let nj = norm2(aj).max(*eps);
                            let s = dot(ri, aj);
                            for c in 0..d {
                                let mut grad = -aj[c] / (ni * nj);
                                if active {
                                    grad += s * ri[c] / (ni * ni * ni * nj);
                                }
                                adj[*a][i * d + c] += gij * grad;
                            }
                        }
                    }
                }
                Op::PairwiseCosine { a, eps } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let m = &nodes[*a].value;
                    let (n, d) = (m.rows(), m.cols());
                    let out = nodes[idx].value.data();
                    let norms: Vec<(f64, bool)> = (0..n)
                        .map(|i| {
                            let raw = norm2(m.row(i));
                            (raw.max(*eps), raw > *eps)
                        })
                        .collect();
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let (ni, act_i) = norms[i];
                            let (nj, act_j) = norms[j];
                            let oij = out[i * n + j];
                            if i == j {
                                if !act_i {
                                    // below eps the denominator is constant
                                    for c in 0..d {
                                        adj[*a][i * d + c] += gij * 2.0 * m.row(i)[c] / (ni * ni);
                                    }
                                }
                                // otherwise cos(x, x) ≡ 1, zero gradient
                                continue;
                            }
                            for c in 0..d {
                                let mut gi = m.row(j)[c] / (ni * nj);
                                if act_i {
                                    gi -= oij * m.row(i)[c] / (ni * ni);
                                }
                                adj[*a][i * d + c] += gij * gi;
                                let mut gj = m.row(i)[c] / (ni * nj);
                                if act_j {
                                    gj -= oij * m.row(j)[c] / (nj * nj);
                                }
                                adj[*a][j * d + c] += gij * gj;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let go = g[0];
                    let l = &nodes[*logits].value;
                    let (n, k) = (l.rows(), l.cols());
                    for i in 0..n {
                        let p = softmax(l.row(i)).expect("finite logits recorded on tape");
                        let row_mass: f64 = targets.row(i).iter().sum();
                        for j in 0..k {
                            adj[*logits][i * k + j] +=
                                go * (p[j] * row_mass - targets.row(i)[j]) / n as f64;
                        }
                    }
                }
                Op::RowCosineMean { a, b, eps } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let go = g[0];
                    let (ma, mb) = (&nodes[*a].value, &nodes[*b].value);
                    let (n, d) = (ma.rows(), ma.cols());
                    for i in 0..n {
                        let (ra, rb) = (ma.row(i), mb.row(i));
                        let raw_a = norm2(ra);
                        let raw_b = norm2(rb);
                        let na = raw_a.max(*eps);
                        let nb = raw_b.max(*eps);
                        let c = dot(ra, rb) / (na * nb);
                        let scale = -go / n as f64;
                        for x in 0..d {
                            let mut ga = rb[x] / (na * nb);
                            if raw_a > *eps {
                                ga -= c * ra[x] / (na * na);
                            }
                            adj[*a][i * d + x] += scale * ga;
                            let mut gb = ra[x] / (na * nb);
                            if raw_b > *eps {
                                gb -= c * rb[x] / (nb * nb);
                            }
                            adj[*b][i * d + x] += scale * gb;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let g = std::mem::take(&mut adj[idx]);
                    for (i, gi) in g.iter().enumerate() {
                        adj[*a][i] += c * gi;
                    }
                }
                Op::Add { a, b } => {
                    let g = std::mem::take(&mut adj[idx]);
                    for (i, gi) in g.iter().enumerate() {
                        adj[*a][i] += gi;
                        adj[*b][i] += gi;
                    }
                }
                Op::Sum { a } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let go = g[0];
                    for x in adj[*a].iter_mut() {
                        *x += go;
                    }
                }
                Op::SumSquares { a } => {
                    let g = std::mem::take(&mut adj[idx]);
                    let go = g[0];
                    let av = nodes[*a].value.data();
                    for (i, x) in adj[*a].iter_mut().enumerate() {
                        *x += 2.0 * av[i] * go;
                    }
                }
            }
        }

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        drop(nodes);
        let tensors = adj
            .into_iter()
            .zip(shapes)
            .map(|(data, shape)| {
                if data.is_empty() {
                    // taken by mem::take during the sweep; interior nodes only
                    Tensor::zeros(&shape)
                } else {
                    Tensor::new(&shape, data).expect("adjoint shape")
                }
            })
            .collect();
        Ok(Gradients { adjoints: tensors })
    }
}

/// Per-node adjoints from one backward sweep.
pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `v`.
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.adjoints[v.idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NORM_EPS;

    #[test]
    fn matmul_forward_matches_plain() {
        let tape = GradTape::new();
        let a = tape.input(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.input(Tensor::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let plain = matmul(&tape.value(a), &tape.value(b)).unwrap();
        assert_eq!(tape.value(c), plain);
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transpose() {
        // d/dA sum(A@B) = ones(m,n) @ Bᵀ
        let tape = GradTape::new();
        let a = tape.input(Tensor::new(&[2, 3], vec![0.5, -1., 2., 0.1, 0.7, -0.3]).unwrap());
        let bt = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = tape.input(bt.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.wrt(a);
        for i in 0..2 {
            for l in 0..3 {
                let expect: f64 = (0..2).map(|j| bt.at(l, j)).sum();
                assert!((ga.at(i, l) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = GradTape::new();
        let a = tape.input(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = GradTape::new();
        let x = tape.input(Tensor::new(&[3], vec![1., 2., 3.]).unwrap());
        let c = tape.input(Tensor::scalar(5.0));
        let out = tape.scale(c, 1.0);
        let grads = tape.backward(out).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn replay_is_deterministic() {
        let build = || {
            let tape = GradTape::new();
            let x = tape.input(Tensor::new(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
            let t = tape.tanh(x);
            let s = tape.sum_squares(t);
            let g = tape.backward(s).unwrap();
            g.wrt(x).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn cosine_dist_parallel_orthogonal_antiparallel() {
        let tape = GradTape::new();
        let z = tape.input(Tensor::new(&[3, 2], vec![1., 0., 0., 2., -3., 0.]).unwrap());
        let anchors = Tensor::new(&[1, 2], vec![5.0, 0.0]).unwrap();
        let d = tape.cosine_dist_to_const(z, &anchors, NORM_EPS).unwrap();
        let v = tape.value(d);
        assert!((v.at(0, 0) - 0.0).abs() < 1e-12); // parallel
        assert!((v.at(1, 0) - 1.0).abs() < 1e-12); // orthogonal
        assert!((v.at(2, 0) - 2.0).abs() < 1e-12); // anti-parallel
    }
}
