//! Minimal reverse-mode differentiation over 2-D `f64` arrays, sized for the
//! toy denoiser. Nodes are appended in evaluation order, so the backward pass
//! is a reverse scan.

use ndarray::{Array2, Axis};

use crate::attention::kernels::{multi_head_attention, multi_head_attention_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a constant row vector to every row.
    AddRow(Var),
    Tanh(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize },
    /// 2x2 average pool over a row-major `(h, w)` grid of rows.
    Pool2 { x: Var, h: usize, w: usize },
    /// Nearest-neighbor 2x upsample over a row-major `(h, w)` grid of rows.
    Up2 { x: Var, h: usize, w: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: &Array2<f64>) -> Var {
        let value = self.value(a) + row;
        let g = self.grad_flag(&[a]);
        self.push(value, Op::AddRow(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let value = multi_head_attention(self.value(q), self.value(k), self.value(v), heads)
            .expect("attention operands are shaped by the network");
        let g = self.grad_flag(&[q, k, v]);
        self.push(value, Op::Attention { q, k, v, heads }, g)
    }

    pub fn pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = pool2(self.value(x), h, w);
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Pool2 { x, h, w }, g)
    }

    pub fn up2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = up2(self.value(x), h, w);
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Up2 { x, h, w }, g)
    }

    /// Gradient of `sum(seed * output)` with respect to `wrt`.
    pub fn gradient(&self, output: Var, seed: &Array2<f64>, wrt: Var) -> Array2<f64> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for i in (wrt.0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if i == wrt.0 {
                return g;
            }
            let acc = |v: Var, d: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot => *slot = Some(d),
                }
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(a, g.dot(&self.value(b).t()), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(b, self.value(a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(a, g.clone(), &mut grads);
                    acc(b, g, &mut grads);
                }
                Op::AddRow(a) => acc(a, g, &mut grads),
                Op::Tanh(a) => {
                    let d = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(a, d, &mut grads);
                }
                Op::Attention { q, k, v, heads } => {
                    let (dq, dk, dv) = multi_head_attention_backward(
                        self.value(q),
                        self.value(k),
                        self.value(v),
                        heads,
                        &g,
                    );
                    acc(q, dq, &mut grads);
                    acc(k, dk, &mut grads);
                    acc(v, dv, &mut grads);
                }
                Op::Pool2 { x, h, w } => acc(x, pool2_backward(&g, h, w), &mut grads),
                Op::Up2 { x, h, w } => acc(x, up2_backward(&g, h, w), &mut grads),
            }
        }
        grads[wrt.0].take().unwrap_or_else(|| Array2::zeros(self.value(wrt).raw_dim()))
    }
}

pub(crate) fn pool2(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array2::zeros((ho * wo, x.ncols()));
    for y in 0..ho {
        for xx in 0..wo {
            let mut row = out.row_mut(y * wo + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            row *= 0.25;
        }
    }
    out
}

fn pool2_backward(g: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let wo = w / 2;
    let mut out = Array2::zeros((h * w, g.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (y, x) = (i / w, i % w);
        row.assign(&(&g.row((y / 2) * wo + x / 2) * 0.25));
    }
    out
}

pub(crate) fn up2(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let wo = w * 2;
    let mut out = Array2::zeros((h * w * 4, x.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (y, xx) = (i / wo, i % wo);
        row.assign(&x.row((y / 2) * w + xx / 2));
    }
    out
}

fn up2_backward(g: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let wo = w * 2;
    let mut out = Array2::zeros((h * w, g.ncols()));
    for (i, row) in g.axis_iter(Axis(0)).enumerate() {
        let (y, x) = (i / wo, i % wo);
        let mut dst = out.row_mut((y / 2) * w + x / 2);
        dst += &row;
    }
    out
}
