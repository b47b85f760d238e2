//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! Every intermediate of the decoder forward pass lives on a [`Tape`] as an
//! `Array2<f64>`; vectors are `1 x D` or `N x 1`. Ops push one node each and
//! store a backward closure, so a single reverse sweep yields gradients with
//! respect to every leaf. Shape violations are programmer errors and panic.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Array2<f64>, &Array2<f64>, &[&Array2<f64>]) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the leaf never influenced the root.
    pub fn of(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(v).dim()))
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[(0, 0)]
    }

    fn push(
        &mut self,
        value: Array2<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p| vec![g.dot(&p[1].t()), p[0].t().dot(g)])),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, _| vec![g.t().to_owned()])),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, vec![a.0], Some(Box::new(move |_, g, _| vec![g * k])))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, vec![a.0], Some(Box::new(|_, g, _| vec![g.clone()])))
    }

    /// Broadcast-add a `1 x C` row onto every row of an `R x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let c = self.value(a).ncols();
        assert_eq!(self.value(row).dim(), (1, c));
        let value = self.value(a) + self.value(row);
        self.push(
            value,
            vec![a.0, row.0],
            Some(Box::new(|_, g, _| {
                vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))]
            })),
        )
    }

    /// Broadcast-multiply every row of an `R x C` matrix by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, c));
        let value = self.value(a) * self.value(row);
        self.push(
            value,
            vec![a.0, row.0],
            Some(Box::new(|_, g, p| {
                vec![g * p[1], (g * p[0]).sum_axis(Axis(0)).insert_axis(Axis(0))]
            })),
        )
    }

    /// Multiply a whole matrix by a `1 x 1` scalar node.
    pub fn mul_scalar_node(&mut self, a: Var, k: Var) -> Var {
        assert_eq!(self.value(k).dim(), (1, 1));
        let value = self.value(a) * self.value(k)[(0, 0)];
        self.push(
            value,
            vec![a.0, k.0],
            Some(Box::new(|_, g, p| {
                let da = g * p[1][(0, 0)];
                let dk = Array2::from_elem((1, 1), (g * p[0]).sum());
                vec![da, dk]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|y, g, _| vec![g * &(y * &y.mapv(|v| 1.0 - v))])),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, vec![a.0], Some(Box::new(|y, g, _| vec![g * y])))
    }

    /// `ln(max(x, eps))`; the clamp keeps losses finite at saturated scores.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(eps).ln());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, p| {
                vec![g / &p[0].mapv(|x| x.max(eps))]
            })),
        )
    }

    /// `sqrt(x + eps)`, smooth at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| (x + eps).sqrt());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|y, g, _| vec![g / &(y * 2.0)])),
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / x);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|y, g, _| vec![-(g * &(y * y))])),
        )
    }

    /// Elementwise power with constant exponent; requires positive base.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, pv| {
                vec![g * &pv[0].mapv(|x| p * x.powf(p - 1.0))]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, p| vec![g * &p[0].mapv(f64::signum)])),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, p| {
                let d = p[0].mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                });
                vec![g * &d]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_val);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, p| vec![g * &p[0].mapv(gelu_grad)])),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|y, g, _| {
                let mut da = g * y;
                for (mut da_row, y_row) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot = da_row.sum();
                    da_row
                        .iter_mut()
                        .zip(y_row.iter())
                        .for_each(|(d, &yv)| *d -= dot * yv);
                }
                vec![da]
            })),
        )
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` with
    /// population variance. Affine gain/bias are separate ops.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            row.mapv_inplace(|v| v * s);
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |y, g, _| {
                let c = y.ncols() as f64;
                let mut da = Array2::zeros(y.dim());
                for ((mut da_row, y_row), (g_row, &s)) in da
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows().into_iter().zip(inv_std.iter()))
                {
                    let g_mean = g_row.sum() / c;
                    let gy_mean = g_row
                        .iter()
                        .zip(y_row.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c;
                    for ((d, &gv), &yv) in da_row.iter_mut().zip(g_row.iter()).zip(y_row.iter()) {
                        *d = s * (gv - g_mean - yv * gy_mean);
                    }
                }
                vec![da]
            })),
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate![Axis(0), self.value(a).view(), self.value(b).view()];
        let split = self.value(a).nrows();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, _| {
                vec![
                    g.slice(s![..split, ..]).to_owned(),
                    g.slice(s![split.., ..]).to_owned(),
                ]
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        let split = self.value(a).ncols();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, _| {
                vec![
                    g.slice(s![.., ..split]).to_owned(),
                    g.slice(s![.., split..]).to_owned(),
                ]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let full = self.value(a).dim();
        let value = self.value(a).slice(s![r0..r1, ..]).to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let mut da = Array2::zeros(full);
                da.slice_mut(s![r0..r1, ..]).assign(g);
                vec![da]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let full = self.value(a).dim();
        let value = self.value(a).slice(s![.., c0..c1]).to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let mut da = Array2::zeros(full);
                da.slice_mut(s![.., c0..c1]).assign(g);
                vec![da]
            })),
        )
    }

    /// Select rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((idx.len(), x.ncols()));
        for (out, &i) in value.rows_mut().into_iter().zip(idx.iter()) {
            x.row(i).assign_to(out);
        }
        let full = x.dim();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let mut da = Array2::zeros(full);
                for (g_row, &i) in g.rows().into_iter().zip(idx.iter()) {
                    let mut dst = da.row_mut(i);
                    dst += &g_row;
                }
                vec![da]
            })),
        )
    }

    /// Row sums: `R x C -> R x 1`.
    pub fn rowsum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, p| {
                let mut da = Array2::zeros(p[0].dim());
                for (mut da_row, g_row) in da.rows_mut().into_iter().zip(g.rows()) {
                    da_row.fill(g_row[0]);
                }
                vec![da]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, g, p| {
                vec![Array2::from_elem(p[0].dim(), g[(0, 0)])]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, p| {
                vec![Array2::from_elem(p[0].dim(), g[(0, 0)] / n)]
            })),
        )
    }

    /// Stable log-sum-exp of an `N x 1` column, yielding `1 x 1`.
    pub fn lse_col(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|&v| (v - m).exp()).sum();
        let value = Array2::from_elem((1, 1), m + sum.ln());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, g, p| {
                let soft = p[0].mapv(|v| (v - m).exp() / sum);
                vec![soft * g[(0, 0)]]
            })),
        )
    }

    /// Reverse sweep from a root node; returns gradients for every node that
    /// influenced it.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let pvals: Vec<&Array2<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = back(&node.value, &g, &pvals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
