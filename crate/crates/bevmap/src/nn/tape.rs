use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type Pullback = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<(usize, Pullback)>,
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
///
/// A tape records one forward pass; `backward` walks the nodes in reverse
/// creation order accumulating gradients. Forward math delegates to the plain
/// functions in `tensor`, so recomputing an op outside the tape gives
/// bit-identical values.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, Pullback)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents });
        Var { id: nodes.len() - 1 }
    }

    /// Differentiable input (parameters).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, vec![])
    }

    /// Non-differentiable input (data, detached predictions). Identical to a
    /// leaf structurally; callers simply never read its gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, vec![])
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    // ------------------------------------------------------------------
    // elementwise / scalar ops
    // ------------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.add(&bv);
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Tensor| g.clone())),
                (b.id, Box::new(|g: &Tensor| g.clone())),
            ],
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.zip(&bv, |x, y| x - y);
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Tensor| g.clone())),
                (b.id, Box::new(|g: &Tensor| g.scale(-1.0))),
            ],
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.zip(&bv, |x, y| x * y);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            vec![
                (a.id, Box::new(move |g: &Tensor| g.zip(&bc, |gv, y| gv * y))),
                (b.id, Box::new(move |g: &Tensor| g.zip(&ac, |gv, x| gv * x))),
            ],
        )
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![(a.id, Box::new(move |g: &Tensor| g.scale(s)))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, vec![(a.id, Box::new(|g: &Tensor| g.clone()))])
    }

    /// Absolute value with subgradient 0 at the kink.
    pub fn abs(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(f64::abs);
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    g.zip(&av, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                }),
            )],
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        let oc = out.clone();
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| g.zip(&oc, |gv, y| gv * y * (1.0 - y))),
            )],
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(tensor::gelu);
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| g.zip(&av, |gv, x| gv * tensor::gelu_deriv(x))),
            )],
        )
    }

    /// Logit transform of values clamped into `[eps, 1-eps]`. Gradient is zero
    /// where the clamp is active.
    pub fn inverse_sigmoid(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let out = av.map(|p| tensor::inverse_sigmoid(p, eps));
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    g.zip(&av, |gv, p| {
                        if p <= eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            gv / (p * (1.0 - p))
                        }
                    })
                }),
            )],
        )
    }

    /// Per-column affine map `out[:,c] = a[:,c] * scale[c] + shift[c]` with
    /// constant coefficients.
    pub fn affine_cols(&self, a: Var, scale: Vec<f64>, shift: Vec<f64>) -> Var {
        let av = self.value(a);
        let c = av.shape()[1];
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = Tensor::zeros(av.shape().to_vec());
        for (i, v) in av.data().iter().enumerate() {
            let col = i % c;
            out.data_mut()[i] = v * scale[col] + shift[col];
        }
        let sc = scale.clone();
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let c = sc.len();
                    let mut out = g.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v *= sc[i % c];
                    }
                    out
                }),
            )],
        )
    }

    // ------------------------------------------------------------------
    // matrix ops
    // ------------------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = tensor::matmul(&av, &bv);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            vec![
                (a.id, Box::new(move |g: &Tensor| tensor::matmul_nt(g, &bc))),
                (b.id, Box::new(move |g: &Tensor| tensor::matmul_tn(&ac, g))),
            ],
        )
    }

    /// `a · bᵀ` for `a [m,k]`, `b [n,k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = tensor::matmul_nt(&av, &bv);
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            vec![
                // d/da = g [m,n] · b [n,k]
                (a.id, Box::new(move |g: &Tensor| tensor::matmul(g, &bc))),
                // d/db = gᵀ [n,m] · a [m,k]
                (b.id, Box::new(move |g: &Tensor| tensor::matmul_tn(g, &ac))),
            ],
        )
    }

    /// Add a row vector `b [c]` to every row of `a [r,c]`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        assert_eq!(bv.len(), c, "bias length mismatch");
        let mut out = av.as_ref().clone();
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] += bv.data()[j];
            }
        }
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Tensor| g.clone())),
                (
                    b.id,
                    Box::new(move |g: &Tensor| {
                        let (r, c) = (g.shape()[0], g.shape()[1]);
                        let mut acc = Tensor::zeros(vec![c]);
                        for i in 0..r {
                            for j in 0..c {
                                acc.data_mut()[j] += g.data()[i * c + j];
                            }
                        }
                        acc
                    }),
                ),
            ],
        )
    }

    /// `out[i*n + j, :] = a[i, :] + b[j, :]` for `a [m,d]`, `b [n,d]`.
    ///
    /// This is the hierarchical instance-plus-point query construction.
    pub fn outer_row_add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, d) = (av.shape()[0], av.shape()[1]);
        let (n, d2) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(d, d2, "outer_row_add dims {d} vs {d2}");
        let mut out = Tensor::zeros(vec![m * n, d]);
        for i in 0..m {
            for j in 0..n {
                let orow = &mut out.data_mut()[(i * n + j) * d..(i * n + j + 1) * d];
                for k in 0..d {
                    orow[k] = av.data()[i * d + k] + bv.data()[j * d + k];
                }
            }
        }
        self.push(
            out,
            vec![
                (
                    a.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = Tensor::zeros(vec![m, d]);
                        for i in 0..m {
                            for j in 0..n {
                                for k in 0..d {
                                    acc.data_mut()[i * d + k] += g.data()[(i * n + j) * d + k];
                                }
                            }
                        }
                        acc
                    }),
                ),
                (
                    b.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = Tensor::zeros(vec![n, d]);
                        for i in 0..m {
                            for j in 0..n {
                                for k in 0..d {
                                    acc.data_mut()[j * d + k] += g.data()[(i * n + j) * d + k];
                                }
                            }
                        }
                        acc
                    }),
                ),
            ],
        )
    }

    pub fn slice_rows(&self, a: Var, r0: usize, r1: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        assert!(r0 <= r1 && r1 <= r, "slice_rows {r0}..{r1} of {r}");
        let out = Tensor::new(vec![r1 - r0, c], av.data()[r0 * c..r1 * c].to_vec());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![r, c]);
                    acc.data_mut()[r0 * c..r1 * c].copy_from_slice(g.data());
                    acc
                }),
            )],
        )
    }

    pub fn slice_cols(&self, a: Var, c0: usize, c1: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        assert!(c0 <= c1 && c1 <= c, "slice_cols {c0}..{c1} of {c}");
        let w = c1 - c0;
        let mut out = Tensor::zeros(vec![r, w]);
        for i in 0..r {
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&av.data()[i * c + c0..i * c + c1]);
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        acc.data_mut()[i * c + c0..i * c + c1]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc
                }),
            )],
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let c = values[0].shape()[1];
        let total: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut out = Tensor::zeros(vec![total, c]);
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for v in &values {
            let r = v.shape()[0];
            out.data_mut()[offset * c..(offset + r) * c].copy_from_slice(v.data());
            spans.push((offset, r));
            offset += r;
        }
        let parents = parts
            .iter()
            .zip(spans)
            .map(|(&p, (off, r))| {
                let pb: Pullback = Box::new(move |g: &Tensor| {
                    let c = g.shape()[1];
                    Tensor::new(vec![r, c], g.data()[off * c..(off + r) * c].to_vec())
                });
                (p.id, pb)
            })
            .collect();
        self.push(out, parents)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let r = values[0].shape()[0];
        let total: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut out = Tensor::zeros(vec![r, total]);
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for v in &values {
            let w = v.shape()[1];
            for i in 0..r {
                out.data_mut()[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            spans.push((offset, w));
            offset += w;
        }
        let parents = parts
            .iter()
            .zip(spans)
            .map(|(&p, (off, w))| {
                let pb: Pullback = Box::new(move |g: &Tensor| {
                    let (r, total) = (g.shape()[0], g.shape()[1]);
                    let mut acc = Tensor::zeros(vec![r, w]);
                    for i in 0..r {
                        acc.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                    }
                    acc
                });
                (p.id, pb)
            })
            .collect();
        self.push(out, parents)
    }

    /// Select rows by index (duplicates allowed); pullback scatter-adds.
    pub fn gather_rows(&self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = Tensor::zeros(vec![indices.len(), c]);
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < r, "gather index {i} out of {r}");
            out.data_mut()[k * c..(k + 1) * c].copy_from_slice(av.row(i));
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![r, c]);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            acc.data_mut()[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc
                }),
            )],
        )
    }

    /// Mean over consecutive row groups of size `group`: `[m*group, c] -> [m, c]`.
    pub fn mean_pool_rows(&self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        assert!(group > 0 && r % group == 0, "pool group {group} on {r} rows");
        let m = r / group;
        let mut out = Tensor::zeros(vec![m, c]);
        for i in 0..m {
            for k in 0..group {
                let row = av.row(i * group + k);
                for j in 0..c {
                    out.data_mut()[i * c + j] += row[j];
                }
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= group as f64;
            }
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![r, c]);
                    let inv = 1.0 / group as f64;
                    for i in 0..m {
                        for k in 0..group {
                            for j in 0..c {
                                acc.data_mut()[(i * group + k) * c + j] += g.data()[i * c + j] * inv;
                            }
                        }
                    }
                    acc
                }),
            )],
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = tensor::softmax_rows(&av);
        let oc = Rc::new(out.clone());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    // ds_i = s_i * (g_i - sum_j g_j s_j)
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut acc = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        let srow = oc.row(i);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                        let arow = &mut acc.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            arow[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    acc
                }),
            )],
        )
    }

    /// Row-wise layer norm with learnable gain/bias.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = self.value(a);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut normed = Tensor::zeros(vec![r, c]);
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                normed.data_mut()[i * c + j] = (row[j] - mean) * istd;
            }
        }
        let mut out = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] = normed.at2(i, j) * gv.data()[j] + bv.data()[j];
            }
        }
        let normed = Rc::new(normed);
        let (n1, n2) = (Rc::clone(&normed), Rc::clone(&normed));
        let gvc = Rc::clone(&gv);
        let inv_std = Rc::new(inv_std);
        self.push(
            out,
            vec![
                (
                    a.id,
                    Box::new(move |g: &Tensor| {
                        let (r, c) = (g.shape()[0], g.shape()[1]);
                        let mut acc = Tensor::zeros(vec![r, c]);
                        for i in 0..r {
                            // dx = istd/c * (c*gy - sum(gy) - xhat * sum(gy*xhat)),
                            // gy = g * gamma
                            let xh = n1.row(i);
                            let grow = &g.data()[i * c..(i + 1) * c];
                            let mut sum_gy = 0.0;
                            let mut sum_gy_xh = 0.0;
                            for j in 0..c {
                                let gy = grow[j] * gvc.data()[j];
                                sum_gy += gy;
                                sum_gy_xh += gy * xh[j];
                            }
                            let istd = inv_std[i];
                            let arow = &mut acc.data_mut()[i * c..(i + 1) * c];
                            for j in 0..c {
                                let gy = grow[j] * gvc.data()[j];
                                arow[j] =
                                    istd * (gy - sum_gy / c as f64 - xh[j] * sum_gy_xh / c as f64);
                            }
                        }
                        acc
                    }),
                ),
                (
                    gamma.id,
                    Box::new(move |g: &Tensor| {
                        let (r, c) = (g.shape()[0], g.shape()[1]);
                        let mut acc = Tensor::zeros(vec![c]);
                        for i in 0..r {
                            for j in 0..c {
                                acc.data_mut()[j] += g.data()[i * c + j] * n2.at2(i, j);
                            }
                        }
                        acc
                    }),
                ),
                (
                    beta.id,
                    Box::new(move |g: &Tensor| {
                        let (r, c) = (g.shape()[0], g.shape()[1]);
                        let mut acc = Tensor::zeros(vec![c]);
                        for i in 0..r {
                            for j in 0..c {
                                acc.data_mut()[j] += g.data()[i * c + j];
                            }
                        }
                        acc
                    }),
                ),
            ],
        )
    }

    /// Sinusoidal features of `[n,2]` locations (see `tensor::sin_cos_features`).
    pub fn sin_cos_features(&self, a: Var, pairs: usize, temperature: f64) -> Var {
        let av = self.value(a);
        let out = tensor::sin_cos_features(&av, pairs, temperature);
        let freqs: Vec<f64> = (0..pairs)
            .map(|m| 1.0 / temperature.powf(m as f64 / pairs as f64))
            .collect();
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let n = g.shape()[0];
                    let dim = 4 * freqs.len();
                    let pairs = freqs.len();
                    let mut acc = Tensor::zeros(vec![n, 2]);
                    for i in 0..n {
                        let grow = &g.data()[i * dim..(i + 1) * dim];
                        let x = av.data()[i * 2];
                        let y = av.data()[i * 2 + 1];
                        let mut dx = 0.0;
                        let mut dy = 0.0;
                        for (m, &w) in freqs.iter().enumerate() {
                            dx += grow[2 * m] * w * (x * w).cos();
                            dx -= grow[2 * m + 1] * w * (x * w).sin();
                            dy += grow[2 * pairs + 2 * m] * w * (y * w).cos();
                            dy -= grow[2 * pairs + 2 * m + 1] * w * (y * w).sin();
                        }
                        acc.data_mut()[i * 2] = dx;
                        acc.data_mut()[i * 2 + 1] = dy;
                    }
                    acc
                }),
            )],
        )
    }

    // ------------------------------------------------------------------
    // reductions and losses
    // ------------------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum());
        let shape = av.shape().to_vec();
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| Tensor::filled(shape.clone(), g.data()[0])),
            )],
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let out = Tensor::scalar(av.sum() / n);
        let shape = av.shape().to_vec();
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| Tensor::filled(shape.clone(), g.data()[0] / n)),
            )],
        )
    }

    /// Sigmoid focal loss summed over all entries.
    ///
    /// `targets` is a constant 0/1 tensor the shape of `logits`. Positive
    /// entries weigh `alpha * (1-p)^gamma * -ln p`, negatives
    /// `(1-alpha) * p^gamma * -ln(1-p)`, with `p = sigmoid(logit)`.
    pub fn sigmoid_focal_sum(&self, logits: Var, targets: Tensor, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "focal target shape");
        let mut total = 0.0;
        for (&x, &t) in lv.data().iter().zip(targets.data()) {
            let p = tensor::sigmoid(x);
            // log(p) = -softplus(-x), log(1-p) = -softplus(x); stable forms
            let log_p = -softplus(-x);
            let log_1p = -softplus(x);
            if t > 0.5 {
                total += -alpha * (1.0 - p).powf(gamma) * log_p;
            } else {
                total += -(1.0 - alpha) * p.powf(gamma) * log_1p;
            }
        }
        let out = Tensor::scalar(total);
        self.push(
            out,
            vec![(
                logits.id,
                Box::new(move |g: &Tensor| {
                    let gs = g.data()[0];
                    let mut acc = Tensor::zeros(lv.shape().to_vec());
                    for (i, (&x, &t)) in lv.data().iter().zip(targets.data()).enumerate() {
                        let p = tensor::sigmoid(x);
                        let log_p = -softplus(-x);
                        let log_1p = -softplus(x);
                        let d = if t > 0.5 {
                            // d/dx of -alpha (1-p)^g ln p
                            alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p))
                        } else {
                            // d/dx of -(1-alpha) p^g ln(1-p)
                            (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_1p)
                        };
                        acc.data_mut()[i] = gs * d;
                    }
                    acc
                }),
            )],
        )
    }

    // ------------------------------------------------------------------
    // convolution (NCHW single image)
    // ------------------------------------------------------------------

    /// 2-D convolution of `input [cin,h,w]` with `kernel [cout,cin,kh,kw]`,
    /// zero padding `pad`, square stride. Bias is one value per out channel.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let iv = self.value(input);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let (cin, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (cout, cin2, kh, kw) = (
            kv.shape()[0],
            kv.shape()[1],
            kv.shape()[2],
            kv.shape()[3],
        );
        assert_eq!(cin, cin2, "conv channel mismatch");
        assert_eq!(bv.len(), cout);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![cout, oh, ow]);
        {
            let od = out.data_mut();
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bv.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += iv.data()[ci * h * w + iy as usize * w + ix as usize]
                                        * kv.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        od[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let (ic, kc) = (Rc::clone(&iv), Rc::clone(&kv));
        self.push(
            out,
            vec![
                (
                    input.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = Tensor::zeros(vec![cin, h, w]);
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g.data()[(co * oh + oy) * ow + ox];
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                acc.data_mut()[ci * h * w
                                                    + iy as usize * w
                                                    + ix as usize] += gv
                                                    * kc.data()
                                                        [((co * cin + ci) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        acc
                    }),
                ),
                (
                    kernel.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = Tensor::zeros(vec![cout, cin, kh, kw]);
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g.data()[(co * oh + oy) * ow + ox];
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                acc.data_mut()
                                                    [((co * cin + ci) * kh + ky) * kw + kx] += gv
                                                    * ic.data()[ci * h * w
                                                        + iy as usize * w
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        acc
                    }),
                ),
                (
                    bias.id,
                    Box::new(move |g: &Tensor| {
                        let mut acc = Tensor::zeros(vec![cout]);
                        for co in 0..cout {
                            let mut s = 0.0;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    s += g.data()[(co * oh + oy) * ow + ox];
                                }
                            }
                            acc.data_mut()[co] = s;
                        }
                        acc
                    }),
                ),
            ],
        )
    }

    /// `[c,h,w] -> [h*w, c]` (token-major view of a feature map).
    pub fn chw_to_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = Tensor::zeros(vec![h * w, c]);
        for ch in 0..c {
            for p in 0..h * w {
                out.data_mut()[p * c + ch] = av.data()[ch * h * w + p];
            }
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Tensor| {
                    let mut acc = Tensor::zeros(vec![c, h, w]);
                    for ch in 0..c {
                        for p in 0..h * w {
                            acc.data_mut()[ch * h * w + p] = g.data()[p * c + ch];
                        }
                    }
                    acc
                }),
            )],
        )
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Gradients of scalar `loss` with respect to every node; index by the
    /// `Var`s returned when leaves were created.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (pid, pb) in &nodes[id].parents {
                let contrib = pb(&g);
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if !nodes[id].parents.is_empty() {
                // interior grads are no longer needed
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; zero-filled if the loss did not depend on it.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` wrt one leaf entry.
    fn fd_check(build: impl Fn(&Tape, &[Tensor]) -> Var, inputs: &[Tensor], tol: f64) {
        let tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&tape, inputs);
        let _ = loss;
        // rebuild fn that maps raw inputs to scalar loss value
        let eval = |ins: &[Tensor]| -> f64 {
            let t = Tape::new();
            for x in ins {
                t.leaf(x.clone());
            }
            let l = build(&t, ins);
            t.value(l).data()[0]
        };
        let tape2 = Tape::new();
        let leaves2: Vec<Var> = inputs.iter().map(|t| tape2.leaf(t.clone())).collect();
        let loss2 = build(&tape2, inputs);
        let grads = tape2.backward(loss2);
        let _ = leaves;
        for (li, input) in inputs.iter().enumerate() {
            let g = grads.get(leaves2[li], input.shape());
            for ei in 0..input.len() {
                let h = 1e-6 * (1.0 + input.data()[ei].abs());
                let mut plus = inputs.to_vec();
                plus[li].data_mut()[ei] += h;
                let mut minus = inputs.to_vec();
                minus[li].data_mut()[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let got = g.data()[ei];
                let denom = fd.abs().max(got.abs()).max(1e-8);
                assert!(
                    (fd - got).abs() / denom < tol,
                    "leaf {li} entry {ei}: fd={fd} analytic={got}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![4, 2], 1.0, &mut rng);
        fd_check(
            |t, ins| {
                let (a, b) = (t.leaf(ins[0].clone()), t.leaf(ins[1].clone()));
                let c = t.matmul(a, b);
                let s = t.sigmoid(c);
                t.sum_all(s)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::rand_uniform(vec![5, 4], 1.0, &mut rng);
        let k = Tensor::rand_uniform(vec![6, 4], 1.0, &mut rng);
        let v = Tensor::rand_uniform(vec![6, 4], 1.0, &mut rng);
        fd_check(
            |t, ins| {
                let (q, k, v) = (
                    t.leaf(ins[0].clone()),
                    t.leaf(ins[1].clone()),
                    t.leaf(ins[2].clone()),
                );
                let scores = t.mul_scalar(t.matmul_nt(q, k), 0.5);
                let p = t.softmax_rows(scores);
                let o = t.matmul(p, v);
                let g = t.gelu(o);
                t.mean_all(g)
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(vec![4, 6], 2.0, &mut rng);
        let gamma = Tensor::rand_uniform(vec![6], 1.0, &mut rng);
        let beta = Tensor::rand_uniform(vec![6], 1.0, &mut rng);
        fd_check(
            |t, ins| {
                let (x, g, b) = (
                    t.leaf(ins[0].clone()),
                    t.leaf(ins[1].clone()),
                    t.leaf(ins[2].clone()),
                );
                let n = t.layer_norm(x, g, b, 1e-5);
                let s = t.mul(n, n);
                t.sum_all(s)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn grad_hierarchy_and_pe() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins_q = Tensor::rand_uniform(vec![3, 4], 1.0, &mut rng);
        let pt_q = Tensor::rand_uniform(vec![2, 4], 1.0, &mut rng);
        let loc = Tensor::rand_uniform(vec![2, 2], 3.0, &mut rng);
        fd_check(
            |t, ins| {
                let a = t.leaf(ins[0].clone());
                let b = t.leaf(ins[1].clone());
                let l = t.leaf(ins[2].clone());
                let q = t.outer_row_add(a, b);
                let feats = t.sin_cos_features(l, 1, 50.0);
                let pooled = t.mean_pool_rows(q, 2);
                let joined = t.concat_cols(&[pooled, feats]);
                let s = t.abs(joined);
                t.sum_all(s)
            },
            &[ins_q, pt_q, loc],
            1e-5,
        );
    }

    #[test]
    fn grad_focal_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::rand_uniform(vec![4, 3], 2.0, &mut rng);
        let mut targets = Tensor::zeros(vec![4, 3]);
        targets.data_mut()[0] = 1.0;
        targets.data_mut()[4] = 1.0;
        fd_check(
            |t, ins| {
                let l = t.leaf(ins[0].clone());
                t.sigmoid_focal_sum(l, {
                    let mut t2 = Tensor::zeros(vec![4, 3]);
                    t2.data_mut()[0] = 1.0;
                    t2.data_mut()[4] = 1.0;
                    t2
                }, 0.25, 2.0)
            },
            &[logits],
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = Tensor::rand_uniform(vec![2, 6, 5], 1.0, &mut rng);
        let kernel = Tensor::rand_uniform(vec![3, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::rand_uniform(vec![3], 0.5, &mut rng);
        fd_check(
            |t, ins| {
                let (i, k, b) = (
                    t.leaf(ins[0].clone()),
                    t.leaf(ins[1].clone()),
                    t.leaf(ins[2].clone()),
                );
                let c = t.conv2d(i, k, b, 2, 1);
                let r = t.chw_to_rows(c);
                let g = t.gelu(r);
                t.mean_all(g)
            },
            &[input, kernel, bias],
            1e-5,
        );
    }

    #[test]
    fn grad_slice_concat_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(vec![6, 4], 1.0, &mut rng);
        fd_check(
            |t, ins| {
                let x = t.leaf(ins[0].clone());
                let a = t.slice_rows(x, 0, 3);
                let b = t.slice_rows(x, 3, 6);
                let c = t.concat_rows(&[b, a]);
                let g = t.gather_rows(c, vec![0, 0, 5, 2]);
                let h = t.slice_cols(g, 1, 3);
                let s = t.mul(h, h);
                t.sum_all(s)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn grad_inverse_sigmoid_roundtrip() {
        let x = Tensor::new(vec![3, 2], vec![0.2, 0.8, 0.5, 0.01, 0.99, 0.4]);
        fd_check(
            |t, ins| {
                let x = t.leaf(ins[0].clone());
                let z = t.inverse_sigmoid(x, 1e-3);
                let p = t.sigmoid(z);
                let a = t.affine_cols(p, vec![2.0, 3.0], vec![-1.0, 0.5]);
                t.sum_all(a)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x); // 9, dy/dx = 6
        let z = tape.add(y, x); // dz/dx = 7
        let grads = tape.backward(z);
        let g = grads.get(x, &[1]);
        assert!((g.data()[0] - 7.0).abs() < 1e-12);
    }
}
