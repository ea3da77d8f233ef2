//! Reverse-mode autodiff on a flat tape.
//!
//! Every operation appends a node holding the forward value and a closure
//! that scatters the node's output gradient into its parents' buffers.
//! Nodes are created in topological order, so the backward pass is a single
//! reverse sweep. A tape is built per training step and dropped afterwards.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&[F], &mut [Vec<F>])>;

struct Node<F: Scalar> {
    data: Rc<Tensor<F>>,
    back: Option<BackFn<F>>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by `Var`.
pub struct Grads<F: Scalar> {
    g: Vec<Vec<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> &[F] {
        &self.g[v.0]
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records forward values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].data.shape
    }

    fn rc(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes[v.0].data)
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.val(v);
        assert!(t.shape.len() <= 2, "expected matrix, got {:?}", t.shape);
        t.rows_cols()
    }

    fn needs(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    fn push_raw(&mut self, data: Rc<Tensor<F>>, needs_grad: bool, back: Option<BackFn<F>>) -> Var {
        self.nodes.push(Node {
            data,
            back,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        data: Rc<Tensor<F>>,
        parents: &[Var],
        back: impl Fn(&[F], &mut [Vec<F>]) + 'static,
    ) -> Var {
        let needs = self.needs(parents);
        let back = if needs {
            Some(Box::new(back) as BackFn<F>)
        } else {
            None
        };
        self.push_raw(data, needs, back)
    }

    /// Differentiable input (parameters, or anything we take gradients of).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = self.grad_enabled;
        self.push_raw(Rc::new(t), needs, None)
    }

    /// Non-differentiable input (data, targets, fixed coefficients).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(Rc::new(t), false, None)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// C = A·B for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let out = Tensor::new(vec![m, n], tensor::matmul(&ad.data, &bd.data, m, k, n)).unwrap();
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                // dA = dC · Bᵀ
                tensor::matmul_nt_acc(gout, &bd.data, m, n, k, &mut grads[ai]);
            }
            if !grads[bi].is_empty() {
                // dB = Aᵀ · dC
                tensor::matmul_tn_acc(&ad.data, gout, k, m, n, &mut grads[bi]);
            }
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        let ad = self.rc(a);
        let out = Tensor::new(vec![n, m], tensor::transpose(&ad.data, m, n)).unwrap();
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            let gt = tensor::transpose(gout, n, m);
            for (g, &v) in grads[ai].iter_mut().zip(&gt) {
                *g += v;
            }
        })
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                for (g, &v) in grads[ai].iter_mut().zip(gout) {
                    *g += v;
                }
            }
            if !grads[bi].is_empty() {
                for (g, &v) in grads[bi].iter_mut().zip(gout) {
                    *g += v;
                }
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x - y).collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                for (g, &v) in grads[ai].iter_mut().zip(gout) {
                    *g += v;
                }
            }
            if !grads[bi].is_empty() {
                for (g, &v) in grads[bi].iter_mut().zip(gout) {
                    *g -= v;
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                for i in 0..gout.len() {
                    grads[ai][i] += gout[i] * bd.data[i];
                }
            }
            if !grads[bi].is_empty() {
                for i in 0..gout.len() {
                    grads[bi][i] += gout[i] * ad.data[i];
                }
            }
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad.data.iter().zip(&bd.data).map(|(&x, &y)| x / y).collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                for i in 0..gout.len() {
                    grads[ai][i] += gout[i] / bd.data[i];
                }
            }
            if !grads[bi].is_empty() {
                for i in 0..gout.len() {
                    grads[bi][i] -= gout[i] * ad.data[i] / (bd.data[i] * bd.data[i]);
                }
            }
        })
    }

    /// Elementwise max; on ties the gradient goes to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "max_elem");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad
            .data
            .iter()
            .zip(&bd.data)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            for i in 0..gout.len() {
                if ad.data[i] >= bd.data[i] {
                    if !grads[ai].is_empty() {
                        grads[ai][i] += gout[i];
                    }
                } else if !grads[bi].is_empty() {
                    grads[bi][i] += gout[i];
                }
            }
        })
    }

    /// Elementwise min; on ties the gradient goes to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "min_elem");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let data = ad
            .data
            .iter()
            .zip(&bd.data)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            for i in 0..gout.len() {
                if ad.data[i] <= bd.data[i] {
                    if !grads[ai].is_empty() {
                        grads[ai][i] += gout[i];
                    }
                } else if !grads[bi].is_empty() {
                    grads[bi][i] += gout[i];
                }
            }
        })
    }

    /// Elementwise smooth-L1 with transition at |d| = 1:
    /// 0.5·d² inside, |d| − 0.5 outside, d = a − b.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "smooth_l1");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let half = F::lit(0.5);
        let data = ad
            .data
            .iter()
            .zip(&bd.data)
            .map(|(&x, &y)| {
                let d = x - y;
                if d.abs() < F::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            })
            .collect();
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            for i in 0..gout.len() {
                let d = ad.data[i] - bd.data[i];
                let s = if d.abs() < F::one() { d } else { d.signum() };
                if !grads[ai].is_empty() {
                    grads[ai][i] += gout[i] * s;
                }
                if !grads[bi].is_empty() {
                    grads[bi][i] -= gout[i] * s;
                }
            }
        })
    }

    // ── scalar-argument ops ──────────────────────────────────────────

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(|v| v * s);
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (g, &v) in grads[ai].iter_mut().zip(gout) {
                *g += v * s;
            }
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(|v| v + s);
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (g, &v) in grads[ai].iter_mut().zip(gout) {
                *g += v;
            }
        })
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let ad = self.rc(a);
        let pf = F::lit(p);
        let out = ad.map_data(|v| v.powf(pf));
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() || pf == F::zero() {
                return;
            }
            for i in 0..gout.len() {
                grads[ai][i] += gout[i] * pf * ad.data[i].powf(pf - F::one());
            }
        })
    }

    // ── elementwise unary ────────────────────────────────────────────

    pub fn gelu(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(tensor::gelu);
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..gout.len() {
                grads[ai][i] += gout[i] * tensor::gelu_grad(ad.data[i]);
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(|v| if v > F::zero() { v } else { F::zero() });
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..gout.len() {
                if ad.data[i] > F::zero() {
                    grads[ai][i] += gout[i];
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out = Rc::new(ad.map_data(tensor::sigmoid));
        let od = Rc::clone(&out);
        let ai = a.0;
        self.push(out, &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..gout.len() {
                let s = od.data[i];
                grads[ai][i] += gout[i] * s * (F::one() - s);
            }
        })
    }

    /// ln σ(x), computed as −softplus(−x) for stability at large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(|v| {
            // softplus(-x) = max(-x, 0) + ln(1 + exp(-|x|))
            let m = (-v).max(F::zero());
            -(m + (-v.abs()).exp().ln_1p())
        });
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..gout.len() {
                grads[ai][i] += gout[i] * tensor::sigmoid(-ad.data[i]);
            }
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let out = ad.map_data(|v| v.ln());
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..gout.len() {
                grads[ai][i] += gout[i] / ad.data[i];
            }
        })
    }

    // ── broadcast / structure ────────────────────────────────────────

    /// Adds a length-c row vector to every row of an (m, c) matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, c) = self.mat_dims(a);
        let bd = self.rc(bias);
        assert_eq!(bd.len(), c, "add_row: bias len {} vs cols {c}", bd.len());
        let ad = self.rc(a);
        let mut data = ad.data.clone();
        for i in 0..m {
            for j in 0..c {
                data[i * c + j] += bd.data[j];
            }
        }
        let out = Tensor {
            shape: ad.shape.clone(),
            data,
        };
        let (ai, bi) = (a.0, bias.0);
        self.push(Rc::new(out), &[a, bias], move |gout, grads| {
            if !grads[ai].is_empty() {
                for (g, &v) in grads[ai].iter_mut().zip(gout) {
                    *g += v;
                }
            }
            if !grads[bi].is_empty() {
                for i in 0..m {
                    for j in 0..c {
                        grads[bi][j] += gout[i * c + j];
                    }
                }
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ad = self.rc(a);
        let n: usize = shape.iter().product();
        assert_eq!(n, ad.len(), "reshape {:?} -> {:?}", ad.shape, shape);
        let out = Tensor {
            shape,
            data: ad.data.clone(),
        };
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (g, &v) in grads[ai].iter_mut().zip(gout) {
                *g += v;
            }
        })
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let (m, c) = self.mat_dims(a);
        assert!(lo < hi && hi <= c, "slice_cols {lo}..{hi} of {c}");
        let ad = self.rc(a);
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ad.data[i * c + lo..i * c + hi]);
        }
        let out = Tensor {
            shape: vec![m, w],
            data,
        };
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..m {
                for j in 0..w {
                    grads[ai][i * c + lo + j] += gout[i * w + j];
                }
            }
        })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, ca) = self.mat_dims(a);
        let (mb, cb) = self.mat_dims(b);
        assert_eq!(m, mb, "concat_cols rows {m} vs {mb}");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let c = ca + cb;
        let mut data = Vec::with_capacity(m * c);
        for i in 0..m {
            data.extend_from_slice(&ad.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd.data[i * cb..(i + 1) * cb]);
        }
        let out = Tensor {
            shape: vec![m, c],
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            for i in 0..m {
                if !grads[ai].is_empty() {
                    for j in 0..ca {
                        grads[ai][i * ca + j] += gout[i * c + j];
                    }
                }
                if !grads[bi].is_empty() {
                    for j in 0..cb {
                        grads[bi][i * cb + j] += gout[i * c + ca + j];
                    }
                }
            }
        })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ma, c) = self.mat_dims(a);
        let (mb, cb) = self.mat_dims(b);
        assert_eq!(c, cb, "concat_rows cols {c} vs {cb}");
        let ad = self.rc(a);
        let bd = self.rc(b);
        let mut data = Vec::with_capacity((ma + mb) * c);
        data.extend_from_slice(&ad.data);
        data.extend_from_slice(&bd.data);
        let out = Tensor {
            shape: vec![ma + mb, c],
            data,
        };
        let (ai, bi) = (a.0, b.0);
        self.push(Rc::new(out), &[a, b], move |gout, grads| {
            if !grads[ai].is_empty() {
                for (g, &v) in grads[ai].iter_mut().zip(&gout[..ma * c]) {
                    *g += v;
                }
            }
            if !grads[bi].is_empty() {
                for (g, &v) in grads[bi].iter_mut().zip(&gout[ma * c..]) {
                    *g += v;
                }
            }
        })
    }

    /// Output row r is input row idx[r]; duplicates allowed.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (m, c) = self.mat_dims(a);
        for &i in &idx {
            assert!(i < m, "gather_rows index {i} out of {m}");
        }
        let ad = self.rc(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in &idx {
            data.extend_from_slice(&ad.data[r * c..(r + 1) * c]);
        }
        let out = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    grads[ai][src * c + j] += gout[r * c + j];
                }
            }
        })
    }

    /// Scatters row r of `a` to row idx[r] of an otherwise-zero
    /// (out_rows, c) matrix. Indices must be unique.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, out_rows: usize) -> Var {
        let (m, c) = self.mat_dims(a);
        assert_eq!(m, idx.len(), "scatter_rows: {m} rows, {} indices", idx.len());
        let mut seen = vec![false; out_rows];
        for &i in &idx {
            assert!(i < out_rows, "scatter_rows index {i} out of {out_rows}");
            assert!(!seen[i], "scatter_rows duplicate index {i}");
            seen[i] = true;
        }
        let ad = self.rc(a);
        let mut data = vec![F::zero(); out_rows * c];
        for (r, &dst) in idx.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&ad.data[r * c..(r + 1) * c]);
        }
        let out = Tensor {
            shape: vec![out_rows, c],
            data,
        };
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (r, &dst) in idx.iter().enumerate() {
                for j in 0..c {
                    grads[ai][r * c + j] += gout[dst * c + j];
                }
            }
        })
    }

    /// Rearranges (hp·wp, p·p) patch rows into an (hp·p, wp·p) image.
    /// Patch n = pi·wp + pj holds image pixels (pi·p+u, pj·p+v) in
    /// row-major order.
    pub fn patches_to_image(&mut self, a: Var, hp: usize, wp: usize, p: usize) -> Var {
        let (m, c) = self.mat_dims(a);
        assert_eq!(m, hp * wp, "patch count {m} vs {hp}x{wp}");
        assert_eq!(c, p * p, "patch size {c} vs {p}^2");
        let (h, w) = (hp * p, wp * p);
        let mut src_of = vec![0usize; h * w];
        for pi in 0..hp {
            for pj in 0..wp {
                let n = pi * wp + pj;
                for u in 0..p {
                    for v in 0..p {
                        src_of[(pi * p + u) * w + pj * p + v] = n * c + u * p + v;
                    }
                }
            }
        }
        let ad = self.rc(a);
        let data = src_of.iter().map(|&s| ad.data[s]).collect();
        let out = Tensor {
            shape: vec![h, w],
            data,
        };
        let ai = a.0;
        self.push(Rc::new(out), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for (dst, &src) in src_of.iter().enumerate() {
                grads[ai][src] += gout[dst];
            }
        })
    }

    // ── normalization / attention ────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax; when `mask` is given, only columns with `mask[j] = true`
    /// participate and the rest get probability zero. At least one column
    /// must be live.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let (m, n) = self.mat_dims(a);
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), n, "mask len {} vs cols {n}", mk.len());
            assert!(mk.iter().any(|&b| b), "softmax mask excludes every column");
        }
        let ad = self.rc(a);
        let y = tensor::softmax_rows_masked(&ad.data, m, n, mask.as_deref());
        let out = Rc::new(Tensor {
            shape: vec![m, n],
            data: y,
        });
        let od = Rc::clone(&out);
        let ai = a.0;
        self.push(out, &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            for i in 0..m {
                let y_row = &od.data[i * n..(i + 1) * n];
                let g_row = &gout[i * n..(i + 1) * n];
                let dot: F = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                for j in 0..n {
                    grads[ai][i * n + j] += y_row[j] * (g_row[j] - dot);
                }
            }
        })
    }

    /// Per-row layer normalization with biased variance:
    /// y = γ ⊙ (x − μ)/√(σ² + ε) + β.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, c) = self.mat_dims(x);
        let gd = self.rc(gamma);
        let bd = self.rc(beta);
        assert_eq!(gd.len(), c, "layer_norm gamma len");
        assert_eq!(bd.len(), c, "layer_norm beta len");
        let xd = self.rc(x);
        let (y, xhat, inv_std) =
            tensor::layer_norm_fwd(&xd.data, &gd.data, &bd.data, m, c, F::lit(eps));
        let out = Tensor {
            shape: xd.shape.clone(),
            data: y,
        };
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let cf = F::lit(c as f64);
        self.push(Rc::new(out), &[x, gamma, beta], move |gout, grads| {
            for i in 0..m {
                let g_row = &gout[i * c..(i + 1) * c];
                let h_row = &xhat[i * c..(i + 1) * c];
                if !grads[gi].is_empty() {
                    for j in 0..c {
                        grads[gi][j] += g_row[j] * h_row[j];
                    }
                }
                if !grads[bi].is_empty() {
                    for j in 0..c {
                        grads[bi][j] += g_row[j];
                    }
                }
                if !grads[xi].is_empty() {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..c {
                        let dh = g_row[j] * gd.data[j];
                        m1 += dh;
                        m2 += dh * h_row[j];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    let istd = inv_std[i];
                    for j in 0..c {
                        let dh = g_row[j] * gd.data[j];
                        grads[xi][i * c + j] += istd * (dh - m1 - h_row[j] * m2);
                    }
                }
            }
        })
    }

    /// Same-size cross-correlation of a 2-D map with an odd s×s kernel and
    /// scalar bias; zero padding.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "conv input must be 2-D, got {xs:?}");
        let (h, w) = (xs[0], xs[1]);
        let ks = self.shape(kernel).to_vec();
        assert!(
            ks.len() == 2 && ks[0] == ks[1] && ks[0] % 2 == 1,
            "conv kernel must be odd square, got {ks:?}"
        );
        let s = ks[0];
        assert!(self.val(bias).is_scalar(), "conv bias must be scalar");
        let xd = self.rc(x);
        let kd = self.rc(kernel);
        let b = self.val(bias).item();
        let y = tensor::conv2d_same(&xd.data, h, w, &kd.data, s, b);
        let out = Tensor {
            shape: vec![h, w],
            data: y,
        };
        let (xi, ki, bi) = (x.0, kernel.0, bias.0);
        let p = (s - 1) / 2;
        self.push(Rc::new(out), &[x, kernel, bias], move |gout, grads| {
            if !grads[bi].is_empty() {
                grads[bi][0] += gout.iter().copied().sum();
            }
            if !grads[ki].is_empty() {
                for u in 0..s {
                    for v in 0..s {
                        let mut acc = F::zero();
                        for i in 0..h {
                            let ii = i as isize + u as isize - p as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let jj = j as isize + v as isize - p as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += gout[i * w + j] * xd.data[ii as usize * w + jj as usize];
                            }
                        }
                        grads[ki][u * s + v] += acc;
                    }
                }
            }
            if !grads[xi].is_empty() {
                // dX[a,b] = Σ_{u,v} dY[a−u+p, b−v+p] · K[u,v]
                for a_ in 0..h {
                    for b_ in 0..w {
                        let mut acc = F::zero();
                        for u in 0..s {
                            let i = a_ as isize - u as isize + p as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for v in 0..s {
                                let j = b_ as isize - v as isize + p as isize;
                                if j < 0 || j >= w as isize {
                                    continue;
                                }
                                acc += gout[i as usize * w + j as usize] * kd.data[u * s + v];
                            }
                        }
                        grads[xi][a_ * w + b_] += acc;
                    }
                }
            }
        })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let s: F = ad.data.iter().copied().sum();
        let ai = a.0;
        self.push(Rc::new(Tensor::scalar(s)), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            let g = gout[0];
            for v in grads[ai].iter_mut() {
                *v += g;
            }
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ad = self.rc(a);
        let n = F::lit(ad.len() as f64);
        let s: F = ad.data.iter().copied().sum::<F>() / n;
        let ai = a.0;
        self.push(Rc::new(Tensor::scalar(s)), &[a], move |gout, grads| {
            if grads[ai].is_empty() {
                return;
            }
            let g = gout[0] / n;
            for v in grads[ai].iter_mut() {
                *v += g;
            }
        })
    }

    // ── composites ───────────────────────────────────────────────────

    /// x·W + b for a (m, in) input, (in, out) weight and (out,) bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns one gradient buffer per
    /// node; non-differentiable nodes get an empty buffer.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert!(
            self.val(root).is_scalar(),
            "backward root must be scalar, got {:?}",
            self.shape(root)
        );
        let mut g: Vec<Vec<F>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![F::zero(); n.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { g };
        }
        g[root.0][0] = F::one();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let (lower, upper) = g.split_at_mut(i);
            let gout = &upper[0];
            if gout.iter().all(|&v| v == F::zero()) {
                continue;
            }
            back(gout, lower);
        }
        Grads { g }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}
