//! A small reverse-mode gradient engine over a closed set of operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse. Gradients are only
//! propagated into nodes that transitively depend on a leaf created with
//! `requires_grad`, so inference passes and input-gradient passes (frozen
//! weights) skip parameter-gradient work entirely.

use std::rc::Rc;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed linear resampling of `h_in x w_in` planes onto `h_out x w_out`
/// planes. Each output pixel is a weighted sum of up to four input pixels,
/// which covers bilinear warps, flips and bilinear up/downsampling.
#[derive(Clone, Debug)]
pub struct ResampleMap<T> {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub taps: Vec<[(u32, T); 4]>,
}

impl<T: Real> ResampleMap<T> {
    pub fn apply_plane(&self, src: &[T], dst: &mut [T]) {
        for (o, taps) in dst.iter_mut().zip(&self.taps) {
            *o = taps
                .iter()
                .fold(T::zero(), |acc, &(i, w)| acc + w * src[i as usize]);
        }
    }

    fn scatter_plane(&self, grad_out: &[T], grad_in: &mut [T]) {
        for (&g, taps) in grad_out.iter().zip(&self.taps) {
            for &(i, w) in taps {
                grad_in[i as usize] = grad_in[i as usize] + w * g;
            }
        }
    }

    /// Applies the map to every plane of an `[n, c, h_in, w_in]` tensor.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let planes = s[..s.len() - 2].iter().product::<usize>();
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend_from_slice(&[self.h_out, self.w_out]);
        let mut out = Tensor::zeros(&shape);
        let (pi, po) = (self.h_in * self.w_in, self.h_out * self.w_out);
        for p in 0..planes {
            self.apply_plane(
                &x.data()[p * pi..(p + 1) * pi],
                &mut out.data_mut()[p * po..(p + 1) * po],
            );
        }
        out
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel { x: Var, bias: Var },
    ScaleSamples { x: Var, s: Var },
    Silu(Var),
    AvgPool { x: Var, factor: usize },
    UpsampleNearest { x: Var, factor: usize },
    Resample { x: Var, map: Rc<ResampleMap<T>> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Contrast { x: Var, factor: T },
    Softmax(Var),
    MeanRows(Var),
    Entropy(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Cosine { x: Var, target: Vec<T> },
    NormalizeRows(Var),
    MatMulNT(Var, Var),
    InfoNce { logits: Var, sets: Rc<Vec<Vec<usize>>>, probs: Vec<Vec<T>> },
    PixelsToRows(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Same-padded 2-D convolution, stride one. `w` is `[co, ci, k, k]` with
    /// odd `k`, `b` is `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv2d channel mismatch");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let hw = h * wd;
        let kk = ci * k * k;
        let cols = im2col(self.value(x).data(), n, ci, h, wd, k);
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        {
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for ni in 0..n {
                let o = &mut od[ni * co * hw..(ni + 1) * co * hw];
                for (c, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(bv[c]);
                }
                T::gemm(
                    co,
                    kk,
                    hw,
                    wv,
                    (kk as isize, 1),
                    &cols[ni * kk * hw..(ni + 1) * kk * hw],
                    (hw as isize, 1),
                    T::one(),
                    o,
                    (hw as isize, 1),
                );
            }
        }
        let keep = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        let op = Op::Conv2d {
            x,
            w,
            b,
            cols: if keep { cols } else { Vec::new() },
        };
        self.push(out, op, &[x, w, b])
    }

    /// `x [n, f] * w[o, f]^T + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], f, "linear feature mismatch");
        let mut out = Tensor::zeros(&[n, o]);
        {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bv);
            }
            T::gemm(
                n,
                f,
                o,
                self.value(x).data(),
                (f as isize, 1),
                self.value(w).data(),
                (1, f as isize),
                T::one(),
                out.data_mut(),
                (o as isize, 1),
            );
        }
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add shape");
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("sub shape");
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |p, q| p * q)
            .expect("mul shape");
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Adds a per-(sample, channel) bias `[n or 1, c]` to `[n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert!(bs[1] == c && (bs[0] == 1 || bs[0] == n));
        let mut out = self.value(x).clone();
        {
            let bv = self.value(bias).data().to_vec();
            let od = out.data_mut();
            for ni in 0..n {
                let bn = if bs[0] == 1 { 0 } else { ni };
                for ci in 0..c {
                    let b = bv[bn * c + ci];
                    for v in &mut od[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                        *v = *v + b;
                    }
                }
            }
        }
        self.push(out, Op::AddChannel { x, bias }, &[x, bias])
    }

    /// Multiplies every entry of sample `i` in `x [n, ...]` by `s[i]`,
    /// where `s` is `[n, 1]`.
    pub fn scale_samples(&mut self, x: Var, s: Var) -> Var {
        let n = self.shape(x)[0];
        assert_eq!(self.value(s).len(), n, "one scale per sample");
        let per = self.value(x).len() / n;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (chunk, &k) in out.data_mut().chunks_mut(per).zip(&sv) {
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        self.push(out, Op::ScaleSamples { x, s }, &[x, s])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let v = avg_pool(self.value(x), factor);
        self.push(v, Op::AvgPool { x, factor }, &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let v = upsample_nearest(self.value(x), factor);
        self.push(v, Op::UpsampleNearest { x, factor }, &[x])
    }

    pub fn resample(&mut self, x: Var, map: Rc<ResampleMap<T>>) -> Var {
        let xs = self.shape(x);
        assert_eq!(
            (xs[xs.len() - 2], xs[xs.len() - 1]),
            (map.h_in, map.w_in),
            "resample plane mismatch"
        );
        let v = map.apply(self.value(x));
        self.push(v, Op::Resample { x, map }, &[x])
    }

    /// Concatenates `[n, c, ...]` tensors along `axis` (0 or 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(axis <= 1 && !parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let ps = self.shape(p);
                assert_eq!(ps[..axis], first[..axis]);
                assert_eq!(ps[axis + 1..], first[axis + 1..]);
                let chunk: usize = ps[axis..].iter().product();
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(&shape, data).expect("concat");
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Per-sample contrast scaling about the sample mean: `c (x - m) + m`.
    pub fn contrast(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(per) {
            let m = chunk.iter().copied().sum::<T>() / T::lit(per as f64);
            for v in chunk.iter_mut() {
                *v = factor * (*v - m) + m;
            }
        }
        self.push(out, Op::Contrast { x, factor }, &[x])
    }

    /// Row-wise softmax of `[n, k]`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    /// `[n, k] -> [1, k]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); k];
        for row in xv.data().chunks(k) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        let out = out.into_iter().map(|v| v * inv).collect();
        let v = Tensor::new(&[1, k], out).expect("mean_rows");
        self.push(v, Op::MeanRows(x), &[x])
    }

    /// Shannon entropy (nats) of a probability vector, `0 log 0 := 0`.
    pub fn entropy(&mut self, p: Var) -> Var {
        let v = Tensor::scalar(entropy(self.value(p).data()));
        self.push(v, Op::Entropy(p), &[p])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a).sub(self.value(b)).expect("mse shape");
        let v = Tensor::scalar(d.data().iter().map(|&e| e * e).sum::<T>() / T::lit(d.len() as f64));
        self.push(v, Op::Mse(a, b), &[a, b])
    }

    /// Mean cross-entropy of `[n, k]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let p = softmax_rows(self.value(logits));
        let k = p.shape()[1];
        assert_eq!(labels.len(), p.shape()[0]);
        let floor = T::lit(PROB_FLOOR);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p.data()[i * k + y].max(floor).ln())
            .sum::<T>()
            / T::lit(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs: p.into_data(),
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Mean binary cross-entropy of `[n, 1]` logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len());
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / T::lit(z.len() as f64);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Cosine similarity of each row of `[n, d]` with a constant `target`;
    /// returns `[n]`. Rows must have nonzero norm.
    pub fn cosine(&mut self, x: Var, target: &[T]) -> Var {
        let xv = self.value(x);
        let d = target.len();
        assert_eq!(xv.shape()[1], d);
        let tn = target.iter().map(|&v| v * v).sum::<T>().sqrt();
        let out: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|row| {
                let xn = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                row.iter().zip(target).map(|(&a, &b)| a * b).sum::<T>() / (xn * tn)
            })
            .collect();
        let v = Tensor::new(&[out.len()], out).expect("cosine");
        let op = Op::Cosine {
            x,
            target: target.to_vec(),
        };
        self.push(v, op, &[x])
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row_norm(row);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        self.push(out, Op::NormalizeRows(x), &[x])
    }

    /// `a [p, d] * b [q, d]^T -> [p, q]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (p, d, q) = (asz[0], asz[1], bsz[0]);
        assert_eq!(bsz[1], d);
        let mut out = Tensor::zeros(&[p, q]);
        T::gemm(
            p,
            d,
            q,
            self.value(a).data(),
            (d as isize, 1),
            self.value(b).data(),
            (1, d as isize),
            T::zero(),
            out.data_mut(),
            (q as isize, 1),
        );
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    /// Mean InfoNCE over rows of a square logit matrix. Row `i` contrasts its
    /// diagonal (positive) entry against the columns listed in `sets[i]`,
    /// which must contain `i`.
    pub fn info_nce(&mut self, logits: Var, sets: Rc<Vec<Vec<usize>>>) -> Var {
        let lv = self.value(logits);
        let q = lv.shape()[1];
        let p = lv.shape()[0];
        assert_eq!(sets.len(), p);
        let mut probs = Vec::with_capacity(p);
        let mut total = T::zero();
        for (i, set) in sets.iter().enumerate() {
            debug_assert!(set.contains(&i));
            let row = &lv.data()[i * q..(i + 1) * q];
            let m = set.iter().fold(T::neg_infinity(), |m, &j| m.max(row[j]));
            let z: T = set.iter().map(|&j| (row[j] - m).exp()).sum();
            let lse = m + z.ln();
            total = total + lse - row[i];
            probs.push(set.iter().map(|&j| (row[j] - lse).exp()).collect());
        }
        let v = Tensor::scalar(total / T::lit(p as f64));
        self.push(v, Op::InfoNce { logits, sets, probs }, &[logits])
    }

    /// `[n, c, h, w] -> [n*h*w, c]`, one row per spatial location.
    pub fn pixels_to_rows(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                for s in 0..hw {
                    out[(ni * hw + s) * c + ci] = xd[(ni * c + ci) * hw + s];
                }
            }
        }
        let v = Tensor::new(&[n * hw, c], out).expect("pixels_to_rows");
        self.push(v, Op::PixelsToRows(x), &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cols } => {
                let xs = self.shape(*x);
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(*w);
                let (co, k) = (ws[0], ws[2]);
                let (hw, kk) = (h * wd, ci * k * k);
                let gd = g.data();
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(ws);
                    for ni in 0..n {
                        T::gemm(
                            co,
                            hw,
                            kk,
                            &gd[ni * co * hw..(ni + 1) * co * hw],
                            (hw as isize, 1),
                            &cols[ni * kk * hw..(ni + 1) * kk * hw],
                            (1, hw as isize),
                            T::one(),
                            dw.data_mut(),
                            (kk as isize, 1),
                        );
                    }
                    acc(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[co]);
                    for ni in 0..n {
                        for c in 0..co {
                            let s: T = gd[(ni * co + c) * hw..(ni * co + c + 1) * hw]
                                .iter()
                                .copied()
                                .sum();
                            db.data_mut()[c] = db.data()[c] + s;
                        }
                    }
                    acc(*b, db);
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); kk * hw];
                    let mut dx = Tensor::zeros(xs);
                    for ni in 0..n {
                        T::gemm(
                            kk,
                            co,
                            hw,
                            wv,
                            (1, kk as isize),
                            &gd[ni * co * hw..(ni + 1) * co * hw],
                            (hw as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (hw as isize, 1),
                        );
                        col2im_add(
                            &dcols,
                            &mut dx.data_mut()[ni * ci * hw..(ni + 1) * ci * hw],
                            ci,
                            h,
                            wd,
                            k,
                        );
                    }
                    acc(*x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    T::gemm(
                        n,
                        o,
                        f,
                        g.data(),
                        (o as isize, 1),
                        self.value(*w).data(),
                        (f as isize, 1),
                        T::zero(),
                        dx.data_mut(),
                        (f as isize, 1),
                    );
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[o, f]);
                    T::gemm(
                        o,
                        n,
                        f,
                        g.data(),
                        (1, o as isize),
                        self.value(*x).data(),
                        (f as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (f as isize, 1),
                    );
                    acc(*w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(&[o], db).expect("db"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q).expect("mul"));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q).expect("mul"));
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::AddChannel { x, bias } => {
                acc(*x, g.clone());
                if self.wants(*bias) {
                    let xs = self.shape(*x);
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let bs = self.shape(*bias).to_vec();
                    let mut db = Tensor::zeros(&bs);
                    for ni in 0..n {
                        let bn = if bs[0] == 1 { 0 } else { ni };
                        for ci in 0..c {
                            let s: T = g.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                                .iter()
                                .copied()
                                .sum();
                            let slot = &mut db.data_mut()[bn * c + ci];
                            *slot = *slot + s;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::ScaleSamples { x, s } => {
                let n = g.shape()[0];
                let per = g.len() / n;
                let sv = self.value(*s).data();
                if self.wants(*x) {
                    let mut d = g.clone();
                    for (chunk, &k) in d.data_mut().chunks_mut(per).zip(sv) {
                        chunk.iter_mut().for_each(|v| *v = *v * k);
                    }
                    acc(*x, d);
                }
                if self.wants(*s) {
                    let ds = g
                        .data()
                        .chunks(per)
                        .zip(self.value(*x).data().chunks(per))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(*s, Tensor::new(self.shape(*s), ds).expect("scale grad"));
                }
            }
            Op::Silu(x) => {
                let d = g
                    .zip_map(self.value(*x), |gv, z| {
                        let s = sigmoid(z);
                        gv * s * (T::one() + z * (T::one() - s))
                    })
                    .expect("silu");
                acc(*x, d);
            }
            Op::AvgPool { x, factor } => {
                acc(*x, avg_pool_backward(g, self.shape(*x), *factor));
            }
            Op::UpsampleNearest { x, factor } => {
                let mut d = avg_pool(g, *factor);
                let s = T::lit((factor * factor) as f64);
                d.data_mut().iter_mut().for_each(|v| *v = *v * s);
                acc(*x, d);
            }
            Op::Resample { x, map } => {
                let xs = self.shape(*x);
                let mut d = Tensor::zeros(xs);
                let (pi, po) = (map.h_in * map.w_in, map.h_out * map.w_out);
                let planes = d.len() / pi;
                for p in 0..planes {
                    map.scatter_plane(
                        &g.data()[p * po..(p + 1) * po],
                        &mut d.data_mut()[p * pi..(p + 1) * pi],
                    );
                }
                acc(*x, d);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let total_chunk: usize = shape[*axis..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk: usize = ps[*axis..].iter().product();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total_chunk + offset;
                            data.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        acc(p, Tensor::new(&ps, data).expect("concat grad"));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(self.shape(*x)).expect("reshape grad"));
            }
            Op::Contrast { x, factor } => {
                let n = g.shape()[0];
                let per = g.len() / n;
                let mut d = g.clone();
                let one_minus = T::one() - *factor;
                for chunk in d.data_mut().chunks_mut(per) {
                    let m = chunk.iter().copied().sum::<T>() / T::lit(per as f64);
                    for v in chunk.iter_mut() {
                        *v = *factor * *v + one_minus * m;
                    }
                }
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let k = p.shape()[1];
                let mut d = Tensor::zeros(p.shape());
                for ((drow, prow), grow) in d
                    .data_mut()
                    .chunks_mut(k)
                    .zip(p.data().chunks(k))
                    .zip(g.data().chunks(k))
                {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x);
                let n = xs[0];
                let inv = T::one() / T::lit(n as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let mut data = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    data.extend_from_slice(&row);
                }
                acc(*x, Tensor::new(xs, data).expect("mean_rows grad"));
            }
            Op::Entropy(p) => {
                let gv = g.item();
                let floor = T::lit(PROB_FLOOR);
                let d = self
                    .value(*p)
                    .map(|q| -gv * (q.max(floor).ln() + if q > floor { T::one() } else { T::zero() }));
                acc(*p, d);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mse(a, b) => {
                let diff = self.value(*a).sub(self.value(*b)).expect("mse");
                let c = T::lit(2.0) * g.item() / T::lit(diff.len() as f64);
                let d = diff.scale(c);
                if self.wants(*b) {
                    acc(*b, d.scale(-T::one()));
                }
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let c = g.item() / T::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] = d[i * k + y] - T::one();
                }
                let d = d.into_iter().map(|v| v * c).collect();
                acc(*logits, Tensor::new(self.shape(*logits), d).expect("ce grad"));
            }
            Op::BceWithLogits { logits, targets } => {
                let c = g.item() / T::lit(targets.len() as f64);
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * c)
                    .collect();
                acc(*logits, Tensor::new(self.shape(*logits), d).expect("bce grad"));
            }
            Op::Cosine { x, target } => {
                let xv = self.value(*x);
                let d = target.len();
                let tn = row_norm(target);
                let mut out = Tensor::zeros(xv.shape());
                for ((orow, xrow), (&gv, &cos)) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(g.data().iter().zip(node.value.data()))
                {
                    let xn = row_norm(xrow);
                    for j in 0..d {
                        orow[j] = gv * (target[j] / (xn * tn) - cos * xrow[j] / (xn * xn));
                    }
                }
                acc(*x, out);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut out = Tensor::zeros(xv.shape());
                for ((orow, xrow), (yrow, grow)) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(node.value.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let n = row_norm(xrow);
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        orow[j] = (grow[j] - yrow[j] * dot) / n;
                    }
                }
                acc(*x, out);
            }
            Op::MatMulNT(a, b) => {
                let (asz, bsz) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (p, d, q) = (asz[0], asz[1], bsz[0]);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&asz);
                    T::gemm(
                        p,
                        q,
                        d,
                        g.data(),
                        (q as isize, 1),
                        self.value(*b).data(),
                        (d as isize, 1),
                        T::zero(),
                        da.data_mut(),
                        (d as isize, 1),
                    );
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&bsz);
                    T::gemm(
                        q,
                        p,
                        d,
                        g.data(),
                        (1, q as isize),
                        self.value(*a).data(),
                        (d as isize, 1),
                        T::zero(),
                        db.data_mut(),
                        (d as isize, 1),
                    );
                    acc(*b, db);
                }
            }
            Op::InfoNce {
                logits,
                sets,
                probs,
            } => {
                let ls = self.shape(*logits).to_vec();
                let (p, q) = (ls[0], ls[1]);
                let c = g.item() / T::lit(p as f64);
                let mut d = Tensor::zeros(&ls);
                for (i, (set, pr)) in sets.iter().zip(probs).enumerate() {
                    for (&j, &pj) in set.iter().zip(pr) {
                        d.data_mut()[i * q + j] = d.data()[i * q + j] + c * pj;
                    }
                    d.data_mut()[i * q + i] = d.data()[i * q + i] - c;
                }
                acc(*logits, d);
            }
            Op::PixelsToRows(x) => {
                let xs = self.shape(*x).to_vec();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut d = Tensor::zeros(&xs);
                for ni in 0..n {
                    for ci in 0..c {
                        for s in 0..hw {
                            d.data_mut()[(ni * c + ci) * hw + s] = g.data()[(ni * hw + s) * c + ci];
                        }
                    }
                }
                acc(*x, d);
            }
        }
    }
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter()
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
        .max(T::lit(1e-12))
}

fn im2col<T: Real>(x: &[T], n: usize, ci: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let kk = ci * k * k;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); n * kk * hw];
    for ni in 0..n {
        for c in 0..ci {
            let plane = &x[(ni * ci + c) * hw..(ni * ci + c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[(ni * kk + row) * hw..(ni * kk + row + 1) * hw];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xx] = plane[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], dx: &mut [T], ci: usize, h: usize, w: usize, k: usize) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (dy, ddx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + ddx;
                        if sx >= 0 && sx < w as isize {
                            let idx = sy as usize * w + sx as usize;
                            plane[idx] = plane[idx] + src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// Average pooling over non-overlapping `factor x factor` blocks of the two
/// trailing axes.
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    assert!(h % factor == 0 && w % factor == 0, "pool factor must divide dims");
    let (ho, wo) = (h / factor, w / factor);
    let planes = x.len() / (h * w);
    let mut shape = s.to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let mut out = Tensor::zeros(&shape);
    let inv = T::one() / T::lit((factor * factor) as f64);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                let o = (y / factor) * wo + xx / factor;
                dst[o] = dst[o] + src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

fn avg_pool_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize], factor: usize) -> Tensor<T> {
    let mut d = upsample_nearest(g, factor);
    debug_assert_eq!(d.shape(), in_shape);
    let inv = T::one() / T::lit((factor * factor) as f64);
    d.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    d
}

/// Nearest-neighbour upsampling of the two trailing axes.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let (ho, wo) = (h * factor, w * factor);
    let planes = x.len() / (h * w);
    let mut shape = s.to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let mut out = Tensor::zeros(&shape);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    out
}

/// Row-wise numerically-stable softmax of a `[n, k]` tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Shannon entropy in nats, with `0 log 0 := 0` and a `1e-12` floor inside
/// the logarithm.
pub fn entropy<T: Real>(p: &[T]) -> T {
    let floor = T::lit(PROB_FLOOR);
    p.iter()
        .map(|&q| if q > T::zero() { -q * q.max(floor).ln() } else { T::zero() })
        .sum()
}
