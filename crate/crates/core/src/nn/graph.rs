//! Minimal reverse-mode tape over NCHW tensors.
//!
//! Only the handful of operations the noise-prediction network needs are
//! supported. Per-sample work is spread over the batch with
//! [`crate::par`]; parameter-gradient reductions over the batch are summed
//! in sample order so results do not depend on the execution mode.

use super::tensor::{matmul, Mat, Real, Tensor};
use crate::par;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Silu(Var),
    Add(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
}

struct Node<T> {
    op: Op,
    value: Option<Tensor<T>>,
}

/// Parameters the graph reads from; one flat list in registration order.
pub trait ParamStore<T> {
    fn param(&self, id: usize) -> &Tensor<T>;
    fn param_count(&self) -> usize;
}

pub struct Graph<'p, T: Real, P: ParamStore<T> + ?Sized> {
    params: &'p P,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Real, P: ParamStore<T> + ?Sized> Graph<'p, T, P> {
    pub fn new(params: &'p P) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.param_count()],
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor<T>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.params.param(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t))
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Op::Param(id), None);
        self.param_vars[id] = Some(v);
        v
    }

    /// Same-padded square convolution. `weight` is `[cout, cin * k * k, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, kernel: usize) -> Var {
        let xv = self.value(x);
        let [n, cin, h, w] = xv.shape();
        let wv = self.value(weight);
        let cout = wv.batch();
        assert_eq!(wv.channels(), cin * kernel * kernel, "conv weight shape");
        let bv = self.value(bias).data();
        let hw = h * w;
        let kk = cin * kernel * kernel;
        let mut out = Tensor::zeros([n, cout, h, w]);
        par::for_each_chunk_mut(out.data_mut(), cout * hw, |i, dst| {
            let cols = im2col(xv.item(i), cin, h, w, kernel);
            matmul(Mat::new(wv.data(), cout, kk), Mat::new(&cols, kk, hw), dst, false);
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                let b = bv[co];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        });
        self.push(
            Op::Conv2d {
                x,
                weight,
                bias,
                kernel,
            },
            Some(out),
        )
    }

    /// `x [n, din] -> [n, dout]` with `weight [dout, din]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.batch();
        let din = xv.item_len();
        let wv = self.value(weight);
        let dout = wv.batch();
        assert_eq!(wv.item_len(), din, "linear weight shape");
        let mut out = Tensor::zeros([n, dout, 1, 1]);
        matmul(
            Mat::new(xv.data(), n, din),
            Mat::new(wv.data(), dout, din).t(),
            out.data_mut(),
            false,
        );
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(dout) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        self.push(Op::Linear { x, weight, bias }, Some(out))
    }

    /// Add a per-sample, per-channel offset `bias [n, c]` to every pixel.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let bv = self.value(bias);
        assert_eq!(bv.shape(), [n, c, 1, 1], "channel bias shape");
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = bv.data()[i];
            plane.iter_mut().for_each(|v| *v = *v + b);
        }
        self.push(Op::ChannelBias { x, bias }, Some(out))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu(x), Some(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for (src, dst) in xv.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(Op::AvgPool2(x), Some(out))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let wo = 2 * w;
        let mut out = Tensor::zeros([n, c, 2 * h, wo]);
        for (src, dst) in xv.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), Some(out))
    }

    /// Concatenate along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shapes");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data);
        self.push(Op::Concat(a, b), Some(out))
    }

    /// Backpropagate `seed` (the gradient of the objective w.r.t. `output`)
    /// and return one gradient per registered parameter (zeros for unused).
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Vec<Tensor<T>> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op.clone() {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    kernel,
                } => {
                    let (dx, dw, db) = self.conv2d_backward(x, weight, kernel, &g);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, weight, dw);
                    accumulate(&mut grads, bias, db);
                }
                Op::Linear { x, weight, bias } => {
                    let xv = self.value(x);
                    let wv = self.value(weight);
                    let (n, din, dout) = (xv.batch(), xv.item_len(), wv.batch());
                    let mut dx = Tensor::zeros(xv.shape());
                    matmul(
                        Mat::new(g.data(), n, dout),
                        Mat::new(wv.data(), dout, din),
                        dx.data_mut(),
                        false,
                    );
                    let mut dw = Tensor::zeros(wv.shape());
                    matmul(
                        Mat::new(g.data(), n, dout).t(),
                        Mat::new(xv.data(), n, din),
                        dw.data_mut(),
                        false,
                    );
                    let mut db = Tensor::zeros(self.value(bias).shape());
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, weight, dw);
                    accumulate(&mut grads, bias, db);
                }
                Op::ChannelBias { x, bias } => {
                    let [n, c, h, w] = g.shape();
                    let sums: Vec<T> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    accumulate(&mut grads, bias, Tensor::from_vec([n, c, 1, 1], sums));
                    accumulate(&mut grads, x, g);
                }
                Op::Silu(x) => {
                    let xv = self.value(x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, x, Tensor::from_vec(xv.shape(), data));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::AvgPool2(x) => {
                    let [n, c, h, w] = self.value(x).shape();
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for (src, dst) in g.data().chunks(ho * wo).zip(dx.data_mut().chunks_mut(h * w)) {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let v = src[y * wo + xx] * quarter;
                                let i = 2 * y * w + 2 * xx;
                                dst[i] = v;
                                dst[i + 1] = v;
                                dst[i + w] = v;
                                dst[i + w + 1] = v;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Upsample2(x) => {
                    let [n, c, h, w] = self.value(x).shape();
                    let wo = 2 * w;
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for (src, dst) in g.data().chunks(4 * h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                        for y in 0..h {
                            for xx in 0..w {
                                let i = 2 * y * wo + 2 * xx;
                                dst[y * w + xx] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.value(a).shape();
                    let cb = self.value(b).channels();
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * la);
                    let mut db = Vec::with_capacity(n * lb);
                    for item in g.data().chunks(la + lb) {
                        da.extend_from_slice(&item[..la]);
                        db.extend_from_slice(&item[la..]);
                    }
                    accumulate(&mut grads, a, Tensor::from_vec([n, ca, h, w], da));
                    accumulate(&mut grads, b, Tensor::from_vec([n, cb, h, w], db));
                }
            }
        }

        (0..self.params.param_count())
            .map(|id| {
                self.param_vars[id]
                    .and_then(|v| grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(self.params.param(id).shape()))
            })
            .collect()
    }

    fn conv2d_backward(
        &self,
        x: Var,
        weight: Var,
        kernel: usize,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let wv = self.value(weight);
        let [n, cin, h, w] = xv.shape();
        let cout = wv.batch();
        let hw = h * w;
        let kk = cin * kernel * kernel;

        let per_item: Vec<(Vec<T>, Vec<T>)> = par::map_indexed(n, |i| {
            let cols = im2col(xv.item(i), cin, h, w, kernel);
            let gi = g.item(i);
            let mut dw = vec![T::zero(); cout * kk];
            matmul(Mat::new(gi, cout, hw), Mat::new(&cols, kk, hw).t(), &mut dw, false);
            let mut dcols = cols;
            matmul(Mat::new(wv.data(), cout, kk).t(), Mat::new(gi, cout, hw), &mut dcols, false);
            (dw, col2im(&dcols, cin, h, w, kernel))
        });

        let mut dw = Tensor::zeros(wv.shape());
        let mut dx = Vec::with_capacity(xv.len());
        for (dwi, dxi) in per_item {
            for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
                *a = *a + b;
            }
            dx.extend(dxi);
        }
        let mut db = vec![T::zero(); cout];
        for item in g.data().chunks(cout * hw) {
            for (d, plane) in db.iter_mut().zip(item.chunks(hw)) {
                *d = *d + plane.iter().copied().sum::<T>();
            }
        }
        (
            Tensor::from_vec(xv.shape(), dx),
            dw,
            Tensor::from_vec([cout, 1, 1, 1], db),
        )
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Unfold one `[cin, h, w]` item into a `[cin * k * k, h * w]` patch matrix
/// with zero padding `k / 2`.
fn im2col<T: Real>(src: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    if k == 1 {
        return src[..cin * hw].to_vec();
    }
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    for c in 0..cin {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &plane[sy as usize * w..][..w];
                    let d = &mut row[y * w..][..w];
                    for xx in x_lo..x_hi {
                        d[xx] = s[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    if k == 1 {
        return cols[..cin * hw].to_vec();
    }
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); cin * hw];
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut plane[sy as usize * w..][..w];
                    let s = &row[y * w..][..w];
                    for xx in x_lo..x_hi {
                        let t = (xx as isize + dx) as usize;
                        d[t] = d[t] + s[xx];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Params(Vec<Tensor<f64>>);

    impl ParamStore<f64> for Params {
        fn param(&self, id: usize) -> &Tensor<f64> {
            &self.0[id]
        }
        fn param_count(&self) -> usize {
            self.0.len()
        }
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: [usize; 4], seed: &mut u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| lcg(seed)).collect())
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut s = 7;
        let x = rand_tensor([2, 2, 4, 5], &mut s);
        let params = Params(vec![rand_tensor([3, 18, 1, 1], &mut s), rand_tensor([3, 1, 1, 1], &mut s)]);
        let mut g = Graph::new(&params);
        let xv = g.input(x.clone());
        let (w, b) = (g.param(0), g.param(1));
        let y = g.conv2d(xv, w, b, 3);
        let out = g.value(y);
        for n in 0..2 {
            for co in 0..3 {
                for yy in 0..4 {
                    for xx in 0..5 {
                        let mut acc = params.0[1].data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                                        continue;
                                    }
                                    let wv = params.0[0].data()[co * 18 + ci * 9 + ky * 3 + kx];
                                    acc += wv * x.data()[((n * 2 + ci) * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                        let got = out.data()[((n * 3 + co) * 4 + yy) * 5 + xx];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut s = 3;
        let x = rand_tensor([1, 3, 5, 4], &mut s);
        let cols = im2col(x.data(), 3, 5, 4, 3);
        let c: Vec<f64> = (0..cols.len()).map(|_| lcg(&mut s)).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 3, 5, 4, 3);
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    /// Finite-difference check of every op through a small composite graph.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut s = 11;
        let x = rand_tensor([2, 1, 4, 4], &mut s);
        let z = rand_tensor([2, 3, 1, 1], &mut s);
        let mut params = Params(vec![
            rand_tensor([2, 9, 1, 1], &mut s),  // conv a
            rand_tensor([2, 1, 1, 1], &mut s),
            rand_tensor([2, 3, 1, 1], &mut s),  // linear
            rand_tensor([2, 1, 1, 1], &mut s),
            rand_tensor([1, 36, 1, 1], &mut s), // conv b on concat (4 ch)
            rand_tensor([1, 1, 1, 1], &mut s),
            rand_tensor([1, 2, 1, 1], &mut s),  // 1x1 conv
            rand_tensor([1, 1, 1, 1], &mut s),
        ]);
        let target = rand_tensor([2, 1, 4, 4], &mut s);

        let build = |p: &Params| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new(p);
            let xi = g.input(x.clone());
            let zi = g.input(z.clone());
            let (w0, b0, w1, b1, w2, b2, w3, b3) =
                (g.param(0), g.param(1), g.param(2), g.param(3), g.param(4), g.param(5), g.param(6), g.param(7));
            let h = g.conv2d(xi, w0, b0, 3);
            let e = g.linear(zi, w1, b1);
            let h = g.channel_bias(h, e);
            let h = g.silu(h);
            let d = g.avg_pool2(h);
            let u = g.upsample2(d);
            let c = g.concat(h, u);
            let y = g.conv2d(c, w2, b2, 3);
            let skip = g.conv2d(h, w3, b3, 1);
            let y = g.add(y, skip);
            let out = g.value(y);
            let loss: f64 = out.data().iter().zip(target.data()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
            let seed = Tensor::from_vec(out.shape(), out.data().iter().zip(target.data()).map(|(a, b)| a - b).collect());
            (loss, g.backward(y, seed))
        };

        let (_, grads) = build(&params);
        let h = 1e-5;
        for pid in 0..params.0.len() {
            for j in 0..params.0[pid].len() {
                let orig = params.0[pid].data()[j];
                params.0[pid].data_mut()[j] = orig + h;
                let (lp, _) = build(&params);
                params.0[pid].data_mut()[j] = orig - h;
                let (lm, _) = build(&params);
                params.0[pid].data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pid].data()[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pid}[{j}]: fd {fd} vs {an}");
            }
        }
    }
}
