//! Forward and backward kernels for the few layer types the backbone uses.
//!
//! Convolutions are unpadded and lowered to one matrix product over the whole
//! batch: the im2col buffer is `(cin * k * k) x (batch * hout * wout)`.

use crate::tensor::{gemm, Op, Real, Tensor};

/// Geometry of an unpadded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - self.kernel) / self.stride + 1,
            (self.w - self.kernel) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

fn im2col<T: Real>(x: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = batch * ho * wo;
    let mut out = vec![T::zero(); g.patch() * cols];
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..batch {
                    let src = &x[(b * g.cin + ci) * plane..(b * g.cin + ci + 1) * plane];
                    for oy in 0..ho {
                        let sy = oy * g.stride + ki;
                        let d = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let s = &src[sy * g.w..(sy + 1) * g.w];
                        if g.stride == 1 {
                            d.copy_from_slice(&s[kj..kj + wo]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = s[ox * g.stride + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols_buf: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = batch * ho * wo;
    let plane = g.h * g.w;
    let mut dx = vec![T::zero(); batch * g.cin * plane];
    for ci in 0..g.cin {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for b in 0..batch {
                    let dst = &mut dx[(b * g.cin + ci) * plane..(b * g.cin + ci + 1) * plane];
                    for oy in 0..ho {
                        let sy = oy * g.stride + ki;
                        let s = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, &v) in s.iter().enumerate() {
                            dst[sy * g.w + ox * g.stride + kj] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cached state of a convolution forward pass.
pub struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
    geom: ConvGeom,
}

/// `x: (B, cin, h, w)`, `weight: (cout, cin, k, k)`, `bias: (cout)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeom,
) -> (Tensor<T>, ConvCache<T>) {
    let batch = x.rows();
    debug_assert_eq!(x.shape(), &[batch, geom.cin, geom.h, geom.w]);
    let (ho, wo) = geom.out_hw();
    let n = batch * ho * wo;
    let cols = im2col(x.data(), batch, &geom);
    let mut y = vec![T::zero(); geom.cout * n];
    gemm(
        geom.cout,
        geom.patch(),
        n,
        T::one(),
        weight.data(),
        Op::N,
        &cols,
        Op::N,
        T::zero(),
        &mut y,
    );
    // (cout, B, ho*wo) -> (B, cout, ho*wo), adding bias on the way.
    let hw = ho * wo;
    let mut out = vec![T::zero(); batch * geom.cout * hw];
    for co in 0..geom.cout {
        let bv = bias.data()[co];
        for b in 0..batch {
            let src = &y[co * n + b * hw..co * n + (b + 1) * hw];
            let dst = &mut out[(b * geom.cout + co) * hw..(b * geom.cout + co + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    let out = Tensor::from_vec(&[batch, geom.cout, ho, wo], out).expect("conv output shape");
    (out, ConvCache { cols, batch, geom })
}

/// Returns `(d_weight, d_bias, d_input)`; the input gradient is only formed
/// when requested.
pub fn conv2d_backward<T: Real>(
    dy: &Tensor<T>,
    weight: &Tensor<T>,
    cache: &ConvCache<T>,
    need_dx: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let g = cache.geom;
    let batch = cache.batch;
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let n = batch * hw;
    let mut dyp = vec![T::zero(); g.cout * n];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..batch {
        for co in 0..g.cout {
            let src = &dy.data()[(b * g.cout + co) * hw..(b * g.cout + co + 1) * hw];
            dyp[co * n + b * hw..co * n + (b + 1) * hw].copy_from_slice(src);
            db[co] += src.iter().copied().sum::<T>();
        }
    }
    let mut dw = vec![T::zero(); g.cout * g.patch()];
    gemm(
        g.cout,
        n,
        g.patch(),
        T::one(),
        &dyp,
        Op::N,
        &cache.cols,
        Op::T,
        T::zero(),
        &mut dw,
    );
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * n];
        gemm(
            g.patch(),
            g.cout,
            n,
            T::one(),
            weight.data(),
            Op::T,
            &dyp,
            Op::N,
            T::zero(),
            &mut dcols,
        );
        Tensor::from_vec(&[batch, g.cin, g.h, g.w], col2im(&dcols, batch, &g)).expect("conv dx shape")
    });
    (
        Tensor::from_vec(weight.shape(), dw).expect("conv dw shape"),
        Tensor::from_vec(&[g.cout], db).expect("conv db shape"),
        dx,
    )
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero gradient entries where the rectified output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2 (floor). Returns pooled values and, per
/// output element, the flat input index that won.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    (Tensor::from_vec(&[b, c, ho, wo], out).expect("pool shape"), arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], input_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(arg) {
        d[i as usize] += g;
    }
    dx
}

/// `y = x w^T + b` with `x: (B, in)`, `w: (out, in)`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let batch = x.rows();
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let mut y = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        y.extend_from_slice(bias.data());
    }
    gemm(
        batch,
        in_dim,
        out_dim,
        T::one(),
        x.data(),
        Op::N,
        weight.data(),
        Op::T,
        T::one(),
        &mut y,
    );
    Tensor::from_vec(&[batch, out_dim], y).expect("linear output shape")
}

/// Returns `(d_weight, d_bias, d_input)`.
pub fn linear_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    need_dx: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let batch = x.rows();
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let mut dw = vec![T::zero(); out_dim * in_dim];
    gemm(
        out_dim,
        batch,
        in_dim,
        T::one(),
        dy.data(),
        Op::T,
        x.data(),
        Op::N,
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); out_dim];
    for row in dy.data().chunks_exact(out_dim) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * in_dim];
        gemm(
            batch,
            out_dim,
            in_dim,
            T::one(),
            dy.data(),
            Op::N,
            weight.data(),
            Op::N,
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[batch, in_dim], dx).expect("linear dx shape")
    });
    (
        Tensor::from_vec(weight.shape(), dw).expect("linear dw shape"),
        Tensor::from_vec(&[out_dim], db).expect("linear db shape"),
        dx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; batch * g.cout * ho * wo];
        for n in 0..batch {
            for co in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[co];
                        for ci in 0..g.cin {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let xv =
                                        x[((n * g.cin + ci) * g.h + oy * g.stride + ki) * g.w + ox * g.stride + kj];
                                    let wv = w[((co * g.cin + ci) * g.kernel + ki) * g.kernel + kj];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((n * g.cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    #[test]
    fn conv_matches_naive_with_stride() {
        for stride in [1, 2, 3] {
            let g = ConvGeom {
                cin: 2,
                cout: 3,
                kernel: 3,
                stride,
                h: 9,
                w: 9,
            };
            let batch = 2;
            let x = seq(batch * 2 * 81, 0.7);
            let w = seq(3 * 2 * 9, 0.31);
            let b = seq(3, 1.3);
            let (y, _) = conv2d_forward(
                &Tensor::from_vec(&[batch, 2, 9, 9], x.clone()).unwrap(),
                &Tensor::from_vec(&[3, 2, 3, 3], w.clone()).unwrap(),
                &Tensor::from_vec(&[3], b.clone()).unwrap(),
                g,
            );
            let want = conv_naive(&x, &w, &b, batch, &g);
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom {
            cin: 2,
            cout: 2,
            kernel: 2,
            stride: 2,
            h: 5,
            w: 5,
        };
        let batch = 2;
        let x = Tensor::from_vec(&[batch, 2, 5, 5], seq(100, 0.9)).unwrap();
        let w = Tensor::from_vec(&[2, 2, 2, 2], seq(16, 0.4)).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let r = Tensor::from_vec(&[batch, 2, 2, 2], seq(16, 1.7)).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let (y, _) = conv2d_forward(x, w, &b, g);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv2d_forward(&x, &w, &b, g);
        let (dw, db, dx) = conv2d_backward(&r, &w, &cache, true);
        let dx = dx.unwrap();
        let eps = 1e-6;
        for i in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[i] += eps;
            let mut m = w.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * eps);
            assert!((fd - dw.data()[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p, &w) - loss(&m, &w)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        let want_db: Vec<f64> = (0..2)
            .map(|c| {
                (0..batch)
                    .map(|n| r.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4].iter().sum::<f64>())
                    .sum()
            })
            .collect();
        assert!(db.data().iter().zip(&want_db).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 0.0]);
        let dx = maxpool2_backward(
            &Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap(),
            &arg,
            x.shape(),
        );
        assert_eq!(dx.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_forward_and_backward() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let y = linear_forward(&x, &w, &b);
        for (a, e) in y.data().iter().zip([4.6, 6.2, 1.6, 0.2]) {
            assert!((a - e).abs() < 1e-12);
        }
        let dy = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (dw, db, dx) = linear_backward(&dy, &x, &w, true);
        assert_eq!(dw.data(), &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        assert_eq!(db.data(), &[1.0, 1.0]);
        assert_eq!(dx.unwrap().data(), &[0.5, -1.0, 2.0, 1.0, 1.0, 1.0]);
    }
}
