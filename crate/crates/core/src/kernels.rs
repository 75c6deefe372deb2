//! 2-D convolution kernels: forward, input gradient (transposed convolution)
//! and weight gradient. Dense and grouped convolutions go through im2col +
//! GEMM; depthwise convolutions use direct loops.

use crate::parallel;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

/// Minimum output elements per parallel GEMM chunk.
const GEMM_CHUNK_ELEMS: usize = 8192;

/// Row-major `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, with arbitrary
/// strides for `a` and `b`. Rows of `c` are split into fixed-size chunks.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a_strides;
    let (rsb, csb) = b_strides;
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    let rows_per_chunk = (GEMM_CHUNK_ELEMS / n).max(1);
    let beta = if accumulate { 1.0 } else { 0.0 };
    parallel::for_each_chunk_mut(c, rows_per_chunk * n, |chunk_idx, c_chunk| {
        let r0 = chunk_idx * rows_per_chunk;
        let rows = c_chunk.len() / n;
        // SAFETY: bounds of every touched element were asserted above; the
        // output chunk is an exclusive, contiguous `rows × n` block.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(r0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x_shape: Shape, w_shape: Shape, out_hw: (usize, usize), spec: ConvSpec) -> Self {
        let [n, cin, h, w] = x_shape;
        let [cout, cin_g, kh, kw] = w_shape;
        assert!(spec.groups >= 1 && cin % spec.groups == 0 && cout % spec.groups == 0);
        assert_eq!(cin / spec.groups, cin_g, "weight in-channels do not match groups");
        Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: out_hw.0,
            wo: out_hw.1,
            cin_g,
            cout_g: cout / spec.groups,
            spec,
        }
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == 1
            && self.spec.padding == 0
            && self.ho == self.h
            && self.wo == self.w
    }

    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let p = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }

    /// Columns for one `(sample, group)`: `[cin_g·kh·kw, ho·wo]`.
    fn im2col(&self, x: &[f64], sample: usize, group: usize, col: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        let kk = self.kh * self.kw;
        parallel::for_each_chunk_mut(col, kk * hw_out, |ci, block| {
            let c = group * self.cin_g + ci;
            let plane = &x[(sample * self.cin + c) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut block[(ky * self.kw + kx) * hw_out..][..hw_out];
                    for oy in 0..self.ho {
                        let iy = self.src(oy, ky, self.h);
                        for ox in 0..self.wo {
                            row[oy * self.wo + ox] = match (iy, self.src(ox, kx, self.w)) {
                                (Some(iy), Some(ix)) => plane[iy * self.w + ix],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        });
    }
}

/// `y = conv(x, w) + b` with zero padding.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [_, _, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let out_hw = spec.output_hw(h, wd, kh, kw).expect("conv2d: kernel larger than padded input");
    let g = Geometry::new(x.shape(), w.shape(), out_hw, spec);
    let hw_out = g.ho * g.wo;
    let mut out = Tensor::zeros([g.n, g.cout, g.ho, g.wo]);
    let xd = x.data();
    let wdata = w.data();

    if g.is_depthwise() {
        parallel::for_each_chunk_mut(out.data_mut(), hw_out, |plane_idx, dst| {
            let (s, c) = (plane_idx / g.cout, plane_idx % g.cout);
            let src = &xd[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let k = &wdata[c * g.kh * g.kw..][..g.kh * g.kw];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc += k[ky * g.kw + kx] * src[iy * g.w + ix];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        });
    } else {
        let kdim = g.cin_g * g.kh * g.kw;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * hw_out] };
        for s in 0..g.n {
            for grp in 0..spec.groups {
                let dst = &mut out.data_mut()[(s * g.cout + grp * g.cout_g) * hw_out..][..g.cout_g * hw_out];
                let wg = &wdata[grp * g.cout_g * kdim..][..g.cout_g * kdim];
                let cols: &[f64] = if g.is_pointwise() {
                    &xd[(s * g.cin + grp * g.cin_g) * hw_out..][..kdim * hw_out]
                } else {
                    g.im2col(xd, s, grp, &mut col);
                    &col
                };
                gemm(g.cout_g, kdim, hw_out, wg, (kdim, 1), cols, (hw_out, 1), dst, false);
            }
        }
    }

    if let Some(b) = bias {
        let bd = b.data();
        parallel::for_each_chunk_mut(out.data_mut(), hw_out, |plane_idx, dst| {
            let bv = bd[plane_idx % g.cout];
            dst.iter_mut().for_each(|v| *v += bv);
        });
    }
    out
}

/// Gradient of `conv2d_forward` with respect to its input, i.e. the
/// transposed convolution of `gy` by `w`, producing `in_shape`.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, spec: ConvSpec, in_shape: Shape) -> Tensor {
    let [_, _, ho, wo] = gy.shape();
    let g = Geometry::new(in_shape, w.shape(), (ho, wo), spec);
    assert_eq!(gy.shape()[1], g.cout);
    let hw_out = ho * wo;
    let hw_in = g.h * g.w;
    let mut gx = Tensor::zeros(in_shape);
    let gyd = gy.data();
    let wdata = w.data();

    if g.is_depthwise() {
        parallel::for_each_chunk_mut(gx.data_mut(), hw_in, |plane_idx, dst| {
            let (s, c) = (plane_idx / g.cin, plane_idx % g.cin);
            let src = &gyd[(s * g.cout + c) * hw_out..][..hw_out];
            let k = &wdata[c * g.kh * g.kw..][..g.kh * g.kw];
            for oy in 0..g.ho {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        let gv = src[oy * g.wo + ox];
                        for kx in 0..g.kw {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                dst[iy * g.w + ix] += k[ky * g.kw + kx] * gv;
                            }
                        }
                    }
                }
            }
        });
        return gx;
    }

    let kdim = g.cin_g * g.kh * g.kw;
    let kk = g.kh * g.kw;
    let mut colgrad = vec![0.0; kdim * hw_out];
    for s in 0..g.n {
        for grp in 0..spec.groups {
            let gy_g = &gyd[(s * g.cout + grp * g.cout_g) * hw_out..][..g.cout_g * hw_out];
            let wg = &wdata[grp * g.cout_g * kdim..][..g.cout_g * kdim];
            let gx_g = &mut gx.data_mut()[(s * g.cin + grp * g.cin_g) * hw_in..][..g.cin_g * hw_in];
            if g.is_pointwise() {
                gemm(kdim, g.cout_g, hw_out, wg, (1, kdim), gy_g, (hw_out, 1), gx_g, false);
                continue;
            }
            gemm(kdim, g.cout_g, hw_out, wg, (1, kdim), gy_g, (hw_out, 1), &mut colgrad, false);
            let colgrad = &colgrad;
            parallel::for_each_chunk_mut(gx_g, hw_in, |ci, plane| {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let row = &colgrad[(ci * kk + ky * g.kw + kx) * hw_out..][..hw_out];
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    plane[iy * g.w + ix] += row[oy * g.wo + ox];
                                }
                            }
                        }
                    }
                }
            });
        }
    }
    gx
}

/// Gradient of `conv2d_forward` with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, spec: ConvSpec, w_shape: Shape) -> Tensor {
    let [_, _, ho, wo] = gy.shape();
    let g = Geometry::new(x.shape(), w_shape, (ho, wo), spec);
    let hw_out = ho * wo;
    let mut gw = Tensor::zeros(w_shape);
    let xd = x.data();
    let gyd = gy.data();

    if g.is_depthwise() {
        let kk = g.kh * g.kw;
        parallel::for_each_chunk_mut(gw.data_mut(), kk, |c, k| {
            for s in 0..g.n {
                let src = &xd[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let gplane = &gyd[(s * g.cout + c) * hw_out..][..hw_out];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    acc += gplane[oy * g.wo + ox] * src[iy * g.w + ix];
                                }
                            }
                        }
                        k[ky * g.kw + kx] += acc;
                    }
                }
            }
        });
        return gw;
    }

    let kdim = g.cin_g * g.kh * g.kw;
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * hw_out] };
    for s in 0..g.n {
        for grp in 0..spec.groups {
            let gy_g = &gyd[(s * g.cout + grp * g.cout_g) * hw_out..][..g.cout_g * hw_out];
            let cols: &[f64] = if g.is_pointwise() {
                &xd[(s * g.cin + grp * g.cin_g) * hw_out..][..kdim * hw_out]
            } else {
                g.im2col(xd, s, grp, &mut col);
                &col
            };
            let gw_g = &mut gw.data_mut()[grp * g.cout_g * kdim..][..g.cout_g * kdim];
            gemm(g.cout_g, hw_out, kdim, gy_g, (hw_out, 1), cols, (1, hw_out), gw_g, s > 0);
        }
    }
    gw
}

/// Sum of `gy` over batch and space, per channel: `[1, C, 1, 1]`.
pub fn bias_grad(gy: &Tensor) -> Tensor {
    let [n, c, h, w] = gy.shape();
    let hw = h * w;
    let d = gy.data();
    let sums = parallel::map_range(c, |ch| {
        (0..n).map(|s| d[(s * c + ch) * hw..][..hw].iter().sum::<f64>()).sum::<f64>()
    });
    Tensor::new([1, c, 1, 1], sums).expect("bias grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let [cout, cin_g, kh, kw] = w.shape();
        let (ho, wo) = spec.output_hw(h, wd, kh, kw).unwrap();
        let cout_g = cout / spec.groups;
        Tensor::from_fn([n, cout, ho, wo], |[s, co, oy, ox]| {
            let grp = co / cout_g;
            let mut acc = 0.0;
            for ci in 0..cin_g {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            let c = grp * cin_g + ci;
                            assert!(c < cin);
                            acc += w.at([co, ci, ky, kx]) * x.at([s, c, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    const CASES: &[(Shape, Shape, ConvSpec)] = &[
        ([2, 3, 7, 6], [4, 3, 3, 3], ConvSpec::new(1, 1, 1)),
        ([2, 4, 8, 8], [8, 4, 2, 2], ConvSpec::new(2, 0, 1)),
        ([1, 4, 9, 9], [4, 1, 3, 3], ConvSpec::new(1, 1, 4)),
        ([2, 6, 5, 5], [6, 2, 3, 3], ConvSpec::new(1, 0, 3)),
        ([2, 5, 4, 4], [3, 5, 1, 1], ConvSpec::new(1, 0, 1)),
        ([1, 3, 9, 7], [5, 3, 4, 4], ConvSpec::new(2, 1, 1)),
    ];

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(xs, ws, spec) in CASES {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let got = conv2d_forward(&x, &w, None, spec);
            let want = naive_conv(&x, &w, spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{xs:?} {ws:?}: {a} vs {b}");
            }
        }
    }

    // <conv(x), gy> = <x, conv_input_grad(gy)> = <w, conv_weight_grad(x, gy)>
    #[test]
    fn gradients_are_adjoint_to_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(xs, ws, spec) in CASES {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let y = conv2d_forward(&x, &w, None, spec);
            let gy = random(y.shape(), &mut rng);
            let gx = conv2d_input_grad(&gy, &w, spec, xs);
            let gw = conv2d_weight_grad(&x, &gy, spec, ws);
            let lhs = dot(&y, &gy);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * (1.0 + lhs.abs()));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn bias_is_broadcast_per_output_channel() {
        let x = Tensor::zeros([2, 2, 3, 3]);
        let w = Tensor::zeros([3, 2, 1, 1]);
        let b = Tensor::new([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), ConvSpec::new(1, 0, 1));
        assert_eq!(y.at([1, 1, 2, 2]), -2.0);
        let g = bias_grad(&Tensor::full([2, 3, 3, 3], 1.0));
        assert_eq!(g.data(), &[18.0, 18.0, 18.0]);
    }

    #[test]
    fn sequential_and_parallel_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 16, 32, 32], &mut rng);
        let w = random([32, 16, 3, 3], &mut rng);
        let spec = ConvSpec::new(1, 1, 1);
        let a = conv2d_forward(&x, &w, None, spec);
        parallel::set_sequential(true);
        let b = conv2d_forward(&x, &w, None, spec);
        parallel::set_sequential(false);
        assert_eq!(a, b);
    }
}
