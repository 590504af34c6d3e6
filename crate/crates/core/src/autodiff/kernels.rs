//! Dense compute kernels behind the tape operators.
//!
//! Work is split per image. Each image's partial weight gradient lands in its
//! own buffer and the buffers are summed in image order, so results do not
//! depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

use super::tensor::Scalar;

/// Environment variable capping kernel parallelism.
pub const THREADS_ENV: &str = "CALSEG_THREADS";

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(available);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build kernel thread pool")
    })
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, image: &[S], cols: &mut [S]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            S::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], image: &mut [S]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for x in 0..w {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(g: &ConvGeom, input: &[S], weight: &[S], bias: Option<&[S]>) -> Vec<S> {
    let hw = g.hw();
    let patch = g.patch();
    let in_stride = g.c_in * hw;
    let out_stride = g.c_out * hw;
    let mut out = vec![S::zero(); g.n * out_stride];
    pool().install(|| {
        out.par_chunks_mut(out_stride)
            .zip(input.par_chunks(in_stride))
            .for_each(|(dst, img)| {
                let mut cols_buf;
                let cols: &[S] = if g.k == 1 {
                    img
                } else {
                    cols_buf = vec![S::zero(); patch * hw];
                    im2col(g, img, &mut cols_buf);
                    &cols_buf
                };
                if let Some(b) = bias {
                    for (co, plane) in dst.chunks_mut(hw).enumerate() {
                        plane.fill(b[co]);
                    }
                }
                let beta = if bias.is_some() { S::one() } else { S::zero() };
                S::gemm(
                    g.c_out,
                    patch,
                    hw,
                    S::one(),
                    weight,
                    patch as isize,
                    1,
                    cols,
                    hw as isize,
                    1,
                    beta,
                    dst,
                    hw as isize,
                    1,
                );
            });
    });
    out
}

pub(crate) struct ConvGrads<S> {
    pub input: Option<Vec<S>>,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    need_input: bool,
) -> ConvGrads<S> {
    let hw = g.hw();
    let patch = g.patch();
    let in_stride = g.c_in * hw;
    let out_stride = g.c_out * hw;
    let wlen = g.c_out * patch;

    let mut grad_input = if need_input {
        vec![S::zero(); g.n * in_stride]
    } else {
        Vec::new()
    };
    let mut partial_w = vec![S::zero(); g.n * wlen];

    pool().install(|| {
        let work = |(n, pw): (usize, &mut [S]), gi: Option<&mut [S]>| {
            let img = &input[n * in_stride..(n + 1) * in_stride];
            let dy = &grad_out[n * out_stride..(n + 1) * out_stride];
            let mut cols_buf;
            let cols: &[S] = if g.k == 1 {
                img
            } else {
                cols_buf = vec![S::zero(); patch * hw];
                im2col(g, img, &mut cols_buf);
                &cols_buf
            };
            // dW_n = dY_n * cols^T
            S::gemm(
                g.c_out,
                hw,
                patch,
                S::one(),
                dy,
                hw as isize,
                1,
                cols,
                1,
                hw as isize,
                S::zero(),
                pw,
                patch as isize,
                1,
            );
            if let Some(gi) = gi {
                if g.k == 1 {
                    // dX_n = W^T * dY_n
                    S::gemm(
                        patch,
                        g.c_out,
                        hw,
                        S::one(),
                        weight,
                        1,
                        patch as isize,
                        dy,
                        hw as isize,
                        1,
                        S::zero(),
                        gi,
                        hw as isize,
                        1,
                    );
                } else {
                    let mut dcols = vec![S::zero(); patch * hw];
                    S::gemm(
                        patch,
                        g.c_out,
                        hw,
                        S::one(),
                        weight,
                        1,
                        patch as isize,
                        dy,
                        hw as isize,
                        1,
                        S::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    col2im_add(g, &dcols, gi);
                }
            }
        };
        if need_input {
            partial_w
                .par_chunks_mut(wlen)
                .enumerate()
                .zip(grad_input.par_chunks_mut(in_stride))
                .for_each(|(item, gi)| work(item, Some(gi)));
        } else {
            partial_w
                .par_chunks_mut(wlen)
                .enumerate()
                .for_each(|item| work(item, None));
        }
    });

    let mut grad_w = vec![S::zero(); wlen];
    for chunk in partial_w.chunks(wlen) {
        for (acc, v) in grad_w.iter_mut().zip(chunk) {
            *acc = *acc + *v;
        }
    }
    let mut grad_b = vec![S::zero(); g.c_out];
    for n in 0..g.n {
        for (co, gb) in grad_b.iter_mut().enumerate() {
            let start = n * out_stride + co * hw;
            let s: S = grad_out[start..start + hw].iter().copied().sum();
            *gb = *gb + s;
        }
    }
    ConvGrads {
        input: need_input.then_some(grad_input),
        weight: grad_w,
        bias: grad_b,
    }
}
