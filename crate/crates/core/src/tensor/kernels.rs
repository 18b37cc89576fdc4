//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! slices and trusts that shapes were validated by the caller.

/// `c = a·b + beta·c` with arbitrary row/column strides (so transposes are free).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller upholds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.plane_out();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.plane_out();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.plane_out();
    let patch = g.patch();
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * p;
    let mut out = vec![0.0; g.n * out_size];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * p]
    };
    for s in 0..g.n {
        let xs = &x[s * in_size..(s + 1) * in_size];
        let cols_ref: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * out_size..(s + 1) * out_size];
        if let Some(b) = bias {
            for (o, row) in os.chunks_exact_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        gemm(g.cout, patch, p, k, (patch, 1), cols_ref, (p, 1), 1.0, os, (p, 1));
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_k, need_b) = need;
    let p = g.plane_out();
    let patch = g.patch();
    let in_size = g.cin * g.h * g.w;
    let out_size = g.cout * p;
    let mut dx = need_x.then(|| vec![0.0; g.n * in_size]);
    let mut dk = need_k.then(|| vec![0.0; g.cout * patch]);
    let mut db = need_b.then(|| vec![0.0; g.cout]);
    let mut cols = if g.is_pointwise() || !need_k {
        Vec::new()
    } else {
        vec![0.0; patch * p]
    };
    let mut dcols = if g.is_pointwise() || !need_x {
        Vec::new()
    } else {
        vec![0.0; patch * p]
    };
    for s in 0..g.n {
        let dys = &dy[s * out_size..(s + 1) * out_size];
        if let Some(db) = db.as_mut() {
            for (o, row) in dys.chunks_exact(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        let xs = &x[s * in_size..(s + 1) * in_size];
        if let Some(dk) = dk.as_mut() {
            let cols_ref: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dK[cout, patch] += dY[cout, p] · colsᵀ[p, patch]
            gemm(g.cout, p, patch, dys, (p, 1), cols_ref, (1, p), 1.0, dk, (patch, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_size..(s + 1) * in_size];
            // dcols[patch, p] = Kᵀ[patch, cout] · dY[cout, p]
            if g.is_pointwise() {
                gemm(patch, g.cout, p, k, (1, patch), dys, (p, 1), 1.0, dxs, (p, 1));
            } else {
                gemm(patch, g.cout, p, k, (1, patch), dys, (p, 1), 0.0, &mut dcols, (p, 1));
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    fn window(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        let ys = y0.max(0) as usize..((y0 + self.kh as isize).min(self.h as isize)).max(0) as usize;
        let xs = x0.max(0) as usize..((x0 + self.kw as isize).min(self.w as isize)).max(0) as usize;
        (ys, xs)
    }
}

/// Returns the pooled values and, per output, the flat input index of the
/// first (row-major) maximum.
pub(crate) fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let (ys, xs) = g.window(oy, ox);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for y in ys {
                    for x_ in xs.clone() {
                        let idx = base + y * g.w + x_;
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let (ys, xs) = g.window(oy, ox);
                let count = ys.len() * xs.len();
                let mut acc = 0.0;
                for y in ys {
                    for x_ in xs.clone() {
                        acc += x[base + y * g.w + x_];
                    }
                }
                out.push(acc / count as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let (ys, xs) = g.window(oy, ox);
                let share = dy[(plane * g.ho + oy) * g.wo + ox] / (ys.len() * xs.len()) as f64;
                for y in ys {
                    for x_ in xs.clone() {
                        dx[base + y * g.w + x_] += share;
                    }
                }
            }
        }
    }
    dx
}
