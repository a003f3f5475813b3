//! Raw row-major kernels shared by the forward and backward passes.

/// `out[n,m] = a[n,k] · b[k,m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Accumulates `da += dc · bᵀ` and `db += aᵀ · dc`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    n: usize,
    k: usize,
    m: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        for i in 0..n {
            let dc_row = &dc[i * m..(i + 1) * m];
            for p in 0..k {
                let b_row = &b[p * m..(p + 1) * m];
                da[i * k + p] += dot(dc_row, b_row);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            let dc_row = &dc[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                let db_row = &mut db[p * m..(p + 1) * m];
                for (d, &g) in db_row.iter_mut().zip(dc_row) {
                    *d += av * g;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a valid (unpadded) 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Column matrix `[C·K·K, OH·OW]` for one image.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let (oh, ow, k, s) = (self.out_h(), self.out_w(), self.kernel, self.stride);
        let p = oh * ow;
        let mut cols = vec![0.0; self.patch() * p];
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let q = (c * k + ki) * k + kj;
                    let dst = &mut cols[q * p..(q + 1) * p];
                    for y in 0..oh {
                        let src_row = (c * self.height + y * s + ki) * self.width + kj;
                        for x in 0..ow {
                            dst[y * ow + x] = img[src_row + x * s];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow, k, s) = (self.out_h(), self.out_w(), self.kernel, self.stride);
        let p = oh * ow;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let q = (c * k + ki) * k + kj;
                    let src = &cols[q * p..(q + 1) * p];
                    for y in 0..oh {
                        let dst_row = (c * self.height + y * s + ki) * self.width + kj;
                        for x in 0..ow {
                            img[dst_row + x * s] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Batched valid convolution. `input` is `[N, C, H, W]`, `weight` is
/// `[F, C, K, K]`, `bias` is `[F]`; output is `[N, F, OH, OW]`.
pub fn conv2d(input: &[f64], weight: &[f64], bias: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let q = g.patch();
    let mut out = Vec::with_capacity(batch * g.filters * p);
    for n in 0..batch {
        let img = &input[n * g.image_len()..(n + 1) * g.image_len()];
        let cols = g.im2col(img);
        let mut y = matmul(weight, &cols, g.filters, q, p);
        for (f, chunk) in y.chunks_mut(p).enumerate() {
            let b = bias[f];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        out.extend_from_slice(&y);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    batch: usize,
    g: ConvGeom,
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let p = g.positions();
    let q = g.patch();
    let out_len = g.filters * p;
    for n in 0..batch {
        let img = &input[n * g.image_len()..(n + 1) * g.image_len()];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = dbias.as_deref_mut() {
            for (f, chunk) in dy.chunks(p).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        let need_cols = dweight.is_some();
        let cols = if need_cols { g.im2col(img) } else { Vec::new() };
        let mut dcols = if dinput.is_some() { vec![0.0; q * p] } else { Vec::new() };
        matmul_backward(
            weight,
            &cols,
            dy,
            g.filters,
            q,
            p,
            dweight.as_deref_mut(),
            None,
        );
        if let Some(di) = dinput.as_deref_mut() {
            // dcols = Wᵀ · dy
            for f in 0..g.filters {
                let dy_row = &dy[f * p..(f + 1) * p];
                for qi in 0..q {
                    let w = weight[f * q + qi];
                    let dst = &mut dcols[qi * p..(qi + 1) * p];
                    for (d, &v) in dst.iter_mut().zip(dy_row) {
                        *d += w * v;
                    }
                }
            }
            let img_grad = &mut di[n * g.image_len()..(n + 1) * g.image_len()];
            g.col2im_add(&dcols, img_grad);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis of length `m`.
pub fn softmax_rows(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(m).zip(out.chunks_mut(m)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}
