//! Channel-first 4D tensors (`C x D x H x W`) in f64 and the layer
//! primitives the networks are assembled from. Every primitive has an
//! exact reverse-mode adjoint next to its forward.

use rayon::prelude::*;

use crate::error::{Result, SpadeError};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Tensor4 { c, d, h, w, data: vec![0.0; c * d * h * w] }
    }

    pub fn from_volume(v: &Volume) -> Self {
        Tensor4 {
            c: 1,
            d: v.dims[0],
            h: v.dims[1],
            w: v.dims[2],
            data: v.data.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.d + z) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, z, y, x)]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.c == other.c && self.d == other.d && self.h == other.h && self.w == other.w
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(SpadeError::Numerical(format!("non-finite activation in {context}")));
        }
        Ok(())
    }

    /// Extract the sub-tensor over `[lo, hi)` per spatial axis.
    pub fn slice_spatial(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Tensor4> {
        for a in 0..3 {
            let dim = [self.d, self.h, self.w][a];
            if lo[a] >= hi[a] || hi[a] > dim {
                return Err(SpadeError::Geometry(format!(
                    "spatial slice [{:?}, {:?}) invalid for dims ({}, {}, {})",
                    lo, hi, self.d, self.h, self.w
                )));
            }
        }
        let (sd, sh, sw) = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
        let mut out = Tensor4::zeros(self.c, sd, sh, sw);
        for c in 0..self.c {
            for z in 0..sd {
                for y in 0..sh {
                    let src = self.idx(c, lo[0] + z, lo[1] + y, lo[2]);
                    let dst = out.idx(c, z, y, 0);
                    out.data[dst..dst + sw].copy_from_slice(&self.data[src..src + sw]);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of `slice_spatial`: add `grad` back into the slice window.
    pub fn scatter_add_spatial(&mut self, grad: &Tensor4, lo: [usize; 3]) {
        for c in 0..grad.c {
            for z in 0..grad.d {
                for y in 0..grad.h {
                    let dst = self.idx(c, lo[0] + z, lo[1] + y, lo[2]);
                    let src = grad.idx(c, z, y, 0);
                    for x in 0..grad.w {
                        self.data[dst + x] += grad.data[src + x];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution, stride 1, zero padding 1
// ---------------------------------------------------------------------------

/// Weights layout: `[oc][ic][kz][ky][kx]`, biases `[oc]`.
pub fn conv3_forward(input: &Tensor4, w: &[f64], b: &[f64], out_c: usize) -> Tensor4 {
    let (ic, d, h, wd) = (input.c, input.d, input.h, input.w);
    debug_assert_eq!(w.len(), out_c * ic * 27);
    debug_assert_eq!(b.len(), out_c);
    let mut out = Tensor4::zeros(out_c, d, h, wd);
    let plane = d * h * wd;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(oc, out_ch)| {
            let wslab = &w[oc * ic * 27..(oc + 1) * ic * 27];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..wd {
                        let mut acc = b[oc];
                        for i in 0..ic {
                            let wk = &wslab[i * 27..i * 27 + 27];
                            let mut k = 0;
                            for kz in 0..3usize {
                                let zz = z as isize + kz as isize - 1;
                                if zz < 0 || zz >= d as isize {
                                    k += 9;
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let yy = y as isize + ky as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        k += 3;
                                        continue;
                                    }
                                    let row = ((i * d + zz as usize) * h + yy as usize) * wd;
                                    for kx in 0..3usize {
                                        let xx = x as isize + kx as isize - 1;
                                        if xx >= 0 && xx < wd as isize {
                                            acc += wk[k] * input.data[row + xx as usize];
                                        }
                                        k += 1;
                                    }
                                }
                            }
                        }
                        out_ch[(z * h + y) * wd + x] = acc;
                    }
                }
            }
        });
    out
}

/// Returns `(grad_input, grad_w, grad_b)`.
pub fn conv3_backward(
    input: &Tensor4,
    w: &[f64],
    out_c: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (ic, d, h, wd) = (input.c, input.d, input.h, input.w);
    let mut grad_w = vec![0.0f64; out_c * ic * 27];
    let mut grad_b = vec![0.0f64; out_c];
    let plane = d * h * wd;

    grad_w
        .par_chunks_mut(ic * 27)
        .zip(grad_b.par_iter_mut())
        .enumerate()
        .for_each(|(oc, (gw, gb))| {
            let gout = &grad_out.data[oc * plane..(oc + 1) * plane];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..wd {
                        let g = gout[(z * h + y) * wd + x];
                        if g == 0.0 {
                            continue;
                        }
                        *gb += g;
                        for i in 0..ic {
                            let base = i * 27;
                            let mut k = 0;
                            for kz in 0..3usize {
                                let zz = z as isize + kz as isize - 1;
                                if zz < 0 || zz >= d as isize {
                                    k += 9;
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let yy = y as isize + ky as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        k += 3;
                                        continue;
                                    }
                                    let row = ((i * d + zz as usize) * h + yy as usize) * wd;
                                    for kx in 0..3usize {
                                        let xx = x as isize + kx as isize - 1;
                                        if xx >= 0 && xx < wd as isize {
                                            gw[base + k] += g * input.data[row + xx as usize];
                                        }
                                        k += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut grad_in = Tensor4::zeros(ic, d, h, wd);
    grad_in
        .data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, gin)| {
            for oc in 0..out_c {
                let gout = &grad_out.data[oc * plane..(oc + 1) * plane];
                let wk = &w[(oc * ic + i) * 27..(oc * ic + i) * 27 + 27];
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..wd {
                            // grad_in[p] = sum_k w[k] * grad_out[p - (k-1)]
                            let mut acc = 0.0;
                            let mut k = 0;
                            for kz in 0..3usize {
                                let zz = z as isize - (kz as isize - 1);
                                if zz < 0 || zz >= d as isize {
                                    k += 9;
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let yy = y as isize - (ky as isize - 1);
                                    if yy < 0 || yy >= h as isize {
                                        k += 3;
                                        continue;
                                    }
                                    let row = (zz as usize * h + yy as usize) * wd;
                                    for kx in 0..3usize {
                                        let xx = x as isize - (kx as isize - 1);
                                        if xx >= 0 && xx < wd as isize {
                                            acc += wk[k] * gout[row + xx as usize];
                                        }
                                        k += 1;
                                    }
                                }
                            }
                            gin[(z * h + y) * wd + x] += acc;
                        }
                    }
                }
            }
        });

    (grad_in, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// 1x1x1 (pointwise) convolution
// ---------------------------------------------------------------------------

/// Weights layout `[oc][ic]`, biases `[oc]`. Pure per-location channel
/// mixing, so spatial structure is preserved exactly.
pub fn conv1x1_forward(input: &Tensor4, w: &[f64], b: &[f64], out_c: usize) -> Tensor4 {
    let n = input.spatial_len();
    let ic = input.c;
    let mut out = Tensor4::zeros(out_c, input.d, input.h, input.w);
    for oc in 0..out_c {
        let wrow = &w[oc * ic..(oc + 1) * ic];
        let dst = &mut out.data[oc * n..(oc + 1) * n];
        for v in dst.iter_mut() {
            *v = b[oc];
        }
        for i in 0..ic {
            let src = &input.data[i * n..(i + 1) * n];
            let wv = wrow[i];
            for (dv, sv) in dst.iter_mut().zip(src) {
                *dv += wv * sv;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Tensor4,
    w: &[f64],
    out_c: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let n = input.spatial_len();
    let ic = input.c;
    let mut grad_w = vec![0.0f64; out_c * ic];
    let mut grad_b = vec![0.0f64; out_c];
    let mut grad_in = Tensor4::zeros(ic, input.d, input.h, input.w);
    for oc in 0..out_c {
        let gout = &grad_out.data[oc * n..(oc + 1) * n];
        grad_b[oc] = gout.iter().sum();
        for i in 0..ic {
            let src = &input.data[i * n..(i + 1) * n];
            let mut gw = 0.0;
            for (g, s) in gout.iter().zip(src) {
                gw += g * s;
            }
            grad_w[oc * ic + i] = gw;
            let wv = w[oc * ic + i];
            let gin = &mut grad_in.data[i * n..(i + 1) * n];
            for (gi, g) in gin.iter_mut().zip(gout) {
                *gi += wv * g;
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// ReLU and sigmoid
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(post: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gv, pv) in g.data.iter_mut().zip(&post.data) {
        if *pv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn sigmoid_forward(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

pub fn sigmoid_backward(post: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gv, sv) in g.data.iter_mut().zip(&post.data) {
        *gv *= sv * (1.0 - sv);
    }
    g
}

// ---------------------------------------------------------------------------
// 2x pooling / upsampling
// ---------------------------------------------------------------------------

/// 2x2x2 average pooling. Each bin is summed with antipodal in-plane
/// pairing, which makes the result invariant under axis flips and in-plane
/// quarter turns of the input bit for bit (IEEE addition is commutative,
/// and the pairing maps to itself under those symmetries).
pub fn avg_pool2_forward(input: &Tensor4) -> Result<Tensor4> {
    if input.d % 2 != 0 || input.h % 2 != 0 || input.w % 2 != 0 {
        return Err(SpadeError::Shape(format!(
            "avg_pool2 requires even spatial dims, got ({}, {}, {})",
            input.d, input.h, input.w
        )));
    }
    let (od, oh, ow) = (input.d / 2, input.h / 2, input.w / 2);
    let mut out = Tensor4::zeros(input.c, od, oh, ow);
    let mut i = 0;
    for c in 0..input.c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let (z0, y0, x0) = (2 * z, 2 * y, 2 * x);
                    let p0 = (input.at(c, z0, y0, x0) + input.at(c, z0, y0 + 1, x0 + 1))
                        + (input.at(c, z0, y0, x0 + 1) + input.at(c, z0, y0 + 1, x0));
                    let p1 = (input.at(c, z0 + 1, y0, x0) + input.at(c, z0 + 1, y0 + 1, x0 + 1))
                        + (input.at(c, z0 + 1, y0, x0 + 1) + input.at(c, z0 + 1, y0 + 1, x0));
                    out.data[i] = (p0 + p1) / 8.0;
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad_out: &Tensor4, in_dims: (usize, usize, usize)) -> Tensor4 {
    let (d, h, w) = in_dims;
    let mut g = Tensor4::zeros(grad_out.c, d, h, w);
    let mut i = 0;
    for c in 0..grad_out.c {
        for z in 0..grad_out.d {
            for y in 0..grad_out.h {
                for x in 0..grad_out.w {
                    let gv = grad_out.data[i] / 8.0;
                    i += 1;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let j = g.idx(c, 2 * z + dz, 2 * y + dy, 2 * x + dx);
                                g.data[j] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

/// Average pooling to an arbitrary output grid; bin `i` covers input range
/// `[floor(i*n/o), ceil((i+1)*n/o))`. Handles outputs larger than the
/// input (bins of one element) so thin overlap slices still project.
pub fn adaptive_avg_pool_forward(input: &Tensor4, out_dims: [usize; 3]) -> Tensor4 {
    let [od, oh, ow] = out_dims;
    let bins = |n: usize, o: usize, i: usize| -> (usize, usize) {
        let start = i * n / o;
        let end = ((i + 1) * n).div_ceil(o);
        (start, end.max(start + 1).min(n.max(1)))
    };
    let mut out = Tensor4::zeros(input.c, od, oh, ow);
    let mut i = 0;
    for c in 0..input.c {
        for z in 0..od {
            let (z0, z1) = bins(input.d, od, z);
            for y in 0..oh {
                let (y0, y1) = bins(input.h, oh, y);
                for x in 0..ow {
                    let (x0, x1) = bins(input.w, ow, x);
                    let mut acc = 0.0;
                    for zz in z0..z1 {
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                acc += input.at(c, zz, yy, xx);
                            }
                        }
                    }
                    let count = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                    out.data[i] = acc / count;
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(
    grad_out: &Tensor4,
    in_dims: (usize, usize, usize),
) -> Tensor4 {
    let (d, h, w) = in_dims;
    let bins = |n: usize, o: usize, i: usize| -> (usize, usize) {
        let start = i * n / o;
        let end = ((i + 1) * n).div_ceil(o);
        (start, end.max(start + 1).min(n.max(1)))
    };
    let mut g = Tensor4::zeros(grad_out.c, d, h, w);
    let mut i = 0;
    for c in 0..grad_out.c {
        for z in 0..grad_out.d {
            let (z0, z1) = bins(d, grad_out.d, z);
            for y in 0..grad_out.h {
                let (y0, y1) = bins(h, grad_out.h, y);
                for x in 0..grad_out.w {
                    let (x0, x1) = bins(w, grad_out.w, x);
                    let count = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                    let gv = grad_out.data[i] / count;
                    i += 1;
                    for zz in z0..z1 {
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let j = g.idx(c, zz, yy, xx);
                                g.data[j] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &Tensor4) -> Tensor4 {
    let (od, oh, ow) = (input.d * 2, input.h * 2, input.w * 2);
    let mut out = Tensor4::zeros(input.c, od, oh, ow);
    let mut i = 0;
    for c in 0..input.c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    out.data[i] = input.at(c, z / 2, y / 2, x / 2);
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor4) -> Tensor4 {
    let (d, h, w) = (grad_out.d / 2, grad_out.h / 2, grad_out.w / 2);
    let mut g = Tensor4::zeros(grad_out.c, d, h, w);
    let mut i = 0;
    for c in 0..grad_out.c {
        for z in 0..grad_out.d {
            for y in 0..grad_out.h {
                for x in 0..grad_out.w {
                    let j = g.idx(c, z / 2, y / 2, x / 2);
                    g.data[j] += grad_out.data[i];
                    i += 1;
                }
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Dense layer and L2 normalization on flat vectors
// ---------------------------------------------------------------------------

/// `y = W x + b`, weights `[out][in]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut y = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        y.push(acc);
    }
    y
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    out_dim: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let mut grad_x = vec![0.0; in_dim];
    let mut grad_w = vec![0.0; out_dim * in_dim];
    let grad_b = grad_out.to_vec();
    for o in 0..out_dim {
        let g = grad_out[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] = g * x[i];
            grad_x[i] += g * row[i];
        }
    }
    (grad_x, grad_w, grad_b)
}

pub fn relu_vec_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect()
}

pub fn relu_vec_backward(post: &[f64], grad_out: &[f64]) -> Vec<f64> {
    post.iter()
        .zip(grad_out)
        .map(|(&p, &g)| if p <= 0.0 { 0.0 } else { g })
        .collect()
}

/// `y = x / ||x||`. Errors when the input has no direction.
pub fn l2_normalize_forward(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(SpadeError::DegenerateInput(
            "embedding norm vanished; zero vector has no direction".into(),
        ));
    }
    Ok((x.iter().map(|v| v / norm).collect(), norm))
}

pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad_out)
        .map(|(&yv, &gv)| (gv - yv * dot) / norm)
        .collect()
}
