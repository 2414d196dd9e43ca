//! Plain slice kernels used by the graph ops.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a stride-1 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` column matrix.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        let mut r = 0;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = y as isize + ky as isize - pad;
                        let line = &mut dst[y * ow..(y + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (x, v) in line.iter_mut().enumerate() {
                            let ix = x as isize + kx as isize - pad;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, accumulating.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        let mut r = 0;
        for c in 0..self.in_channels {
            let base = c * self.height * self.width;
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let src = &cols[r * oh * ow..(r + 1) * oh * ow];
                    for y in 0..oh {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let row = base + iy as usize * self.width;
                        for x in 0..ow {
                            let ix = x as isize + kx as isize - pad;
                            if ix >= 0 && ix < self.width as isize {
                                image[row + ix as usize] += src[y * ow + x];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` so element
/// `(o, i, n)` sits at `o·len·inner + i·inner + n`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each flat index of `target`, the flat index into a tensor of `source`
/// shape under right-aligned broadcasting.
pub fn broadcast_index(source: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let lead = rank - source.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..source.len()).rev() {
        strides[lead + d] = if source[d] == 1 { 0 } else { acc };
        acc *= source[d];
    }
    let total: usize = target.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < target[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

/// Right-aligned broadcast of two shapes, `None` if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}
