//! Row-major dense tensors and the numeric kernels shared by the tape and the
//! tape-free inference path.

use std::fmt;

/// A dense row-major `f64` array with an explicit shape.
///
/// Scalars are represented with shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive: {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Rows and columns when viewed as a matrix: leading extent times the rest.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// `c = a·b` (+ `beta·c`), with `a` m×k and `b` k×n, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Strides for the logical (untransposed) operands.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 2, "matmul lhs must be 2-d, got {:?}", a.shape);
    assert_eq!(b.shape.len(), 2, "matmul rhs must be 2-d, got {:?}", b.shape);
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output extent of a convolution over `input` pixels, if positive.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `input` pixels.
    pub fn transpose_out(&self, input: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.kernel;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Unfold one `[c, h, w]` image into a `[c·k·k, oh·ow]` column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, c, h, w]`, `weight: [o, c, k, k]` → `[n, o, oh, ow]`. No bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (o, wc, k, k2) = dims4(weight);
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert!(k == g.kernel && k2 == g.kernel, "conv2d kernel mismatch");
    let oh = g.conv_out(h).expect("conv2d output height");
    let ow = g.conv_out(w).expect("conv2d output width");
    let ckk = c * k * k;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        let cols = im2col(&x.data[s * c * h * w..(s + 1) * c * h * w], c, h, w, g, oh, ow);
        gemm(
            o,
            ckk,
            oh * ow,
            &weight.data,
            false,
            &cols,
            false,
            0.0,
            &mut out[s * o * oh * ow..(s + 1) * o * oh * ow],
        );
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Gradient of [`conv2d`] with respect to its input, given the output gradient.
pub fn conv2d_input_grad(gout: &Tensor, weight: &Tensor, g: ConvGeom, h: usize, w: usize) -> Tensor {
    let (n, o, oh, ow) = dims4(gout);
    let (wo, c, k, _) = dims4(weight);
    assert_eq!(o, wo);
    let ckk = c * k * k;
    let mut dx = vec![0.0; n * c * h * w];
    let mut cols = vec![0.0; ckk * oh * ow];
    for s in 0..n {
        gemm(
            ckk,
            o,
            oh * ow,
            &weight.data,
            true,
            &gout.data[s * o * oh * ow..(s + 1) * o * oh * ow],
            false,
            0.0,
            &mut cols,
        );
        col2im(&cols, c, h, w, g, oh, ow, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gout: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (_, o, oh, ow) = dims4(gout);
    let k = g.kernel;
    let ckk = c * k * k;
    let mut dw = vec![0.0; o * ckk];
    for s in 0..n {
        let cols = im2col(&x.data[s * c * h * w..(s + 1) * c * h * w], c, h, w, g, oh, ow);
        gemm(
            o,
            oh * ow,
            ckk,
            &gout.data[s * o * oh * ow..(s + 1) * o * oh * ow],
            false,
            &cols,
            true,
            1.0,
            &mut dw,
        );
    }
    Tensor::new(vec![o, c, k, k], dw)
}

/// Transposed convolution: `x: [n, ci, h, w]`, `weight: [ci, co, k, k]`.
///
/// This is exactly the input-gradient of a [`conv2d`] from `co` to `ci`
/// channels, so the two share kernels.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, g: ConvGeom) -> Tensor {
    let (_, _, h, w) = dims4(x);
    let oh = g.transpose_out(h).expect("transposed conv output height");
    let ow = g.transpose_out(w).expect("transposed conv output width");
    conv2d_input_grad(x, weight, g, oh, ow)
}

pub fn conv_transpose2d_input_grad(gout: &Tensor, weight: &Tensor, g: ConvGeom) -> Tensor {
    conv2d(gout, weight, g)
}

pub fn conv_transpose2d_weight_grad(x: &Tensor, gout: &Tensor, g: ConvGeom) -> Tensor {
    // conv2d(gout) -> x uses weight [ci, co, k, k]; its weight grad has the same layout.
    conv2d_weight_grad(gout, x, g)
}

/// Adds a per-channel bias to `[n, c, ...]` in place.
pub fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let n = x.shape[0];
    let c = x.shape[1];
    assert_eq!(bias.len(), c);
    let plane = x.data.len() / (n * c);
    for s in 0..n {
        for (ci, b) in bias.iter().enumerate() {
            let off = (s * c + ci) * plane;
            for v in &mut x.data[off..off + plane] {
                *v += b;
            }
        }
    }
}

/// Adds a bias row to every row of an `[n, m]` matrix in place.
pub fn add_row_bias(x: &mut Tensor, bias: &[f64]) {
    let (n, m) = x.as_matrix_dims();
    assert_eq!(bias.len(), m);
    for r in 0..n {
        for (v, b) in x.data[r * m..(r + 1) * m].iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Sums `[n, c, ...]` over everything but the channel axis.
pub fn channel_sums(x: &Tensor) -> Vec<f64> {
    let n = x.shape[0];
    let c = x.shape[1];
    let plane = x.data.len() / (n * c);
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let off = (s * c + ci) * plane;
            *o += x.data[off..off + plane].iter().sum::<f64>();
        }
    }
    out
}

pub fn row_sums(x: &Tensor) -> Vec<f64> {
    let (n, m) = x.as_matrix_dims();
    let mut out = vec![0.0; m];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(&x.data[r * m..(r + 1) * m]) {
            *o += v;
        }
    }
    out
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape.len(), 4, "expected a 4-d tensor, got {:?}", t.shape);
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, g: ConvGeom) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let (o, _, k, _) = dims4(wt);
        let oh = g.conv_out(h).unwrap();
        let ow = g.conv_out(w).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data[((oc * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7919) % 31) as f64 * scale - 0.4).collect(),
        )
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom { kernel: 3, stride: 2, padding: 1 };
        let x = ramp(&[2, 3, 7, 6], 0.03);
        let w = ramp(&[4, 3, 3, 3], 0.05);
        let fast = conv2d(&x, &w, g);
        let slow = naive_conv(&x, &w, g);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)>
        let g = ConvGeom { kernel: 4, stride: 2, padding: 1 };
        let x = ramp(&[1, 2, 8, 8], 0.02);
        let w = ramp(&[3, 2, 4, 4], 0.04);
        let y = ramp(&[1, 3, 4, 4], 0.06);
        let lhs = conv2d(&x, &w, g).dot(&y);
        let rhs = x.dot(&conv_transpose2d(&y, &w, g));
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(conv_transpose2d(&y, &w, g).shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn geometry_extents() {
        let g = ConvGeom { kernel: 4, stride: 2, padding: 1 };
        assert_eq!(g.conv_out(64), Some(32));
        assert_eq!(g.transpose_out(8), Some(16));
        assert_eq!(ConvGeom { kernel: 5, stride: 1, padding: 0 }.conv_out(3), None);
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.5, -1.0], vec![2.0, 1.0, 0.0]]);
        let ab = matmul(&a, &b);
        let mut out = vec![0.0; 9];
        let bt = b.transpose2();
        gemm(3, 2, 3, a.data(), false, bt.data(), true, 0.0, &mut out);
        assert_eq!(out, ab.data());
        let at = a.transpose2();
        gemm(3, 2, 3, at.data(), true, b.data(), false, 0.0, &mut out);
        assert_eq!(out, ab.data());
    }
}
