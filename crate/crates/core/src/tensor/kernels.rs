//! Value-level kernels behind the graph ops: convolution via im2col + GEMM,
//! broadcasting reductions, matrix products and index gathers.

use crate::{Error, Result, Scalar};

use super::{numel, Tensor};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

fn out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = extent + 2 * padding;
    if span < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded extent {span}"
        )));
    }
    if !(span - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "output extent ({span} - {kernel}) / {stride} + 1 is not integral"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects N×C×H×W input and F×C×k×k kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                input[1], kernel[1]
            )));
        }
        if kernel[2] != kernel[3] {
            return Err(Error::dim(format!("non-square kernel {kernel:?}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        let k = kernel[2];
        Ok(ConvGeom {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel: k,
            stride,
            padding,
            out_height: out_extent(input[2], k, stride, padding)?,
            out_width: out_extent(input[3], k, stride, padding)?,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfold one sample into a `(C·k·k) × (H'·W')` column matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * pos;
                    for oy in 0..self.out_height {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut cols[row + oy * self.out_width..row + (oy + 1) * self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *v = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into a sample.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * pos;
                    for oy in 0..self.out_height {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.out_width..row + (oy + 1) * self.out_width];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias: `N×C×H×W ⋆ F×C×k×k → N×F×H'×W'`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let (pl, pos, f) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut out = Tensor::zeros(&geom.output_shape());
    let mut cols = vec![T::zero(); pl * pos];
    let in_per = numel(&geom.input_shape()[1..]);
    for n in 0..geom.batch {
        geom.im2col(&x.data[n * in_per..(n + 1) * in_per], &mut cols);
        let dst = &mut out.data[n * f * pos..(n + 1) * f * pos];
        T::gemm(
            f,
            pl,
            pos,
            T::one(),
            &w.data,
            pl as isize,
            1,
            &cols,
            pos as isize,
            1,
            T::zero(),
            dst,
            pos as isize,
            1,
        );
    }
    out
}

/// Gradient of `<g, conv(x, w)>` with respect to `x`.
pub fn conv2d_back_input<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let (pl, pos, f) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut out = Tensor::zeros(&geom.input_shape());
    let mut cols = vec![T::zero(); pl * pos];
    let in_per = numel(&geom.input_shape()[1..]);
    for n in 0..geom.batch {
        let gn = &g.data[n * f * pos..(n + 1) * f * pos];
        // cols = wᵀ · g_n
        T::gemm(
            pl,
            f,
            pos,
            T::one(),
            &w.data,
            1,
            pl as isize,
            gn,
            pos as isize,
            1,
            T::zero(),
            &mut cols,
            pos as isize,
            1,
        );
        geom.col2im(&cols, &mut out.data[n * in_per..(n + 1) * in_per]);
    }
    out
}

/// Gradient of `<g, conv(x, w)>` with respect to `w`.
pub fn conv2d_back_kernel<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let (pl, pos, f) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut out = Tensor::zeros(&geom.kernel_shape());
    let mut cols = vec![T::zero(); pl * pos];
    let in_per = numel(&geom.input_shape()[1..]);
    for n in 0..geom.batch {
        geom.im2col(&x.data[n * in_per..(n + 1) * in_per], &mut cols);
        let gn = &g.data[n * f * pos..(n + 1) * f * pos];
        // dW += g_n · colsᵀ
        T::gemm(
            f,
            pos,
            pl,
            T::one(),
            gn,
            pos as isize,
            1,
            &cols,
            1,
            pos as isize,
            T::one(),
            &mut out.data,
            pl as isize,
            1,
        );
    }
    out
}

/// Checks that `small` is `big` with some extents collapsed to 1.
pub fn check_broadcast(small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::dim(format!("{small:?} does not broadcast to {big:?}")))
    }
}

/// For every flat index of `big`, the flat index of `small` it maps to.
fn visit_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut small_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    // innermost loop runs over the last axis
    let last = big[rank - 1];
    let last_stride = small_strides[rank - 1];
    let outer = numel(&big[..rank - 1]);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    let mut flat = 0usize;
    for _ in 0..outer {
        for j in 0..last {
            f(flat, base + j * last_stride);
            flat += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += small_strides[d];
            if idx[d] < big[d] {
                break;
            }
            base -= small_strides[d] * big[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    visit_broadcast(&x.shape, shape, |b, s| out.data[b] = x.data[s]);
    out
}

pub fn sum_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    visit_broadcast(shape, &x.shape, |b, s| out.data[s] += x.data[b]);
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!("matmul of {:?} and {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        k as isize,
        1,
        &b.data,
        n as isize,
        1,
        T::zero(),
        &mut out.data,
        n as isize,
        1,
    );
    Ok(out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::dim(format!("transpose of rank-{} tensor", a.rank())));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(out)
}

pub fn gather<T: Scalar>(x: &Tensor<T>, index: &[usize], shape: &[usize]) -> Tensor<T> {
    Tensor {
        shape: shape.to_vec(),
        data: index.iter().map(|&i| x.data[i]).collect(),
    }
}

pub fn scatter_add<T: Scalar>(g: &Tensor<T>, index: &[usize], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    for (&i, &v) in index.iter().zip(&g.data) {
        out.data[i] += v;
    }
    out
}

/// Argmax positions of a windowed max pool; ties resolve to the first
/// element in row-major window order.
pub fn max_pool_indices<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Vec<usize>, [usize; 4])> {
    if x.rank() != 4 {
        return Err(Error::dim(format!("max_pool expects rank 4, got {:?}", x.shape)));
    }
    if window == 0 || stride == 0 {
        return Err(Error::config("max_pool window and stride must be positive"));
    }
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    if window > h || window > w {
        return Err(Error::config(format!(
            "max_pool window {window} larger than input {h}×{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let at = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data[at] > x.data[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [n, c, oh, ow]))
}

/// Argmax per (sample, channel) plane, first occurrence on ties.
pub fn global_max_indices<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<usize>, [usize; 2])> {
    if x.rank() != 4 {
        return Err(Error::dim(format!("global_max_pool expects rank 4, got {:?}", x.shape)));
    }
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    if h * w == 0 {
        return Err(Error::config("global_max_pool over empty spatial extent"));
    }
    let per = h * w;
    let idx = (0..n * c)
        .map(|plane| {
            let base = plane * per;
            (base..base + per).fold(base, |best, at| if x.data[at] > x.data[best] { at } else { best })
        })
        .collect();
    Ok((idx, [n, c]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_rejects_fractional_extent() {
        assert!(ConvGeom::new(&[1, 1, 32, 32], &[1, 1, 3, 3], 2, 1).is_err());
        let g = ConvGeom::new(&[1, 1, 33, 33], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out_height, 17);
    }

    #[test]
    fn broadcast_and_sum_are_adjoint_shapes() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 1], |i| i as f64 + 1.0);
        let b = broadcast_to(&x, &[2, 3, 4]);
        assert_eq!(b.data()[0..4], [1.0; 4]);
        assert_eq!(b.data()[12..16], [1.0; 4]);
        let s = sum_to(&b, &[1, 3, 1]);
        assert_eq!(s.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let (idx, shape) = max_pool_indices(&x, 2, 2).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(shape, [1, 1, 1, 1]);
    }
}
