//! Dense compute kernels.
//!
//! Every kernel that has a data-parallel form exists in two flavours: a
//! sequential `*_seq` function that is always compiled, and a `*_par`
//! function backed by rayon when the `parallel` feature is enabled. The
//! undecorated entry points dispatch on the feature. Parallel kernels only
//! split work across independent output elements, so both flavours produce
//! bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in multiply-adds) below which the parallel kernels fall back to the
/// sequential path.
pub const PAR_THRESHOLD: usize = 1 << 16;

/// Operand description for [`gemm`]: `data` holds a row-major matrix that is
/// logically `rows x cols` after the optional transpose.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub trans: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        Self { data, trans: false }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Self { data, trans: true }
    }
}

/// Row/column strides of an operand that is logically `rows x cols`.
fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)`
/// of size `k x n`; `c` is row-major `m x n`.
pub fn gemm_seq(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = strides(a.trans, m, k);
    let (rsb, csb) = strides(b.trans, k, n);
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_par(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    let threads = rayon::current_num_threads();
    if threads <= 1 || m * n * k < PAR_THRESHOLD || m < 2 {
        return gemm_seq(m, k, n, a, b, beta, c);
    }
    let rows_per = m.div_ceil(threads).max(1);
    c[..m * n]
        .par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_rows)| {
            let r0 = chunk * rows_per;
            let rows = c_rows.len() / n;
            // Row block of op(a): for the transposed layout the block is a
            // column offset of the stored matrix, handled through a shifted
            // view that keeps the original leading stride.
            if a.trans {
                let (rsb, csb) = strides(b.trans, k, n);
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr().add(r0),
                        1,
                        m as isize,
                        b.data.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c_rows.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            } else {
                let a_rows = MatRef::new(&a.data[r0 * k..(r0 + rows) * k]);
                gemm_seq(rows, k, n, a_rows, b, beta, c_rows);
            }
        });
}

/// Dispatching matrix product; see [`gemm_seq`].
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        gemm_par(m, k, n, a, b, beta, c)
    }
    #[cfg(not(feature = "parallel"))]
    {
        gemm_seq(m, k, n, a, b, beta, c)
    }
}

/// Batched product over `batch` independent `m x k` by `k x n` problems.
/// An operand whose batch flag is false is shared by every problem.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: MatRef,
    a_batched: bool,
    b: MatRef,
    b_batched: bool,
    c: &mut [f64],
) {
    let run = |i: usize, c_i: &mut [f64]| {
        let a_i = if a_batched {
            &a.data[i * m * k..(i + 1) * m * k]
        } else {
            &a.data[..m * k]
        };
        let b_i = if b_batched {
            &b.data[i * k * n..(i + 1) * k * n]
        } else {
            &b.data[..k * n]
        };
        gemm_seq(
            m,
            k,
            n,
            MatRef { data: a_i, trans: a.trans },
            MatRef { data: b_i, trans: b.trans },
            0.0,
            c_i,
        );
    };
    if m * n == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if batch * m * n * k >= PAR_THRESHOLD {
            c[..batch * m * n]
                .par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(i, c_i)| run(i, c_i));
            return;
        }
    }
    c[..batch * m * n]
        .chunks_mut(m * n)
        .enumerate()
        .for_each(|(i, c_i)| run(i, c_i));
}

/// Geometry of a 2-D convolution over NHWC images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Length of one im2col row: `kernel * kernel * in_ch`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.in_ch
    }

    fn cols_per_image(&self) -> usize {
        self.out_height() * self.out_width() * self.patch_len()
    }
}

fn im2col_image(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow, pl) = (g.out_height(), g.out_width(), g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kernel + kx) * g.in_ch..][..g.in_ch];
                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.width + ix as usize) * g.in_ch;
                        dst.copy_from_slice(&img[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
}

fn col2im_image(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow, pl) = (g.out_height(), g.out_width(), g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kernel + kx) * g.in_ch..][..g.in_ch];
                    let dst = (iy as usize * g.width + ix as usize) * g.in_ch;
                    for (d, s) in img[dst..dst + g.in_ch].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Unfold NHWC images into a `(batch * oh * ow) x patch_len` matrix.
pub fn im2col(g: &ConvGeom, images: &[f64]) -> Vec<f64> {
    let mut cols = vec![0.0; g.batch * g.cols_per_image()];
    if g.cols_per_image() == 0 {
        return cols;
    }
    let per_image = |(img, c): (&[f64], &mut [f64])| im2col_image(g, img, c);
    #[cfg(feature = "parallel")]
    images
        .par_chunks(g.image_len())
        .zip(cols.par_chunks_mut(g.cols_per_image()))
        .for_each(per_image);
    #[cfg(not(feature = "parallel"))]
    images
        .chunks(g.image_len())
        .zip(cols.chunks_mut(g.cols_per_image()))
        .for_each(per_image);
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into NHWC images.
pub fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let mut images = vec![0.0; g.batch * g.image_len()];
    if g.cols_per_image() == 0 {
        return images;
    }
    let per_image = |(c, img): (&[f64], &mut [f64])| col2im_image(g, c, img);
    #[cfg(feature = "parallel")]
    cols.par_chunks(g.cols_per_image())
        .zip(images.par_chunks_mut(g.image_len()))
        .for_each(per_image);
    #[cfg(not(feature = "parallel"))]
    cols.chunks(g.cols_per_image())
        .zip(images.chunks_mut(g.image_len()))
        .for_each(per_image);
    images
}
