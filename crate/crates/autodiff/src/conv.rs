//! 2-D convolution kernels (im2col + GEMM).
//!
//! The three kernels here are the partial derivatives of the trilinear form
//! `T(x, w, y) = <conv(x, w), y>`, which is what lets the autodiff layer
//! differentiate convolutions to any order using only these three routines.

use crate::{Error, Result, Tensor};

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Taps outside the image read zero.
    Zero,
    /// Taps wrap around (periodic boundary).
    Circular,
}

/// Static hyperparameters of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            pad,
            padding,
        }
    }

    /// Output spatial extent for an input extent.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "input extent {input} too small for kernel {}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Fully resolved convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub spec: ConvSpec,
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of `conv(x, w)` from the shapes of `x` and `w`.
    pub fn for_conv(spec: ConvSpec, x: &[usize], w: &[usize]) -> Result<Self> {
        check_rank4(x, "input")?;
        check_rank4(w, "weight")?;
        if w[1] != x[1] || w[2] != spec.kernel || w[3] != spec.kernel {
            return Err(Error::Shape(format!(
                "weight {w:?} incompatible with input {x:?} and kernel {}",
                spec.kernel
            )));
        }
        Ok(Self {
            spec,
            batch: x[0],
            cin: x[1],
            cout: w[0],
            in_h: x[2],
            in_w: x[3],
            out_h: spec.out_extent(x[2])?,
            out_w: spec.out_extent(x[3])?,
        })
    }

    /// Geometry of the transposed convolution that maps `y` back to an
    /// input of spatial size `in_hw`.
    pub fn for_transpose(
        spec: ConvSpec,
        y: &[usize],
        w: &[usize],
        in_hw: (usize, usize),
    ) -> Result<Self> {
        check_rank4(y, "input")?;
        check_rank4(w, "weight")?;
        let geom = Self {
            spec,
            batch: y[0],
            cin: w[1],
            cout: w[0],
            in_h: in_hw.0,
            in_w: in_hw.1,
            out_h: spec.out_extent(in_hw.0)?,
            out_w: spec.out_extent(in_hw.1)?,
        };
        if y[1] != w[0] || geom.out_h != y[2] || geom.out_w != y[3] {
            return Err(Error::Shape(format!(
                "transposed conv: input {y:?} does not match weight {w:?} and target {in_hw:?}"
            )));
        }
        Ok(geom)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.cin, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.out_h, self.out_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.spec.kernel, self.spec.kernel]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.spec.kernel * self.spec.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// For every (tap, output position) the source spatial index, or `None`
    /// for zero-padded taps.
    fn tap_table(&self) -> Vec<Option<usize>> {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let p = self.spec.pad as isize;
        let mut table = Vec::with_capacity(k * k * self.out_len());
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..self.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    for ox in 0..self.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        table.push(self.resolve(iy, ix));
                    }
                }
            }
        }
        table
    }

    fn resolve(&self, iy: isize, ix: isize) -> Option<usize> {
        let (h, w) = (self.in_h as isize, self.in_w as isize);
        match self.spec.padding {
            Padding::Zero => {
                if iy < 0 || iy >= h || ix < 0 || ix >= w {
                    None
                } else {
                    Some((iy * w + ix) as usize)
                }
            }
            Padding::Circular => {
                let y = iy.rem_euclid(h);
                let x = ix.rem_euclid(w);
                Some((y * w + x) as usize)
            }
        }
    }
}

fn check_rank4(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("{what} must be rank 4, got {shape:?}")));
    }
    Ok(())
}

fn im2col(geom: &ConvGeom, table: &[Option<usize>], image: &[f64], cols: &mut [f64]) {
    let kk = geom.spec.kernel * geom.spec.kernel;
    let plane = geom.in_h * geom.in_w;
    let n = geom.out_len();
    for c in 0..geom.cin {
        let src = &image[c * plane..(c + 1) * plane];
        for tap in 0..kk {
            let row = &mut cols[(c * kk + tap) * n..(c * kk + tap + 1) * n];
            let idx = &table[tap * n..(tap + 1) * n];
            for (dst, slot) in row.iter_mut().zip(idx) {
                *dst = match slot {
                    Some(i) => src[*i],
                    None => 0.0,
                };
            }
        }
    }
}

fn col2im(geom: &ConvGeom, table: &[Option<usize>], cols: &[f64], image: &mut [f64]) {
    let kk = geom.spec.kernel * geom.spec.kernel;
    let plane = geom.in_h * geom.in_w;
    let n = geom.out_len();
    for c in 0..geom.cin {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for tap in 0..kk {
            let row = &cols[(c * kk + tap) * n..(c * kk + tap + 1) * n];
            let idx = &table[tap * n..(tap + 1) * n];
            for (v, slot) in row.iter().zip(idx) {
                if let Some(i) = slot {
                    dst[*i] += v;
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major regions whose lengths are checked by the callers.
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = conv(x, w)`.
pub fn conv2d(geom: &ConvGeom, x: &Tensor, w: &Tensor) -> Tensor {
    let table = geom.tap_table();
    let (kl, n) = (geom.patch_len(), geom.out_len());
    let in_len = geom.cin * geom.in_h * geom.in_w;
    let out_len = geom.cout * n;
    let mut cols = vec![0.0; kl * n];
    let mut out = vec![0.0; geom.batch * out_len];
    for b in 0..geom.batch {
        im2col(geom, &table, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            geom.cout,
            kl,
            n,
            w.data(),
            false,
            &cols,
            false,
            &mut out[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    Tensor::new(&geom.output_shape(), out).expect("conv2d output shape")
}

/// Adjoint of `conv` in its input: `<conv(x, w), y> = <x, conv_transpose(y, w)>`.
pub fn conv_transpose2d(geom: &ConvGeom, y: &Tensor, w: &Tensor) -> Tensor {
    let table = geom.tap_table();
    let (kl, n) = (geom.patch_len(), geom.out_len());
    let in_len = geom.cin * geom.in_h * geom.in_w;
    let out_len = geom.cout * n;
    let mut cols = vec![0.0; kl * n];
    let mut x = vec![0.0; geom.batch * in_len];
    for b in 0..geom.batch {
        gemm(
            kl,
            geom.cout,
            n,
            w.data(),
            true,
            &y.data()[b * out_len..(b + 1) * out_len],
            false,
            &mut cols,
            false,
        );
        col2im(geom, &table, &cols, &mut x[b * in_len..(b + 1) * in_len]);
    }
    Tensor::new(&geom.input_shape(), x).expect("conv_transpose2d output shape")
}

/// Adjoint of `conv` in its weight: `<conv(x, w), y> = <w, conv_weight_grad(x, y)>`.
pub fn conv_weight_grad(geom: &ConvGeom, x: &Tensor, y: &Tensor) -> Tensor {
    let table = geom.tap_table();
    let (kl, n) = (geom.patch_len(), geom.out_len());
    let in_len = geom.cin * geom.in_h * geom.in_w;
    let out_len = geom.cout * n;
    let mut cols = vec![0.0; kl * n];
    let mut dw = vec![0.0; geom.cout * kl];
    for b in 0..geom.batch {
        im2col(geom, &table, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            geom.cout,
            n,
            kl,
            &y.data()[b * out_len..(b + 1) * out_len],
            false,
            &cols,
            true,
            &mut dw,
            b > 0,
        );
    }
    Tensor::new(&geom.weight_shape(), dw).expect("conv weight grad shape")
}
