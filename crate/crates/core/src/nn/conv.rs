//! 2-D convolution with same padding, lowered to a matrix product (im2col).

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix2};
use rayon::prelude::*;

use super::{init_normal, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Per-sample im2col buffers kept for the backward pass.
pub struct ConvCache<F> {
    cols: Vec<Array2<F>>,
    input_hw: (usize, usize),
}

/// Output extent of a same-padded convolution: `ceil(size / stride)`.
pub fn same_output_size(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

impl Conv2d {
    /// Registers `<name>.weight` (He-normal) and `<name>.bias` (zeros).
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        seed: u64,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = in_channels * kernel * kernel;
        let wname = format!("{name}.weight");
        let weight = store.add(
            wname.clone(),
            init_normal(
                seed,
                &wname,
                &[out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in as f64).sqrt(),
            ),
        );
        let bias = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(vec![out_channels]));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (same_output_size(h, self.stride), same_output_size(w, self.stride))
    }

    fn weight_matrix<'a, F: Scalar>(&self, store: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
        keep_cache: bool,
    ) -> Result<(Array4<F>, Option<ConvCache<F>>)> {
        let (batch, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w);
        let wm = self.weight_matrix(store);
        let bias = store.get(self.bias);
        let results: Vec<(Array2<F>, Array2<F>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let cols = self.im2col(x.index_axis(Axis(0), b), ho, wo);
                let mut y = wm.dot(&cols);
                for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
                (y, cols)
            })
            .collect();
        let mut out = Array4::zeros((batch, self.out_channels, ho, wo));
        let mut cols_all = Vec::with_capacity(if keep_cache { batch } else { 0 });
        for (b, (y, cols)) in results.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), b)
                .assign(&y.into_shape_with_order((self.out_channels, ho, wo)).expect("shape"));
            if keep_cache {
                cols_all.push(cols);
            }
        }
        let cache = keep_cache.then(|| ConvCache {
            cols: cols_all,
            input_hw: (h, w),
        });
        Ok((out, cache))
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `input_grad` is set.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        grads: &mut ParamStore<F>,
        input_grad: bool,
    ) -> Option<Array4<F>> {
        let (batch, _, ho, wo) = dy.dim();
        let (h, w) = cache.input_hw;
        let wm = self.weight_matrix(store);
        let per_sample: Vec<(Array2<F>, Option<Array2<F>>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let dyb = dy
                    .index_axis(Axis(0), b)
                    .to_owned()
                    .into_shape_with_order((self.out_channels, ho * wo))
                    .expect("shape");
                let dw = dyb.dot(&cache.cols[b].t());
                let dcols = input_grad.then(|| wm.t().dot(&dyb));
                (dw, dcols)
            })
            .collect();
        let mut dx = input_grad.then(|| Array4::zeros((batch, self.in_channels, h, w)));
        {
            let gw = grads.get_mut(self.weight);
            let mut gw2 = gw
                .view_mut()
                .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
                .expect("contiguous")
                .into_dimensionality::<Ix2>()
                .expect("2d");
            // Sequential reduction keeps the summation order fixed.
            for (dw, _) in &per_sample {
                gw2 += dw;
            }
        }
        {
            let gb = grads.get_mut(self.bias);
            for b in 0..batch {
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dy.slice(s![b, o, .., ..]).sum();
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            for (b, (_, dcols)) in per_sample.iter().enumerate() {
                self.col2im(dcols.as_ref().expect("requested"), dx.index_axis_mut(Axis(0), b), ho, wo);
            }
        }
        dx
    }

    fn im2col<F: Scalar>(&self, x: ArrayView3<F>, ho: usize, wo: usize) -> Array2<F> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = self.pad() as isize;
        let stride = self.stride;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Scalar>(&self, dcols: &Array2<F>, mut dx: ArrayViewMut3<F>, ho: usize, wo: usize) {
        let (c, h, w) = dx.dim();
        let k = self.kernel;
        let pad = self.pad() as isize;
        let stride = self.stride;
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &ds[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ch * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * stride) as isize + kj as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
