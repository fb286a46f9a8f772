use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use super::Scalar;
use crate::error::{Error, Result};

/// Encoder activations, `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F>(pub Array3<F>);

impl<F: Scalar> FeatureMap<F> {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn positions(&self) -> usize {
        let (_, h, w) = self.0.dim();
        h * w
    }

    /// `(channels, height * width)`, positions in row-major order.
    pub fn flatten(&self) -> Array2<F> {
        let (c, h, w) = self.0.dim();
        self.0
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
    }

    pub fn unflatten(x: Array2<F>, height: usize, width: usize) -> Result<Self> {
        let (c, n) = x.dim();
        if n != height * width {
            return Err(Error::Shape(format!(
                "{n} positions cannot form a {height}x{width} map"
            )));
        }
        let x = x.as_standard_layout().into_owned();
        Ok(FeatureMap(x.into_shape_with_order((c, height, width)).expect("sizes match")))
    }
}

/// Per-channel spatial mean of a flattened `(channels, positions)` map.
pub fn global_average_pool<F: Scalar>(x: ArrayView2<F>) -> Result<Array1<F>> {
    let n = x.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("empty spatial extent".into()));
    }
    Ok(x.sum_axis(Axis(1)) / F::of(n as f64))
}

/// Spreads a pooled gradient evenly back over the positions.
pub fn global_average_pool_backward<F: Scalar>(dm: &Array1<F>, positions: usize) -> Array2<F> {
    let scale = F::of(1.0 / positions as f64);
    let mut dx = Array2::zeros((dm.len(), positions));
    for (mut row, &g) in dx.axis_iter_mut(Axis(0)).zip(dm.iter()) {
        row.fill(g * scale);
    }
    dx
}
