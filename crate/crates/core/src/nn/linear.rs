use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2};

use super::{init_uniform, ParamId, ParamStore, Scalar};

/// Affine layer on row-major batches: `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, seed: u64, inputs: usize, outputs: usize) -> Self {
        let wname = format!("{name}.weight");
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(wname.clone(), init_uniform(seed, &wname, &[outputs, inputs], bound));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![outputs]));
        Linear {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    fn w<'a, F: Scalar>(&self, store: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        store.get(self.weight).view().into_dimensionality::<Ix2>().expect("2-d")
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w(store).t());
        let b = store.get(self.bias);
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(b, |a, &bb| *a += bb);
        }
        y
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        grads: &mut ParamStore<F>,
    ) -> Array2<F> {
        {
            let mut gw = grads
                .get_mut(self.weight)
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d");
            gw += &dy.t().dot(&x);
        }
        let gb = grads.get_mut(self.bias);
        gb.zip_mut_with(&dy.sum_axis(Axis(0)).into_dyn(), |a, &b| *a += b);
        dy.dot(&self.w(store))
    }
}
