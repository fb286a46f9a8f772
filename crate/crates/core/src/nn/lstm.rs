//! Stacked LSTM over time-major batches, gate order (input, forget, cell, output).

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2};

use super::{init_uniform, sigmoid, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Layer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    inputs: usize,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub hidden: usize,
    layers: Vec<Layer>,
}

/// Hidden and cell state per layer, each `(batch, hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<Array2<F>>,
    pub c: Vec<Array2<F>>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![Array2::zeros((batch, hidden)); layers],
            c: vec![Array2::zeros((batch, hidden)); layers],
        }
    }

    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }
}

struct Step<F> {
    x: Array2<F>,
    h_prev: Array2<F>,
    c_prev: Array2<F>,
    i: Array2<F>,
    f: Array2<F>,
    g: Array2<F>,
    o: Array2<F>,
    tanh_c: Array2<F>,
}

pub struct LstmCache<F> {
    // [layer][time]
    steps: Vec<Vec<Step<F>>>,
}

fn view2<F: Scalar>(t: &ArrayD<F>) -> ArrayView2<'_, F> {
    t.view().into_dimensionality::<Ix2>().expect("2-d")
}

impl Lstm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        seed: u64,
        inputs: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..num_layers)
            .map(|l| {
                let layer_in = if l == 0 { inputs } else { hidden };
                let p = |suffix: &str| format!("{name}.l{l}.{suffix}");
                let w_ih = store.add(p("w_ih"), init_uniform(seed, &p("w_ih"), &[4 * hidden, layer_in], bound));
                let w_hh = store.add(p("w_hh"), init_uniform(seed, &p("w_hh"), &[4 * hidden, hidden], bound));
                let bias = store.add(p("bias"), init_uniform(seed, &p("bias"), &[4 * hidden], bound));
                Layer {
                    w_ih,
                    w_hh,
                    bias,
                    inputs: layer_in,
                }
            })
            .collect();
        Lstm { hidden, layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_state<F: Scalar>(&self, state: &LstmState<F>, batch: usize) -> Result<()> {
        let ok = state.h.len() == self.layers.len()
            && state.c.len() == self.layers.len()
            && state
                .h
                .iter()
                .chain(&state.c)
                .all(|m| m.dim() == (batch, self.hidden));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "recurrent state must hold {} layers of ({batch}, {}) matrices",
                self.layers.len(),
                self.hidden
            )))
        }
    }

    /// Runs the stack over `x` of shape `(time, batch, inputs)` and returns
    /// the top-layer hidden states `(time, batch, hidden)`.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array3<F>,
        state: Option<&LstmState<F>>,
        keep_cache: bool,
    ) -> Result<(Array3<F>, LstmState<F>, Option<LstmCache<F>>)> {
        let (steps, batch, inputs) = x.dim();
        if steps == 0 {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        if inputs != self.layers[0].inputs {
            return Err(Error::Shape(format!(
                "recurrent model expects {} inputs, got {inputs}",
                self.layers[0].inputs
            )));
        }
        let mut state = match state {
            Some(s) => {
                self.check_state(s, batch)?;
                s.clone()
            }
            None => LstmState::zeros(self.layers.len(), batch, self.hidden),
        };
        let hd = self.hidden;
        let mut seq: Vec<Array2<F>> = x.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
        let mut cache = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let w_ih = view2(store.get(layer.w_ih));
            let w_hh = view2(store.get(layer.w_hh));
            let bias = store.get(layer.bias);
            let mut layer_cache = Vec::new();
            let mut outputs = Vec::with_capacity(steps);
            for xt in seq {
                let h_prev = state.h[l].clone();
                let c_prev = state.c[l].clone();
                let mut z = xt.dot(&w_ih.t()) + h_prev.dot(&w_hh.t());
                for mut row in z.axis_iter_mut(Axis(0)) {
                    row.zip_mut_with(bias, |a, &b| *a += b);
                }
                let i = z.slice(s![.., 0..hd]).mapv(sigmoid);
                let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
                let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(|v| v.tanh());
                let o = z.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
                let c = &f * &c_prev + &i * &g;
                let tanh_c = c.mapv(|v| v.tanh());
                let h = &o * &tanh_c;
                state.h[l] = h.clone();
                state.c[l] = c;
                outputs.push(h);
                if keep_cache {
                    layer_cache.push(Step {
                        x: xt,
                        h_prev,
                        c_prev,
                        i,
                        f,
                        g,
                        o,
                        tanh_c,
                    });
                }
            }
            if keep_cache {
                cache.push(layer_cache);
            }
            seq = outputs;
        }
        let mut out = Array3::zeros((steps, batch, hd));
        for (t, h) in seq.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), t).assign(&h);
        }
        Ok((out, state, keep_cache.then_some(LstmCache { steps: cache })))
    }

    /// Backpropagation through time. Gradients do not flow into the initial
    /// state. Returns the gradient w.r.t. the input sequence.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &LstmCache<F>,
        dh_top: &Array3<F>,
        grads: &mut ParamStore<F>,
    ) -> Array3<F> {
        let (steps, batch, _) = dh_top.dim();
        let hd = self.hidden;
        let mut d_seq: Vec<Array2<F>> = dh_top.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let w_ih = view2(store.get(layer.w_ih));
            let w_hh = view2(store.get(layer.w_hh));
            let mut gw_ih = Array2::<F>::zeros(w_ih.raw_dim());
            let mut gw_hh = Array2::<F>::zeros(w_hh.raw_dim());
            let mut gb = ndarray::Array1::<F>::zeros(4 * hd);
            let mut dh_next = Array2::<F>::zeros((batch, hd));
            let mut dc_next = Array2::<F>::zeros((batch, hd));
            let mut d_in = vec![Array2::<F>::zeros((batch, layer.inputs)); steps];
            for t in (0..steps).rev() {
                let st = &cache.steps[l][t];
                let dh = &d_seq[t] + &dh_next;
                let one = F::one();
                let d_o = &dh * &st.tanh_c;
                let dc = &dc_next + &(&dh * &st.o * &st.tanh_c.mapv(|v| one - v * v));
                let di = &dc * &st.g;
                let dg = &dc * &st.i;
                let df = &dc * &st.c_prev;
                dc_next = &dc * &st.f;
                let mut dz = Array2::<F>::zeros((batch, 4 * hd));
                dz.slice_mut(s![.., 0..hd]).assign(&(&di * &st.i.mapv(|v| v * (one - v))));
                dz.slice_mut(s![.., hd..2 * hd]).assign(&(&df * &st.f.mapv(|v| v * (one - v))));
                dz.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(&dg * &st.g.mapv(|v| one - v * v)));
                dz.slice_mut(s![.., 3 * hd..4 * hd]).assign(&(&d_o * &st.o.mapv(|v| v * (one - v))));
                gw_ih += &dz.t().dot(&st.x);
                gw_hh += &dz.t().dot(&st.h_prev);
                gb += &dz.sum_axis(Axis(0));
                d_in[t] = dz.dot(&w_ih);
                dh_next = dz.dot(&w_hh);
            }
            add_into(grads.get_mut(layer.w_ih), &gw_ih.into_dyn());
            add_into(grads.get_mut(layer.w_hh), &gw_hh.into_dyn());
            add_into(grads.get_mut(layer.bias), &gb.into_dyn());
            d_seq = d_in;
        }
        let inputs = self.layers[0].inputs;
        let mut dx = Array3::zeros((steps, batch, inputs));
        for (t, d) in d_seq.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), t).assign(&d);
        }
        dx
    }
}

fn add_into<F: Scalar>(target: &mut ArrayD<F>, delta: &ArrayD<F>) {
    *target += delta;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, Lstm) {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 3, 4, 5, 2);
        (store, lstm)
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, b: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((t, b, 4), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn carried_state_equals_single_pass() {
        let (store, lstm) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_seq(&mut rng, 6, 2);
        let (full, _, _) = lstm.forward(&store, &x, None, false).unwrap();
        let first = x.slice(s![0..3, .., ..]).to_owned();
        let second = x.slice(s![3..6, .., ..]).to_owned();
        let (a, st, _) = lstm.forward(&store, &first, None, false).unwrap();
        let (b, _, _) = lstm.forward(&store, &second, Some(&st), false).unwrap();
        for t in 0..3 {
            assert!((&full.index_axis(Axis(0), t) - &a.index_axis(Axis(0), t)).iter().all(|d| d.abs() < 1e-12));
            assert!((&full.index_axis(Axis(0), t + 3) - &b.index_axis(Axis(0), t)).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn state_shape_mismatch() {
        let (store, lstm) = setup();
        let x = Array3::<f64>::zeros((2, 1, 4));
        let wrong = LstmState::<f64>::zeros(2, 3, 5);
        assert!(matches!(lstm.forward(&store, &x, Some(&wrong), false), Err(Error::InvalidArgument(_))));
        let wrong = LstmState::<f64>::zeros(1, 1, 5);
        assert!(lstm.forward(&store, &x, Some(&wrong), false).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, lstm) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_seq(&mut rng, 4, 2);
        let r = Array3::from_shape_simple_fn((4, 2, 5), || rng.random_range(-1.0..1.0));
        let f = |st: &ParamStore<f64>, x: &Array3<f64>| (lstm.forward(st, x, None, false).unwrap().0 * &r).sum();
        let (_, _, cache) = lstm.forward(&store, &x, None, true).unwrap();
        let mut grads = store.zeros_like();
        let dx = lstm.backward(&store, &cache.unwrap(), &r, &mut grads, );
        let eps = 1e-6;
        for idx in [[0, 0, 0], [2, 1, 3], [3, 0, 1]] {
            let mut p = x.clone();
            let mut m = x.clone();
            p[idx] += eps;
            m[idx] -= eps;
            let fd = (f(&store, &p) - f(&store, &m)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-8);
        }
        for name in ["lstm.l0.w_ih", "lstm.l0.w_hh", "lstm.l1.bias", "lstm.l1.w_hh"] {
            let id = store.id(name).unwrap();
            for flat in [0usize, 7, 19] {
                let mut p = store.clone();
                let mut m = store.clone();
                p.get_mut(id).as_slice_mut().unwrap()[flat] += eps;
                m.get_mut(id).as_slice_mut().unwrap()[flat] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                let g = grads.get(id).as_slice().unwrap()[flat];
                assert!((fd - g).abs() < 1e-8, "{name}[{flat}]: {fd} vs {g}");
            }
        }
    }
}
