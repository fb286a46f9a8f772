//! Spatial self-attention block with a zero-initialized residual gain.
//!
//! For a flattened map `X` of shape `(d_in, n)`:
//!
//! ```text
//! Q = Wq X,  K = Wk X,  V = Wv X
//! lambda_h = softmax_rows(Q_h^T K_h / sqrt(d_h))          (n x n)
//! O_h      = (lambda_h V_h^T)^T                            (d_v/h x n)
//! O        = concat_h O_h                                  (d_v x n)
//! X'       = X + gamma * (Wo O)
//! ```
//!
//! Projections act on each position independently, so the block is
//! equivariant to permutations of the positions.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2};

use super::{check_finite, init_normal, FeatureMap, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub d_in: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub gamma_init: f64,
}

impl AttentionConfig {
    /// Default projection sizes (128) with a single head and zero gain.
    pub fn with_input(d_in: usize) -> Self {
        AttentionConfig {
            d_in,
            d_k: 128,
            d_v: 128,
            heads: 1,
            gamma_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::InvalidArgument("attention dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.d_k.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads must evenly divide d_k = {} and d_v = {}",
                self.heads, self.d_k, self.d_v
            )));
        }
        if !self.gamma_init.is_finite() {
            return Err(Error::InvalidArgument("gamma_init must be finite".into()));
        }
        Ok(())
    }

    fn key_dim(&self) -> usize {
        self.d_k / self.heads
    }

    fn value_dim(&self) -> usize {
        self.d_v / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub config: AttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub gamma: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionInternals<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// One `(n, n)` row-stochastic map per head.
    pub lambda: Vec<Array2<F>>,
    /// Concatenated head outputs, `(d_v, n)`.
    pub o: Array2<F>,
    /// `Wo O`, `(d_in, n)`.
    pub projected: Array2<F>,
}

fn view2<F: Scalar>(t: &ArrayD<F>) -> ArrayView2<'_, F> {
    t.view().into_dimensionality::<Ix2>().expect("2-d parameter")
}

impl SelfAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, seed: u64, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let mut add = |suffix: &str, rows: usize, cols: usize| {
            let full = format!("{name}.{suffix}");
            let t = init_normal(seed, &full, &[rows, cols], (1.0 / cols as f64).sqrt());
            store.add(full, t)
        };
        let w_q = add("w_q", config.d_k, config.d_in);
        let w_k = add("w_k", config.d_k, config.d_in);
        let w_v = add("w_v", config.d_v, config.d_in);
        let w_o = add("w_o", config.d_in, config.d_v);
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(vec![1], F::of(config.gamma_init)),
        );
        Ok(SelfAttention {
            config,
            w_q,
            w_k,
            w_v,
            w_o,
            gamma,
        })
    }

    pub fn gamma<F: Scalar>(&self, store: &ParamStore<F>) -> F {
        store.get(self.gamma)[[0]]
    }

    /// Forward pass on a flattened `(d_in, n)` map.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<F>,
    ) -> Result<(Array2<F>, AttentionInternals<F>)> {
        let cfg = &self.config;
        if x.nrows() != cfg.d_in {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {}",
                cfg.d_in,
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Shape("attention input has no positions".into()));
        }
        let q = view2(store.get(self.w_q)).dot(&x);
        let k = view2(store.get(self.w_k)).dot(&x);
        let v = view2(store.get(self.w_v)).dot(&x);
        let n = x.ncols();
        let (dh, dvh) = (cfg.key_dim(), cfg.value_dim());
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut o = Array2::zeros((cfg.d_v, n));
        let mut lambda = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.slice(s![h * dh..(h + 1) * dh, ..]);
            let kh = k.slice(s![h * dh..(h + 1) * dh, ..]);
            let vh = v.slice(s![h * dvh..(h + 1) * dvh, ..]);
            let mut attn = qh.t().dot(&kh);
            attn.mapv_inplace(|z| z * scale);
            softmax_rows(&mut attn);
            // (lambda V^T)^T = V lambda^T
            o.slice_mut(s![h * dvh..(h + 1) * dvh, ..]).assign(&vh.dot(&attn.t()));
            lambda.push(attn);
        }
        let projected = view2(store.get(self.w_o)).dot(&o);
        let gamma = self.gamma(store);
        let y = &x + &projected.mapv(|z| z * gamma);
        check_finite("attention", y.iter())?;
        Ok((
            y,
            AttentionInternals {
                q,
                k,
                v,
                lambda,
                o,
                projected,
            },
        ))
    }

    /// Operates on an unflattened map.
    pub fn apply<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, AttentionInternals<F>)> {
        let (_, h, w) = x.0.dim();
        let (y, internals) = self.forward(store, x.flatten().view())?;
        Ok((FeatureMap::unflatten(y, h, w)?, internals))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<F>,
        cache: &AttentionInternals<F>,
        dy: ArrayView2<F>,
        grads: &mut ParamStore<F>,
    ) -> Array2<F> {
        let cfg = &self.config;
        let gamma = self.gamma(store);
        let (dh, dvh) = (cfg.key_dim(), cfg.value_dim());
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let dgamma = (&dy * &cache.projected).sum();
        grads.get_mut(self.gamma)[[0]] += dgamma;

        let da = dy.mapv(|z| z * gamma);
        let w_o = view2(store.get(self.w_o));
        add2(grads.get_mut(self.w_o), &da.dot(&cache.o.t()));
        let d_o = w_o.t().dot(&da);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, attn) in cache.lambda.iter().enumerate() {
            let g = d_o.slice(s![h * dvh..(h + 1) * dvh, ..]);
            let vh = cache.v.slice(s![h * dvh..(h + 1) * dvh, ..]);
            dv.slice_mut(s![h * dvh..(h + 1) * dvh, ..]).assign(&g.dot(attn));
            let dlambda = g.t().dot(&vh);
            let mut ds = softmax_rows_backward(attn, &dlambda);
            ds.mapv_inplace(|z| z * scale);
            let qh = cache.q.slice(s![h * dh..(h + 1) * dh, ..]);
            let kh = cache.k.slice(s![h * dh..(h + 1) * dh, ..]);
            dq.slice_mut(s![h * dh..(h + 1) * dh, ..]).assign(&kh.dot(&ds.t()));
            dk.slice_mut(s![h * dh..(h + 1) * dh, ..]).assign(&qh.dot(&ds));
        }
        add2(grads.get_mut(self.w_q), &dq.dot(&x.t()));
        add2(grads.get_mut(self.w_k), &dk.dot(&x.t()));
        add2(grads.get_mut(self.w_v), &dv.dot(&x.t()));

        let mut dx = dy.to_owned();
        dx += &view2(store.get(self.w_q)).t().dot(&dq);
        dx += &view2(store.get(self.w_k)).t().dot(&dk);
        dx += &view2(store.get(self.w_v)).t().dot(&dv);
        dx
    }
}

fn add2<F: Scalar>(target: &mut ArrayD<F>, delta: &Array2<F>) {
    let mut t = target.view_mut().into_dimensionality::<Ix2>().expect("2-d");
    t += delta;
}

fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|z| z / sum);
    }
}

fn softmax_rows_backward<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((mut o, pr), dr) in out.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(dp.axis_iter(Axis(0))) {
        let dot = pr.dot(&dr);
        for ((oi, &pi), &di) in o.iter_mut().zip(pr.iter()).zip(dr.iter()) {
            *oi = pi * (di - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn block(d_in: usize, d_k: usize, n_heads: usize, gamma: f64) -> (ParamStore<f64>, SelfAttention) {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig {
            d_in,
            d_k,
            d_v: d_k,
            heads: n_heads,
            gamma_init: gamma,
        };
        let attn = SelfAttention::new(&mut store, "attention", 5, cfg).unwrap();
        (store, attn)
    }

    #[test]
    fn zero_gain_is_identity() {
        let (store, attn) = block(4, 4, 1, 0.0);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (y, _) = attn.forward(&store, x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (store, attn) = block(3, 4, 2, 0.7);
        let x = array![[1.0], [-2.0], [0.5]];
        let (_, internals) = attn.forward(&store, x.view()).unwrap();
        for l in &internals.lambda {
            assert_eq!(l, &array![[1.0]]);
        }
    }

    #[test]
    fn equal_logits_split_evenly() {
        // Two identical positions give identical keys, hence equal logits.
        let (store, attn) = block(3, 2, 1, 1.0);
        let x = array![[0.3, 0.3], [1.0, 1.0], [-0.4, -0.4]];
        let (_, internals) = attn.forward(&store, x.view()).unwrap();
        for v in internals.lambda[0].iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = AttentionConfig {
            d_in: 8,
            d_k: 6,
            d_v: 8,
            heads: 4,
            gamma_init: 0.0,
        };
        assert!(bad.validate().is_err());
        let mut c = AttentionConfig::with_input(8);
        c.heads = 0;
        assert!(c.validate().is_err());
        assert!(AttentionConfig::with_input(1024).validate().is_ok());
    }

    #[test]
    fn wrong_channel_count() {
        let (store, attn) = block(4, 4, 1, 0.0);
        let x = Array2::<f64>::zeros((5, 3));
        assert!(matches!(attn.forward(&store, x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let (store, attn) = block(2, 2, 1, 0.5);
        let x = array![[f64::NAN, 1.0], [0.0, 1.0]];
        match attn.forward(&store, x.view()) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "attention"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
