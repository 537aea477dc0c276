use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mf_core::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use mf_core::Scalar;

use crate::DitError;

/// Registers parameters with seeded initial values.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng));
        self.store.add(name, t)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<f32>) -> ParamId {
        self.store.add(name, t)
    }

    /// `din → dout` with `N(0, 1/din)` weights and zero bias.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        Lin {
            w: self.normal(&format!("{name}.w"), &[din, dout], (1.0 / din as f32).sqrt()),
            b: Some(self.tensor(&format!("{name}.b"), Tensor::zeros([dout]))),
        }
    }

    /// A linear layer that outputs exactly zero until trained.
    pub fn zero_linear(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        Lin {
            w: self.tensor(&format!("{name}.w"), Tensor::zeros([din, dout])),
            b: Some(self.tensor(&format!("{name}.b"), Tensor::zeros([dout]))),
        }
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize, zero_out: bool) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: if zero_out {
                self.zero_linear(&format!("{name}.o"), dim, dim)
            } else {
                self.linear(&format!("{name}.o"), dim, dim)
            },
            heads,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Lin {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Lin {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DitError> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

/// Multi-head attention from `x` onto `ctx`.
#[derive(Clone, Debug)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub heads: usize,
}

impl Attn {
    fn split<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, DitError> {
        let (l, d) = (g.shape(x)[0], g.shape(x)[1]);
        let v = g.reshape(x, [l, self.heads, d / self.heads])?;
        Ok(g.permute(v, &[1, 0, 2])?)
    }

    /// Output `[Lq, d]` and the attention weights `[heads, Lq, Lk]`.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: Var,
    ) -> Result<(Var, Var), DitError> {
        let (lq, d) = (g.shape(x)[0], g.shape(x)[1]);
        let q = self.q.apply(g, store, x)?;
        let k = self.k.apply(g, store, ctx)?;
        let v = self.v.apply(g, store, ctx)?;
        let q = self.split(g, q)?;
        let k = self.split(g, k)?;
        let v = self.split(g, v)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, T::from_f64_lossy(1.0 / ((d / self.heads) as f64).sqrt()));
        let a = g.softmax(s);
        let o = g.matmul(a, v)?;
        let o = g.permute(o, &[1, 0, 2])?;
        let o = g.reshape(o, [lq, d])?;
        Ok((self.o.apply(g, store, o)?, a))
    }
}

/// `x ⊙ (1 + scale) + shift` with per-feature `scale` and `shift` of shape `[d]`.
pub(crate) fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var, DitError> {
    let xs = g.mul_bcast(x, scale)?;
    let y = g.add(x, xs)?;
    Ok(g.add_bcast(y, shift)?)
}

/// Splits a `[1, k·d]` vector into `k` vectors of shape `[d]`.
pub(crate) fn chunks<T: Scalar>(g: &mut Graph<T>, v: Var, k: usize) -> Result<Vec<Var>, DitError> {
    let d = g.shape(v)[1] / k;
    (0..k)
        .map(|i| {
            let s = g.slice_last(v, i * d, d)?;
            Ok(g.reshape(s, [d])?)
        })
        .collect()
}

/// Sinusoidal features of a scalar, `[1, dim]`.
pub(crate) fn sinusoid<T: Scalar>(value: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn([1, dim], |i| {
        let k = i % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let a = value * freq;
        T::from_f64_lossy(if i < half { a.sin() } else { a.cos() })
    })
}
