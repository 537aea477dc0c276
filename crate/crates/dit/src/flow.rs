//! Rectified-flow path, timestep sampling and the Euler sampler.
//!
//! `t = 0` is data and `t = 1` is noise: `z_t = t·z1 + (1-t)·z0`, so the
//! velocity `dz/dt = z1 - z0` points from data to noise and sampling
//! integrates it backwards from `t = 1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use mf_core::tensor::Tensor;
use mf_core::Scalar;

use crate::DitError;

/// Time at which the path reaches pure noise.
pub const NOISE_TIME: f64 = 1.0;
/// Time at which the path reaches data.
pub const DATA_TIME: f64 = 0.0;

/// `sigmoid(g)` with `g ~ N(0, 1)`.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    let g: f64 = StandardNormal.sample(rng);
    1.0 / (1.0 + (-g).exp())
}

pub fn gaussian<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(v)
    })
}

/// One training sample on the path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T> {
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
    pub t: T,
    pub z_t: Tensor<T>,
    pub v_t: Tensor<T>,
}

impl<T: Scalar> FlowState<T> {
    pub fn new(z0: Tensor<T>, z1: Tensor<T>, t: T) -> Result<Self, DitError> {
        let (z_t, v_t) = flow_interpolate(&z0, &z1, t)?;
        Ok(Self { z0, z1, t, z_t, v_t })
    }
}

/// `(t·z1 + (1-t)·z0, z1 - z0)`.
pub fn flow_interpolate<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>, t: T) -> Result<(Tensor<T>, Tensor<T>), DitError> {
    if z0.shape() != z1.shape() {
        return Err(DitError::Input(format!(
            "flow endpoints differ in shape: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if !(t >= T::zero() && t <= T::one()) {
        return Err(DitError::Input(format!("flow time {t} outside [0, 1]")));
    }
    let s = T::one() - t;
    let zt = z0.data().iter().zip(z1.data()).map(|(a, b)| t * *b + s * *a).collect();
    let vt = z0.data().iter().zip(z1.data()).map(|(a, b)| *b - *a).collect();
    Ok((
        Tensor::new(z0.shape().to_vec(), zt)?,
        Tensor::new(z0.shape().to_vec(), vt)?,
    ))
}

/// Anything that predicts `dz/dt` at `(z, t)`.
pub trait VelocityField<T> {
    fn velocity(&mut self, z: &Tensor<T>, t: T) -> Result<Tensor<T>, DitError>;
}

/// The exact velocity of the straight path between known endpoints.
pub struct OracleVelocity<T> {
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
}

impl<T: Scalar> VelocityField<T> for OracleVelocity<T> {
    fn velocity(&mut self, _z: &Tensor<T>, _t: T) -> Result<Tensor<T>, DitError> {
        Ok(flow_interpolate(&self.z0, &self.z1, T::zero())?.1)
    }
}

/// Integrates `dz/dt = v` from `t = 1` down to `t = 0` in `steps` uniform
/// Euler steps, starting at the noise `z1`.
pub fn euler_sample<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &mut V,
    z1: Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>, DitError> {
    if steps == 0 {
        return Err(DitError::Input("sampling needs at least one step".into()));
    }
    let n = T::from_usize(steps).expect("step count fits the scalar");
    let mut z = z1;
    for k in 0..steps {
        let t = T::from_usize(steps - k).unwrap() / n;
        let t_next = T::from_usize(steps - k - 1).unwrap() / n;
        let v = field.velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(DitError::Input(format!(
                "velocity shape {:?} differs from latent {:?}",
                v.shape(),
                z.shape()
            )));
        }
        let h = t - t_next;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= h * *vi;
        }
    }
    Ok(z)
}
