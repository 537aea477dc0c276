use super::{GeometryError, Vec3};
use crate::scalar::Scalar;

pub type Mat3<T> = [[T; 3]; 3];

/// Orthonormality tolerance for rotation validation.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// `aᵀ·v`
pub fn mat_t_vec<T: Scalar>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub fn determinant<T: Scalar>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn identity3<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle<T: Scalar>(axis: Vec3<T>, angle: T) -> Mat3<T> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Camera-to-world rigid transform. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> Default for CameraPose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> CameraPose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: identity3(),
            translation: [T::zero(); 3],
        }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(identity3(), t)
    }

    pub fn from_rotation(r: Mat3<T>) -> Self {
        Self::new(r, [T::zero(); 3])
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == identity3() && self.translation.iter().all(|v| *v == T::zero())
    }

    /// Checks `RᵀR = I` and `det R = 1` within [`ROTATION_TOLERANCE`].
    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        if r.iter().flatten().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let rtr = mat_mul(&transpose(r), r);
        let tol = T::from_f64_lossy(ROTATION_TOLERANCE);
        let eye = identity3::<T>();
        for i in 0..3 {
            for j in 0..3 {
                if (rtr[i][j] - eye[i][j]).abs() > tol {
                    return Err(GeometryError::InvalidPose(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {})",
                        rtr[i][j]
                    )));
                }
            }
        }
        let det = determinant(r);
        if (det - T::one()).abs() > tol {
            return Err(GeometryError::InvalidPose(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Self::new(rt, [-t[0], -t[1], -t[2]])
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let r = mat_mul(&self.rotation, &other.rotation);
        let rt = mat_vec(&self.rotation, &other.translation);
        Self::new(
            r,
            [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        )
    }

    /// Camera-frame point to world frame.
    pub fn transform_point(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// World-frame point to camera frame.
    pub fn inverse_transform_point(&self, p: &Vec3<T>) -> Vec3<T> {
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        mat_t_vec(&self.rotation, &d)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.translation
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        CameraPose {
            rotation: self.rotation.map(|row| row.map(|v| v.cast())),
            translation: self.translation.map(|v| v.cast()),
        }
    }
}

/// Geodesic angle between two rotations, in radians. Uses both the trace and
/// the skew part so small angles keep full precision.
pub fn rotation_angle<T: Scalar>(ra: &Mat3<T>, rb: &Mat3<T>) -> T {
    let m = mat_mul(&transpose(ra), rb);
    let two = T::one() + T::one();
    let cos = (m[0][0] + m[1][1] + m[2][2] - T::one()) / two;
    let sx = m[2][1] - m[1][2];
    let sy = m[0][2] - m[2][0];
    let sz = m[1][0] - m[0][1];
    let sin = (sx * sx + sy * sy + sz * sz).sqrt() / two;
    sin.atan2(cos)
}
