use super::{cross, mat_vec, norm, CameraIntrinsics, CameraPose};
use crate::scalar::Scalar;

/// Per-pixel Plücker coordinates `(d, m)` with `d` the unit world-frame ray
/// direction and `m = o × d` its moment about the world origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerFrame<T> {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<[T; 6]>,
}

impl<T: Scalar> PluckerFrame<T> {
    pub fn get(&self, x: usize, y: usize) -> [T; 6] {
        self.rays[y * self.width + x]
    }

    /// Channel-last `H×W×6` buffer.
    pub fn to_vec(&self) -> Vec<T> {
        self.rays.iter().flatten().copied().collect()
    }
}

pub fn plucker_map<T: Scalar>(intr: &CameraIntrinsics<T>, pose: &CameraPose<T>) -> PluckerFrame<T> {
    let o = pose.center();
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let u = T::from_usize(x).unwrap();
            let v = T::from_usize(y).unwrap();
            let cam = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, T::one()];
            let n = norm(&cam);
            let d = mat_vec(&pose.rotation, &cam.map(|c| c / n));
            let m = cross(&o, &d);
            rays.push([d[0], d[1], d[2], m[0], m[1], m[2]]);
        }
    }
    PluckerFrame {
        width: intr.width,
        height: intr.height,
        rays,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_ray_examples() {
        let k = CameraIntrinsics::new(50.0, 50.0, 8.0, 4.0, 16, 8).unwrap();
        let f = plucker_map(&k, &CameraPose::identity());
        assert_eq!(f.get(8, 4), [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(f.rays.iter().all(|r| r[3] == 0.0 && r[4] == 0.0 && r[5] == 0.0));

        let f = plucker_map(&k, &CameraPose::from_translation([1.0, 0.0, 0.0]));
        assert_eq!(f.get(8, 4), [0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
    }
}
