//! Small geometric primitives shared across modules.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn cube(center: Vec3, half_extent: f64) -> Self {
        let h = Vec3::repeat(half_extent);
        Aabb {
            min: center - h,
            max: center + h,
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    /// Slab-method intersection of the line `origin + t * dir` with the box.
    ///
    /// Returns the raw parametric interval, which may start (or lie entirely)
    /// behind the origin. Axes with a zero direction component reject the
    /// line when the origin lies outside that slab.
    pub fn line_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut t0 = (self.min[i] - origin[i]) * inv;
            let mut t1 = (self.max[i] - origin[i]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_in = t_in.max(t0);
            t_out = t_out.min(t1);
        }
        (t_in <= t_out).then_some((t_in, t_out))
    }

    /// Intersection of the ray `t >= 0` with the box; `t_in` is not clamped.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        self.line_interval(origin, dir).filter(|&(_, t_out)| t_out >= 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_ray_through_unit_box() {
        let b = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0));
        let (t0, t1) = b.ray_interval(&Vec3::new(-1.0, 0.5, 0.5), &Vec3::x()).unwrap();
        assert_eq!((t0, t1), (1.0, 2.0));
        assert!(b.ray_interval(&Vec3::new(-1.0, 1.5, 0.5), &Vec3::x()).is_none());
        // box entirely behind the origin
        assert!(b.ray_interval(&Vec3::new(3.0, 0.5, 0.5), &Vec3::x()).is_none());
    }
}
