//! Small 3-vector helpers and the axis-aligned scene box.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n.is_finite() && n > 1e-12).then(|| scale(a, 1.0 / n))
}

/// `origin + t * dir`.
#[inline]
pub fn along(origin: Vec3, dir: Vec3, t: f64) -> Vec3 {
    [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Aabb {
    fn default() -> Self {
        Self::unit()
    }
}

impl Aabb {
    /// The scene box `[-1, 1]^3`.
    pub const fn unit() -> Self {
        Self { min: [-1.0; 3], max: [1.0; 3] }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn diagonal(&self) -> f64 {
        norm(self.extent())
    }

    /// Slab test. Returns the parametric entry/exit, clamped to `t >= 0`, when
    /// the ray crosses the box with positive length.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0 + 1e-9).then_some((t0, t1))
    }
}

/// Regular `res^3` cell lattice over a box. Cell `(ix, iy, iz)` has flat index
/// `(iz * res + iy) * res + ix`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub res: usize,
    pub aabb: Aabb,
}

impl GridSpec {
    pub fn new(res: usize, aabb: Aabb) -> Self {
        assert!(res >= 1, "grid resolution must be positive");
        Self { res, aabb }
    }

    pub fn cell_count(&self) -> usize {
        self.res.pow(3)
    }

    pub fn cell_size(&self) -> Vec3 {
        scale(self.aabb.extent(), 1.0 / self.res as f64)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let r = self.res;
        [index % r, (index / r) % r, index / (r * r)]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.res + c[1]) * self.res + c[0]
    }

    /// Point at fractional offset `u` in `[0, 1)^3` inside the cell.
    pub fn point_in_cell(&self, index: usize, u: Vec3) -> Vec3 {
        let c = self.coords(index);
        let size = self.cell_size();
        std::array::from_fn(|i| self.aabb.min[i] + (c[i] as f64 + u[i]) * size[i])
    }

    pub fn cell_center(&self, index: usize) -> Vec3 {
        self.point_in_cell(index, [0.5; 3])
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.cell_count()).map(|i| self.cell_center(i)).collect()
    }

    /// Cell containing `p`; `None` outside the box. The upper faces belong to
    /// the last cell.
    pub fn locate(&self, p: Vec3) -> Option<usize> {
        if !self.aabb.contains(p) {
            return None;
        }
        let size = self.cell_size();
        let c: [usize; 3] =
            std::array::from_fn(|i| (((p[i] - self.aabb.min[i]) / size[i]).floor() as usize).min(self.res - 1));
        Some(self.index(c))
    }
}

/// Binary occupancy over a [`GridSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMask {
    pub spec: GridSpec,
    pub cells: Vec<bool>,
}

impl OccupancyMask {
    pub fn empty(spec: GridSpec) -> Self {
        Self { spec, cells: vec![false; spec.cell_count()] }
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.cells.len() as f64
    }

    pub fn at(&self, p: Vec3) -> bool {
        self.spec.locate(p).is_some_and(|i| self.cells[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slab_intersection() {
        let b = Aabb::unit();
        let (t0, t1) = b.intersect([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        assert!(b.intersect([0.0, 2.0, 3.0], [0.0, 0.0, -1.0]).is_none());
        let (t0, t1) = b.intersect([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((t0, t1), (0.0, 1.0));
    }

    #[test]
    fn cross_is_orthogonal() {
        let c = cross([1.0, 2.0, 3.0], [-2.0, 0.5, 1.0]);
        assert!(dot(c, [1.0, 2.0, 3.0]).abs() < 1e-12);
        assert!(normalize([0.0; 3]).is_none());
    }

    #[test]
    fn grid_indexing_round_trips() {
        let spec = GridSpec::new(4, Aabb::unit());
        for i in 0..spec.cell_count() {
            assert_eq!(spec.index(spec.coords(i)), i);
            assert_eq!(spec.locate(spec.cell_center(i)), Some(i));
        }
        assert_eq!(spec.cell_center(0), [-0.75; 3]);
        assert_eq!(spec.locate([1.0, 1.0, 1.0]), Some(63));
        assert_eq!(spec.locate([1.01, 0.0, 0.0]), None);
    }
}
