use rand::{Rng, RngCore};

use super::camera::Ray;
use crate::error::Result;
use crate::geom::Vec3;

/// Flattened samples of a set of rays. Ray `r` owns samples
/// `ray_offsets[r]..ray_offsets[r + 1]`, sorted by depth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub positions: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub t: Vec<f64>,
    /// Segment length owned by each sample.
    pub delta: Vec<f64>,
    pub ray_offsets: Vec<usize>,
}

impl SampleBatch {
    fn with_capacity(rays: usize, samples: usize) -> Self {
        let mut ray_offsets = Vec::with_capacity(rays + 1);
        ray_offsets.push(0);
        Self {
            positions: Vec::with_capacity(samples),
            directions: Vec::with_capacity(samples),
            t: Vec::with_capacity(samples),
            delta: Vec::with_capacity(samples),
            ray_offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn ray_count(&self) -> usize {
        self.ray_offsets.len().saturating_sub(1)
    }

    pub fn ray_range(&self, r: usize) -> std::ops::Range<usize> {
        self.ray_offsets[r]..self.ray_offsets[r + 1]
    }

    fn push(&mut self, ray: &Ray, t: f64, delta: f64) {
        self.positions.push(ray.at(t));
        self.directions.push(ray.direction);
        self.t.push(t);
        self.delta.push(delta);
    }

    fn close_ray(&mut self) {
        self.ray_offsets.push(self.t.len());
    }
}

/// `n` samples per ray, one per equal-width bin of `[t_near, t_far]`: a uniform
/// draw inside the bin with `rng`, the bin midpoint without. Each sample owns
/// the gap to the next sample; the last owns the rest of the ray.
pub fn stratified_sample(rays: &[Ray], n: usize, mut rng: Option<&mut dyn RngCore>) -> SampleBatch {
    assert!(n >= 2, "stratified_sample needs at least two samples per ray");
    let mut batch = SampleBatch::with_capacity(rays.len(), rays.len() * n);
    let mut ts = vec![0.0; n];
    for ray in rays {
        assert!(ray.t_far.is_finite() && ray.t_far > ray.t_near, "rays must be clipped to finite bounds");
        let width = (ray.t_far - ray.t_near) / n as f64;
        for (i, t) in ts.iter_mut().enumerate() {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            *t = ray.t_near + (i as f64 + u) * width;
        }
        for i in 0..n {
            let next = if i + 1 < n { ts[i + 1] } else { ray.t_far };
            batch.push(ray, ts[i], next - ts[i]);
        }
        batch.close_ray();
    }
    batch
}

/// Result of occupancy-guided sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedBatch {
    /// Fine samples that go to the main field.
    pub batch: SampleBatch,
    /// Coarse samples seen by the occupancy predicate.
    pub coarse_evaluated: usize,
    /// Coarse samples the predicate kept.
    pub coarse_occupied: usize,
}

/// Coarse stratified samples are filtered by `occupied`; the bin of every kept
/// coarse sample is split into `split` equal sub-bins with one sample at each
/// sub-bin center. Dropped bins contribute nothing, so a ray with no kept bin
/// has no fine samples and renders as background.
pub fn guided_sample(
    rays: &[Ray],
    coarse: usize,
    split: usize,
    rng: Option<&mut dyn RngCore>,
    occupied: &mut dyn FnMut(&[Vec3]) -> Result<Vec<bool>>,
) -> Result<GuidedBatch> {
    assert!(split >= 1, "split factor must be positive");
    let coarse_batch = stratified_sample(rays, coarse, rng);
    let keep = occupied(&coarse_batch.positions)?;
    assert_eq!(keep.len(), coarse_batch.len(), "predicate returned wrong length");
    let kept = keep.iter().filter(|&&k| k).count();
    let mut batch = SampleBatch::with_capacity(rays.len(), kept * split);
    for (r, ray) in rays.iter().enumerate() {
        let width = (ray.t_far - ray.t_near) / coarse as f64;
        let sub = width / split as f64;
        for (i, idx) in coarse_batch.ray_range(r).enumerate() {
            if !keep[idx] {
                continue;
            }
            let start = ray.t_near + i as f64 * width;
            for j in 0..split {
                batch.push(ray, start + (j as f64 + 0.5) * sub, sub);
            }
        }
        batch.close_ray();
    }
    Ok(GuidedBatch { batch, coarse_evaluated: coarse_batch.len(), coarse_occupied: kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(t_near: f64, t_far: f64) -> Ray {
        Ray { origin: [0.0, 0.0, 2.0], direction: [0.0, 0.0, -1.0], t_near, t_far }
    }

    #[test]
    fn midpoints_without_jitter() {
        let b = stratified_sample(&[ray(1.0, 3.0)], 4, None);
        assert_eq!(b.t, vec![1.25, 1.75, 2.25, 2.75]);
        assert_eq!(b.delta, vec![0.5, 0.5, 0.5, 0.25]);
        assert_eq!(b.ray_offsets, vec![0, 4]);
        assert_eq!(b.positions[0], [0.0, 0.0, 0.75]);
    }

    #[test]
    fn jittered_samples_are_monotone_with_positive_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rays = [ray(1.0, 3.0), ray(0.5, 1.0)];
        let b = stratified_sample(&rays, 128, Some(&mut rng));
        for r in 0..2 {
            let range = b.ray_range(r);
            let ts = &b.t[range.clone()];
            assert!(ts.windows(2).all(|w| w[1] > w[0]));
            assert!(b.delta[range.clone()].iter().all(|d| *d > 0.0));
            let total: f64 = b.delta[range].iter().sum();
            assert!(total <= rays[r].t_far - rays[r].t_near + 1e-12);
        }
    }

    #[test]
    fn guided_split_counts() {
        let rays = [ray(1.0, 3.0), ray(1.0, 3.0)];
        let mut calls = 0;
        let mut pred = |p: &[Vec3]| -> Result<Vec<bool>> {
            calls += p.len();
            // First ray: every 8th coarse sample occupied (16 of 128). Second: none.
            Ok((0..p.len()).map(|i| i < 128 && i % 8 == 0).collect())
        };
        let g = guided_sample(&rays, 128, 8, None, &mut pred).unwrap();
        assert_eq!(calls, 256);
        assert_eq!(g.coarse_evaluated, 256);
        assert_eq!(g.coarse_occupied, 16);
        assert_eq!(g.batch.ray_range(0).len(), 128);
        assert_eq!(g.batch.ray_range(1).len(), 0);
        assert!(g.batch.len() <= g.coarse_occupied * 8);
        // Sub-bins tile the kept coarse bin.
        let w = 2.0 / 128.0;
        assert!((g.batch.t[0] - (1.0 + w / 16.0)).abs() < 1e-12);
        assert!(g.batch.delta.iter().all(|d| (d - w / 8.0).abs() < 1e-15));
    }

    #[test]
    fn guided_all_true_equals_plain_split() {
        let rays = [ray(1.0, 2.0)];
        let g = guided_sample(&rays, 4, 2, None, &mut |p: &[Vec3]| Ok(vec![true; p.len()])).unwrap();
        let plain = stratified_sample(&rays, 8, None);
        for (a, b) in g.batch.t.iter().zip(&plain.t) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
