use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::camera::{generate_rays, Camera, Ray};
use super::composite::composite;
use super::sampling::{guided_sample, stratified_sample, SampleBatch};
use crate::error::Result;
use crate::geom::{Aabb, Vec3};

/// Anything that maps points and view directions to density and color.
pub trait RadianceQuery: Sync {
    fn query(&self, positions: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)>;
}

/// Batch occupancy predicate used to filter coarse samples.
pub type OccupancyPredicate<'a> = &'a (dyn Fn(&[Vec3]) -> Result<Vec<bool>> + Sync);

#[derive(Clone, Copy)]
pub enum Sampler<'a> {
    Dense { samples: usize },
    Guided { coarse: usize, split: usize, occupied: OccupancyPredicate<'a> },
}

impl Sampler<'_> {
    /// Samples for `rays`, plus the number of occupancy-predicate evaluations.
    pub fn sample(&self, rays: &[Ray], rng: Option<&mut ChaCha8Rng>) -> Result<(SampleBatch, usize)> {
        match *self {
            Sampler::Dense { samples } => {
                Ok((stratified_sample(rays, samples, rng.map(|r| r as &mut dyn rand::RngCore)), 0))
            }
            Sampler::Guided { coarse, split, occupied } => {
                let mut pred = |p: &[Vec3]| occupied(p);
                let g = guided_sample(rays, coarse, split, rng.map(|r| r as &mut dyn rand::RngCore), &mut pred)?;
                Ok((g.batch, g.coarse_evaluated))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub aabb: Aabb,
    pub background: Vec3,
    /// Jittered sampling with this seed; midpoints when `None`.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { aabb: Aabb::unit(), background: [0.0; 3], jitter_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Points sent to the radiance field.
    pub field_evaluations: usize,
    /// Points sent to the occupancy predicate.
    pub occupancy_evaluations: usize,
}

/// Rays per work unit. Fixed so results do not depend on the thread count.
const RAY_CHUNK: usize = 512;

struct ChunkOut {
    rgb: Vec<Vec3>,
    depth: Vec<f64>,
    opacity: Vec<f64>,
    field_evals: usize,
    occ_evals: usize,
}

/// Renders every pixel of `camera`. Pixels whose ray misses the scene box get
/// the background color and zero depth.
pub fn render_image(
    camera: &Camera,
    field: &dyn RadianceQuery,
    sampler: &Sampler<'_>,
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    let rays = generate_rays(camera)?;
    let chunks: Vec<Result<ChunkOut>> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| render_chunk(ci, chunk, field, sampler, settings))
        .collect();
    let k = camera.intrinsics;
    let mut img = RenderedImage {
        width: k.width,
        height: k.height,
        rgb: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
        opacity: Vec::with_capacity(rays.len()),
        field_evaluations: 0,
        occupancy_evaluations: 0,
    };
    for c in chunks {
        let c = c?;
        img.rgb.extend(c.rgb);
        img.depth.extend(c.depth);
        img.opacity.extend(c.opacity);
        img.field_evaluations += c.field_evals;
        img.occupancy_evaluations += c.occ_evals;
    }
    Ok(img)
}

fn render_chunk(
    chunk_index: usize,
    rays: &[Ray],
    field: &dyn RadianceQuery,
    sampler: &Sampler<'_>,
    settings: &RenderSettings,
) -> Result<ChunkOut> {
    let hits: Vec<(usize, Ray)> =
        rays.iter().enumerate().filter_map(|(i, r)| r.clipped(&settings.aabb).map(|c| (i, c))).collect();
    let clipped: Vec<Ray> = hits.iter().map(|(_, r)| *r).collect();
    let mut rng = settings.jitter_seed.map(|s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(chunk_index as u64);
        r
    });
    let (batch, occ_evals) = sampler.sample(&clipped, rng.as_mut())?;
    let (sigma, rgb) = if batch.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        field.query(&batch.positions, &batch.directions)?
    };
    let comp = composite(&batch, &sigma, &rgb, settings.background);
    let mut out = ChunkOut {
        rgb: vec![settings.background; rays.len()],
        depth: vec![0.0; rays.len()],
        opacity: vec![0.0; rays.len()],
        field_evals: batch.len(),
        occ_evals,
    };
    for (j, (i, _)) in hits.iter().enumerate() {
        out.rgb[*i] = comp.colors[j];
        out.depth[*i] = comp.depth[j];
        out.opacity[*i] = comp.opacity[j];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendering::camera::{Intrinsics, Pose};

    struct Constant(f64);

    impl RadianceQuery for Constant {
        fn query(&self, positions: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
            Ok((vec![self.0; positions.len()], vec![[1.0, 0.5, 0.25]; positions.len()]))
        }
    }

    fn camera() -> Camera {
        Camera {
            pose: Pose::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap(),
            intrinsics: Intrinsics::from_fov(16, 12, 50.0),
        }
    }

    #[test]
    fn zero_density_renders_background() {
        let settings = RenderSettings { background: [0.1, 0.2, 0.3], ..Default::default() };
        let img = render_image(&camera(), &Constant(0.0), &Sampler::Dense { samples: 8 }, &settings).unwrap();
        assert_eq!(img.rgb.len(), 16 * 12);
        assert!(img.rgb.iter().all(|c| *c == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn jittered_render_is_deterministic() {
        let settings = RenderSettings { jitter_seed: Some(11), ..Default::default() };
        let s = Sampler::Dense { samples: 16 };
        let a = render_image(&camera(), &Constant(1.0), &s, &settings).unwrap();
        let b = render_image(&camera(), &Constant(1.0), &s, &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_counts_evaluations() {
        let pred = |p: &[Vec3]| -> Result<Vec<bool>> { Ok(p.iter().map(|x| x[2] > 0.0).collect()) };
        let s = Sampler::Guided { coarse: 32, split: 8, occupied: &pred };
        let img = render_image(&camera(), &Constant(1.0), &s, &RenderSettings::default()).unwrap();
        assert!(img.occupancy_evaluations > 0);
        assert!(img.field_evaluations < img.occupancy_evaluations * 8);
    }
}
