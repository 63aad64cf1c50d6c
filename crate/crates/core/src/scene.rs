//! Analytic scenes with exact occupancy, camera rigs, and ground-truth
//! datasets rendered from them.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Aabb, GridSpec, OccupancyMask, Vec3};
use crate::rendering::{
    io, render_image, Camera, Intrinsics, Pose, RadianceQuery, RenderSettings, RenderedImage, Sampler,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { center: Vec3, half: Vec3 },
    /// Everything below the plane `y = top`.
    Ground { top: f64 },
}

impl Shape {
    /// Signed distance, negative inside. Exact for spheres and boxes.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => geom::norm(geom::sub(p, center)) - radius,
            Shape::Cuboid { center, half } => {
                let q: Vec3 = std::array::from_fn(|i| (p[i] - center[i]).abs() - half[i]);
                let outside = geom::norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Ground { top } => p[1] - top,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Density deep inside the primitive.
    pub sigma0: f64,
    /// Width of the sigmoid edge.
    pub falloff: f64,
    pub albedo: Vec3,
}

impl Primitive {
    pub fn density(&self, p: Vec3) -> f64 {
        self.sigma0 * sigmoid(-self.shape.sdf(p) / self.falloff)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of primitive densities, clamped to the largest `sigma0`. Color is the
/// albedo of the primitive with the smallest signed distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOracle {
    pub primitives: Vec<Primitive>,
    /// A point is occupied iff its density exceeds this.
    pub gt_threshold: f64,
}

pub const DEFAULT_GT_THRESHOLD: f64 = 0.5;

impl Default for SceneOracle {
    fn default() -> Self {
        Self::desk()
    }
}

impl SceneOracle {
    pub fn empty() -> Self {
        Self { primitives: Vec::new(), gt_threshold: DEFAULT_GT_THRESHOLD }
    }

    /// A sphere and a block resting on a plinth, about 12% of the unit box.
    pub fn desk() -> Self {
        let p = |shape, albedo| Primitive { shape, sigma0: 50.0, falloff: 0.01, albedo };
        Self {
            primitives: vec![
                p(Shape::Sphere { center: [0.25, 0.0, 0.0], radius: 0.4 }, [0.85, 0.3, 0.2]),
                p(Shape::Cuboid { center: [-0.45, -0.25, 0.3], half: [0.22, 0.3, 0.22] }, [0.2, 0.55, 0.85]),
                p(Shape::Cuboid { center: [0.0, -0.65, 0.0], half: [0.7, 0.05, 0.7] }, [0.8, 0.8, 0.7]),
            ],
            gt_threshold: DEFAULT_GT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gt_threshold > 0.0 && self.gt_threshold.is_finite()) {
            return Err(Error::Config("scene gt_threshold must be positive".into()));
        }
        for p in &self.primitives {
            if !(p.sigma0 > 0.0 && p.falloff > 0.0 && p.sigma0.is_finite() && p.falloff.is_finite()) {
                return Err(Error::Config("primitive sigma0 and falloff must be positive".into()));
            }
        }
        Ok(())
    }

    fn max_density(&self) -> f64 {
        self.primitives.iter().map(|p| p.sigma0).fold(0.0, f64::max)
    }

    pub fn density(&self, p: Vec3) -> f64 {
        let total: f64 = self.primitives.iter().map(|q| q.density(p)).sum();
        total.min(self.max_density())
    }

    pub fn density_color(&self, p: Vec3) -> (f64, Vec3) {
        let color = self
            .primitives
            .iter()
            .map(|q| (q.shape.sdf(p), q.albedo))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map_or([0.0; 3], |(_, c)| c);
        (self.density(p), color)
    }

    pub fn occupied(&self, p: Vec3) -> bool {
        self.density(p) > self.gt_threshold
    }

    /// Upper bound on `|sigma(x) - sigma(y)| / |x - y|`.
    pub fn lipschitz(&self) -> f64 {
        self.primitives.iter().map(|p| p.sigma0 / (4.0 * p.falloff)).sum()
    }

    /// Cell occupied iff the density at its center exceeds the threshold.
    pub fn occupancy_grid(&self, spec: GridSpec) -> OccupancyMask {
        let cells = (0..spec.cell_count()).into_par_iter().map(|i| self.occupied(spec.cell_center(i))).collect();
        OccupancyMask { spec, cells }
    }
}

impl RadianceQuery for SceneOracle {
    fn query(&self, positions: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        Ok(positions.iter().map(|p| self.density_color(*p)).unzip())
    }
}

/// Cameras on a Fibonacci sphere around the box center, all looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Seeds a rotation of the lattice about the vertical axis.
    pub seed: u64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { count: 24, radius: 3.2, fov_deg: 45.0, width: 64, height: 64, seed: 0 }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera rig needs at least one camera and a nonempty image".into()));
        }
        if !(self.radius > 3f64.sqrt()) {
            return Err(Error::Config("cameras must sit outside the scene box".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config("field of view must be in (0, 180) degrees".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let offset = ChaCha8Rng::seed_from_u64(self.seed).random::<f64>() * std::f64::consts::TAU;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let k = self.count as f64;
        (0..self.count)
            .map(|i| {
                let y = 1.0 - (2.0 * i as f64 + 1.0) / k;
                let r = (1.0 - y * y).sqrt();
                let phi = i as f64 * golden + offset;
                let eye = geom::scale([r * phi.cos(), y, r * phi.sin()], self.radius);
                let pose = Pose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0])?;
                Ok(Camera { pose, intrinsics: self.intrinsics() })
            })
            .collect()
    }
}

/// Validation holds out every `VALIDATION_STRIDE`-th camera.
pub const VALIDATION_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub image: String,
    pub depth: String,
    pub pose: Pose,
    pub split: Split,
}

pub const DATASET_FORMAT: &str = "occlab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub scene: SceneOracle,
    pub rig: CameraRig,
    pub intrinsics: Intrinsics,
    pub aabb: Aabb,
    pub background: Vec3,
    pub quadrature: usize,
    pub gt_threshold: f64,
    pub frames: Vec<Frame>,
}

/// Dense midpoint rendering of the oracle.
pub fn render_ground_truth(
    oracle: &SceneOracle,
    camera: &Camera,
    quadrature: usize,
    aabb: Aabb,
    background: Vec3,
) -> Result<RenderedImage> {
    let settings = RenderSettings { aabb, background, jitter_seed: None };
    render_image(camera, oracle, &Sampler::Dense { samples: quadrature }, &settings)
}

pub const MIN_QUADRATURE: usize = 512;

/// Renders every rig camera and writes PNG images, depth files and
/// `manifest.json` into `dir`.
pub fn make_dataset(
    dir: &Path,
    oracle: &SceneOracle,
    rig: &CameraRig,
    quadrature: usize,
    background: Vec3,
) -> Result<DatasetManifest> {
    oracle.validate()?;
    if quadrature < MIN_QUADRATURE {
        return Err(Error::Config(format!("ground-truth quadrature must be at least {MIN_QUADRATURE}")));
    }
    let cameras = rig.cameras()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let aabb = Aabb::unit();
    let frames = cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let img = render_ground_truth(oracle, cam, quadrature, aabb, background)?;
            let frame = Frame {
                index: i,
                image: format!("image_{i:03}.png"),
                depth: format!("depth_{i:03}.depth"),
                pose: cam.pose,
                split: if i % VALIDATION_STRIDE == 0 { Split::Val } else { Split::Train },
            };
            io::write_png(&dir.join(&frame.image), img.width, img.height, &img.rgb)?;
            io::write_depth(&dir.join(&frame.depth), img.width, img.height, &img.depth)?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        scene: oracle.clone(),
        rig: rig.clone(),
        intrinsics: rig.intrinsics(),
        aabb,
        background,
        quadrature,
        gt_threshold: oracle.gt_threshold,
        frames,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<Vec<Vec3>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("dataset manifest", &path, e.to_string()))?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::format("dataset manifest", &path, "unknown format or version"));
        }
        let k = manifest.intrinsics;
        let images = manifest
            .frames
            .iter()
            .map(|f| {
                let p = dir.join(&f.image);
                let (w, h, rgb) = io::read_png(&p)?;
                if (w, h) != (k.width, k.height) {
                    return Err(Error::format("png", &p, "image size does not match the manifest"));
                }
                Ok(rgb)
            })
            .collect::<Result<_>>()?;
        Ok(Self { dir: dir.to_path_buf(), manifest, images })
    }

    pub fn camera(&self, frame: usize) -> Camera {
        Camera { pose: self.manifest.frames[frame].pose, intrinsics: self.manifest.intrinsics }
    }

    pub fn frames_in(&self, split: Split) -> Vec<usize> {
        self.manifest.frames.iter().filter(|f| f.split == split).map(|f| f.index).collect()
    }
}
