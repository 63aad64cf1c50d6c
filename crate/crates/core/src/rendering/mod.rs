//! Rays, stratified and occupancy-guided sampling, and alpha compositing.

mod camera;
mod composite;
pub mod io;
mod render;
mod sampling;

pub use camera::{generate_rays, Camera, Intrinsics, Pose, Ray};
pub use composite::{composite, composite_node, Composite};
pub use render::{render_image, OccupancyPredicate, RadianceQuery, RenderSettings, RenderedImage, Sampler};
pub use sampling::{guided_sample, stratified_sample, GuidedBatch, SampleBatch};
