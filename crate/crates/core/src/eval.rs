//! Occupancy and image metrics, per-branch training statistics, point-cloud
//! export, and depth-to-grid conversion.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, GridSpec, OccupancyMask, Vec3};
use crate::rendering::{generate_rays, Camera};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of cells predicted occupied.
    pub occupancy_ratio: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Precision, recall and F1 are 0 when their denominators vanish.
    pub fn metrics(&self) -> OccupancyMetrics {
        let total = self.total() as f64;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        OccupancyMetrics {
            accuracy: (self.tp + self.tn) as f64 / total,
            precision,
            recall,
            f1,
            occupancy_ratio: (self.tp + self.fp) as f64 / total,
        }
    }
}

pub fn confusion(predicted: &OccupancyMask, reference: &OccupancyMask) -> Result<ConfusionCounts> {
    if predicted.spec != reference.spec {
        return Err(Error::Config(format!(
            "occupancy grids differ: resolution {} vs {} or bounds",
            predicted.spec.res, reference.spec.res
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &r) in predicted.cells.iter().zip(&reference.cells) {
        match (p, r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn occupancy_metrics(predicted: &OccupancyMask, reference: &OccupancyMask) -> Result<OccupancyMetrics> {
    Ok(confusion(predicted, reference)?.metrics())
}

/// Grid from a point predicate evaluated at every cell center.
pub fn predicate_to_grid(spec: GridSpec, occupied: &dyn Fn(&[Vec3]) -> Result<Vec<bool>>) -> Result<OccupancyMask> {
    let cells = occupied(&spec.centers())?;
    assert_eq!(cells.len(), spec.cell_count());
    Ok(OccupancyMask { spec, cells })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`; `+inf` when identical.
pub fn psnr(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr: image sizes differ");
    let mse = mse(a, b);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mse(a: &[Vec3], b: &[Vec3]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>()).sum();
    total / (3 * a.len()) as f64
}

/// Formats a metric for CSV output; non-finite values become `inf` or `NA`.
pub fn csv_value(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn csv_option(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), csv_value)
}

/// Per-branch statistics of one batch: `S` is every scene sub-network
/// together, `E` the empty-space branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccStats {
    pub step: usize,
    pub fraction_scene: f64,
    pub fraction_empty: f64,
    pub sigma_scene: Option<f64>,
    pub sigma_empty: Option<f64>,
    pub alpha_scene: Option<f64>,
    pub alpha_empty: Option<f64>,
}

fn mean_where(values: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let (sum, n) = values.iter().zip(mask).filter(|(_, m)| **m == want).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

impl OccStats {
    pub fn collect(step: usize, sigma: &[f64], alpha: &[f64], routed_to_empty: &[bool]) -> Self {
        assert!(sigma.len() == alpha.len() && sigma.len() == routed_to_empty.len() && !sigma.is_empty());
        let empty = routed_to_empty.iter().filter(|&&e| e).count();
        let fraction_empty = empty as f64 / sigma.len() as f64;
        Self {
            step,
            fraction_scene: 1.0 - fraction_empty,
            fraction_empty,
            sigma_scene: mean_where(sigma, routed_to_empty, false),
            sigma_empty: mean_where(sigma, routed_to_empty, true),
            alpha_scene: mean_where(alpha, routed_to_empty, false),
            alpha_empty: mean_where(alpha, routed_to_empty, true),
        }
    }

    /// Mean density of scene-routed over empty-routed points.
    pub fn sigma_ratio(&self) -> Option<f64> {
        ratio(self.sigma_scene, self.sigma_empty)
    }

    pub fn alpha_ratio(&self) -> Option<f64> {
        ratio(self.alpha_scene, self.alpha_empty)
    }

    pub const CSV_HEADER: &'static str =
        "step,fraction_scene,fraction_empty,sigma_scene,sigma_empty,alpha_scene,alpha_empty,sigma_ratio,alpha_ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            csv_value(self.fraction_scene),
            csv_value(self.fraction_empty),
            csv_option(self.sigma_scene),
            csv_option(self.sigma_empty),
            csv_option(self.alpha_scene),
            csv_option(self.alpha_empty),
            csv_option(self.sigma_ratio()),
            csv_option(self.alpha_ratio()),
        )
    }
}

pub fn write_stats_csv(path: &Path, rows: &[OccStats]) -> Result<()> {
    let mut text = String::from(OccStats::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyMode {
    Rgb,
    Rgba,
}

/// One exported point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub position: Vec3,
    pub color: Vec3,
    pub alpha: f64,
}

/// `1 - exp(-sigma * delta)`.
pub fn alpha(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

/// ASCII PLY 1.0: float positions, 8-bit colors, and a float `alpha` property
/// in `Rgba` mode.
pub fn write_ply(path: &Path, points: &[CloudPoint], mode: PlyMode) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    let _ = writeln!(header, "ply\nformat ascii 1.0\nelement vertex {}", points.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if mode == PlyMode::Rgba {
        header.push_str("property float alpha\n");
    }
    header.push_str("end_header\n");
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for p in points {
        let [x, y, z] = p.position;
        let [r, g, b] = p.color.map(byte);
        match mode {
            PlyMode::Rgb => writeln!(w, "{x} {y} {z} {r} {g} {b}"),
            PlyMode::Rgba => writeln!(w, "{x} {y} {z} {r} {g} {b} {}", p.alpha),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `scene.ply` and `empty.ply` into `dir`, splitting by routing.
pub fn export_split_pointcloud(
    dir: &Path,
    points: &[CloudPoint],
    routed_to_empty: &[bool],
    mode: PlyMode,
) -> Result<(usize, usize)> {
    assert_eq!(points.len(), routed_to_empty.len());
    let (empty, scene): (Vec<_>, Vec<_>) = points.iter().zip(routed_to_empty).partition(|(_, e)| **e);
    let scene: Vec<CloudPoint> = scene.into_iter().map(|(p, _)| *p).collect();
    let empty: Vec<CloudPoint> = empty.into_iter().map(|(p, _)| *p).collect();
    write_ply(&dir.join("scene.ply"), &scene, mode)?;
    write_ply(&dir.join("empty.ply"), &empty, mode)?;
    Ok((scene.len(), empty.len()))
}

/// Pixels whose accumulated opacity is below this are treated as misses.
pub const SPLAT_MIN_OPACITY: f64 = 0.5;

/// Marks the cell containing each pixel's expected termination point
/// (`depth / opacity` along the pixel ray). No dilation.
pub fn splat_depth(spec: GridSpec, views: &[(Camera, &[f64], &[f64])]) -> Result<OccupancyMask> {
    let mut mask = OccupancyMask::empty(spec);
    for (camera, depth, opacity) in views {
        let rays = generate_rays(camera)?;
        assert!(depth.len() == rays.len() && opacity.len() == rays.len());
        for ((ray, d), o) in rays.iter().zip(depth.iter()).zip(opacity.iter()) {
            if *o < SPLAT_MIN_OPACITY {
                continue;
            }
            let p = geom::along(ray.origin, ray.direction, d / o);
            if let Some(i) = spec.locate(p) {
                mask.cells[i] = true;
            }
        }
    }
    Ok(mask)
}

/// Share of `mask` cells that are occupied in `reference` or 26-adjacent to
/// an occupied reference cell.
pub fn near_fraction(mask: &OccupancyMask, reference: &OccupancyMask) -> f64 {
    assert_eq!(mask.spec, reference.spec);
    let spec = mask.spec;
    let r = spec.res as isize;
    let marked: Vec<usize> = (0..mask.cells.len()).filter(|&i| mask.cells[i]).collect();
    if marked.is_empty() {
        return 1.0;
    }
    let near = marked
        .iter()
        .filter(|&&i| {
            let c = spec.coords(i).map(|v| v as isize);
            (-1..=1).any(|dz| {
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        n.iter().all(|v| (0..r).contains(v))
                            && reference.cells[spec.index(n.map(|v| v as usize))]
                    })
                })
            })
        })
        .count();
    near as f64 / marked.len() as f64
}

/// One row of the occupancy comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub metrics: OccupancyMetrics,
    pub param_number: usize,
}

pub const TABLE_HEADER: &str = "method,accuracy,precision,recall,f1,param_number,occupancy_ratio";

pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut text = format!("{TABLE_HEADER}\n");
    for r in rows {
        let m = r.metrics;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.method,
            csv_value(m.accuracy),
            csv_value(m.precision),
            csv_value(m.recall),
            csv_value(m.f1),
            r.param_number,
            csv_value(m.occupancy_ratio)
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;

    #[test]
    fn confusion_formulas() {
        let m = ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 88 }.metrics();
        assert!((m.accuracy - 0.96).abs() < 1e-12);
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
        assert!((m.occupancy_ratio - 0.1).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean_on_random_counts() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as usize % 50
        };
        for _ in 0..500 {
            let c = ConfusionCounts { tp: next() + 1, fp: next(), fn_: next(), tn: next() };
            let m = c.metrics();
            let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            assert!((m.f1 - f1).abs() < 1e-12);
            assert!((m.occupancy_ratio - (c.tp + c.fp) as f64 / c.total() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_and_mismatched_grids() {
        let spec = GridSpec::new(4, Aabb::unit());
        let mut a = OccupancyMask::empty(spec);
        a.cells[3] = true;
        a.cells[40] = true;
        let m = occupancy_metrics(&a, &a).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let b = OccupancyMask::empty(GridSpec::new(8, Aabb::unit()));
        assert!(occupancy_metrics(&a, &b).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = vec![[0.0; 3]; 16];
        let b = vec![[1.0; 3]; 16];
        assert_eq!(psnr(&a, &b), 0.0);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let c = vec![[0.1; 3]; 16];
        assert!((psnr(&a, &c) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &c), psnr(&c, &a));
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let base: Vec<Vec3> = (0..256).map(|i| [(i % 16) as f64 / 16.0, 0.5, (i / 16) as f64 / 16.0]).collect();
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let amp = 0.01 * k as f64;
            let noisy: Vec<Vec3> = base
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let s = if i % 2 == 0 { amp } else { -amp };
                    c.map(|v| v + s)
                })
                .collect();
            let p = psnr(&base, &noisy);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn stats_hand_computed() {
        let s = OccStats::collect(7, &[2.0, 4.0, 0.5, 0.1], &[0.2, 0.4, 0.05, 0.01], &[false, false, true, true]);
        assert_eq!((s.fraction_scene, s.fraction_empty), (0.5, 0.5));
        assert_eq!(s.sigma_scene, Some(3.0));
        assert!((s.sigma_empty.unwrap() - 0.3).abs() < 1e-15);
        assert!((s.sigma_ratio().unwrap() - 10.0).abs() < 1e-12);
        assert!((s.alpha_ratio().unwrap() - 0.3 / 0.03).abs() < 1e-12);

        let all_empty = OccStats::collect(1, &[1.0, 2.0], &[0.1, 0.2], &[true, true]);
        assert_eq!(all_empty.fraction_empty, 1.0);
        assert_eq!(all_empty.fraction_scene + all_empty.fraction_empty, 1.0);
        assert!(all_empty.sigma_ratio().is_none());
        assert!(all_empty.csv_row().ends_with(",NA,NA"));
    }

    #[test]
    fn ply_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.ply");
        write_ply(&p, &[], PlyMode::Rgb).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 0\n"));
        assert!(text.ends_with("end_header\n"));

        let (sigma, delta) = (3.0, 0.1);
        let pts = vec![
            CloudPoint { position: [0.0, 1.0, 2.0], color: [1.0, 0.0, 0.5], alpha: alpha(sigma, delta) },
            CloudPoint { position: [0.5; 3], color: [0.0; 3], alpha: 0.0 },
        ];
        let (s, e) = export_split_pointcloud(dir.path(), &pts, &[false, true], PlyMode::Rgba).unwrap();
        assert_eq!((s, e), (1, 1));
        let scene = std::fs::read_to_string(dir.path().join("scene.ply")).unwrap();
        assert!(scene.contains("element vertex 1\n"));
        assert!(scene.contains("property float alpha\n"));
        let last = scene.lines().last().unwrap();
        let a: f64 = last.split(' ').nth(6).unwrap().parse().unwrap();
        assert!((a - (1.0 - (-0.3f64).exp())).abs() < 1e-15);
        assert!(last.starts_with("0 1 2 255 0 128 "));
    }

    #[test]
    fn near_fraction_counts_neighbours() {
        let spec = GridSpec::new(4, Aabb::unit());
        let mut r = OccupancyMask::empty(spec);
        r.cells[spec.index([1, 1, 1])] = true;
        let mut m = OccupancyMask::empty(spec);
        m.cells[spec.index([2, 2, 2])] = true;
        m.cells[spec.index([3, 3, 3])] = true;
        assert_eq!(near_fraction(&m, &r), 0.5);
    }
}
