//! Linear generators `x = g(θ; π)`: the identity and a multi-pose
//! parallel projection of a `G × G` grid onto `D` bins.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::prior::{ConditionalPrior, MixtureComponent};

/// Grid side length of the built-in scenes.
pub const SCENE_GRID: usize = 8;

/// One cell's splat onto two neighbouring bins.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Splat {
    lo: usize,
    w_lo: f64,
    hi: usize,
    w_hi: f64,
}

/// `K` projection operators `A_π` of shape `D × G²`.
///
/// Pose `k` rotates cell centres by `2πk/K` and splats each cell onto the
/// first rotated axis with two-bin linear interpolation. Bins cover
/// `[−G/√2, G/√2]`, the disc circumscribing the grid, so every cell lands
/// inside; the edge clamp only guards against round-off.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    grid: usize,
    bins: usize,
    splats: Vec<Vec<Splat>>,
}

impl PoseSet {
    pub fn new(grid: usize, bins: usize, poses: usize) -> Result<Self> {
        if grid == 0 || bins < 2 || poses == 0 {
            return Err(Error::Config(format!(
                "pose set needs grid >= 1, bins >= 2, poses >= 1 (got {grid}, {bins}, {poses})"
            )));
        }
        let half = grid as f64 / 2.0;
        let radius = half * 2f64.sqrt();
        let width = 2.0 * radius / bins as f64;
        let splats = (0..poses)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / poses as f64;
                let (sin, cos) = angle.sin_cos();
                let mut row = Vec::with_capacity(grid * grid);
                for i in 0..grid {
                    for j in 0..grid {
                        let cx = j as f64 + 0.5 - half;
                        let cy = i as f64 + 0.5 - half;
                        let u = cx * cos + cy * sin;
                        let pos = (u + radius) / width - 0.5;
                        row.push(splat_at(pos, bins));
                    }
                }
                row
            })
            .collect();
        Ok(Self { grid, bins, splats })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    fn pose(&self, pose: usize) -> Result<&[Splat]> {
        self.splats
            .get(pose)
            .map(Vec::as_slice)
            .ok_or(Error::PoseOutOfRange {
                pose,
                count: self.splats.len(),
            })
    }

    /// `A_π θ`.
    pub fn project(&self, theta: &[f64], pose: usize) -> Result<Vec<f64>> {
        check_dim(self.grid * self.grid, theta.len())?;
        let splats = self.pose(pose)?;
        let mut out = vec![0.0; self.bins];
        for (s, v) in splats.iter().zip(theta) {
            out[s.lo] += s.w_lo * v;
            out[s.hi] += s.w_hi * v;
        }
        Ok(out)
    }

    /// `A_πᵀ u`.
    pub fn back_project(&self, cotangent: &[f64], pose: usize) -> Result<Vec<f64>> {
        check_dim(self.bins, cotangent.len())?;
        let splats = self.pose(pose)?;
        Ok(splats
            .iter()
            .map(|s| s.w_lo * cotangent[s.lo] + s.w_hi * cotangent[s.hi])
            .collect())
    }

    /// Dense `D × G²` copy of `A_π`, row-major.
    pub fn dense(&self, pose: usize) -> Result<Vec<Vec<f64>>> {
        let splats = self.pose(pose)?;
        let mut m = vec![vec![0.0; self.grid * self.grid]; self.bins];
        for (cell, s) in splats.iter().enumerate() {
            m[s.lo][cell] += s.w_lo;
            m[s.hi][cell] += s.w_hi;
        }
        Ok(m)
    }
}

fn splat_at(pos: f64, bins: usize) -> Splat {
    let last = bins - 1;
    if pos <= 0.0 {
        return Splat { lo: 0, w_lo: 1.0, hi: 0, w_hi: 0.0 };
    }
    if pos >= last as f64 {
        return Splat { lo: last, w_lo: 1.0, hi: last, w_hi: 0.0 };
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    Splat {
        lo,
        w_lo: 1.0 - frac,
        hi: lo + 1,
        w_hi: frac,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Renderer {
    Identity { dim: usize },
    Projection(PoseSet),
}

impl Renderer {
    pub fn param_dim(&self) -> usize {
        match self {
            Renderer::Identity { dim } => *dim,
            Renderer::Projection(p) => p.grid * p.grid,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Renderer::Identity { dim } => *dim,
            Renderer::Projection(p) => p.bins,
        }
    }

    /// Number of poses; the identity has one.
    pub fn num_poses(&self) -> usize {
        match self {
            Renderer::Identity { .. } => 1,
            Renderer::Projection(p) => p.len(),
        }
    }

    pub fn render(&self, theta: &[f64], pose: usize) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity { dim } => {
                check_pose(pose, 1)?;
                check_dim(*dim, theta.len())?;
                Ok(theta.to_vec())
            }
            Renderer::Projection(p) => p.project(theta, pose),
        }
    }

    pub fn vjp(&self, pose: usize, cotangent: &[f64]) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity { dim } => {
                check_pose(pose, 1)?;
                check_dim(*dim, cotangent.len())?;
                Ok(cotangent.to_vec())
            }
            Renderer::Projection(p) => p.back_project(cotangent, pose),
        }
    }
}

fn check_pose(pose: usize, count: usize) -> Result<()> {
    if pose < count {
        Ok(())
    } else {
        Err(Error::PoseOutOfRange { pose, count })
    }
}

/// One prior per pose: for each labelled scene, a single component at
/// `A_π θ*` with standard deviation `s`, conditions equally weighted.
pub fn prior_from_scene(
    scenes: &[(String, Vec<f64>)],
    renderer: &Renderer,
    s: f64,
) -> Result<Vec<ConditionalPrior>> {
    if scenes.is_empty() {
        return Err(Error::InvalidPrior("no scenes given".into()));
    }
    let labels: Vec<String> = scenes.iter().map(|(l, _)| l.clone()).collect();
    let weights = vec![1.0 / scenes.len() as f64; scenes.len()];
    (0..renderer.num_poses())
        .map(|pose| {
            let components = scenes
                .iter()
                .map(|(_, theta)| Ok(vec![MixtureComponent::new(renderer.render(theta, pose)?, s, 1.0)]))
                .collect::<Result<Vec<_>>>()?;
            ConditionalPrior::new(labels.clone(), components, weights.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scene {
    Disk,
    Cross,
    TwoBlobs,
}

impl Scene {
    pub const ALL: [Scene; 3] = [Scene::Disk, Scene::Cross, Scene::TwoBlobs];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scene::Disk => "disk",
            Scene::Cross => "cross",
            Scene::TwoBlobs => "two-blobs",
        }
    }

    /// Cell map, one string per row: `#` = 1.0, `+` = 0.5, `.` = 0.
    pub fn pattern(&self) -> [&'static str; SCENE_GRID] {
        match self {
            // Cell centres within radius 2 of the grid centre are 1.0,
            // within radius 3 are 0.5.
            Scene::Disk => [
                "........",
                "..++++..",
                ".++##++.",
                ".+####+.",
                ".+####+.",
                ".++##++.",
                "..++++..",
                "........",
            ],
            Scene::Cross => [
                "...##...",
                "...##...",
                "...##...",
                "########",
                "########",
                "...##...",
                "...##...",
                "...##...",
            ],
            Scene::TwoBlobs => [
                "........",
                ".##.....",
                ".##+....",
                "..+.....",
                ".....+..",
                "....+##.",
                ".....##.",
                "........",
            ],
        }
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scene::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownScene(s.to_string()))
    }
}

/// Ground-truth grid of a built-in scene, row-major.
pub fn scene_library(name: &str) -> Result<Vec<f64>> {
    let scene: Scene = name.parse()?;
    Ok(scene
        .pattern()
        .iter()
        .flat_map(|row| {
            row.chars().map(|c| match c {
                '#' => 1.0,
                '+' => 0.5,
                _ => 0.0,
            })
        })
        .collect())
}

/// `G` lines of `G` comma-separated values.
pub fn grid_to_csv(theta: &[f64], grid: usize) -> Result<String> {
    check_dim(grid * grid, theta.len())?;
    let mut out = String::new();
    for row in theta.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    Ok(out)
}

/// Parse a square grid written by [`grid_to_csv`]; returns `(G, values)`.
pub fn grid_from_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Csv(format!("line {}: bad number {c:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Csv(format!("line {}: expected {w} cells, got {}", n + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    match width {
        Some(w) if w == rows => Ok((w, values)),
        _ => Err(Error::Csv(format!("grid is not square ({rows} rows)"))),
    }
}

pub fn read_grid(path: &Path) -> Result<(usize, Vec<f64>)> {
    grid_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::dot;
    use crate::{seeded_rng, standard_normal};

    fn poses() -> PoseSet {
        PoseSet::new(8, 16, 8).unwrap()
    }

    #[test]
    fn identity_passes_through() {
        let r = Renderer::Identity { dim: 2 };
        assert_eq!(r.render(&[1.0, 2.0], 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(r.vjp(0, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(r.render(&[1.0, 2.0], 1), Err(Error::PoseOutOfRange { .. })));
    }

    #[test]
    fn mass_is_preserved() {
        let p = poses();
        let mut rng = seeded_rng(3);
        for k in 0..p.len() {
            let theta = standard_normal(&mut rng, 64);
            let total: f64 = p.project(&theta, k).unwrap().iter().sum();
            let expected: f64 = theta.iter().sum();
            assert!((total - expected).abs() < 1e-9);
            let uniform: f64 = p.project(&[0.7; 64], k).unwrap().iter().sum();
            assert!((uniform - 0.7 * 64.0).abs() < 1e-9);
            for col in 0..64 {
                let dense = p.dense(k).unwrap();
                let s: f64 = dense.iter().map(|row| row[col]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(dense.iter().all(|row| row[col] >= 0.0));
            }
        }
    }

    #[test]
    fn matches_dense_product_on_disk() {
        let p = poses();
        let theta = scene_library("disk").unwrap();
        for k in 0..p.len() {
            let dense = p.dense(k).unwrap();
            let reference: Vec<f64> = dense.iter().map(|row| dot(row, &theta)).collect();
            let fast = p.project(&theta, k).unwrap();
            for (a, b) in fast.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let r = Renderer::Projection(poses());
        let mut rng = seeded_rng(11);
        for k in 0..8 {
            let theta = standard_normal(&mut rng, 64);
            let u = standard_normal(&mut rng, 16);
            let lhs = dot(&r.render(&theta, k).unwrap(), &u);
            let rhs = dot(&theta, &r.vjp(k, &u).unwrap());
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let r = Renderer::Projection(poses());
        let mut rng = seeded_rng(12);
        let theta = standard_normal(&mut rng, 64);
        let u = standard_normal(&mut rng, 16);
        let k = 3;
        let g = r.vjp(k, &u).unwrap();
        let h = 1e-5;
        for cell in 0..64 {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[cell] += h;
            minus[cell] -= h;
            let fd = (dot(&r.render(&plus, k).unwrap(), &u) - dot(&r.render(&minus, k).unwrap(), &u)) / (2.0 * h);
            assert!((fd - g[cell]).abs() <= 1e-6 * g[cell].abs().max(1.0));
        }
    }

    #[test]
    fn quarter_turns_of_the_disk_agree() {
        let p = poses();
        let disk = scene_library("disk").unwrap();
        for k in 0..p.len() {
            let a = p.project(&disk, k).unwrap();
            let b = p.project(&disk, (k + 2) % 8).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "pose {k}");
            }
        }
    }

    #[test]
    fn scene_library_properties() {
        let g = SCENE_GRID;
        let disk = scene_library("disk").unwrap();
        for i in 0..g {
            for j in 0..g {
                // 90° rotation maps (i, j) to (j, G−1−i).
                assert_eq!(disk[i * g + j], disk[j * g + (g - 1 - i)]);
            }
        }
        let cross = scene_library("cross").unwrap();
        for i in 0..g {
            let row: f64 = cross[i * g..(i + 1) * g].iter().sum();
            let col: f64 = (0..g).map(|r| cross[r * g + i]).sum();
            let expected = if i == 3 || i == 4 { 8.0 } else { 2.0 };
            assert_eq!(row, expected);
            assert_eq!(col, expected);
        }
        let blobs = scene_library("two-blobs").unwrap();
        let d: f64 = disk.iter().zip(&blobs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d >= 0.5);
        for scene in Scene::ALL {
            assert!(scene_library(scene.as_str()).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(matches!(scene_library("teapot"), Err(Error::UnknownScene(_))));
    }

    #[test]
    fn scene_priors() {
        let r = Renderer::Projection(poses());
        let disk = scene_library("disk").unwrap();
        let cross = scene_library("cross").unwrap();
        let priors = prior_from_scene(&[("disk".into(), disk.clone()), ("cross".into(), cross)], &r, 0.0).unwrap();
        assert_eq!(priors.len(), 8);
        for (k, p) in priors.iter().enumerate() {
            assert!(p.has_delta());
            assert_eq!(p.components(Some(0)).unwrap()[0].mean, r.render(&disk, k).unwrap());
            assert_eq!(p.components(None).unwrap().len(), 2);
        }
    }

    #[test]
    fn grid_csv_round_trip() {
        let disk = scene_library("disk").unwrap();
        let text = grid_to_csv(&disk, 8).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert_eq!(grid_from_csv(&text).unwrap(), (8, disk));
        assert!(grid_from_csv("1,2\n3\n").is_err());
        assert!(grid_from_csv("1,x\n3,4\n").is_err());
    }
}
