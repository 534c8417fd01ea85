//! Differentiable image generators `x = g(theta, c)`.
//!
//! All generators are linear in `theta`, so `vjp` is the exact transpose map.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Result};
use crate::prior::GaussianMixturePrior;

/// Generator parameters with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub params: Vec<f64>,
    /// `[h, w]` for grids, `[n, d]` for particle ensembles, `[d]` otherwise.
    pub shape: Vec<usize>,
    pub stage: String,
}

impl Scene {
    pub fn new(params: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != params.len() {
            return param(format!("scene shape {shape:?} does not match {} parameters", params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return param("scene parameters must be finite");
        }
        Ok(Self { params, shape, stage: String::new() })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { params: vec![0.0; n], shape, stage: String::new() }
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = stage.into();
        self
    }

    /// `(h, w)` if this is a 2-D grid scene.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Some((h, w)),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// View descriptor `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CameraPose {
    /// Poseless render (identity generator).
    Default,
    Particle { index: usize },
    View { angle: f64, crop_x: i32, crop_y: i32 },
}

impl CameraPose {
    pub fn angle(angle: f64) -> Self {
        Self::View { angle, crop_x: 0, crop_y: 0 }
    }

    /// `count` poses at uniform azimuth starting from angle 0.
    pub fn uniform_azimuth(count: usize) -> Vec<Self> {
        (0..count).map(|k| Self::angle(TAU * k as f64 / count as f64)).collect()
    }

    /// Angle in radians, if this is a view pose.
    pub fn view_angle(&self) -> Option<f64> {
        match self {
            Self::View { angle, .. } => Some(*angle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// `x = theta`
    Identity { dim: usize },
    /// `x = theta[c]`, one particle per pose index.
    Particles { count: usize, dim: usize },
    /// `x = R_c theta`, bilinear rotation of an `h x w` grid with zero padding.
    MultiView { height: usize, width: usize },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity { .. } => "identity",
            Self::Particles { .. } => "particles",
            Self::MultiView { .. } => "multiview",
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            Self::Identity { dim } => dim,
            Self::Particles { count, dim } => count * dim,
            Self::MultiView { height, width } => height * width,
        }
    }

    pub fn render_dim(&self) -> usize {
        match *self {
            Self::Identity { dim } | Self::Particles { dim, .. } => dim,
            Self::MultiView { height, width } => height * width,
        }
    }

    pub fn scene_shape(&self) -> Vec<usize> {
        match *self {
            Self::Identity { dim } => vec![dim],
            Self::Particles { count, dim } => vec![count, dim],
            Self::MultiView { height, width } => vec![height, width],
        }
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        check_dim(self.param_dim(), scene.len(), "scene for generator")
    }

    /// Sparse linear map of a pose: one tap list per output entry.
    pub fn view_map(&self, pose: &CameraPose) -> Result<ViewMap> {
        match (*self, *pose) {
            (Self::Identity { dim }, CameraPose::Default) => Ok(ViewMap::offset(dim, 0)),
            (Self::Particles { count, dim }, CameraPose::Particle { index }) => {
                if index >= count {
                    return param(format!("particle index {index} out of range ({count} particles)"));
                }
                Ok(ViewMap::offset(dim, index * dim))
            }
            (Self::MultiView { height, width }, CameraPose::View { angle, crop_x, crop_y }) => {
                if !(0.0..TAU).contains(&angle) {
                    return param(format!("view angle must lie in [0, 2pi), got {angle}"));
                }
                Ok(ViewMap::rotation(height, width, angle, crop_x, crop_y))
            }
            (g, p) => param(format!("pose {p:?} is not valid for the {} generator", g.name())),
        }
    }

    pub fn render(&self, scene: &Scene, pose: &CameraPose) -> Result<Vec<f64>> {
        self.check_scene(scene)?;
        Ok(self.view_map(pose)?.apply(&scene.params))
    }

    /// `J^T cotangent`, the gradient with respect to `theta`.
    pub fn vjp(&self, scene: &Scene, pose: &CameraPose, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_scene(scene)?;
        check_dim(self.render_dim(), cotangent.len(), "generator cotangent")?;
        Ok(self.view_map(pose)?.transpose_apply(cotangent, self.param_dim()))
    }
}

/// `out[i] = sum_k w_k theta[src_k]` for each output entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMap {
    taps: Vec<Vec<(usize, f64)>>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl ViewMap {
    fn offset(dim: usize, start: usize) -> Self {
        Self { taps: (0..dim).map(|i| vec![(start + i, 1.0)]).collect() }
    }

    fn rotation(h: usize, w: usize, angle: f64, crop_x: i32, crop_y: i32) -> Self {
        // exact trig at quarter turns keeps those views pure permutations
        let quarter = angle / FRAC_PI_2;
        let (sin, cos) = if (quarter - quarter.round()).abs() < 1e-12 {
            match (quarter.round() as i64).rem_euclid(4) {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                _ => (-1.0, 0.0),
            }
        } else {
            angle.sin_cos()
        };
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let y = (i as i64 + crop_y as i64) as f64 - cy;
                let x = (j as i64 + crop_x as i64) as f64 - cx;
                // content rotated by +angle: sample the source at R(-angle) p
                let sx = snap(cos * x + sin * y + cx);
                let sy = snap(-sin * x + cos * y + cy);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let mut t = Vec::with_capacity(4);
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let wgt = wy * wx;
                        let (yy, xx) = (y0 + dy, x0 + dx);
                        if wgt != 0.0 && yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                            t.push((yy as usize * w + xx as usize, wgt));
                        }
                    }
                }
                taps.push(t);
            }
        }
        Self { taps }
    }

    pub fn out_dim(&self) -> usize {
        self.taps.len()
    }

    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        self.taps.iter().map(|t| t.iter().map(|&(k, w)| w * theta[k]).sum()).collect()
    }

    pub fn transpose_apply(&self, u: &[f64], param_dim: usize) -> Vec<f64> {
        let mut g = vec![0.0; param_dim];
        for (t, ui) in self.taps.iter().zip(u) {
            for &(k, w) in t {
                g[k] += w * ui;
            }
        }
        g
    }
}

/// Per-pose Gaussian priors over rendered images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPriorSet {
    pub poses: Vec<CameraPose>,
    pub priors: Vec<GaussianMixturePrior>,
}

impl ViewPriorSet {
    pub fn new(poses: Vec<CameraPose>, priors: Vec<GaussianMixturePrior>) -> Result<Self> {
        if poses.is_empty() || poses.len() != priors.len() {
            return param("view prior set needs one prior per pose and at least one pose");
        }
        let d = priors[0].dim();
        for p in &priors {
            check_dim(d, p.dim(), "view prior")?;
        }
        Ok(Self { poses, priors })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// A recoverable benchmark: view `c` has prior `N(g(theta*, c), s^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub generator: Generator,
    pub theta_star: Scene,
    pub views: ViewPriorSet,
}

pub fn make_benchmark(generator: Generator, theta_star: Scene, poses: Vec<CameraPose>, s: f64) -> Result<Benchmark> {
    if poses.is_empty() {
        return param("benchmark needs at least one pose");
    }
    let priors = poses
        .iter()
        .map(|c| GaussianMixturePrior::gaussian(generator.render(&theta_star, c)?, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { generator, theta_star, views: ViewPriorSet::new(poses, priors)? })
}

/// A smooth test image: a few Gaussian blobs inside the inscribed circle,
/// so every rotation keeps the content in frame.
pub fn blob_scene(h: usize, w: usize, seed: u64) -> Result<Scene> {
    use rand::Rng;
    if h < 4 || w < 4 {
        return param("blob scene needs at least 4x4 pixels");
    }
    let mut rng = crate::rng::stream(seed, &[0xb1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = 0.5 * h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let rad = 0.3 * r * rng.random::<f64>().sqrt();
            let phi = TAU * rng.random::<f64>();
            let amp = if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.5..1.0);
            (cy + rad * phi.sin(), cx + rad * phi.cos(), rng.random_range(0.12..0.2) * r, amp)
        })
        .collect();
    let mut params = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            params[i * w + j] = blobs
                .iter()
                .map(|&(by, bx, bw, a)| {
                    let d2 = (i as f64 - by).powi(2) + (j as f64 - bx).powi(2);
                    a * (-0.5 * d2 / (bw * bw)).exp()
                })
                .sum();
        }
    }
    Scene::new(params, vec![h, w])
}

/// Multi-view benchmark with `views` uniform azimuths around a blob scene.
pub fn standard_benchmark(h: usize, w: usize, views: usize, s: f64, seed: u64) -> Result<Benchmark> {
    make_benchmark(
        Generator::MultiView { height: h, width: w },
        blob_scene(h, w, seed)?,
        CameraPose::uniform_azimuth(views),
        s,
    )
}
