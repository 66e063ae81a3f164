//! Synthetic two-view scenes with exact geometry.
//!
//! Camera A sits at the origin looking down +z. Camera B orbits the scene
//! centre by a random rotation and is nudged by a small translation. Shared
//! points are drawn inside A's frustum and kept when B sees them too.
//! Unmatched keypoints get a random depth, so they have a reprojection into
//! the other image, but they are placed where nothing lies within the
//! non-repeatable radius of it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::bcas::distance;
use crate::encoder::KeypointSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::labels::{make_labels, GroundTruthLabels, NON_REPEATABLE_PX};

/// Allowed span of the relative camera rotation, degrees.
pub const ROTATION_BAND_DEG: [f64; 2] = [6.0, 60.0];

/// Extra clearance beyond the non-repeatable radius for unmatched keypoints.
const CLEARANCE_MARGIN_PX: f64 = 2.0;
const POSE_RETRIES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_shared_points: usize,
    pub num_unmatched_per_image: usize,
    pub width: f64,
    pub height: f64,
    pub focal: f64,
    pub rotation_deg: [f64; 2],
    pub translation: [f64; 2],
    /// Depth range of scene points in camera A.
    pub depth: [f64; 2],
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    /// Maximum keypoint displacement from the exact projection, pixels.
    pub jitter_px: f64,
    /// Minimum distance between keypoints of one image, pixels.
    pub min_separation_px: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_shared_points: 64,
            num_unmatched_per_image: 64,
            width: 640.0,
            height: 480.0,
            focal: 500.0,
            rotation_deg: [6.0, 30.0],
            translation: [0.0, 0.5],
            depth: [4.0, 8.0],
            descriptor_dim: 32,
            descriptor_noise: 0.1,
            jitter_px: 1.0,
            min_separation_px: 8.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rotation_deg;
        if !(ROTATION_BAND_DEG[0] <= lo && lo <= hi && hi <= ROTATION_BAND_DEG[1]) {
            return Err(Error::Config(format!(
                "rotation range [{lo}, {hi}] must lie within [{}, {}] degrees",
                ROTATION_BAND_DEG[0], ROTATION_BAND_DEG[1]
            )));
        }
        if self.num_shared_points == 0 {
            return Err(Error::Config("need at least one shared point".into()));
        }
        if self.descriptor_noise.is_nan() || self.descriptor_noise < 0.0 {
            return Err(Error::Config("descriptor noise must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_px) {
            return Err(Error::Config("jitter must lie in [0, 1] px".into()));
        }
        if self.descriptor_dim < 2 {
            return Err(Error::Config("descriptor dimension must be at least 2".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.focal > 0.0) {
            return Err(Error::Config("image size and focal length must be positive".into()));
        }
        let [d0, d1] = self.depth;
        let [t0, t1] = self.translation;
        if !(0.0 < d0 && d0 <= d1 && 0.0 <= t0 && t0 <= t1) {
            return Err(Error::Config(
                "depth and translation ranges must be ordered and positive".into(),
            ));
        }
        if self.min_separation_px < 2.0 * self.jitter_px + 2.0 * crate::training::labels::MATCH_RADIUS_PX {
            return Err(Error::Config(
                "min separation too small to keep ground-truth matches unambiguous".into(),
            ));
        }
        Ok(())
    }

    pub fn keypoints_per_image(&self) -> usize {
        self.num_shared_points + self.num_unmatched_per_image
    }
}

/// One labelled image pair with its exact cross-projections.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<T> {
    pub kps_a: KeypointSet<T>,
    pub kps_b: KeypointSet<T>,
    pub proj_ab: Vec<Option<[f64; 2]>>,
    pub proj_ba: Vec<Option<[f64; 2]>>,
    pub labels: GroundTruthLabels,
}

impl<T: Scalar> PairSample<T> {
    pub fn swapped(&self) -> Self {
        Self {
            kps_a: self.kps_b.clone(),
            kps_b: self.kps_a.clone(),
            proj_ab: self.proj_ba.clone(),
            proj_ba: self.proj_ab.clone(),
            labels: self.labels.swapped(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PairSample<U> {
        PairSample {
            kps_a: self.kps_a.cast(),
            kps_b: self.kps_b.cast(),
            proj_ab: self.proj_ab.clone(),
            proj_ba: self.proj_ba.clone(),
            labels: self.labels.clone(),
        }
    }
}

type Vec3 = [f64; 3];

struct Camera {
    /// World-to-camera rotation, row-major.
    rot: [Vec3; 3],
    centre: Vec3,
    focal: f64,
    pp: [f64; 2],
    size: [f64; 2],
}

impl Camera {
    fn project(&self, x: Vec3) -> Option<[f64; 2]> {
        let d = [x[0] - self.centre[0], x[1] - self.centre[1], x[2] - self.centre[2]];
        let c: Vec<f64> = self
            .rot
            .iter()
            .map(|r| r[0] * d[0] + r[1] * d[1] + r[2] * d[2])
            .collect();
        if c[2] <= 1e-6 {
            return None;
        }
        let p = [
            self.focal * c[0] / c[2] + self.pp[0],
            self.focal * c[1] / c[2] + self.pp[1],
        ];
        let inside = (0.0..=self.size[0]).contains(&p[0]) && (0.0..=self.size[1]).contains(&p[1]);
        inside.then_some(p)
    }

    /// World point at `depth` along the ray through pixel `p`.
    fn back_project(&self, p: [f64; 2], depth: f64) -> Vec3 {
        let ray = [(p[0] - self.pp[0]) / self.focal, (p[1] - self.pp[1]) / self.focal, 1.0];
        let local = [ray[0] * depth, ray[1] * depth, depth];
        // camera-to-world is the transpose
        let mut x = self.centre;
        for (r, &l) in self.rot.iter().zip(&local) {
            for k in 0..3 {
                x[k] += r[k] * l;
            }
        }
        x
    }
}

fn axis_angle(axis: Vec3, angle: f64) -> [Vec3; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn cameras<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> (Camera, Camera) {
    let pp = [cfg.width / 2.0, cfg.height / 2.0];
    let size = [cfg.width, cfg.height];
    let a = Camera {
        rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        centre: [0.0; 3],
        focal: cfg.focal,
        pp,
        size,
    };
    let axis: Vec3 = UnitSphere.sample(rng);
    let angle = rng.gen_range(cfg.rotation_deg[0]..=cfg.rotation_deg[1]).to_radians();
    let rot = axis_angle(axis, angle);
    let zc = 0.5 * (cfg.depth[0] + cfg.depth[1]);
    // orbit so the scene centre stays on B's optical axis, then offset
    let mut centre = [0.0, 0.0, zc];
    for k in 0..3 {
        centre[k] -= rot[2][k] * zc;
    }
    let dir: Vec3 = UnitSphere.sample(rng);
    let mag = rng.gen_range(cfg.translation[0]..=cfg.translation[1]);
    for k in 0..3 {
        centre[k] += dir[k] * mag;
    }
    let b = Camera {
        rot,
        centre,
        focal: cfg.focal,
        pp,
        size,
    };
    (a, b)
}

fn jitter<R: Rng>(p: [f64; 2], radius: f64, size: [f64; 2], rng: &mut R) -> [f64; 2] {
    if radius == 0.0 {
        return p;
    }
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    [
        (p[0] + r * t.cos()).clamp(0.0, size[0]),
        (p[1] + r * t.sin()).clamp(0.0, size[1]),
    ]
}

fn clear_of(p: [f64; 2], others: &[[f64; 2]], radius: f64) -> bool {
    others.iter().all(|&q| distance(p, q) > radius)
}

struct Geometry {
    kps_a: Vec<[f64; 2]>,
    kps_b: Vec<[f64; 2]>,
    proj_ab: Vec<Option<[f64; 2]>>,
    proj_ba: Vec<Option<[f64; 2]>>,
}

fn try_geometry<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Option<Geometry> {
    let (cam_a, cam_b) = cameras(cfg, rng);
    let size = [cfg.width, cfg.height];
    let sep = cfg.min_separation_px;
    let clearance = NON_REPEATABLE_PX + CLEARANCE_MARGIN_PX;
    let budget = 200 * cfg.keypoints_per_image() + 1000;

    let mut exact_a: Vec<[f64; 2]> = Vec::new();
    let mut exact_b: Vec<[f64; 2]> = Vec::new();
    let mut tries = 0;
    while exact_a.len() < cfg.num_shared_points {
        tries += 1;
        if tries > budget {
            return None;
        }
        let pa = [rng.gen_range(0.0..=cfg.width), rng.gen_range(0.0..=cfg.height)];
        let depth = rng.gen_range(cfg.depth[0]..=cfg.depth[1]);
        let Some(pb) = cam_b.project(cam_a.back_project(pa, depth)) else {
            continue;
        };
        if clear_of(pa, &exact_a, sep) && clear_of(pb, &exact_b, sep) {
            exact_a.push(pa);
            exact_b.push(pb);
        }
    }
    let mut kps_a: Vec<[f64; 2]> = exact_a.iter().map(|&p| jitter(p, cfg.jitter_px, size, rng)).collect();
    let mut kps_b: Vec<[f64; 2]> = exact_b.iter().map(|&p| jitter(p, cfg.jitter_px, size, rng)).collect();
    let mut proj_ab: Vec<Option<[f64; 2]>> = exact_b.iter().map(|&p| Some(p)).collect();
    let mut proj_ba: Vec<Option<[f64; 2]>> = exact_a.iter().map(|&p| Some(p)).collect();

    let place = |own: &mut Vec<[f64; 2]>,
                 other: &[[f64; 2]],
                 own_proj: &mut Vec<Option<[f64; 2]>>,
                 other_proj: &[Option<[f64; 2]>],
                 from: &Camera,
                 to: &Camera,
                 rng: &mut R|
     -> bool {
        let mut placed = 0;
        let mut tries = 0;
        while placed < cfg.num_unmatched_per_image {
            tries += 1;
            if tries > budget {
                return false;
            }
            let p = [rng.gen_range(0.0..=cfg.width), rng.gen_range(0.0..=cfg.height)];
            let depth = rng.gen_range(cfg.depth[0]..=cfg.depth[1]);
            let q = to.project(from.back_project(p, depth));
            if !clear_of(p, own, sep) {
                continue;
            }
            if q.is_some_and(|q| !clear_of(q, other, clearance)) {
                continue;
            }
            // keep earlier reprojections into this image non-repeatable
            if other_proj
                .iter()
                .flatten()
                .skip(cfg.num_shared_points)
                .any(|&r| distance(r, p) <= clearance)
            {
                continue;
            }
            own.push(p);
            own_proj.push(q);
            placed += 1;
        }
        true
    };
    if !place(&mut kps_a, &kps_b, &mut proj_ab, &proj_ba, &cam_a, &cam_b, rng) {
        return None;
    }
    if !place(&mut kps_b, &kps_a, &mut proj_ba, &proj_ab, &cam_b, &cam_a, rng) {
        return None;
    }
    Some(Geometry {
        kps_a,
        kps_b,
        proj_ab,
        proj_ba,
    })
}

fn shuffle_geometry<R: Rng>(geo: &mut Geometry, rng: &mut R) {
    let mut perm_a: Vec<usize> = (0..geo.kps_a.len()).collect();
    let mut perm_b: Vec<usize> = (0..geo.kps_b.len()).collect();
    perm_a.shuffle(rng);
    perm_b.shuffle(rng);
    geo.kps_a = perm_a.iter().map(|&i| geo.kps_a[i]).collect();
    geo.proj_ab = perm_a.iter().map(|&i| geo.proj_ab[i]).collect();
    geo.kps_b = perm_b.iter().map(|&i| geo.kps_b[i]).collect();
    geo.proj_ba = perm_b.iter().map(|&i| geo.proj_ba[i]).collect();
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy_unit<R: Rng>(latent: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = latent
            .iter()
            .map(|&x| {
                let n: f64 = StandardNormal.sample(rng);
                x + sigma * n
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit-norm descriptors: matched pairs share a random latent direction plus
/// independent Gaussian noise of standard deviation `sigma`; every other
/// keypoint gets its own random direction.
pub fn synthesize_descriptors<T: Scalar, R: Rng>(
    labels: &GroundTruthLabels,
    m: usize,
    n: usize,
    dim: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if dim < 2 {
        return Err(Error::Generation("descriptor dimension must be at least 2".into()));
    }
    let mut rows_a: Vec<Option<Vec<f64>>> = vec![None; m];
    let mut rows_b: Vec<Option<Vec<f64>>> = vec![None; n];
    for &(i, j) in &labels.matches {
        let latent = random_unit(dim, rng);
        rows_a[i] = Some(noisy_unit(&latent, sigma, rng));
        rows_b[j] = Some(noisy_unit(&latent, sigma, rng));
    }
    let mut finish = |rows: Vec<Option<Vec<f64>>>| {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| r.unwrap_or_else(|| random_unit(dim, rng)))
            .collect();
        Tensor::from_f64_rows(&rows)
    };
    let a = finish(rows_a)?;
    let b = finish(rows_b)?;
    Ok((a, b))
}

/// One labelled pair, deterministic in `config.seed`.
pub fn generate_scene<T: Scalar>(config: &SceneConfig) -> Result<PairSample<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut geo = None;
    for _ in 0..POSE_RETRIES {
        geo = try_geometry(config, &mut rng);
        if geo.is_some() {
            break;
        }
    }
    let mut geo = geo.ok_or_else(|| {
        Error::Generation(format!(
            "could not place {} shared and {} unmatched keypoints after {POSE_RETRIES} poses",
            config.num_shared_points, config.num_unmatched_per_image
        ))
    })?;
    shuffle_geometry(&mut geo, &mut rng);
    let labels = make_labels(&geo.proj_ab, &geo.proj_ba, &geo.kps_a, &geo.kps_b);
    let (m, n) = (geo.kps_a.len(), geo.kps_b.len());
    let (da, db) = synthesize_descriptors(&labels, m, n, config.descriptor_dim, config.descriptor_noise, &mut rng)?;
    Ok(PairSample {
        kps_a: KeypointSet::new(geo.kps_a, da, config.width, config.height)?,
        kps_b: KeypointSet::new(geo.kps_b, db, config.width, config.height)?,
        proj_ab: geo.proj_ab,
        proj_ba: geo.proj_ba,
        labels,
    })
}

/// `count` pairs with seeds `config.seed, config.seed + 1, …`.
pub fn generate_dataset<T: Scalar>(config: &SceneConfig, count: usize) -> Result<Vec<PairSample<T>>> {
    (0..count as u64)
        .map(|i| {
            generate_scene(&SceneConfig {
                seed: config.seed.wrapping_add(i),
                ..config.clone()
            })
        })
        .collect()
}
