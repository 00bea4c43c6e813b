//! Procedural ground-truth scenes, surround camera rigs, and deterministic
//! feature rendering: the stand-in for a frozen multi-view encoder.
//!
//! Rendered features are a fixed seeded linear embedding of (class one-hot,
//! inverse depth, ray direction) at the first occupied voxel along each
//! pixel ray, so the 2D-to-3D lifting task is geometrically solvable by
//! construction; free rays map to a constant background token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::DenseGrid;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraModel, Mat3, Vec3};
use crate::objective::{LabelGrid, FREE_CLASS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { center: [f64; 3], half_extents: [f64; 3], class_id: u8 },
    Sphere { center: [f64; 3], radius: f64, class_id: u8 },
}

impl Primitive {
    pub fn class_id(&self) -> u8 {
        match self {
            Primitive::Box { class_id, .. } | Primitive::Sphere { class_id, .. } => *class_id,
        }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        match self {
            Primitive::Box { center, half_extents, .. } => (0..3)
                .all(|a| (p[a] - center[a]).abs() <= half_extents[a]),
            Primitive::Sphere { center, radius, .. } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                d2 <= radius * radius
            }
        }
    }

    fn within(&self, world_min: &[f64; 3], world_max: &[f64; 3]) -> bool {
        match self {
            Primitive::Box { center, half_extents, .. } => (0..3).all(|a| {
                center[a] - half_extents[a] >= world_min[a] - 1e-9
                    && center[a] + half_extents[a] <= world_max[a] + 1e-9
            }),
            Primitive::Sphere { center, radius, .. } => (0..3).all(|a| {
                center[a] - radius >= world_min[a] - 1e-9 && center[a] + radius <= world_max[a] + 1e-9
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
    pub primitives: Vec<Primitive>,
    /// Class of the z=0 voxel layer; FREE_CLASS disables the ground plane.
    pub ground_class: u8,
}

impl SceneSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        for p in &self.primitives {
            let c = p.class_id() as usize;
            if c == FREE_CLASS as usize || c >= n_classes {
                return Err(Error::Config(format!("primitive class {c} out of range 1..{n_classes}")));
            }
            if !p.within(&self.world_min, &self.world_max) {
                return Err(Error::Config("primitive outside world bounds".into()));
            }
        }
        if self.ground_class as usize >= n_classes {
            return Err(Error::Config("ground class out of range".into()));
        }
        Ok(())
    }
}

/// Deterministic voxelization: a voxel whose center lies inside a primitive
/// takes that primitive's class (later primitives win overlaps); otherwise
/// the z=0 layer takes the ground class; otherwise free.
pub fn voxelize(spec: &SceneSpec, dims: [usize; 3]) -> LabelGrid {
    let pitch = [
        (spec.world_max[0] - spec.world_min[0]) / dims[0] as f64,
        (spec.world_max[1] - spec.world_min[1]) / dims[1] as f64,
        (spec.world_max[2] - spec.world_min[2]) / dims[2] as f64,
    ];
    let mut grid = LabelGrid::free(dims);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let center = [
                    spec.world_min[0] + (x as f64 + 0.5) * pitch[0],
                    spec.world_min[1] + (y as f64 + 0.5) * pitch[1],
                    spec.world_min[2] + (z as f64 + 0.5) * pitch[2],
                ];
                let mut label = if z == 0 { spec.ground_class } else { FREE_CLASS };
                for p in &spec.primitives {
                    if p.contains(&center) {
                        label = p.class_id();
                    }
                }
                grid.set(x, y, z, label);
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_cameras: usize,
    pub ring_radius: f64,
    pub height: f64,
    pub yaw_offset_deg: f64,
    pub pitch_down_deg: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Feature-map resolutions (H, W) per pyramid level, finest first.
    pub level_dims: Vec<(usize, usize)>,
    pub feature_dim: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            n_cameras: 6,
            ring_radius: 0.6,
            height: 1.2,
            yaw_offset_deg: 0.0,
            pitch_down_deg: 18.0,
            fx: 342.7,
            fy: 342.7,
            cx: 240.0,
            cy: 160.0,
            image_width: 480,
            image_height: 320,
            level_dims: vec![(32, 48), (16, 24)],
            feature_dim: 32,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 {
            return Err(Error::Config("rig needs at least one camera".into()));
        }
        if self.level_dims.is_empty() {
            return Err(Error::Config("rig needs at least one feature level".into()));
        }
        let hfov = 2.0 * ((self.image_width as f64 / 2.0) / self.fx).atan().to_degrees();
        if hfov * (self.n_cameras as f64) < 360.0 {
            return Err(Error::Config(format!(
                "{} cameras with {hfov:.1} deg hfov do not cover 360 deg",
                self.n_cameras
            )));
        }
        Ok(())
    }

    /// Outward-facing ring of cameras, pitched down toward the ground plane.
    pub fn cameras<S: Scalar>(&self) -> Result<Vec<CameraModel<S>>> {
        self.validate()?;
        let mut cams = Vec::with_capacity(self.n_cameras);
        for i in 0..self.n_cameras {
            let yaw = (self.yaw_offset_deg + 360.0 * i as f64 / self.n_cameras as f64).to_radians();
            let pitch = self.pitch_down_deg.to_radians();
            let (sy, cy_) = (yaw.sin(), yaw.cos());
            let (sp, cp) = (pitch.sin(), pitch.cos());
            // rows: camera x (right), y (down), z (forward) in world coords
            let rot: Mat3<f64> = [
                [sy, -cy_, 0.0],
                [-sp * cy_, -sp * sy, -cp],
                [cp * cy_, cp * sy, -sp],
            ];
            let center = [self.ring_radius * cy_, self.ring_radius * sy, self.height];
            let t = geometry::mat3_mul_vec(&rot, &center);
            let t = [-t[0], -t[1], -t[2]];
            let cast_m: Mat3<S> = rot.map(|row| row.map(|v| S::c(v)));
            cams.push(CameraModel::new(
                S::c(self.fx),
                S::c(self.fy),
                S::c(self.cx),
                S::c(self.cy),
                self.image_width,
                self.image_height,
                cast_m,
                [S::c(t[0]), S::c(t[1]), S::c(t[2])],
            )?);
        }
        Ok(cams)
    }
}

/// Fixed seeded linear map from (class one-hot, inverse depth, ray direction)
/// to feature channels, plus a constant background token for free rays.
#[derive(Debug, Clone)]
pub struct FeatureEmbed {
    matrix: Vec<f64>,
    background: Vec<f64>,
    n_classes: usize,
    feature_dim: usize,
}

impl FeatureEmbed {
    pub fn new(embed_seed: u64, n_classes: usize, feature_dim: usize) -> Self {
        let in_dim = n_classes + 4;
        let mut rng = ChaCha8Rng::seed_from_u64(embed_seed);
        let bound = (3.0 / in_dim as f64).sqrt() * 2.0;
        let matrix: Vec<f64> =
            (0..feature_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let background: Vec<f64> = (0..feature_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self { matrix, background, n_classes, feature_dim }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn embed_hit(&self, class: u8, inv_depth: f64, dir: &[f64; 3]) -> Vec<f64> {
        let in_dim = self.n_classes + 4;
        let mut input = vec![0.0; in_dim];
        input[class as usize] = 1.0;
        input[self.n_classes] = inv_depth;
        input[self.n_classes + 1] = dir[0];
        input[self.n_classes + 2] = dir[1];
        input[self.n_classes + 3] = dir[2];
        (0..self.feature_dim)
            .map(|o| {
                let row = &self.matrix[o * in_dim..(o + 1) * in_dim];
                row.iter().zip(&input).map(|(w, x)| w * x).sum()
            })
            .collect()
    }
}

/// First occupied voxel along a ray (Amanatides-Woo traversal).
/// Returns (class, t at voxel entry, voxel index).
pub fn raycast(
    labels: &LabelGrid,
    world_min: &[f64; 3],
    world_max: &[f64; 3],
    origin: &[f64; 3],
    dir: &[f64; 3],
) -> Option<(u8, f64, [usize; 3])> {
    let dims = labels.dims;
    let pitch: Vec<f64> = (0..3).map(|a| (world_max[a] - world_min[a]) / dims[a] as f64).collect();
    // slab intersection with the world AABB
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < world_min[a] || origin[a] > world_max[a] {
                return None;
            }
        } else {
            let t1 = (world_min[a] - origin[a]) / dir[a];
            let t2 = (world_max[a] - origin[a]) / dir[a];
            t_enter = t_enter.max(t1.min(t2));
            t_exit = t_exit.min(t1.max(t2));
        }
    }
    if t_enter > t_exit {
        return None;
    }
    let t0 = t_enter + 1e-9;
    let entry = [origin[0] + t0 * dir[0], origin[1] + t0 * dir[1], origin[2] + t0 * dir[2]];
    let mut voxel = [0isize; 3];
    for a in 0..3 {
        let v = ((entry[a] - world_min[a]) / pitch[a]).floor() as isize;
        voxel[a] = v.clamp(0, dims[a] as isize - 1);
    }
    let mut t_max = [0.0f64; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0isize; 3];
    for a in 0..3 {
        if dir[a] > 1e-12 {
            step[a] = 1;
            let boundary = world_min[a] + (voxel[a] + 1) as f64 * pitch[a];
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = pitch[a] / dir[a];
        } else if dir[a] < -1e-12 {
            step[a] = -1;
            let boundary = world_min[a] + voxel[a] as f64 * pitch[a];
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = -pitch[a] / dir[a];
        } else {
            t_max[a] = f64::INFINITY;
        }
    }
    let mut t_entry = t0;
    loop {
        let idx = [voxel[0] as usize, voxel[1] as usize, voxel[2] as usize];
        let label = labels.at(idx[0], idx[1], idx[2]);
        if label != FREE_CLASS {
            return Some((label, t_entry, idx));
        }
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t_entry = t_max[axis];
        voxel[axis] += step[axis];
        if voxel[axis] < 0 || voxel[axis] >= dims[axis] as isize || t_entry > t_exit + 1e-9 {
            return None;
        }
        t_max[axis] += t_delta[axis];
    }
}

/// Render one feature map: per pixel, cast a ray through the pixel center,
/// embed the first hit (or the background token).
pub fn render_features<S: Scalar>(
    labels: &LabelGrid,
    world_min: &[f64; 3],
    world_max: &[f64; 3],
    cam: &CameraModel<f64>,
    level: (usize, usize),
    embed: &FeatureEmbed,
) -> DenseGrid<S> {
    let (h_l, w_l) = level;
    let c_feat = embed.feature_dim();
    let origin = cam.center_world();
    let mut data = vec![S::zero(); h_l * w_l * c_feat];
    for r in 0..h_l {
        for col in 0..w_l {
            let u = (col as f64 + 0.5) / w_l as f64;
            let v = (r as f64 + 0.5) / h_l as f64;
            let d_cam = geometry::unproject(u, v, 1.0, cam);
            // world direction: R^T d (rows of R are camera axes)
            let rot = &cam.rotation;
            let mut d_world = [0.0f64; 3];
            for a in 0..3 {
                d_world[a] = rot[0][a] * d_cam[0] + rot[1][a] * d_cam[1] + rot[2][a] * d_cam[2];
            }
            let n = (d_world[0] * d_world[0] + d_world[1] * d_world[1] + d_world[2] * d_world[2]).sqrt();
            for a in 0..3 {
                d_world[a] /= n;
            }
            let feats = match raycast(labels, world_min, world_max, &origin, &d_world) {
                Some((class, t, _)) => {
                    let p = [origin[0] + t * d_world[0], origin[1] + t * d_world[1], origin[2] + t * d_world[2]];
                    let z = geometry::world_to_camera(&p, cam)[2].max(geometry::Z_NEAR);
                    embed.embed_hit(class, 1.0 / z, &d_world)
                }
                None => embed.background().to_vec(),
            };
            let base = (r * w_l + col) * c_feat;
            for (i, f) in feats.iter().enumerate() {
                data[base + i] = S::c(*f);
            }
        }
    }
    DenseGrid::new(vec![h_l, w_l, c_feat], data).expect("shape consistent by construction")
}

/// Scene-sampling knobs for the random dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub n_classes: usize,
    pub ground_class: u8,
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Primitives keep their xy-center at least this far from the origin so
    /// the rig never sits inside an object.
    pub rig_clearance: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { n_classes: 6, ground_class: 1, min_primitives: 2, max_primitives: 4, rig_clearance: 1.6 }
    }
}

/// Deterministic scene sampling from a scene seed.
pub fn random_scene_spec(
    scene_seed: u64,
    world_min: [f64; 3],
    world_max: [f64; 3],
    gen: &GenParams,
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let n_prim = rng.gen_range(gen.min_primitives..=gen.max_primitives);
    let mut primitives = Vec::with_capacity(n_prim);
    let n_obj_classes = (gen.n_classes as u8).saturating_sub(2); // classes 2..n
    for _ in 0..n_prim {
        let class_id = if n_obj_classes == 0 { 1 } else { 2 + rng.gen_range(0..n_obj_classes) };
        let is_box = rng.gen_bool(0.5);
        // rejection-sample a center clear of the rig
        for _try in 0..64 {
            if is_box {
                let he = [rng.gen_range(0.4..1.1), rng.gen_range(0.4..1.1), rng.gen_range(0.4..0.9)];
                let cx = rng.gen_range(world_min[0] + he[0]..world_max[0] - he[0]);
                let cy = rng.gen_range(world_min[1] + he[1]..world_max[1] - he[1]);
                if cx.hypot(cy) < gen.rig_clearance + he[0].max(he[1]) {
                    continue;
                }
                let cz = world_min[2] + he[2];
                primitives.push(Primitive::Box { center: [cx, cy, cz], half_extents: he, class_id });
                break;
            } else {
                let radius = rng.gen_range(0.4..0.9);
                let cx = rng.gen_range(world_min[0] + radius..world_max[0] - radius);
                let cy = rng.gen_range(world_min[1] + radius..world_max[1] - radius);
                if cx.hypot(cy) < gen.rig_clearance + radius {
                    continue;
                }
                let cz = rng.gen_range(world_min[2] + radius..world_max[2] - radius);
                primitives.push(Primitive::Sphere { center: [cx, cy, cz], radius, class_id });
                break;
            }
        }
    }
    SceneSpec { seed: scene_seed, world_min, world_max, primitives, ground_class: gen.ground_class }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Scene seeds of the two splits are disjoint by a fixed large offset.
pub fn scene_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0u64,
        Split::Val => 1_000_000,
    };
    base_seed.wrapping_add(offset).wrapping_add(index as u64)
}

#[derive(Debug, Clone)]
pub struct SceneSample<S> {
    pub spec: SceneSpec,
    pub labels: LabelGrid,
    pub features: Vec<Vec<DenseGrid<S>>>,
    pub cameras: Vec<CameraModel<S>>,
}

/// Deterministic in-memory dataset: one voxelized scene plus rendered
/// feature pyramids per camera.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset<S: Scalar>(
    base_seed: u64,
    split: Split,
    n_scenes: usize,
    rig: &RigSpec,
    gen: &GenParams,
    fine_dims: [usize; 3],
    world_min: [f64; 3],
    world_max: [f64; 3],
    embed_seed: u64,
) -> Result<Vec<SceneSample<S>>> {
    let cams_f64: Vec<CameraModel<f64>> = rig.cameras()?;
    let cams_s: Vec<CameraModel<S>> = rig.cameras()?;
    let embed = FeatureEmbed::new(embed_seed, gen.n_classes, rig.feature_dim);
    let mut out = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let spec = random_scene_spec(scene_seed(base_seed, split, i), world_min, world_max, gen);
        spec.validate(gen.n_classes)?;
        let labels = voxelize(&spec, fine_dims);
        let features = cams_f64
            .iter()
            .map(|cam| {
                rig.level_dims
                    .iter()
                    .map(|&lvl| render_features::<S>(&labels, &world_min, &world_max, cam, lvl, &embed))
                    .collect()
            })
            .collect();
        out.push(SceneSample { spec, labels, features, cameras: cams_s.clone() });
    }
    Ok(out)
}

/// Eval-time extrinsic corruption: left-multiply each rotation by a rotation
/// of `angle_deg` about a per-camera random axis.
pub fn corrupt_extrinsics<S: Scalar>(
    cams: &[CameraModel<S>],
    angle_deg: f64,
    seed: u64,
) -> Vec<CameraModel<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cams.iter()
        .map(|cam| {
            let axis: Vec3<S> = [
                S::c(rng.gen_range(-1.0..1.0f64)),
                S::c(rng.gen_range(-1.0..1.0f64)),
                S::c(rng.gen_range(-1.0..1.0f64)),
            ];
            let delta = geometry::rotation_axis_angle(&axis, S::c(angle_deg.to_radians()));
            let rot = geometry::mat3_mul(&delta, &cam.rotation);
            CameraModel::new(
                cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, rot, cam.translation,
            )
            .expect("rotation product stays orthonormal")
        })
        .collect()
}

#[cfg(test)]
mod tests;
