//! Synthetic desk scenes: analytic sphere/cuboid ray tracing from a ring of
//! cameras, exact ground-truth depth and instance maps, and orthonormal
//! embedding assignment. Every quantity has a closed form, so downstream
//! stages can be checked against oracles instead of real captures.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{default_max_range, CameraView, Intrinsics};
use crate::efd::InstanceMap;
use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::image::Image;
use crate::io::{self, SceneData, SceneManifest, ViewRecord, MANIFEST_SCHEMA};
use crate::math::{Mat3, RigidTransform, Vec3};

/// Names of the canonical-phrase embeddings written to a scene's embedding
/// file (one per instance, in instance order). Relevance scoring
/// soft-compares queries against these.
pub const CANONICAL_NAMES: [&str; 7] =
    ["object", "things", "stuff", "texture", "surface", "pattern", "material"];
/// Spread of the canonical embeddings around their base direction.
const CANONICAL_JITTER: f64 = 1e-3;
/// Rays must travel at least this far before a hit counts, so surfaces
/// never self-intersect at the origin.
const RAY_EPS: f64 = 1e-9;

/// Analytic primitive in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3<f64>, radius: f64 },
    Cuboid { min: Vec3<f64>, max: Vec3<f64> },
}

impl Shape {
    /// Smallest ray parameter `t > RAY_EPS` with `origin + t * dir` on the
    /// surface, or `None`. `dir` need not be unit length; the parameter is
    /// measured in units of `dir`, which makes it the camera-plane depth
    /// when `dir` has camera-frame z = 1.
    pub fn hit(&self, origin: &Vec3<f64>, dir: &Vec3<f64>) -> Option<f64> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t > RAY_EPS).then_some(t)
            }
            Shape::Cuboid { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[k] - origin[k]) / dir[k];
                    let t1 = (max[k] - origin[k]) / dir[k];
                    t_enter = t_enter.max(t0.min(t1));
                    t_exit = t_exit.min(t0.max(t1));
                }
                (t_enter <= t_exit && t_enter > RAY_EPS).then_some(t_enter)
            }
        }
    }
}

/// One scene object: a shape, a flat albedo, and the instance id used in
/// the ground-truth maps and embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub shape: Shape,
    pub color: [f64; 3],
    pub embedding_id: u32,
}

/// Camera ring: `count` poses evenly spaced on a horizontal circle around
/// `target`, all looking at it.
#[derive(Debug, Clone, PartialEq)]
pub struct RingCameras {
    pub count: usize,
    /// Horizontal distance from `target` in meters.
    pub radius: f64,
    /// Height above `target` in meters (must stay off straight-down).
    pub height: f64,
    pub target: Vec3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub objects: Vec<SyntheticObject>,
    pub ring: RingCameras,
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    /// Embedding dimensionality; must be at least the object count so the
    /// assigned vectors can be exactly orthonormal.
    pub d_clip: usize,
    /// Gaussian depth noise, standard deviation in meters (0 = exact).
    pub depth_noise_m: f64,
    /// Gaussian color noise, standard deviation in [0,1] units (0 = exact).
    pub color_noise: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::DegenerateInput("scene needs at least one object".into()));
        }
        if self.ring.count < 2 {
            return Err(Error::DegenerateInput("scene needs at least two cameras".into()));
        }
        if !(self.ring.radius > 0.0) {
            return Err(Error::DegenerateInput("camera ring radius must be positive".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal_px > 0.0) {
            return Err(Error::DegenerateInput("image resolution and focal must be positive".into()));
        }
        if self.d_clip < self.objects.len() {
            return Err(Error::DegenerateInput(format!(
                "embedding width {} cannot hold {} orthonormal vectors",
                self.d_clip,
                self.objects.len()
            )));
        }
        if self.objects.len() > CANONICAL_NAMES.len() {
            return Err(Error::DegenerateInput(format!(
                "at most {} instances have canonical names, got {}",
                CANONICAL_NAMES.len(),
                self.objects.len()
            )));
        }
        if !(self.depth_noise_m >= 0.0 && self.color_noise >= 0.0) {
            return Err(Error::DegenerateInput("noise levels must be non-negative".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for obj in &self.objects {
            if obj.embedding_id == 0 || !seen.insert(obj.embedding_id) {
                return Err(Error::DegenerateInput(format!(
                    "instance ids must be unique and nonzero (id {})",
                    obj.embedding_id
                )));
            }
        }
        Ok(())
    }

    /// Standard test scene: `num_objects` shapes (alternating spheres and
    /// cuboids, ids `1..=num_objects`) hovering 2-5 cm over a large table
    /// (id `num_objects + 1`), viewed from a 16-camera ring. The table is
    /// wide enough that every ray of every view hits annotated geometry.
    pub fn demo(num_objects: usize, seed: u64) -> Self {
        assert!(
            (1..=6).contains(&num_objects),
            "demo scene supports 1..=6 floating objects"
        );
        let palette: [[f64; 3]; 6] = [
            [0.8, 0.2, 0.12],
            [0.16, 0.66, 0.2],
            [0.2, 0.32, 0.84],
            [0.84, 0.7, 0.16],
            [0.7, 0.24, 0.7],
            [0.2, 0.66, 0.66],
        ];
        let mut objects = Vec::new();
        for k in 0..num_objects {
            let angle = TAU * k as f64 / num_objects as f64 + 0.3;
            let (x, y) = (0.12 * angle.cos(), 0.12 * angle.sin());
            let hover = 0.02 + 0.005 * k as f64;
            let shape = if k % 2 == 0 {
                let r = 0.055;
                Shape::Sphere { center: Vec3::new(x, y, hover + r), radius: r }
            } else {
                let h = 0.045;
                Shape::Cuboid {
                    min: Vec3::new(x - h, y - h, hover),
                    max: Vec3::new(x + h, y + h, hover + 2.0 * h),
                }
            };
            objects.push(SyntheticObject {
                shape,
                color: palette[k],
                embedding_id: (k + 1) as u32,
            });
        }
        objects.push(SyntheticObject {
            shape: Shape::Cuboid {
                min: Vec3::new(-2.0, -2.0, -0.05),
                max: Vec3::new(2.0, 2.0, 0.0),
            },
            color: [0.66, 0.66, 0.62],
            embedding_id: (num_objects + 1) as u32,
        });
        Self {
            objects,
            ring: RingCameras {
                count: 16,
                radius: 0.5,
                height: 0.55,
                target: Vec3::new(0.0, 0.0, 0.05),
            },
            width: 128,
            height: 128,
            focal_px: 200.0,
            d_clip: 512,
            depth_noise_m: 0.0,
            color_noise: 0.0,
            seed,
        }
    }
}

/// Camera-to-world pose at `eye` looking toward `target`, camera x right,
/// y down, z forward, with world +z up. Fails when the view axis is within
/// a milliradian of vertical (camera roll would be undefined).
pub fn look_at(eye: &Vec3<f64>, target: &Vec3<f64>) -> Result<RigidTransform<f64>> {
    let axis = target - eye;
    if axis.norm() < 1e-9 {
        return Err(Error::DegenerateInput("camera sits on its target".into()));
    }
    let f = axis.normalize();
    let r = f.cross(&Vec3::new(0.0, 0.0, 1.0));
    if r.norm() < 1e-3 {
        return Err(Error::DegenerateInput(
            "view axis is vertical; camera roll is undefined".into(),
        ));
    }
    let r = r.normalize();
    let d = f.cross(&r);
    Ok(RigidTransform { rotation: Mat3::from_columns(&[r, d, f]), translation: *eye })
}

/// Pose of ring camera `i`.
pub fn ring_pose(ring: &RingCameras, i: usize) -> Result<RigidTransform<f64>> {
    let angle = TAU * i as f64 / ring.count as f64;
    let eye = ring.target
        + Vec3::new(ring.radius * angle.cos(), ring.radius * angle.sin(), ring.height);
    look_at(&eye, &ring.target)
}

/// Standard normal sample via Box-Muller (the scene generator only needs a
/// few noise draws; no distribution crate required).
fn gauss(rng: &mut impl Rng) -> f64 {
    let u: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 1e-300 {
            break u;
        }
    };
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (TAU * v).cos()
}

/// `k` exactly orthonormal vectors in `d` dimensions: Gaussian samples,
/// Gram-Schmidt with one re-orthogonalization pass, unit normalization.
pub fn orthonormal_unit_vectors(k: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(d >= k, "cannot fit {k} orthonormal vectors in {d} dimensions");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        for _ in 0..2 {
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    basis
}

/// `k` unit instance embeddings in `d` dimensions with every pairwise dot
/// product equal to `-1 / max(k - 1, 2)` (a regular simplex for `k >= 3`).
///
/// The negative mutual dot is what gives relevance queries a sharp peak:
/// with canonicals near the negated embeddings, a matched query scores
/// `sigmoid(1 + min_i e.e_i)` on pure pixels of its own instance, and any
/// blend of two instances pays the min-term penalty immediately, so the
/// score drops strictly (first order) when leaving the instance interior.
/// Orthonormal embeddings lack that: their score plateau is flat to second
/// order and sub-pixel silhouette blends can tie with interior pixels.
pub fn instance_embeddings(k: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let basis = orthonormal_unit_vectors(k, d, rng);
    if k < 2 {
        return basis;
    }
    let target = -1.0 / (k - 1).max(2) as f64;
    // e_i = a (v_i - mean v) + b (mean v) has unit norm and pairwise dot
    // `target` when a^2 = 1 - target and b^2 = 1 + (k - 1) target.
    let a = (1.0 - target).sqrt();
    let b = (1.0 + (k - 1) as f64 * target).sqrt();
    let kf = k as f64;
    let mut mean = vec![0.0; d];
    for v in &basis {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / kf;
        }
    }
    basis
        .into_iter()
        .map(|v| {
            let mut e: Vec<f64> = v
                .iter()
                .zip(&mean)
                .map(|(x, m)| a * (x - m) + b * m)
                .collect();
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut e {
                *x /= n;
            }
            e
        })
        .collect()
}

/// One unit canonical embedding per instance: a small jitter around the
/// negated instance embedding. Together with the simplex geometry of
/// [`instance_embeddings`] a matched query scores `sigmoid(1 - 1/(k-1))`
/// on its own instance, `sigmoid(-1 - 1/(k-1))` on other instances, and the
/// `relevance = 0.5` level set falls exactly on the 50/50 blend between two
/// instances — so thresholded masks track the true silhouette and soft
/// boundary blends can never out-score the object interior and steal the
/// argmax.
pub fn canonical_embeddings(objects: &[Vec<f64>], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    objects
        .iter()
        .map(|e| {
            let mut c: Vec<f64> =
                e.iter().map(|x| -x + CANONICAL_JITTER * gauss(rng)).collect();
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut c {
                *x /= n;
            }
            c
        })
        .collect()
}

/// Ray-traces one view in double precision: flat albedo color, camera-plane
/// depth (the ray parameter with forward component 1), ground-truth ids.
/// Missed rays are black with depth 0 (invalid) and id 0.
fn trace_view(
    spec: &SyntheticSceneSpec,
    intr: &Intrinsics<f64>,
    pose: &RigidTransform<f64>,
    rng: &mut impl Rng,
) -> (Image<f64>, Image<f64>, InstanceMap) {
    let (h, w) = (spec.height, spec.width);
    let mut rgb = Image::zeros(h, w, 3);
    let mut depth = Image::zeros(h, w, 1);
    let mut ids = vec![0u32; h * w];
    for row in 0..h {
        for col in 0..w {
            let dir_cam = Vec3::new(
                (col as f64 + 0.5 - intr.cx) / intr.fx,
                (row as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            );
            let dir_world = pose.rotation * dir_cam;
            let mut best: Option<(f64, usize)> = None;
            for (idx, obj) in spec.objects.iter().enumerate() {
                if let Some(t) = obj.shape.hit(&pose.translation, &dir_world) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, idx));
                    }
                }
            }
            if let Some((t, idx)) = best {
                let obj = &spec.objects[idx];
                let px = rgb.px_mut(row, col);
                for ch in 0..3 {
                    let noise =
                        if spec.color_noise > 0.0 { spec.color_noise * gauss(rng) } else { 0.0 };
                    px[ch] = (obj.color[ch] + noise).clamp(0.0, 1.0);
                }
                let dn =
                    if spec.depth_noise_m > 0.0 { spec.depth_noise_m * gauss(rng) } else { 0.0 };
                depth.set(row, col, (t + dn).max(1e-4));
                ids[row * w + col] = obj.embedding_id;
            }
        }
    }
    (rgb, depth, InstanceMap::new(h, w, ids))
}

fn cast_image<T: Float>(img: &Image<f64>) -> Image<T> {
    Image::from_vec(
        img.height(),
        img.width(),
        img.channels(),
        img.data().iter().map(|v| cast(*v)).collect(),
    )
}

fn cast_pose<T: Float>(p: &RigidTransform<f64>) -> RigidTransform<T> {
    let mut rotation = crate::math::Mat3::<T>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rotation[(i, j)] = cast(p.rotation[(i, j)]);
        }
    }
    RigidTransform {
        rotation,
        translation: Vec3::new(
            cast(p.translation[0]),
            cast(p.translation[1]),
            cast(p.translation[2]),
        ),
    }
}

/// Generates the full scene in memory: ray-traced views, ground-truth
/// instance maps, orthonormal per-instance embeddings (file entries: one
/// canonical per instance, then one `obj<id>` query per instance), and a
/// manifest whose relative paths follow `v<NN>_*` naming. The seed fixes
/// everything.
pub fn generate_scene<T: Float>(spec: &SyntheticSceneSpec) -> Result<SceneData<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let object_embeddings = instance_embeddings(spec.objects.len(), spec.d_clip, &mut rng);
    let canonicals = canonical_embeddings(&object_embeddings, &mut rng);

    let intr64 = Intrinsics {
        fx: spec.focal_px,
        fy: spec.focal_px,
        cx: spec.width as f64 / 2.0,
        cy: spec.height as f64 / 2.0,
    };
    let mut views = Vec::with_capacity(spec.ring.count);
    let mut instances = Vec::with_capacity(spec.ring.count);
    let mut records = Vec::with_capacity(spec.ring.count);
    for i in 0..spec.ring.count {
        let pose = ring_pose(&spec.ring, i)?;
        let (rgb, depth, inst) = trace_view(spec, &intr64, &pose, &mut rng);
        records.push(ViewRecord {
            rgb: format!("v{i:02}_rgb.png"),
            depth: format!("v{i:02}_depth.png"),
            instance_map: format!("v{i:02}_instances.png"),
            instance_features: format!("v{i:02}_features.ggif"),
            intrinsics: [intr64.fx, intr64.fy, intr64.cx, intr64.cy],
            pose: pose.to_matrix4_rows(),
            max_range: default_max_range::<f64>(),
        });
        views.push(CameraView {
            intrinsics: Intrinsics {
                fx: cast::<T>(intr64.fx),
                fy: cast(intr64.fy),
                cx: cast(intr64.cx),
                cy: cast(intr64.cy),
            },
            pose: cast_pose(&pose),
            rgb: cast_image(&rgb),
            depth: cast_image(&depth),
            max_range: default_max_range(),
        });
        instances.push(inst);
    }

    let cast_vec = |v: &Vec<f64>| -> Vec<T> { v.iter().map(|x| cast(*x)).collect() };
    let mut instance_embeddings = BTreeMap::new();
    let mut embedding_entries: Vec<(String, Vec<T>)> = CANONICAL_NAMES
        .iter()
        .zip(&canonicals)
        .map(|(name, c)| (name.to_string(), cast_vec(c)))
        .collect();
    for (obj, emb) in spec.objects.iter().zip(&object_embeddings) {
        instance_embeddings.insert(obj.embedding_id, cast_vec(emb));
        embedding_entries.push((format!("obj{}", obj.embedding_id), cast_vec(emb)));
    }

    let manifest = SceneManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        frame: "world".to_string(),
        depth_scale_mm: 1.0,
        embeddings: "embeddings.ggqe".to_string(),
        views: records,
    };
    Ok(SceneData { manifest, views, instances, instance_embeddings, embedding_entries })
}

/// Generates and writes a scene directory (always `f32` on disk); returns
/// the manifest path.
pub fn write_synthetic_scene(dir: &Path, spec: &SyntheticSceneSpec) -> Result<PathBuf> {
    let data = generate_scene::<f32>(spec)?;
    io::write_scene(dir, "scene.json", &data)?;
    Ok(dir.join("scene.json"))
}
