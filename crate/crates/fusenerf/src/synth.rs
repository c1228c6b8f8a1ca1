//! Synthetic multi-modal scenes with a closed-form reference renderer.
//!
//! Scenes are unions of constant-density primitives (axis-aligned boxes and
//! spheres) carrying an RGB albedo and a thermal emission level.
//! [`oracle_render`] integrates the emission-absorption transport equation
//! exactly through the sorted ray-primitive interval decomposition, with no
//! sampling error, which makes it the ground-truth factory for every
//! training and acceptance experiment.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::img::FloatImage;
use crate::render::{generate_rays, CameraModel, Intrinsics, Pose};

/// A constant-density emissive primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        center: [f64; 3],
        /// Full extents per axis.
        size: [f64; 3],
        density: f64,
        rgb: [f64; 3],
        thermal: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        rgb: [f64; 3],
        thermal: f64,
    },
}

impl Primitive {
    pub fn density(&self) -> f64 {
        match self {
            Primitive::Box { density, .. } | Primitive::Sphere { density, .. } => *density,
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Primitive::Box { rgb, .. } | Primitive::Sphere { rgb, .. } => *rgb,
        }
    }

    pub fn thermal(&self) -> f64 {
        match self {
            Primitive::Box { thermal, .. } | Primitive::Sphere { thermal, .. } => *thermal,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Box { center, size, .. } => (0..3).all(|a| {
                (p[a] - center[a]).abs() <= size[a] / 2.0
            }),
            Primitive::Sphere { center, radius, .. } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                d2 <= radius * radius
            }
        }
    }

    fn bounds(&self) -> Aabb {
        match self {
            Primitive::Box { center, size, .. } => Aabb {
                min: [center[0] - size[0] / 2.0, center[1] - size[1] / 2.0, center[2] - size[2] / 2.0],
                max: [center[0] + size[0] / 2.0, center[1] + size[1] / 2.0, center[2] + size[2] / 2.0],
            },
            Primitive::Sphere { center, radius, .. } => Aabb {
                min: [center[0] - radius, center[1] - radius, center[2] - radius],
                max: [center[0] + radius, center[1] + radius, center[2] + radius],
            },
        }
    }

    /// Entry/exit distances of a ray, clipped to `t >= 0`.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        match self {
            Primitive::Box { .. } => self.bounds().intersect_ray(origin, dir),
            Primitive::Sphere { center, radius, .. } => {
                let oc = [origin[0] - center[0], origin[1] - center[1], origin[2] - center[2]];
                let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let (t0, t1) = ((-b - sq).max(0.0), -b + sq);
                if t1 <= t0 {
                    None
                } else {
                    Some((t0, t1))
                }
            }
        }
    }
}

/// Modality selector for the oracle renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Thermal,
}

/// A synthetic scene: primitives inside a bounding box plus per-modality
/// backgrounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
    pub background_rgb: [f64; 3],
    pub background_thermal: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if p.density() < 0.0 {
                return Err(Error::Contract(format!("primitive {i}: negative density")));
            }
            let b = p.bounds();
            if !self.bounds.contains(b.min) || !self.bounds.contains(b.max) {
                return Err(Error::Contract(format!(
                    "primitive {i} extends outside the scene bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SyntheticScene> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let scene: SyntheticScene =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    /// Total extinction at a point: densities of overlapping media add.
    pub fn density_at(&self, p: [f64; 3]) -> f64 {
        self.primitives.iter().filter(|pr| pr.contains(p)).map(Primitive::density).sum()
    }

    /// Density-weighted emission at a point (the local source color).
    pub fn emission_at(&self, p: [f64; 3], modality: Modality) -> [f64; 3] {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for pr in &self.primitives {
            if pr.contains(p) && pr.density() > 0.0 {
                let d = pr.density();
                sigma += d;
                let e = match modality {
                    Modality::Rgb => pr.rgb(),
                    Modality::Thermal => [pr.thermal(); 3],
                };
                for c in 0..3 {
                    acc[c] += d * e[c];
                }
            }
        }
        if sigma > 0.0 {
            [acc[0] / sigma, acc[1] / sigma, acc[2] / sigma]
        } else {
            [0.0; 3]
        }
    }

    pub fn background(&self, modality: Modality) -> [f64; 3] {
        match modality {
            Modality::Rgb => self.background_rgb,
            Modality::Thermal => [self.background_thermal; 3],
        }
    }

    /// Exact radiance along one ray: Beer-Lambert transmittance through the
    /// piecewise-constant interval decomposition plus the residual-weighted
    /// background.
    pub fn trace_ray(&self, origin: [f64; 3], dir: [f64; 3], modality: Modality) -> [f64; 3] {
        let mut cuts = vec![];
        let mut spans = Vec::new();
        for pr in &self.primitives {
            if let Some((t0, t1)) = pr.intersect(origin, dir) {
                cuts.push(t0);
                cuts.push(t1);
                spans.push((t0, t1, pr));
            }
        }
        let bg = self.background(modality);
        if spans.is_empty() {
            return bg;
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();

        let mut color = [0.0; 3];
        let mut transmittance = 1.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            let mut sigma = 0.0;
            let mut emit = [0.0; 3];
            for (t0, t1, pr) in &spans {
                if mid >= *t0 && mid <= *t1 && pr.density() > 0.0 {
                    let d = pr.density();
                    sigma += d;
                    let e = match modality {
                        Modality::Rgb => pr.rgb(),
                        Modality::Thermal => [pr.thermal(); 3],
                    };
                    for c in 0..3 {
                        emit[c] += d * e[c];
                    }
                }
            }
            if sigma <= 0.0 {
                continue;
            }
            let seg_alpha = 1.0 - (-sigma * (b - a)).exp();
            for c in 0..3 {
                color[c] += transmittance * seg_alpha * emit[c] / sigma;
            }
            transmittance *= 1.0 - seg_alpha;
        }
        for c in 0..3 {
            color[c] += transmittance * bg[c];
        }
        color
    }
}

/// Render a full view analytically. RGB renders three channels; thermal
/// renders a single channel.
pub fn oracle_render(
    scene: &SyntheticScene,
    camera: &CameraModel,
    modality: Modality,
) -> Result<FloatImage> {
    scene.validate()?;
    let bundle = generate_rays(camera, &camera.all_pixels(), 0)?;
    let channels = match modality {
        Modality::Rgb => 3,
        Modality::Thermal => 1,
    };
    let mut img = FloatImage::new(camera.width as usize, camera.height as usize, channels);
    for (i, (&o, &d)) in bundle.origins.iter().zip(&bundle.dirs).enumerate() {
        let c = scene.trace_ray(o, d, modality);
        match modality {
            Modality::Rgb => img.data[i * 3..i * 3 + 3].copy_from_slice(&c),
            Modality::Thermal => img.data[i] = c[0],
        }
    }
    Ok(img)
}

/// Orbit trajectory: cameras on a circle of `radius` at `height` above the
/// orbit center, all looking at the center, spanning `orbit_degrees`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub views: usize,
    pub spacing_s: f64,
    pub orbit_degrees: f64,
}

impl TrajectorySpec {
    /// Pose at a continuous position `s` (view index scale: pose of view `k`
    /// is `pose_at(k as f64)`).
    pub fn pose_at(&self, s: f64) -> Result<Pose> {
        let theta = s / self.views as f64 * self.orbit_degrees.to_radians();
        let eye = [
            self.center[0] + self.radius * theta.cos(),
            self.center[1] + self.height,
            self.center[2] + self.radius * theta.sin(),
        ];
        Pose::look_at(eye, self.center, [0.0, 1.0, 0.0])
    }

    pub fn time_of_view(&self, k: usize) -> f64 {
        k as f64 * self.spacing_s
    }
}

/// Knobs for synthetic dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Contrast threshold (log-intensity units) of the event synthesizer.
    pub event_threshold: f64,
    /// Pose-path supersampling factor between keyframes for event synthesis.
    pub supersample: usize,
    /// Raw thermal counts span this sub-range of the 16-bit scale, leaving
    /// the enhancement stage real work.
    pub thermal_count_range: (u16, u16),
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            event_threshold: 0.2,
            supersample: 10,
            thermal_count_range: (2000, 3000),
            seed: 0,
        }
    }
}

/// File names used inside a dataset directory.
pub mod layout {
    pub const MANIFEST: &str = "manifest.json";
    pub const EVENTS: &str = "events.bin";
    pub const SCENE: &str = "scene.json";

    pub fn rgb(index: usize) -> String {
        format!("rgb/{index:03}.png")
    }

    pub fn thermal(index: usize) -> String {
        format!("thermal/{index:03}.png")
    }
}

/// Generate a full multi-modal dataset on disk: RGB PNGs from the oracle,
/// raw 16-bit thermal PNGs, an event stream synthesized over a supersampled
/// pose path, the scene description, and the manifest. Deterministic for a
/// fixed seed.
pub fn generate_dataset(
    scene: &SyntheticScene,
    trajectory: &TrajectorySpec,
    intrinsics: Intrinsics,
    options: &SynthOptions,
    out_dir: &Path,
) -> Result<crate::dataset::Manifest> {
    use crate::dataset::{FrameRecord, Manifest, CONVENTION_NATIVE, MANIFEST_VERSION};

    scene.validate()?;
    if trajectory.views < 2 {
        return Err(Error::Contract("need at least two views".into()));
    }
    if trajectory.spacing_s <= 0.0 {
        return Err(Error::Contract("view spacing must be positive".into()));
    }
    std::fs::create_dir_all(out_dir.join("rgb")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("thermal")).map_err(|e| Error::io(out_dir, e))?;

    let (lo, hi) = options.thermal_count_range;
    if hi <= lo {
        return Err(Error::Contract("thermal count range must be increasing".into()));
    }

    let mut frames = Vec::with_capacity(trajectory.views);
    for k in 0..trajectory.views {
        let pose = trajectory.pose_at(k as f64)?;
        let camera = intrinsics.camera(pose)?;

        let rgb = oracle_render(scene, &camera, Modality::Rgb)?;
        let rgb_rel = layout::rgb(k);
        rgb.save_png8(&out_dir.join(&rgb_rel))?;

        let thermal = oracle_render(scene, &camera, Modality::Thermal)?;
        let counts: Vec<u16> = thermal
            .data
            .iter()
            .map(|&v| {
                (lo as f64 + v.clamp(0.0, 1.0) * (hi - lo) as f64).round() as u16
            })
            .collect();
        let thermal_rel = layout::thermal(k);
        crate::img::save_gray16(
            &out_dir.join(&thermal_rel),
            camera.width as usize,
            camera.height as usize,
            &counts,
        )?;

        frames.push(FrameRecord {
            index: k,
            time_s: trajectory.time_of_view(k),
            rgb: rgb_rel,
            thermal_raw: Some(thermal_rel),
            pose: pose.flat_row_major().to_vec(),
        });
    }

    // luminance video along the supersampled orbit path
    let steps = options.supersample.max(1);
    let mut lum_frames = Vec::new();
    let mut lum_times = Vec::new();
    for k in 0..trajectory.views {
        let substeps = if k + 1 < trajectory.views { steps } else { 1 };
        for j in 0..substeps {
            let s = k as f64 + j as f64 / steps as f64;
            let pose = trajectory.pose_at(s)?;
            let camera = intrinsics.camera(pose)?;
            let rgb = oracle_render(scene, &camera, Modality::Rgb)?;
            lum_frames.push(rgb.luminance());
            lum_times.push(s * trajectory.spacing_s);
        }
    }
    let events =
        crate::sensors::synthesize_events(&lum_frames, &lum_times, options.event_threshold)?;
    events.save(&out_dir.join(layout::EVENTS))?;

    scene.save(&out_dir.join(layout::SCENE))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        convention: CONVENTION_NATIVE.to_string(),
        intrinsics,
        frames,
        events: Some(layout::EVENTS.to_string()),
        event_window_s: trajectory.spacing_s,
        scene: Some(layout::SCENE.to_string()),
        note: None,
    };
    manifest.save(&out_dir.join(layout::MANIFEST))?;
    Ok(manifest)
}

/// Darkened copy of a dataset: RGB frames scaled by `gain` with seeded
/// Gaussian noise, thermal and event data untouched.
pub fn lowlight_variant(
    src_dir: &Path,
    gain: f64,
    noise_sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    use crate::dataset::Manifest;

    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::Contract(format!("gain must be in (0, 1], got {gain}")));
    }
    let mut manifest = Manifest::load(&src_dir.join(layout::MANIFEST))?;
    std::fs::create_dir_all(out_dir.join("rgb")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("thermal")).map_err(|e| Error::io(out_dir, e))?;

    let normal = rand_distr::Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Contract(e.to_string()))?;
    for frame in &manifest.frames {
        let mut rgb = FloatImage::load_png8(&src_dir.join(&frame.rgb))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(frame.index as u64));
        for v in &mut rgb.data {
            let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            *v = (*v * gain + noise).clamp(0.0, 1.0);
        }
        rgb.save_png8(&out_dir.join(&frame.rgb))?;
        if let Some(thermal) = &frame.thermal_raw {
            std::fs::copy(src_dir.join(thermal), out_dir.join(thermal))
                .map_err(|e| Error::io(src_dir.join(thermal), e))?;
        }
    }
    for extra in [&manifest.events, &manifest.scene] {
        if let Some(rel) = extra {
            std::fs::copy(src_dir.join(rel), out_dir.join(rel))
                .map_err(|e| Error::io(src_dir.join(rel), e))?;
        }
    }
    manifest.note = Some(format!("lowlight gain={gain} sigma={noise_sigma} seed={seed}"));
    manifest.save(&out_dir.join(layout::MANIFEST))
}

/// Built-in scenes for the CLI and the test suites.
pub fn builtin_scene(name: &str) -> Result<SyntheticScene> {
    let scene = match name {
        // a handful of warm "fruits" hanging inside a dark volume
        "orchard" => SyntheticScene {
            bounds: Aabb::centered(1.0),
            primitives: vec![
                Primitive::Sphere {
                    center: [0.35, 0.2, 0.0],
                    radius: 0.22,
                    density: 14.0,
                    rgb: [0.85, 0.15, 0.1],
                    thermal: 0.9,
                },
                Primitive::Sphere {
                    center: [-0.4, -0.1, 0.25],
                    radius: 0.18,
                    density: 12.0,
                    rgb: [0.9, 0.6, 0.1],
                    thermal: 0.75,
                },
                Primitive::Sphere {
                    center: [0.0, -0.35, -0.3],
                    radius: 0.2,
                    density: 10.0,
                    rgb: [0.35, 0.1, 0.5],
                    thermal: 0.85,
                },
                Primitive::Box {
                    center: [0.0, 0.45, 0.0],
                    size: [1.3, 0.18, 0.5],
                    density: 6.0,
                    rgb: [0.15, 0.55, 0.2],
                    thermal: 0.25,
                },
                Primitive::Box {
                    center: [-0.1, 0.0, -0.05],
                    size: [0.12, 1.1, 0.12],
                    density: 8.0,
                    rgb: [0.45, 0.3, 0.15],
                    thermal: 0.4,
                },
            ],
            background_rgb: [0.0; 3],
            background_thermal: 0.05,
        },
        // two nested translucent boxes, good for oracle cross-checks
        "nested" => SyntheticScene {
            bounds: Aabb::centered(1.0),
            primitives: vec![
                Primitive::Box {
                    center: [0.0; 3],
                    size: [1.2, 1.2, 1.2],
                    density: 1.5,
                    rgb: [0.2, 0.4, 0.8],
                    thermal: 0.3,
                },
                Primitive::Box {
                    center: [0.1, 0.0, 0.0],
                    size: [0.5, 0.5, 0.5],
                    density: 6.0,
                    rgb: [0.9, 0.8, 0.1],
                    thermal: 0.8,
                },
            ],
            background_rgb: [0.0; 3],
            background_thermal: 0.0,
        },
        // one centered slab, closed-form check target
        "slab" => SyntheticScene {
            bounds: Aabb::centered(1.0),
            primitives: vec![Primitive::Box {
                center: [0.0; 3],
                size: [1.0, 1.0, 0.5],
                density: 3.0,
                rgb: [0.7, 0.7, 0.7],
                thermal: 0.6,
            }],
            background_rgb: [0.0; 3],
            background_thermal: 0.0,
        },
        other => {
            return Err(Error::Contract(format!(
                "unknown builtin scene '{other}' (available: orchard, nested, slab)"
            )))
        }
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera_looking_at_origin() -> CameraModel {
        let pose = Pose::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        Intrinsics::with_fov(16, 16, 45.0).camera(pose).unwrap()
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SyntheticScene {
            bounds: Aabb::centered(1.0),
            primitives: vec![],
            background_rgb: [0.1, 0.2, 0.3],
            background_thermal: 0.4,
        };
        let img = oracle_render(&scene, &camera_looking_at_origin(), Modality::Rgb).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px, &[0.1, 0.2, 0.3]);
        }
        let th = oracle_render(&scene, &camera_looking_at_origin(), Modality::Thermal).unwrap();
        assert!(th.data.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn single_slab_matches_beer_lambert() {
        // axial ray through a slab of thickness d and density sigma over a
        // black background: color = albedo * (1 - exp(-sigma d))
        let (sigma, d) = (3.0, 0.5);
        let scene = builtin_scene("slab").unwrap();
        let color = scene.trace_ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0], Modality::Rgb);
        let expect = 0.7 * (1.0 - (-sigma * d as f64).exp());
        for c in color {
            assert!((c - expect).abs() < 1e-12, "{color:?} vs {expect}");
        }
    }

    /// Dense numeric integration oracle: 1e4 equal steps along the ray with
    /// independent point-in-primitive tests.
    fn brute_force_ray(
        scene: &SyntheticScene,
        o: [f64; 3],
        d: [f64; 3],
        modality: Modality,
    ) -> [f64; 3] {
        let steps = 10_000;
        let (t_lo, t_hi) = scene.bounds.intersect_ray(o, d).unwrap();
        let dt = (t_hi - t_lo) / steps as f64;
        let mut color = [0.0; 3];
        let mut transmittance = 1.0;
        for i in 0..steps {
            let t = t_lo + (i as f64 + 0.5) * dt;
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let sigma = scene.density_at(p);
            if sigma > 0.0 {
                let emit = scene.emission_at(p, modality);
                let alpha = 1.0 - (-sigma * dt).exp();
                for c in 0..3 {
                    color[c] += transmittance * alpha * emit[c];
                }
                transmittance *= 1.0 - alpha;
            }
        }
        let bg = scene.background(modality);
        for c in 0..3 {
            color[c] += transmittance * bg[c];
        }
        color
    }

    #[test]
    fn nested_boxes_match_numeric_integration() {
        let scene = builtin_scene("nested").unwrap();
        let rays: [([f64; 3], [f64; 3]); 3] = [
            ([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]),
            ([0.3, 0.2, 3.0], [-0.05, -0.02, -1.0]),
            ([-1.5, 0.5, 2.5], [0.45, -0.15, -0.85]),
        ];
        for (o, d) in rays {
            let d = {
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                [d[0] / n, d[1] / n, d[2] / n]
            };
            for modality in [Modality::Rgb, Modality::Thermal] {
                let exact = scene.trace_ray(o, d, modality);
                let numeric = brute_force_ray(&scene, o, d, modality);
                for c in 0..3 {
                    assert!(
                        (exact[c] - numeric[c]).abs() < 1e-4,
                        "{modality:?} channel {c}: {exact:?} vs {numeric:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn orbit_poses_look_at_center() {
        let traj = TrajectorySpec {
            center: [0.5, -0.2, 0.1],
            radius: 3.0,
            height: 1.0,
            views: 8,
            spacing_s: 0.25,
            orbit_degrees: 360.0,
        };
        for k in 0..traj.views {
            let pose = traj.pose_at(k as f64).unwrap();
            let eye = pose.translation();
            let m = pose.matrix();
            // camera -z axis points from eye to center
            let fwd = [-m[0][2], -m[1][2], -m[2][2]];
            let to_center = [
                traj.center[0] - eye[0],
                traj.center[1] - eye[1],
                traj.center[2] - eye[2],
            ];
            let n = (to_center[0].powi(2) + to_center[1].powi(2) + to_center[2].powi(2)).sqrt();
            for a in 0..3 {
                assert!((fwd[a] - to_center[a] / n).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scene_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = builtin_scene("orchard").unwrap();
        let path = dir.path().join("scene.json");
        scene.save(&path).unwrap();
        assert_eq!(SyntheticScene::load(&path).unwrap(), scene);
    }

    #[test]
    fn primitive_outside_bounds_rejected() {
        let scene = SyntheticScene {
            bounds: Aabb::centered(0.5),
            primitives: vec![Primitive::Sphere {
                center: [0.4, 0.0, 0.0],
                radius: 0.3,
                density: 1.0,
                rgb: [1.0; 3],
                thermal: 0.5,
            }],
            background_rgb: [0.0; 3],
            background_thermal: 0.0,
        };
        assert!(scene.validate().is_err());
    }
}
