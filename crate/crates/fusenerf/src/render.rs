//! Camera model, ray generation, stratified and importance-based sampling,
//! and differentiable alpha-compositing volume rendering.
//!
//! The camera convention is right-handed with the camera looking along `-z`
//! and `y` up; dataset loaders convert other conventions on ingest.
//!
//! Compositing follows the classical emission-absorption model: with
//! `delta_i = t_{i+1} - t_i` (the last delta reaching to `far`),
//! `alpha_i = 1 - exp(-sigma_i delta_i)`, transmittance
//! `T_i = prod_{j<i} (1 - alpha_j)` and weights `w_i = T_i alpha_i`, the
//! rendered color is `sum_i w_i c_i + (1 - sum_i w_i) * background`.

use rand::Rng;

use crate::diffmath::{BufId, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::field::{query_heads, Aabb, FieldPair, Heads, OobMode, Stage};

/// Rigid camera-to-world transform with an orthonormality-checked rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: [[f64; 4]; 4],
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { matrix: m }
    }

    /// Validate a 4x4 camera-to-world matrix: orthonormal rotation block with
    /// determinant +1, last row `(0, 0, 0, 1)`.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > Self::ORTHONORMAL_TOL {
                    return Err(Error::Contract(format!(
                        "pose rotation is not orthonormal: column dot ({i},{j}) = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "pose rotation must be a proper rotation (det +1), got det {det}"
            )));
        }
        let bottom = [m[3][0], m[3][1], m[3][2], m[3][3]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Contract(format!(
                "pose bottom row must be (0,0,0,1), got {bottom:?}"
            )));
        }
        Ok(Pose { matrix: m })
    }

    /// Camera at `eye` looking at `target` with `-z` forward and `up`
    /// resolving the roll.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let z = normalize(sub(eye, target))?; // camera +z points away from target
        let x = normalize(cross(up, z))?;
        let y = cross(z, x);
        let m = [
            [x[0], y[0], z[0], eye[0]],
            [x[1], y[1], z[1], eye[1]],
            [x[2], y[2], z[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Pose::from_matrix(m)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn flat_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[i * 4..(i + 1) * 4].copy_from_slice(&self.matrix[i]);
        }
        out
    }

    pub fn from_flat_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Contract(format!("pose needs 16 values, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i].copy_from_slice(&v[i * 4..(i + 1) * 4]);
        }
        Pose::from_matrix(m)
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    /// Rotate a camera-frame vector into world frame.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::Contract("cannot normalize a near-zero vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Pose-free pinhole intrinsics, the shareable part of a [`CameraModel`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Symmetric pinhole covering `fov_x_degrees` horizontally.
    pub fn with_fov(width: u32, height: u32, fov_x_degrees: f64) -> Self {
        let f = width as f64 / (2.0 * (fov_x_degrees.to_radians() / 2.0).tan());
        Intrinsics {
            width,
            height,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn camera(&self, pose: Pose) -> Result<CameraModel> {
        CameraModel::new(self.width, self.height, self.fx, self.fy, self.cx, self.cy, pose)
    }
}

/// Pinhole camera with pixel-space intrinsics and a camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Pose,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Contract(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Contract(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraModel { width, height, fx, fy, cx, cy, pose })
    }

    /// Same field of view at `factor` times the resolution.
    pub fn scaled(&self, factor: f64) -> Result<CameraModel> {
        CameraModel::new(
            (self.width as f64 * factor).round() as u32,
            (self.height as f64 * factor).round() as u32,
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            self.pose,
        )
    }

    /// All integer pixel coordinates of the image, row-major.
    pub fn all_pixels(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity((self.width * self.height) as usize);
        for v in 0..self.height {
            for u in 0..self.width {
                out.push((u as f64, v as f64));
            }
        }
        out
    }
}

/// A batch of camera rays with per-ray integration bounds.
#[derive(Debug, Clone, Default)]
pub struct RayBundle {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    pub pixels: Vec<(f64, f64)>,
    pub frames: Vec<usize>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn append(&mut self, mut other: RayBundle) {
        self.origins.append(&mut other.origins);
        self.dirs.append(&mut other.dirs);
        self.near.append(&mut other.near);
        self.far.append(&mut other.far);
        self.pixels.append(&mut other.pixels);
        self.frames.append(&mut other.frames);
    }

    /// Intersect every ray with `bounds`, writing near/far integration
    /// limits. Returns per-ray hit flags; missed rays keep `near == far`.
    pub fn clip_to_box(&mut self, bounds: &Aabb) -> Vec<bool> {
        let mut hits = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            match bounds.intersect_ray(self.origins[i], self.dirs[i]) {
                Some((t0, t1)) if t1 > t0 => {
                    self.near[i] = t0;
                    self.far[i] = t1;
                    hits.push(true);
                }
                _ => {
                    self.near[i] = 0.0;
                    self.far[i] = 0.0;
                    hits.push(false);
                }
            }
        }
        hits
    }

    /// Keep only the rays whose flag is set.
    pub fn filter(&self, keep: &[bool]) -> RayBundle {
        let mut out = RayBundle::default();
        for i in 0..self.len() {
            if keep[i] {
                out.origins.push(self.origins[i]);
                out.dirs.push(self.dirs[i]);
                out.near.push(self.near[i]);
                out.far.push(self.far[i]);
                out.pixels.push(self.pixels[i]);
                out.frames.push(self.frames[i]);
            }
        }
        out
    }
}

/// Build world-space rays through the given pixel coordinates. The camera
/// frame direction is `((u + 0.5 - cx) / fx, -(v + 0.5 - cy) / fy, -1)`,
/// normalized and rotated into world space.
pub fn generate_rays(camera: &CameraModel, pixels: &[(f64, f64)], frame: usize) -> Result<RayBundle> {
    let mut bundle = RayBundle::default();
    let origin = camera.pose.translation();
    for &(u, v) in pixels {
        if !(0.0..camera.width as f64).contains(&u) || !(0.0..camera.height as f64).contains(&v) {
            return Err(Error::OutOfBounds(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        let cam_dir = [
            (u + 0.5 - camera.cx) / camera.fx,
            -(v + 0.5 - camera.cy) / camera.fy,
            -1.0,
        ];
        let d = normalize(camera.pose.rotate(cam_dir))?;
        bundle.origins.push(origin);
        bundle.dirs.push(d);
        bundle.near.push(0.0);
        bundle.far.push(f64::INFINITY);
        bundle.pixels.push((u, v));
        bundle.frames.push(frame);
    }
    Ok(bundle)
}

/// Stratified samples over `[near, far]`: one sample per equal bin, at the
/// midpoint when `rng` is `None`, uniform within the bin otherwise.
pub fn sample_coarse(
    near: f64,
    far: f64,
    n: usize,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Contract("need at least one sample per ray".into()));
    }
    if !(near < far) {
        return Err(Error::Contract(format!("invalid sample range [{near}, {far}]")));
    }
    let w = (far - near) / n as f64;
    let out = match rng {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * w).collect(),
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * w).collect(),
    };
    Ok(out)
}

/// Inverse-CDF samples from the piecewise-constant density proportional to
/// `weights` over `weights.len()` equal bins of `[near, far]`. All-zero
/// weights fall back to stratified uniform sampling.
pub fn sample_fine(
    weights: &[f64],
    near: f64,
    far: f64,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<f64>> {
    if let Some(i) = weights.iter().position(|w| *w < 0.0) {
        return Err(Error::Contract(format!("negative importance weight at bin {i}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return sample_coarse(near, far, n, Some(rng));
    }
    let bins = weights.len();
    let bin_w = (far - near) / bins as f64;
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    cdf[bins] = 1.0;

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        // first bin whose upper cdf exceeds u
        let mut idx = cdf.partition_point(|&c| c <= u);
        idx = idx.clamp(1, bins);
        let lo = cdf[idx - 1];
        let hi = cdf[idx];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        out.push(near + ((idx - 1) as f64 + frac) * bin_w);
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Per-ray rendering result.
#[derive(Debug, Clone)]
pub struct RenderedRay {
    pub rgb: [f64; 3],
    pub xspec: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Expected termination depth, background placed at `far`.
    pub depth: f64,
}

/// Composite one ray from its samples. `ts` must be strictly increasing with
/// non-negative densities; `far` closes the last interval.
pub fn composite(
    ts: &[f64],
    sigmas: &[f64],
    rgb: &[[f64; 3]],
    xspec: &[[f64; 3]],
    far: f64,
    bg_rgb: [f64; 3],
    bg_xspec: [f64; 3],
) -> Result<RenderedRay> {
    let n = ts.len();
    if n == 0 || sigmas.len() != n || rgb.len() != n || xspec.len() != n {
        return Err(Error::Contract("composite: per-sample arrays must share one length >= 1".into()));
    }
    for i in 1..n {
        if !(ts[i] > ts[i - 1]) {
            return Err(Error::Contract(format!(
                "composite: sample distances must be strictly increasing, t[{i}] = {} <= t[{}] = {}",
                ts[i],
                i - 1,
                ts[i - 1]
            )));
        }
    }
    if far < ts[n - 1] {
        return Err(Error::Contract("composite: far bound precedes the last sample".into()));
    }

    // Single differentiable implementation: evaluate the same tape ops the
    // training path records.
    let store = ParameterStore::new();
    let mut tape = Tape::new();
    let sigma = tape.input(sigmas.to_vec(), n, 1)?;
    let deltas = deltas_from_ts(ts, far);
    let weights = tape.transmittance_weights(&store, sigma, 1, n, deltas)?;
    let rgb_buf = tape.input(rgb.iter().flatten().copied().collect(), n, 3)?;
    let xspec_buf = tape.input(xspec.iter().flatten().copied().collect(), n, 3)?;
    let out_rgb = tape.weighted_blend(&store, weights, rgb_buf, 1, n, bg_rgb.to_vec())?;
    let out_xspec = tape.weighted_blend(&store, weights, xspec_buf, 1, n, bg_xspec.to_vec())?;

    let w = tape.value(weights).to_vec();
    let opacity: f64 = w.iter().sum();
    let depth = w.iter().zip(ts).map(|(wi, t)| wi * t).sum::<f64>() + (1.0 - opacity) * far;
    Ok(RenderedRay {
        rgb: tape.value(out_rgb).try_into().unwrap(),
        xspec: tape.value(out_xspec).try_into().unwrap(),
        opacity,
        weights: w,
        depth,
    })
}

/// `delta_i = t_{i+1} - t_i`, the last interval closing at `far`.
pub fn deltas_from_ts(ts: &[f64], far: f64) -> Vec<f64> {
    let n = ts.len();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(far - ts[n - 1]);
    deltas
}

/// Rendering hyperparameters for one coarse+fine pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Jitter stratified samples (training); midpoints otherwise.
    pub jitter: bool,
    pub background_rgb: [f64; 3],
    pub background_xspec: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            coarse_samples: 64,
            fine_samples: 64,
            jitter: true,
            background_rgb: [0.0; 3],
            background_xspec: [0.0; 3],
        }
    }
}

/// Differentiable outputs of one rendering pass over a bundle.
pub struct PassBuffers {
    /// `[rays x 3]` blended RGB head.
    pub rgb: BufId,
    /// `[rays x 3]` blended cross-spectral head.
    pub xspec: BufId,
    /// Snapshot of per-sample compositing weights, ray-major.
    pub weights: Vec<f64>,
    pub samples_per_ray: usize,
    /// Per-ray sample distances, ray-major.
    pub ts: Vec<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Render every ray of `bundle` (all rays must intersect the field bounds;
/// see [`RayBundle::clip_to_box`]): a coarse stratified pass through the
/// coarse volume, then a fine pass through the fine volume over the merged
/// coarse + importance samples. Both passes share the decoding heads.
pub fn render_rays(
    tape: &mut Tape,
    store: &ParameterStore,
    pair: &FieldPair,
    heads: &Heads,
    bundle: &RayBundle,
    config: &RenderConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(PassBuffers, PassBuffers)> {
    let rays = bundle.len();
    if rays == 0 {
        return Err(Error::Contract("render_rays: empty bundle".into()));
    }

    // coarse sample positions
    let sc = config.coarse_samples;
    let mut coarse_ts = Vec::with_capacity(rays * sc);
    for r in 0..rays {
        let ts = sample_coarse(
            bundle.near[r],
            bundle.far[r],
            sc,
            if config.jitter { Some(rng) } else { None },
        )?;
        coarse_ts.extend(ts);
    }
    let coarse_pass = render_pass(
        tape, store, pair, heads, bundle, Stage::Coarse, &coarse_ts, sc, config,
    )?;

    // importance samples from the coarse weights, merged with the coarse ts
    let sf = config.fine_samples;
    let merged_len = sc + sf;
    let mut fine_ts = Vec::with_capacity(rays * merged_len);
    for r in 0..rays {
        let w = &coarse_pass.weights[r * sc..(r + 1) * sc];
        let extra = sample_fine(w, bundle.near[r], bundle.far[r], sf, rng)?;
        let mut merged: Vec<f64> = coarse_ts[r * sc..(r + 1) * sc].to_vec();
        merged.extend(extra);
        merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // nudge exact duplicates apart so compositing sees strictly
        // increasing distances
        for i in 1..merged.len() {
            if merged[i] <= merged[i - 1] {
                merged[i] = merged[i - 1] + f64::EPSILON * merged[i - 1].abs().max(1e-12);
            }
        }
        fine_ts.extend(merged);
    }
    let fine_pass = render_pass(
        tape, store, pair, heads, bundle, Stage::Fine, &fine_ts, merged_len, config,
    )?;

    Ok((coarse_pass, fine_pass))
}

fn render_pass(
    tape: &mut Tape,
    store: &ParameterStore,
    pair: &FieldPair,
    heads: &Heads,
    bundle: &RayBundle,
    stage: Stage,
    ts: &[f64],
    samples_per_ray: usize,
    config: &RenderConfig,
) -> Result<PassBuffers> {
    let rays = bundle.len();
    let total = rays * samples_per_ray;
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    let mut deltas = Vec::with_capacity(total);
    for r in 0..rays {
        let o = bundle.origins[r];
        let d = bundle.dirs[r];
        let ray_ts = &ts[r * samples_per_ray..(r + 1) * samples_per_ray];
        for &t in ray_ts {
            points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            dirs.push(d);
        }
        deltas.extend(deltas_from_ts(ray_ts, bundle.far[r]));
    }

    let out = query_heads(tape, store, pair, heads, stage, &points, &dirs, OobMode::Clamp)?;
    let weights = tape.transmittance_weights(store, out.sigma, rays, samples_per_ray, deltas)?;
    let rgb = tape.weighted_blend(
        store,
        weights,
        out.rgb,
        rays,
        samples_per_ray,
        config.background_rgb.to_vec(),
    )?;
    let xspec = tape.weighted_blend(
        store,
        weights,
        out.xspec,
        rays,
        samples_per_ray,
        config.background_xspec.to_vec(),
    )?;

    let w = tape.value(weights).to_vec();
    let mut opacity = Vec::with_capacity(rays);
    let mut depth = Vec::with_capacity(rays);
    for r in 0..rays {
        let ws = &w[r * samples_per_ray..(r + 1) * samples_per_ray];
        let ray_ts = &ts[r * samples_per_ray..(r + 1) * samples_per_ray];
        let o: f64 = ws.iter().sum();
        opacity.push(o);
        depth.push(
            ws.iter().zip(ray_ts).map(|(wi, t)| wi * t).sum::<f64>() + (1.0 - o) * bundle.far[r],
        );
    }

    Ok(PassBuffers {
        rgb,
        xspec,
        weights: w,
        samples_per_ray,
        ts: ts.to_vec(),
        opacity,
        depth,
    })
}
