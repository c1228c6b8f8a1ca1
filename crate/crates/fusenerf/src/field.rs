//! Scene representation: coarse and fine factorized 3-D feature volumes with
//! trilinear sampling, directional frequency encoding, and the decoding heads
//! that turn per-point features into density and per-head colors.
//!
//! Feature volumes come in two storage modes. `Dense` keeps one value per
//! voxel per channel and interpolates trilinearly between voxel centers.
//! `Cp { rank }` stores, per channel, `rank` triplets of per-axis vectors;
//! the sampled feature is the rank-sum of products of the three linearly
//! interpolated axis factors. Materializing a CP field at voxel centers and
//! sampling the resulting dense grid agree exactly, which the tests exploit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{
    Activation, BufId, CpLookup, Mlp, ParamId, ParameterStore, Tape, TrilinearLookup,
};
use crate::error::{Error, Result};

/// Axis-aligned bounding box in world space (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a] < max[a]) {
                return Err(Error::Contract(format!(
                    "bounding box: min {min:?} must be strictly below max {max:?}"
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    /// Unit cube centered at the origin scaled by `half`.
    pub fn centered(half: f64) -> Self {
        Aabb { min: [-half; 3], max: [half; 3] }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Entry/exit distances of a ray against the box, clipped to `t >= 0`.
    /// `None` when the ray misses entirely.
    pub fn intersect_ray(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut near = (self.min[a] - origin[a]) * inv;
            let mut far = (self.max[a] - origin[a]) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Storage layout of a [`FeatureField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldStorage {
    Dense,
    Cp { rank: usize },
}

/// Behavior for sample points outside the bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OobMode {
    /// Clamp the interpolation stencil to the box; callers zero the density
    /// of out-of-box samples via the mask returned by [`query_heads`].
    Clamp,
    /// Reject out-of-box points with an error.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    pub channels: usize,
    pub storage: FieldStorage,
}

impl FieldConfig {
    fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Contract(format!(
                "field resolution {:?} must be at least 2 per axis",
                self.resolution
            )));
        }
        if self.channels == 0 {
            return Err(Error::Contract("field needs at least one channel".into()));
        }
        if let FieldStorage::Cp { rank } = self.storage {
            if rank == 0 {
                return Err(Error::Contract("cp rank must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }
}

/// One feature volume with its parameters registered in a store.
#[derive(Debug, Clone)]
pub struct FeatureField {
    pub config: FieldConfig,
    storage: StorageHandles,
}

#[derive(Debug, Clone)]
enum StorageHandles {
    Dense(ParamId),
    Cp { factors: [ParamId; 3], rank: usize },
}

impl FeatureField {
    /// Register a field under `prefix`. Values start uniform in
    /// `[-init_scale, init_scale]` (seeded); pass 0 for an all-zero field.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        config: FieldConfig,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut init = |n: usize| -> Vec<f64> {
            if init_scale == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-init_scale..init_scale)).collect()
            }
        };
        let storage = match config.storage {
            FieldStorage::Dense => {
                let n = config.voxel_count() * config.channels;
                let vals = init(n);
                StorageHandles::Dense(store.register(
                    &format!("{prefix}.grid"),
                    &[config.voxel_count(), config.channels],
                    vals,
                )?)
            }
            FieldStorage::Cp { rank } => {
                let mut ids = Vec::with_capacity(3);
                for (axis, label) in ["x", "y", "z"].iter().enumerate() {
                    let n = config.resolution[axis] * rank * config.channels;
                    let vals = init(n);
                    ids.push(store.register(
                        &format!("{prefix}.{label}"),
                        &[config.resolution[axis], rank * config.channels],
                        vals,
                    )?);
                }
                StorageHandles::Cp { factors: [ids[0], ids[1], ids[2]], rank }
            }
        };
        Ok(FeatureField { config, storage })
    }

    /// Re-bind to parameters previously registered under `prefix`.
    pub fn attach(store: &ParameterStore, prefix: &str, config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let storage = match config.storage {
            FieldStorage::Dense => StorageHandles::Dense(store.require(&format!("{prefix}.grid"))?),
            FieldStorage::Cp { rank } => StorageHandles::Cp {
                factors: [
                    store.require(&format!("{prefix}.x"))?,
                    store.require(&format!("{prefix}.y"))?,
                    store.require(&format!("{prefix}.z"))?,
                ],
                rank,
            },
        };
        Ok(FeatureField { config, storage })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn bounds(&self) -> Aabb {
        self.config.bounds
    }

    /// Handle to the dense grid parameter, when stored densely.
    pub fn dense_param(&self) -> Option<ParamId> {
        match self.storage {
            StorageHandles::Dense(id) => Some(id),
            _ => None,
        }
    }

    /// Continuous grid coordinate of `p` along `axis`: voxel center `i` sits
    /// at coordinate `i`.
    fn grid_coord(&self, p: f64, axis: usize) -> f64 {
        let Aabb { min, max } = self.config.bounds;
        let u = (p - min[axis]) / (max[axis] - min[axis]);
        u * self.config.resolution[axis] as f64 - 0.5
    }

    /// Bracketing indices and fraction along one axis, clamped to the edge
    /// for coordinates outside the voxel-center lattice.
    fn axis_stencil(&self, p: f64, axis: usize) -> (u32, u32, f64) {
        let n = self.config.resolution[axis];
        let g = self.grid_coord(p, axis);
        if g <= 0.0 {
            return (0, 0, 0.0);
        }
        if g >= (n - 1) as f64 {
            return ((n - 1) as u32, (n - 1) as u32, 0.0);
        }
        let i0 = g.floor() as u32;
        (i0, i0 + 1, g - i0 as f64)
    }

    fn check_points(&self, points: &[[f64; 3]], oob: OobMode) -> Result<()> {
        if oob == OobMode::Strict {
            for (i, p) in points.iter().enumerate() {
                if !self.config.bounds.contains(*p) {
                    return Err(Error::OutOfBounds(format!(
                        "sample point {i} at {p:?} lies outside {:?}",
                        self.config.bounds
                    )));
                }
            }
        }
        Ok(())
    }

    /// Record a batch sample on the tape: one `[N x channels]` buffer,
    /// differentiable with respect to the stored parameters.
    pub fn sample(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        points: &[[f64; 3]],
        oob: OobMode,
    ) -> Result<BufId> {
        self.check_points(points, oob)?;
        match &self.storage {
            StorageHandles::Dense(grid) => {
                let lookup = self.trilinear_lookup(points);
                tape.gather_dense(store, *grid, self.config.channels, lookup)
            }
            StorageHandles::Cp { factors, rank } => {
                let lookup = self.cp_lookup(points);
                tape.gather_cp(store, *factors, *rank, self.config.channels, lookup)
            }
        }
    }

    /// Value-level sampling for tests and tooling.
    pub fn sample_values(
        &self,
        store: &ParameterStore,
        points: &[[f64; 3]],
        oob: OobMode,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.sample(&mut tape, store, points, oob)?;
        Ok(tape.value(out).to_vec())
    }

    fn trilinear_lookup(&self, points: &[[f64; 3]]) -> TrilinearLookup {
        let [_, ny, nz] = self.config.resolution;
        let mut corners = Vec::with_capacity(points.len());
        let mut weights = Vec::with_capacity(points.len());
        for p in points {
            let (x0, x1, fx) = self.axis_stencil(p[0], 0);
            let (y0, y1, fy) = self.axis_stencil(p[1], 1);
            let (z0, z1, fz) = self.axis_stencil(p[2], 2);
            let flat = |ix: u32, iy: u32, iz: u32| -> u32 {
                (ix * ny as u32 + iy) * nz as u32 + iz
            };
            corners.push([
                flat(x0, y0, z0),
                flat(x0, y0, z1),
                flat(x0, y1, z0),
                flat(x0, y1, z1),
                flat(x1, y0, z0),
                flat(x1, y0, z1),
                flat(x1, y1, z0),
                flat(x1, y1, z1),
            ]);
            let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
            weights.push([
                gx * gy * gz,
                gx * gy * fz,
                gx * fy * gz,
                gx * fy * fz,
                fx * gy * gz,
                fx * gy * fz,
                fx * fy * gz,
                fx * fy * fz,
            ]);
        }
        TrilinearLookup { corners, weights }
    }

    fn cp_lookup(&self, points: &[[f64; 3]]) -> CpLookup {
        let axes = points
            .iter()
            .map(|p| {
                [
                    self.axis_stencil(p[0], 0),
                    self.axis_stencil(p[1], 1),
                    self.axis_stencil(p[2], 2),
                ]
            })
            .collect();
        CpLookup { axes }
    }

    /// The eight trilinear weights for a point; they always sum to one.
    pub fn interpolation_weights(&self, p: [f64; 3]) -> [f64; 8] {
        self.trilinear_lookup(&[p]).weights[0]
    }

    /// Evaluate a CP field at every voxel center, producing the values of the
    /// equivalent dense grid (`[voxels * channels]`, voxel-major).
    pub fn materialize_dense(&self, store: &ParameterStore) -> Result<Vec<f64>> {
        let StorageHandles::Cp { factors, rank } = &self.storage else {
            return Err(Error::Contract("materialize_dense needs a cp field".into()));
        };
        let [nx, ny, nz] = self.config.resolution;
        let c = self.config.channels;
        let rc = rank * c;
        let fx = store.value(factors[0]);
        let fy = store.value(factors[1]);
        let fz = store.value(factors[2]);
        let mut out = vec![0.0; nx * ny * nz * c];
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let base = ((ix * ny + iy) * nz + iz) * c;
                    for r in 0..*rank {
                        for ch in 0..c {
                            out[base + ch] += fx[ix * rc + r * c + ch]
                                * fy[iy * rc + r * c + ch]
                                * fz[iz * rc + r * c + ch];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Coarse and fine volumes over one shared bounding box.
#[derive(Debug, Clone)]
pub struct FieldPair {
    pub coarse: FeatureField,
    pub fine: FeatureField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

impl FieldPair {
    pub fn new(coarse: FeatureField, fine: FeatureField) -> Result<Self> {
        if coarse.config.bounds != fine.config.bounds {
            return Err(Error::Contract("field pair must share one bounding box".into()));
        }
        for a in 0..3 {
            if fine.config.resolution[a] < coarse.config.resolution[a] {
                return Err(Error::Contract(format!(
                    "fine resolution {:?} must cover coarse {:?} on every axis",
                    fine.config.resolution, coarse.config.resolution
                )));
            }
        }
        if coarse.channels() != fine.channels() {
            return Err(Error::Contract("field pair channel counts differ".into()));
        }
        Ok(FieldPair { coarse, fine })
    }

    pub fn stage(&self, stage: Stage) -> &FeatureField {
        match stage {
            Stage::Coarse => &self.coarse,
            Stage::Fine => &self.fine,
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.coarse.config.bounds
    }
}

/// Frequency encoding length for `freqs` octaves: the raw direction plus a
/// sin and cos triplet per octave.
pub fn encoding_len(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Encode a unit direction: `(d, sin(2^k pi d), cos(2^k pi d))` for
/// `k = 0..freqs`. Rejects non-unit inputs (tolerance 1e-6).
pub fn encode_direction(d: [f64; 3], freqs: usize) -> Result<Vec<f64>> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "encode_direction expects a unit vector, |d| = {norm}"
        )));
    }
    let mut out = Vec::with_capacity(encoding_len(freqs));
    out.extend_from_slice(&d);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((f * d[c]).sin());
        }
        for c in 0..3 {
            out.push((f * d[c]).cos());
        }
    }
    Ok(out)
}

/// Sizes of the decoding heads shared by the coarse and fine stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Hidden widths of both color heads (ReLU).
    pub hidden: Vec<usize>,
    /// Frequency count of the directional encoding.
    pub dir_freqs: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: vec![64, 64, 64], dir_freqs: 4 }
    }
}

/// The decoding heads: sigmoid color MLPs for the RGB and cross-spectral
/// branches plus a softplus density head reading feature channel 0. Both
/// color heads consume the same positional features of the selected stage
/// concatenated with the encoded view direction.
#[derive(Debug, Clone)]
pub struct Heads {
    pub rgb: Mlp,
    pub xspec: Mlp,
    pub density: Mlp,
    pub config: HeadConfig,
}

impl Heads {
    pub fn new(
        store: &mut ParameterStore,
        channels: usize,
        config: HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_width = channels + encoding_len(config.dir_freqs);
        Ok(Heads {
            rgb: Mlp::new(store, "head.rgb", in_width, &config.hidden, 3, Activation::Sigmoid, rng)?,
            xspec: Mlp::new(
                store,
                "head.xspec",
                in_width,
                &config.hidden,
                3,
                Activation::Sigmoid,
                rng,
            )?,
            density: Mlp::new(store, "head.density", 1, &[], 1, Activation::Softplus, rng)?,
            config,
        })
    }

    pub fn attach(store: &ParameterStore, channels: usize, config: HeadConfig) -> Result<Self> {
        let in_width = channels + encoding_len(config.dir_freqs);
        Ok(Heads {
            rgb: Mlp::attach(store, "head.rgb", in_width, &config.hidden, 3, Activation::Sigmoid)?,
            xspec: Mlp::attach(
                store,
                "head.xspec",
                in_width,
                &config.hidden,
                3,
                Activation::Sigmoid,
            )?,
            density: Mlp::attach(store, "head.density", 1, &[], 1, Activation::Softplus)?,
            config,
        })
    }
}

/// Tape buffers produced by [`query_heads`] for a batch of points.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `[N x 1]` non-negative density, zeroed outside the bounding box.
    pub sigma: BufId,
    /// `[N x 3]` RGB head color in `[0, 1]`.
    pub rgb: BufId,
    /// `[N x 3]` cross-spectral head color in `[0, 1]`.
    pub xspec: BufId,
}

/// Sample the selected stage's volume at `points`, decode density from
/// feature channel 0, and run both color heads on the features concatenated
/// with the encoded `dirs` (one unit direction per point).
pub fn query_heads(
    tape: &mut Tape,
    store: &ParameterStore,
    pair: &FieldPair,
    heads: &Heads,
    stage: Stage,
    points: &[[f64; 3]],
    dirs: &[[f64; 3]],
    oob: OobMode,
) -> Result<HeadOutputs> {
    if points.len() != dirs.len() {
        return Err(Error::Contract(format!(
            "query_heads: {} points but {} directions",
            points.len(),
            dirs.len()
        )));
    }
    let field = pair.stage(stage);
    let features = field.sample(tape, store, points, oob)?;

    let f0 = tape.slice_cols(store, features, 0, 1)?;
    let sigma_raw = heads.density.forward(tape, store, f0)?;
    let mask: Vec<f64> = points
        .iter()
        .map(|p| if field.bounds().contains(*p) { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.input(mask, points.len(), 1)?;
    let sigma = tape.mul(store, sigma_raw, mask)?;

    let dirs_flat: Vec<f64> = dirs.iter().flat_map(|d| d.iter().copied()).collect();
    let dirs_buf = tape.input(dirs_flat, dirs.len(), 3)?;
    let encoded = tape.encode_dirs(store, dirs_buf, heads.config.dir_freqs)?;
    let joint = tape.concat(store, features, encoded)?;

    let rgb = heads.rgb.forward(tape, store, joint)?;
    let xspec = heads.xspec.forward(tape, store, joint)?;
    Ok(HeadOutputs { sigma, rgb, xspec })
}
