//! Training configuration, model assembly and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PrepConfig, SceneDataset};
use crate::diffmath::{AdamConfig, AdamState, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::field::{Aabb, FeatureField, FieldConfig, FieldPair, FieldStorage, HeadConfig, Heads};
use crate::losses::{loss_reg, loss_rgb, loss_thermal, total_loss, LossBreakdown, LossTerms, LossWeights};
use crate::render::{generate_rays, render_rays, RayBundle, RenderConfig};

/// Geometry of the coarse/fine volume pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPairSpec {
    pub bounds: Aabb,
    pub coarse_resolution: [usize; 3],
    pub fine_resolution: [usize; 3],
    pub channels: usize,
    pub coarse_storage: FieldStorage,
    pub fine_storage: FieldStorage,
}

impl Default for FieldPairSpec {
    fn default() -> Self {
        FieldPairSpec {
            bounds: Aabb::centered(1.0),
            coarse_resolution: [32; 3],
            fine_resolution: [64; 3],
            channels: 16,
            coarse_storage: FieldStorage::Dense,
            fine_storage: FieldStorage::Dense,
        }
    }
}

/// Everything a training run needs; serialized into every checkpoint and
/// report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub ray_batch: usize,
    pub render: RenderConfig,
    pub field: FieldPairSpec,
    pub heads: HeadConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub prep: PrepConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub holdout_every: usize,
    /// Supervise the coarse pass alongside the fine pass.
    pub supervise_coarse: bool,
    pub checkpoint_every: Option<usize>,
    /// Uniform init range of the field features.
    pub field_init_scale: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 2,000 iterations over 32^3 / 64^3 dense volumes.
    fn default() -> Self {
        TrainConfig {
            iterations: 2_000,
            ray_batch: 1024,
            render: RenderConfig::default(),
            field: FieldPairSpec::default(),
            heads: HeadConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            prep: PrepConfig::default(),
            seed: 0,
            deterministic: true,
            holdout_every: 8,
            supervise_coarse: true,
            checkpoint_every: None,
            field_init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 30,000 iterations with CP-factorized volumes at
    /// 256^3 / 512^3 (rank 16).
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 30_000,
            field: FieldPairSpec {
                coarse_resolution: [256; 3],
                fine_resolution: [512; 3],
                coarse_storage: FieldStorage::Cp { rank: 16 },
                fine_storage: FieldStorage::Cp { rank: 16 },
                ..FieldPairSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 && self.checkpoint_every.is_some() {
            return Err(Error::Contract("checkpoint interval without iterations".into()));
        }
        if self.ray_batch == 0 {
            return Err(Error::Contract("ray batch must be >= 1".into()));
        }
        if self.render.coarse_samples == 0 || self.render.fine_samples == 0 {
            return Err(Error::Contract("sample counts must be >= 1".into()));
        }
        if self.field_init_scale < 0.0 {
            return Err(Error::Contract("field init scale must be >= 0".into()));
        }
        self.loss.validate()
    }
}

/// The trainable state: parameter store plus the structures bound to it.
#[derive(Debug)]
pub struct SceneModel {
    pub store: ParameterStore,
    pub pair: FieldPair,
    pub heads: Heads,
}

impl SceneModel {
    /// Fresh seeded initialization from a config.
    pub fn init(config: &TrainConfig) -> Result<SceneModel> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let coarse = FeatureField::new(
            &mut store,
            "field.coarse",
            FieldConfig {
                bounds: config.field.bounds,
                resolution: config.field.coarse_resolution,
                channels: config.field.channels,
                storage: config.field.coarse_storage,
            },
            config.field_init_scale,
            &mut rng,
        )?;
        let fine = FeatureField::new(
            &mut store,
            "field.fine",
            FieldConfig {
                bounds: config.field.bounds,
                resolution: config.field.fine_resolution,
                channels: config.field.channels,
                storage: config.field.fine_storage,
            },
            config.field_init_scale,
            &mut rng,
        )?;
        let pair = FieldPair::new(coarse, fine)?;
        let heads = Heads::new(&mut store, config.field.channels, config.heads.clone(), &mut rng)?;
        Ok(SceneModel { store, pair, heads })
    }

    /// Re-bind model structures to a store loaded from a checkpoint.
    pub fn attach(config: &TrainConfig, store: ParameterStore) -> Result<SceneModel> {
        config.validate()?;
        let coarse = FeatureField::attach(
            &store,
            "field.coarse",
            FieldConfig {
                bounds: config.field.bounds,
                resolution: config.field.coarse_resolution,
                channels: config.field.channels,
                storage: config.field.coarse_storage,
            },
        )?;
        let fine = FeatureField::attach(
            &store,
            "field.fine",
            FieldConfig {
                bounds: config.field.bounds,
                resolution: config.field.fine_resolution,
                channels: config.field.channels,
                storage: config.field.fine_storage,
            },
        )?;
        let pair = FieldPair::new(coarse, fine)?;
        let heads = Heads::attach(&store, config.field.channels, config.heads.clone())?;
        Ok(SceneModel { store, pair, heads })
    }
}

/// Seeded uniform sampler over the training frames' pixels. Kept as its own
/// type so tests can instrument exactly what the training loop would draw.
pub struct RaySampler {
    rng: ChaCha8Rng,
    frames: Vec<usize>,
    width: u32,
    height: u32,
}

impl RaySampler {
    pub fn new(dataset: &SceneDataset, config: &TrainConfig) -> Result<RaySampler> {
        let frames = dataset.train_indices(config.holdout_every);
        if frames.is_empty() {
            return Err(Error::Train("no training frames after the holdout split".into()));
        }
        let i = &dataset.manifest.intrinsics;
        Ok(RaySampler {
            // distinct stream from the init rng
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5351_4d50_4c52_u64),
            frames,
            width: i.width,
            height: i.height,
        })
    }

    /// Draw `n` (frame, u, v) pixel coordinates uniformly over the training
    /// frames.
    pub fn next_pixels(&mut self, n: usize) -> Vec<(usize, u32, u32)> {
        (0..n)
            .map(|_| {
                let f = self.frames[self.rng.gen_range(0..self.frames.len())];
                (f, self.rng.gen_range(0..self.width), self.rng.gen_range(0..self.height))
            })
            .collect()
    }

    pub fn jitter_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One training iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss_rgb: f64,
    pub loss_thermal: f64,
    pub loss_reg: f64,
    pub total: f64,
    /// Wall time of the iteration; excluded from determinism comparisons.
    pub wall_ms: f64,
}

/// Per-iteration loss trace plus emitted checkpoint indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<IterRecord>,
    pub checkpoint_iterations: Vec<usize>,
}

impl TrainTrace {
    /// The bitwise-reproducible portion of the trace (everything but wall
    /// time).
    pub fn deterministic_view(&self) -> Vec<(usize, u64, u64, u64, u64)> {
        self.records
            .iter()
            .map(|r| {
                (
                    r.iteration,
                    r.loss_rgb.to_bits(),
                    r.loss_thermal.to_bits(),
                    r.loss_reg.to_bits(),
                    r.total.to_bits(),
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Per-ray supervision gathered for one batch.
struct BatchTruth {
    rgb: Vec<f64>,
    thermal: Vec<f64>,
    events: Vec<f64>,
}

/// Run the training loop: every iteration samples `ray_batch` pixels from
/// the training frames, renders coarse and fine passes through both heads,
/// applies the weighted multi-objective loss, backpropagates and takes one
/// Adam step. Returns the trained model, optimizer state and trace.
///
/// When `out_checkpoint` is set the final state is saved there, and
/// intermediate checkpoints at `checkpoint_every` land next to it.
pub fn train(
    dataset: &SceneDataset,
    config: &TrainConfig,
    out_checkpoint: Option<&Path>,
) -> Result<(SceneModel, AdamState, TrainTrace)> {
    config.validate()?;
    let needs_rgb = config.loss.enable_rgb || config.loss.enable_reg;
    let needs_thermal = config.loss.enable_th;
    let needs_events = config.loss.enable_reg;
    if needs_thermal && !dataset.has_thermal() {
        return Err(Error::Train("thermal loss enabled but the dataset has no thermal frames".into()));
    }
    if needs_events && !dataset.has_events() {
        return Err(Error::Train("cross-spectral loss enabled but the dataset has no events".into()));
    }

    let mut model = SceneModel::init(config)?;
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            decay_steps: config.adam.decay_steps.or(if config.iterations > 0 {
                Some(config.iterations as u64)
            } else {
                None
            }),
            ..config.adam
        },
    );
    let mut sampler = RaySampler::new(dataset, config)?;
    let mut trace = TrainTrace::default();

    for iteration in 0..config.iterations {
        let start = Instant::now();
        let (bundle, truth) = sample_batch(dataset, config, &mut sampler, needs_rgb, needs_thermal, needs_events)?;

        let mut tape = Tape::new();
        let (coarse, fine) = render_rays(
            &mut tape,
            &model.store,
            &model.pair,
            &model.heads,
            &bundle,
            &config.render,
            sampler.jitter_rng(),
        )?;

        let mut terms = LossTerms::default();
        let passes: Vec<&crate::render::PassBuffers> = if config.supervise_coarse {
            vec![&coarse, &fine]
        } else {
            vec![&fine]
        };
        for pass in passes {
            if config.loss.enable_rgb {
                terms.rgb.push(loss_rgb(&mut tape, &model.store, pass.rgb, &truth.rgb)?);
            }
            if config.loss.enable_th {
                terms.thermal.push(loss_thermal(&mut tape, &model.store, pass.xspec, &truth.thermal)?);
            }
            if config.loss.enable_reg {
                let rgb_ref = if needs_rgb { Some(truth.rgb.as_slice()) } else { None };
                terms.reg.push(loss_reg(
                    &mut tape,
                    &model.store,
                    pass.xspec,
                    rgb_ref,
                    Some(&truth.events),
                    false,
                )?);
            }
        }
        let (total, breakdown) = total_loss(&mut tape, &model.store, &config.loss, &terms)?;
        if !breakdown.total.is_finite() {
            return Err(non_finite_loss(iteration, &breakdown));
        }

        tape.backward(&mut model.store, total, &[1.0])?;
        adam.step(&mut model.store).map_err(|e| {
            Error::Train(format!("iteration {iteration}: {e} ({breakdown:?})"))
        })?;
        model.store.zero_grads();

        trace.records.push(IterRecord {
            iteration,
            loss_rgb: breakdown.rgb,
            loss_thermal: breakdown.thermal,
            loss_reg: breakdown.reg,
            total: breakdown.total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if let (Some(every), Some(path)) = (config.checkpoint_every, out_checkpoint) {
            let done = iteration + 1;
            if done % every == 0 && done < config.iterations {
                let inter = intermediate_path(path, done);
                crate::checkpoint::save(&inter, config, dataset.manifest_hash(), &model.store, &adam)?;
                trace.checkpoint_iterations.push(done);
            }
        }
    }

    if let Some(path) = out_checkpoint {
        crate::checkpoint::save(path, config, dataset.manifest_hash(), &model.store, &adam)?;
        trace.checkpoint_iterations.push(config.iterations);
    }
    Ok((model, adam, trace))
}

fn non_finite_loss(iteration: usize, breakdown: &LossBreakdown) -> Error {
    Error::Train(format!(
        "non-finite loss at iteration {iteration}: rgb {} thermal {} reg {} total {}",
        breakdown.rgb, breakdown.thermal, breakdown.reg, breakdown.total
    ))
}

fn intermediate_path(final_path: &Path, iteration: usize) -> std::path::PathBuf {
    let stem = final_path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    final_path.with_file_name(format!("{stem}.iter{iteration:06}.ckpt"))
}

/// Draw pixels until `ray_batch` rays intersect the volume bounds, then
/// gather per-ray ground truth for each required modality.
fn sample_batch(
    dataset: &SceneDataset,
    config: &TrainConfig,
    sampler: &mut RaySampler,
    needs_rgb: bool,
    needs_thermal: bool,
    needs_events: bool,
) -> Result<(RayBundle, BatchTruth)> {
    let bounds = config.field.bounds;
    let mut bundle = RayBundle::default();
    let mut attempts = 0usize;
    while bundle.len() < config.ray_batch {
        attempts += 1;
        if attempts > 200 {
            return Err(Error::Train(
                "ray sampling keeps missing the volume bounds; check camera poses".into(),
            ));
        }
        let want = config.ray_batch - bundle.len();
        let pixels = sampler.next_pixels(want);
        // group per frame to reuse the camera
        let mut by_frame: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
        for (f, u, v) in pixels {
            by_frame.entry(f).or_default().push((u as f64, v as f64));
        }
        for (frame, px) in by_frame {
            let camera = dataset.camera(frame)?;
            let mut rays = generate_rays(&camera, &px, frame)?;
            let hits = rays.clip_to_box(&bounds);
            bundle.append(rays.filter(&hits));
        }
    }
    // over-collection is possible when several frames hit; trim to the batch
    let keep: Vec<bool> = (0..bundle.len()).map(|i| i < config.ray_batch).collect();
    let bundle = bundle.filter(&keep);

    let mut truth = BatchTruth {
        rgb: Vec::with_capacity(bundle.len() * 3),
        thermal: Vec::with_capacity(bundle.len() * 3),
        events: Vec::with_capacity(bundle.len() * 3),
    };
    for i in 0..bundle.len() {
        let frame = bundle.frames[i];
        let (u, v) = bundle.pixels[i];
        let (x, y) = (u as usize, v as usize);
        if needs_rgb {
            truth.rgb.extend_from_slice(dataset.rgb(frame)?.pixel(x, y));
        }
        if needs_thermal {
            truth.thermal.extend_from_slice(dataset.enhanced_thermal(frame)?.pixel(x, y));
        }
        if needs_events {
            truth.events.extend_from_slice(dataset.event_c_ev(frame)?.pixel(x, y));
        }
    }
    Ok((bundle, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Intrinsics;
    use crate::synth::{builtin_scene, generate_dataset, SynthOptions, TrajectorySpec};

    fn quick_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            ray_batch: 32,
            render: RenderConfig {
                coarse_samples: 8,
                fine_samples: 8,
                ..RenderConfig::default()
            },
            field: FieldPairSpec {
                coarse_resolution: [8; 3],
                fine_resolution: [12; 3],
                channels: 4,
                ..FieldPairSpec::default()
            },
            heads: HeadConfig { hidden: vec![8], dir_freqs: 1 },
            holdout_every: 4,
            ..TrainConfig::default()
        }
    }

    fn quick_dataset(dir: &Path) {
        let scene = builtin_scene("orchard").unwrap();
        let traj = TrajectorySpec {
            center: [0.0; 3],
            radius: 3.0,
            height: 0.7,
            views: 6,
            spacing_s: 0.2,
            orbit_degrees: 360.0,
        };
        let intr = Intrinsics::with_fov(24, 24, 45.0);
        generate_dataset(&scene, &traj, intr, &SynthOptions::default(), dir).unwrap();
    }

    #[test]
    fn zero_iteration_run_preserves_initialization() {
        let dir = tempfile::tempdir().unwrap();
        quick_dataset(dir.path());
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let config = TrainConfig { iterations: 0, ..quick_config() };
        let (model, adam, trace) = train(&ds, &config, None).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(adam.step_count(), 0);

        let fresh = SceneModel::init(&config).unwrap();
        for id in fresh.store.ids() {
            assert_eq!(fresh.store.value(id), model.store.value(id));
        }
    }

    #[test]
    fn deterministic_runs_produce_bitwise_identical_traces() {
        let dir = tempfile::tempdir().unwrap();
        quick_dataset(dir.path());
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let config = quick_config();
        let (_, _, t1) = train(&ds, &config, None).unwrap();
        let (_, _, t2) = train(&ds, &config, None).unwrap();
        assert_eq!(t1.deterministic_view(), t2.deterministic_view());
        assert_eq!(t1.records.len(), 3);
    }

    #[test]
    fn sampler_never_draws_holdout_frames() {
        let dir = tempfile::tempdir().unwrap();
        quick_dataset(dir.path());
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let config = quick_config();
        let holdout: std::collections::HashSet<usize> =
            ds.holdout_indices(config.holdout_every).into_iter().collect();
        assert!(!holdout.is_empty());
        let mut sampler = RaySampler::new(&ds, &config).unwrap();
        for (frame, u, v) in sampler.next_pixels(20_000) {
            assert!(!holdout.contains(&frame), "holdout frame {frame} sampled");
            assert!(u < 24 && v < 24);
        }
    }

    #[test]
    fn training_reduces_loss_on_a_tiny_run() {
        let dir = tempfile::tempdir().unwrap();
        quick_dataset(dir.path());
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let config = TrainConfig { iterations: 40, ..quick_config() };
        let (_, _, trace) = train(&ds, &config, None).unwrap();
        let first = trace.records.first().unwrap().total;
        let last = trace.records.last().unwrap().total;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn reg_loss_without_events_errors() {
        let dir = tempfile::tempdir().unwrap();
        quick_dataset(dir.path());
        // strip the event stream from the manifest
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest = crate::dataset::Manifest::load(&manifest_path).unwrap();
        manifest.events = None;
        manifest.save(&manifest_path).unwrap();
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let err = train(&ds, &quick_config(), None).unwrap_err();
        assert!(err.to_string().contains("events"), "{err}");
    }
}
