//! Full-view rendering, metric evaluation over dataset splits, and the
//! modality ablation harness.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{config_hash, SceneDataset};
use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::img::FloatImage;
use crate::losses::{ablation_configs, LossWeights};
use crate::metrics::{psnr, psnr_for_report, ssim};
use crate::render::{generate_rays, render_rays, CameraModel, RenderConfig};
use crate::train::{train, SceneModel, TrainConfig};

/// One rendered view: both heads plus the expected-depth map.
pub struct RenderedView {
    pub rgb: FloatImage,
    pub xspec: FloatImage,
    pub depth: Vec<f64>,
}

/// Render a full image through the fine pass, chunking rays to bound tape
/// memory. Stratified midpoints (no jitter); the importance-sampling draws
/// come from a per-view seeded stream, so repeated renders are bitwise
/// identical.
pub fn render_view(
    model: &SceneModel,
    render_config: &RenderConfig,
    camera: &CameraModel,
    seed: u64,
) -> Result<RenderedView> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut rgb = FloatImage::new(w, h, 3);
    let mut xspec = FloatImage::new(w, h, 3);
    let mut depth = vec![0.0; w * h];
    let config = RenderConfig { jitter: false, ..render_config.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pixels = camera.all_pixels();
    for chunk in pixels.chunks(4096) {
        let mut bundle = generate_rays(camera, chunk, 0)?;
        let hits = bundle.clip_to_box(&model.pair.bounds());
        let hit_bundle = bundle.filter(&hits);

        let mut fine_rgb = Vec::new();
        let mut fine_xspec = Vec::new();
        let mut fine_depth = Vec::new();
        if !hit_bundle.is_empty() {
            let mut tape = Tape::new();
            let (_, fine) = render_rays(
                &mut tape,
                &model.store,
                &model.pair,
                &model.heads,
                &hit_bundle,
                &config,
                &mut rng,
            )?;
            fine_rgb = tape.value(fine.rgb).to_vec();
            fine_xspec = tape.value(fine.xspec).to_vec();
            fine_depth = fine.depth.clone();
        }

        let mut cursor = 0usize;
        for (i, &(u, v)) in chunk.iter().enumerate() {
            let (x, y) = (u as usize, v as usize);
            if hits[i] {
                rgb.pixel_mut(x, y).copy_from_slice(&fine_rgb[cursor * 3..cursor * 3 + 3]);
                xspec.pixel_mut(x, y).copy_from_slice(&fine_xspec[cursor * 3..cursor * 3 + 3]);
                depth[y * w + x] = fine_depth[cursor];
                cursor += 1;
            } else {
                rgb.pixel_mut(x, y).copy_from_slice(&config.background_rgb);
                xspec.pixel_mut(x, y).copy_from_slice(&config.background_xspec);
                depth[y * w + x] = f64::INFINITY;
            }
        }
    }
    Ok(RenderedView { rgb, xspec, depth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    /// PSNR in dB, capped at 99 for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
}

fn head_metrics(rendered: &FloatImage, reference: &FloatImage) -> Result<HeadMetrics> {
    Ok(HeadMetrics {
        psnr_db: psnr_for_report(psnr(rendered, reference, 1.0)?),
        ssim: ssim(rendered, reference, 1.0)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub frame: usize,
    /// RGB head against the RGB ground truth.
    pub rgb: HeadMetrics,
    /// Cross-spectral head against the enhanced thermal ground truth.
    pub xspec_vs_thermal: Option<HeadMetrics>,
    /// Cross-spectral head against the RGB ground truth.
    pub xspec_vs_rgb: HeadMetrics,
    /// Cross-spectral head against the normalized event frame.
    pub xspec_vs_events: Option<HeadMetrics>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMeans {
    pub rgb: HeadMetrics,
    pub xspec_vs_thermal: Option<HeadMetrics>,
    pub xspec_vs_rgb: HeadMetrics,
    pub xspec_vs_events: Option<HeadMetrics>,
}

impl Default for HeadMetrics {
    fn default() -> Self {
        HeadMetrics { psnr_db: 0.0, ssim: 0.0 }
    }
}

/// Structured evaluation report for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub views: Vec<ViewMetrics>,
    pub mean: SplitMeans,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Holdout,
    Train,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Holdout => "holdout",
            Split::Train => "train",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "holdout" => Ok(Split::Holdout),
            "train" => Ok(Split::Train),
            other => Err(Error::Contract(format!(
                "unknown split '{other}' (expected holdout or train)"
            ))),
        }
    }
}

/// Render every view of the split through both heads and score them against
/// the per-modality references. The checkpoint must match the dataset
/// (manifest hash) unless `allow_mismatch` is set.
pub fn evaluate(
    model: &SceneModel,
    config: &TrainConfig,
    checkpoint_manifest_hash: &str,
    dataset: &SceneDataset,
    split: Split,
    allow_mismatch: bool,
) -> Result<EvalReport> {
    if !allow_mismatch && checkpoint_manifest_hash != dataset.manifest_hash() {
        return Err(Error::Contract(format!(
            "checkpoint was trained on a different dataset (manifest {} vs {}); pass the \
             override to evaluate anyway",
            &checkpoint_manifest_hash[..12.min(checkpoint_manifest_hash.len())],
            &dataset.manifest_hash()[..12]
        )));
    }
    let frames = match split {
        Split::Holdout => dataset.holdout_indices(config.holdout_every),
        Split::Train => dataset.train_indices(config.holdout_every),
    };
    if frames.is_empty() {
        return Err(Error::Contract(format!("split '{}' holds no frames", split.name())));
    }

    let mut views = Vec::with_capacity(frames.len());
    for &frame in &frames {
        let camera = dataset.camera(frame)?;
        let view = render_view(model, &config.render, &camera, config.seed ^ frame as u64)?;
        let rgb_truth = dataset.rgb(frame)?;
        let metrics = ViewMetrics {
            frame,
            rgb: head_metrics(&view.rgb, rgb_truth)?,
            xspec_vs_thermal: if dataset.has_thermal() {
                Some(head_metrics(&view.xspec, dataset.enhanced_thermal(frame)?)?)
            } else {
                None
            },
            xspec_vs_rgb: head_metrics(&view.xspec, rgb_truth)?,
            xspec_vs_events: if dataset.has_events() {
                Some(head_metrics(&view.xspec, &dataset.event_c_ev(frame)?)?)
            } else {
                None
            },
        };
        views.push(metrics);
    }

    let mean = SplitMeans {
        rgb: mean_of(views.iter().map(|v| v.rgb)),
        xspec_vs_thermal: mean_optional(views.iter().map(|v| v.xspec_vs_thermal)),
        xspec_vs_rgb: mean_of(views.iter().map(|v| v.xspec_vs_rgb)),
        xspec_vs_events: mean_optional(views.iter().map(|v| v.xspec_vs_events)),
    };
    Ok(EvalReport {
        split: split.name().to_string(),
        config_hash: config_hash(config),
        manifest_hash: dataset.manifest_hash().to_string(),
        weights: config.loss,
        config: config.clone(),
        views,
        mean,
    })
}

fn mean_of(metrics: impl Iterator<Item = HeadMetrics>) -> HeadMetrics {
    let items: Vec<HeadMetrics> = metrics.collect();
    let n = items.len().max(1) as f64;
    HeadMetrics {
        psnr_db: items.iter().map(|m| m.psnr_db).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
    }
}

fn mean_optional(metrics: impl Iterator<Item = Option<HeadMetrics>>) -> Option<HeadMetrics> {
    let items: Vec<HeadMetrics> = metrics.flatten().collect();
    if items.is_empty() {
        None
    } else {
        Some(mean_of(items.into_iter()))
    }
}

/// One ablation row: the modality set name, its loss weights, and the
/// holdout means it reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
    pub mean: SplitMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Fixed-width text table for terminals and logs.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "configuration    | rgb psnr | rgb ssim | xspec/th psnr | xspec/ev psnr\n",
        );
        for row in &self.rows {
            let th = row
                .mean
                .xspec_vs_thermal
                .map(|m| format!("{:13.2}", m.psnr_db))
                .unwrap_or_else(|| format!("{:>13}", "-"));
            let ev = row
                .mean
                .xspec_vs_events
                .map(|m| format!("{:13.2}", m.psnr_db))
                .unwrap_or_else(|| format!("{:>13}", "-"));
            out.push_str(&format!(
                "{:<16} | {:8.2} | {:8.3} | {} | {}\n",
                row.name, row.mean.rgb.psnr_db, row.mean.rgb.ssim, th, ev
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Train and evaluate the six modality configurations (RGB, RGB+Events,
/// RGB+Thermal, Thermal, Thermal+Events, All), writing one checkpoint and
/// report per row under `out_dir` plus the comparative summary.
pub fn ablate(
    dataset: &SceneDataset,
    base_config: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (name, modalities) in ablation_configs() {
        let config = TrainConfig {
            loss: modalities.to_loss_weights(),
            ..base_config.clone()
        };
        let ckpt_path = out_dir.join(format!("{name}.ckpt"));
        let (model, _, _) = train(dataset, &config, Some(&ckpt_path))?;
        let report = evaluate(
            &model,
            &config,
            dataset.manifest_hash(),
            dataset,
            Split::Holdout,
            false,
        )?;
        report.save(&out_dir.join(format!("{name}.report.json")))?;
        rows.push(AblationRow { name: name.to_string(), weights: config.loss, mean: report.mean });
    }
    let report = AblationReport { rows };
    report.save(&out_dir.join("ablation.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PrepConfig;
    use crate::render::Intrinsics;
    use crate::synth::{builtin_scene, generate_dataset, SynthOptions, TrajectorySpec};
    use crate::train::FieldPairSpec;

    fn tiny_setup(dir: &Path) -> (SceneDataset, TrainConfig) {
        let scene = builtin_scene("orchard").unwrap();
        let traj = TrajectorySpec {
            center: [0.0; 3],
            radius: 3.0,
            height: 0.7,
            views: 5,
            spacing_s: 0.2,
            orbit_degrees: 360.0,
        };
        let intr = Intrinsics::with_fov(16, 16, 45.0);
        generate_dataset(&scene, &traj, intr, &SynthOptions::default(), dir).unwrap();
        let ds = SceneDataset::load(dir, PrepConfig::default()).unwrap();
        let config = TrainConfig {
            iterations: 2,
            ray_batch: 16,
            render: RenderConfig { coarse_samples: 6, fine_samples: 6, ..Default::default() },
            field: FieldPairSpec {
                coarse_resolution: [6; 3],
                fine_resolution: [8; 3],
                channels: 3,
                ..Default::default()
            },
            heads: crate::field::HeadConfig { hidden: vec![6], dir_freqs: 1 },
            holdout_every: 4,
            ..TrainConfig::default()
        };
        (ds, config)
    }

    #[test]
    fn ground_truth_scores_perfectly_against_itself() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = tiny_setup(dir.path());
        let img = ds.rgb(0).unwrap();
        let m = head_metrics(img, img).unwrap();
        assert_eq!(m.psnr_db, 99.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_counts_and_mean_aggregation() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, config) = tiny_setup(dir.path());
        let (model, _, _) = train(&ds, &config, None).unwrap();
        let report =
            evaluate(&model, &config, ds.manifest_hash(), &ds, Split::Holdout, false).unwrap();
        let holdout = ds.holdout_indices(config.holdout_every);
        assert_eq!(report.views.len(), holdout.len());
        let hand_mean =
            report.views.iter().map(|v| v.rgb.psnr_db).sum::<f64>() / report.views.len() as f64;
        assert!((report.mean.rgb.psnr_db - hand_mean).abs() < 1e-12);
        assert!(report.views.iter().all(|v| v.xspec_vs_thermal.is_some()));
    }

    #[test]
    fn mismatched_checkpoint_needs_override() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, config) = tiny_setup(dir.path());
        let (model, _, _) = train(&ds, &config, None).unwrap();
        let err = evaluate(&model, &config, "deadbeef00000000", &ds, Split::Holdout, false);
        assert!(err.is_err());
        assert!(
            evaluate(&model, &config, "deadbeef00000000", &ds, Split::Holdout, true).is_ok()
        );
    }

    #[test]
    fn render_view_scales_with_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, config) = tiny_setup(dir.path());
        let model = SceneModel::init(&config).unwrap();
        let cam = ds.camera(0).unwrap();
        let view = render_view(&model, &config.render, &cam, 7).unwrap();
        assert_eq!(view.rgb.data.len(), 16 * 16 * 3);

        let cam2 = cam.scaled(2.0).unwrap();
        let view2 = render_view(&model, &config.render, &cam2, 7).unwrap();
        assert_eq!(view2.rgb.data.len(), 4 * view.rgb.data.len());
    }

    #[test]
    fn repeated_renders_are_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, config) = tiny_setup(dir.path());
        let model = SceneModel::init(&config).unwrap();
        let cam = ds.camera(1).unwrap();
        let a = render_view(&model, &config.render, &cam, 3).unwrap();
        let b = render_view(&model, &config.render, &cam, 3).unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.xspec.data, b.xspec.data);
    }
}
