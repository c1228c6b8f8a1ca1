//! Dataset manifest format and the validated loader.
//!
//! A dataset directory holds `manifest.json`, per-frame RGB PNGs, raw 16-bit
//! thermal PNGs, an event binary and optionally the generating scene
//! description. The loader validates poses and file presence up front,
//! converts foreign camera conventions to the renderer's native one, and
//! decodes images lazily with per-frame caches.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::img::FloatImage;
use crate::render::{CameraModel, Intrinsics, Pose};
use crate::sensors::{accumulate_events, EventFrame, EventStream, ThermalImage};

pub const MANIFEST_VERSION: u32 = 1;

/// Native convention: right-handed, camera looks along `-z`, `y` up.
pub const CONVENTION_NATIVE: &str = "rh-neg-z-y-up";
/// OpenCV-style convention: `+z` forward, `y` down; converted on load.
pub const CONVENTION_OPENCV: &str = "rh-pos-z-y-down";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub time_s: f64,
    /// Relative path of the 8-bit RGB PNG.
    pub rgb: String,
    /// Relative path of the raw 16-bit thermal PNG, when captured.
    pub thermal_raw: Option<String>,
    /// 4x4 camera-to-world matrix, row-major.
    pub pose: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub convention: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameRecord>,
    /// Relative path of the event binary, when captured.
    pub events: Option<String>,
    /// Event accumulation window; frame `k` pairs with window
    /// `[time_k, time_k + window)`.
    pub event_window_s: f64,
    /// Relative path of the generating scene description, when synthetic.
    pub scene: Option<String>,
    pub note: Option<String>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Preprocessing knobs applied on ingest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    /// Thermal enhancement grid cells per axis.
    pub thermal_grid: usize,
    /// Thermal enhancement smoothing rounds.
    pub thermal_smoothing: usize,
    /// Event-frame normalization clip (events).
    pub event_clip: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { thermal_grid: 8, thermal_smoothing: 3, event_clip: 5.0 }
    }
}

type Cached<T> = OnceLock<std::result::Result<T, String>>;

/// A loaded, validated multi-modal dataset.
#[derive(Debug)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub prep: PrepConfig,
    /// Non-fatal observations from loading (missing optional modalities).
    pub warnings: Vec<String>,
    /// Poses converted to the native convention.
    poses: Vec<Pose>,
    manifest_hash: String,
    events: Option<EventStream>,
    rgb_cache: Vec<Cached<FloatImage>>,
    thermal_cache: Vec<Cached<FloatImage>>,
    event_frames: Cached<Vec<EventFrame>>,
}

impl SceneDataset {
    /// Load and validate `root/manifest.json` and every referenced file.
    pub fn load(root: &Path, prep: PrepConfig) -> Result<SceneDataset> {
        let manifest_path = root.join("manifest.json");
        let raw = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let manifest_hash = hex_digest(&raw);

        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        if manifest.frames.is_empty() {
            return Err(Error::Dataset("manifest lists no frames".into()));
        }
        for w in manifest.frames.windows(2) {
            if w[1].time_s <= w[0].time_s {
                return Err(Error::Dataset(format!(
                    "frame times must be strictly increasing ({} then {})",
                    w[0].time_s, w[1].time_s
                )));
            }
        }
        if manifest.event_window_s <= 0.0 {
            return Err(Error::Dataset("event window must be positive".into()));
        }

        let mut warnings = Vec::new();
        let mut poses = Vec::with_capacity(manifest.frames.len());
        for frame in &manifest.frames {
            let pose = Pose::from_flat_row_major(&frame.pose)
                .map_err(|e| Error::Dataset(format!("frame {}: {e}", frame.index)))?;
            poses.push(convert_pose(&manifest.convention, pose)?);

            let rgb_path = root.join(&frame.rgb);
            if !rgb_path.is_file() {
                return Err(Error::Dataset(format!(
                    "frame {}: missing rgb image {}",
                    frame.index,
                    rgb_path.display()
                )));
            }
            match &frame.thermal_raw {
                Some(rel) if !root.join(rel).is_file() => {
                    return Err(Error::Dataset(format!(
                        "frame {}: missing thermal image {}",
                        frame.index,
                        root.join(rel).display()
                    )));
                }
                Some(_) => {}
                None => warnings.push(format!("frame {} has no thermal image", frame.index)),
            }
        }

        let events = match &manifest.events {
            Some(rel) => {
                let stream = EventStream::load(&root.join(rel))?;
                let i = &manifest.intrinsics;
                if stream.width as u32 != i.width || stream.height as u32 != i.height {
                    return Err(Error::Dataset(format!(
                        "event resolution {}x{} does not match images {}x{}",
                        stream.width, stream.height, i.width, i.height
                    )));
                }
                Some(stream)
            }
            None => {
                warnings.push("dataset has no event stream".into());
                None
            }
        };

        let n = manifest.frames.len();
        Ok(SceneDataset {
            root: root.to_path_buf(),
            manifest,
            prep,
            warnings,
            poses,
            manifest_hash,
            events,
            rgb_cache: (0..n).map(|_| OnceLock::new()).collect(),
            thermal_cache: (0..n).map(|_| OnceLock::new()).collect(),
            event_frames: OnceLock::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn has_thermal(&self) -> bool {
        self.manifest.frames.iter().all(|f| f.thermal_raw.is_some())
    }

    pub fn has_events(&self) -> bool {
        self.events.is_some()
    }

    /// Hex SHA-256 of the manifest file bytes; embedded in checkpoints and
    /// reports for provenance.
    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn camera(&self, frame: usize) -> Result<CameraModel> {
        self.check_frame(frame)?;
        self.manifest.intrinsics.camera(self.poses[frame])
    }

    pub fn pose(&self, frame: usize) -> Result<Pose> {
        self.check_frame(frame)?;
        Ok(self.poses[frame])
    }

    pub fn time_s(&self, frame: usize) -> Result<f64> {
        self.check_frame(frame)?;
        Ok(self.manifest.frames[frame].time_s)
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frame_count() {
            return Err(Error::Dataset(format!(
                "frame {frame} out of range ({} frames)",
                self.frame_count()
            )));
        }
        Ok(())
    }

    /// Ground-truth RGB in `[0, 1]`, decoded on first access.
    pub fn rgb(&self, frame: usize) -> Result<&FloatImage> {
        self.check_frame(frame)?;
        let path = self.root.join(&self.manifest.frames[frame].rgb);
        cached(&self.rgb_cache[frame], || FloatImage::load_png8(&path))
    }

    /// Enhanced thermal ground truth in `[0, 1]`, replicated to three
    /// channels; `None`-thermal frames error.
    pub fn enhanced_thermal(&self, frame: usize) -> Result<&FloatImage> {
        self.check_frame(frame)?;
        let rel = self.manifest.frames[frame]
            .thermal_raw
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("frame {frame} has no thermal image")))?;
        let path = self.root.join(rel);
        let prep = self.prep;
        cached(&self.thermal_cache[frame], || {
            let (w, h, counts) = crate::img::load_gray16(&path)?;
            let thermal = ThermalImage::new(w, h, counts)?;
            thermal.enhanced_float(prep.thermal_grid, prep.thermal_smoothing)
        })
    }

    /// Raw event frames, one per manifest frame, each covering
    /// `[time_k, time_k + window)`.
    pub fn event_frames(&self) -> Result<&Vec<EventFrame>> {
        let stream = self
            .events
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has no event stream".into()))?;
        let times: Vec<f64> = self.manifest.frames.iter().map(|f| f.time_s).collect();
        let window = self.manifest.event_window_s;
        cached(&self.event_frames, || accumulate_events(stream, &times, window))
    }

    /// Normalized event ground truth for one frame, in `[0, 1]` over three
    /// channels with 0.5 meaning no activity.
    pub fn event_c_ev(&self, frame: usize) -> Result<FloatImage> {
        self.check_frame(frame)?;
        let frames = self.event_frames()?;
        frames[frame].normalize(self.prep.event_clip)
    }

    /// Frame indices reserved for evaluation: every `holdout_every`-th frame.
    pub fn holdout_indices(&self, holdout_every: usize) -> Vec<usize> {
        if holdout_every == 0 {
            return Vec::new();
        }
        (0..self.frame_count()).filter(|i| i % holdout_every == 0).collect()
    }

    pub fn train_indices(&self, holdout_every: usize) -> Vec<usize> {
        if holdout_every == 0 {
            return (0..self.frame_count()).collect();
        }
        (0..self.frame_count()).filter(|i| i % holdout_every != 0).collect()
    }

    /// The generating scene description, when present.
    pub fn scene(&self) -> Result<Option<crate::synth::SyntheticScene>> {
        match &self.manifest.scene {
            Some(rel) => Ok(Some(crate::synth::SyntheticScene::load(&self.root.join(rel))?)),
            None => Ok(None),
        }
    }
}

fn cached<T>(slot: &Cached<T>, load: impl FnOnce() -> Result<T>) -> Result<&T> {
    slot.get_or_init(|| load().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::Dataset(e.clone()))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of an arbitrary serializable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    hex_digest(&serde_json::to_vec(value).expect("config serializes"))
}

fn convert_pose(convention: &str, pose: Pose) -> Result<Pose> {
    match convention {
        CONVENTION_NATIVE => Ok(pose),
        CONVENTION_OPENCV => {
            // flip the y and z camera axes: R' = R diag(1, -1, -1)
            let m = pose.matrix();
            let mut out = *m;
            for r in 0..3 {
                out[r][1] = -m[r][1];
                out[r][2] = -m[r][2];
            }
            Pose::from_matrix(out)
        }
        other => Err(Error::Dataset(format!("unknown camera convention '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{builtin_scene, generate_dataset, layout, SynthOptions, TrajectorySpec};

    fn tiny_dataset(dir: &Path) -> Manifest {
        let scene = builtin_scene("nested").unwrap();
        let traj = TrajectorySpec {
            center: [0.0; 3],
            radius: 3.0,
            height: 0.8,
            views: 4,
            spacing_s: 0.2,
            orbit_degrees: 360.0,
        };
        let intr = Intrinsics::with_fov(16, 12, 50.0);
        generate_dataset(&scene, &traj, intr, &SynthOptions::default(), dir).unwrap()
    }

    #[test]
    fn generated_dataset_loads_without_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        assert_eq!(manifest.frames.len(), 4);
        assert!(manifest
            .frames
            .windows(2)
            .all(|w| w[1].time_s > w[0].time_s));

        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        assert!(ds.warnings.is_empty(), "{:?}", ds.warnings);
        assert!(ds.has_thermal() && ds.has_events());
        assert_eq!(ds.rgb(0).unwrap().channels, 3);
        assert_eq!(ds.enhanced_thermal(1).unwrap().channels, 3);
        assert_eq!(ds.event_frames().unwrap().len(), 4);
        let c_ev = ds.event_c_ev(2).unwrap();
        assert!(c_ev.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn missing_image_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        std::fs::remove_file(dir.path().join(layout::rgb(2))).unwrap();
        let err = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap_err();
        assert!(err.to_string().contains("002.png"), "{err}");
    }

    #[test]
    fn improper_pose_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = tiny_dataset(dir.path());
        // reflection: determinant -1
        manifest.frames[1].pose[0] = -manifest.frames[1].pose[0];
        manifest.frames[1].pose[4] = -manifest.frames[1].pose[4];
        manifest.frames[1].pose[8] = -manifest.frames[1].pose[8];
        manifest.save(&dir.path().join(layout::MANIFEST)).unwrap();
        let err = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn opencv_convention_converts_to_native() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = tiny_dataset(dir.path());
        let native = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let native_pose = native.pose(0).unwrap();

        // rewrite the manifest in the foreign convention
        manifest.convention = CONVENTION_OPENCV.to_string();
        for frame in &mut manifest.frames {
            let m = Pose::from_flat_row_major(&frame.pose).unwrap();
            let mm = m.matrix();
            let mut flipped = *mm;
            for r in 0..3 {
                flipped[r][1] = -mm[r][1];
                flipped[r][2] = -mm[r][2];
            }
            frame.pose = Pose::from_matrix(flipped).unwrap().flat_row_major().to_vec();
        }
        manifest.save(&dir.path().join(layout::MANIFEST)).unwrap();
        let converted = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        assert_eq!(converted.pose(0).unwrap(), native_pose);
    }

    #[test]
    fn holdout_split_every_eighth() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let ds = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        assert_eq!(ds.holdout_indices(8), vec![0]);
        assert_eq!(ds.train_indices(8), vec![1, 2, 3]);
        assert_eq!(ds.holdout_indices(2), vec![0, 2]);
    }

    #[test]
    fn manifest_hash_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let a = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        let b = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        assert_eq!(a.manifest_hash(), b.manifest_hash());

        let mut manifest = Manifest::load(&dir.path().join(layout::MANIFEST)).unwrap();
        manifest.note = Some("tweak".into());
        manifest.save(&dir.path().join(layout::MANIFEST)).unwrap();
        let c = SceneDataset::load(dir.path(), PrepConfig::default()).unwrap();
        assert_ne!(a.manifest_hash(), c.manifest_hash());
    }
}
