//! Sensor front-ends: event-stream accumulation into frame-aligned event
//! frames, thermal 8-bit enhancement with spatially varying min/max fields,
//! and a contrast-threshold event synthesizer for generating ground truth on
//! synthetic scenes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::FloatImage;

/// One asynchronous brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    /// Microseconds.
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    /// `+1` or `-1`.
    pub polarity: i8,
}

/// Time-ordered event records over a fixed sensor resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub records: Vec<EventRecord>,
}

const EVENT_MAGIC: &[u8; 4] = b"EVT0";
const EVENT_VERSION: u32 = 1;

impl EventStream {
    pub fn new(width: u16, height: u16) -> Self {
        EventStream { width, height, records: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = 0u64;
        for (i, r) in self.records.iter().enumerate() {
            if r.t_us < last {
                return Err(Error::Contract(format!(
                    "event {i}: timestamp {} precedes {}",
                    r.t_us, last
                )));
            }
            last = r.t_us;
            if r.x >= self.width || r.y >= self.height {
                return Err(Error::Contract(format!(
                    "event {i}: pixel ({}, {}) outside {}x{}",
                    r.x, r.y, self.width, self.height
                )));
            }
            if r.polarity != 1 && r.polarity != -1 {
                return Err(Error::Contract(format!("event {i}: polarity {}", r.polarity)));
            }
        }
        Ok(())
    }

    /// Little-endian binary layout: 16-byte header (magic `EVT0`, version
    /// u32, width u16, height u16, record count u32) followed by 16-byte
    /// records (t u64, x u16, y u16, polarity i8, 3 bytes padding).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.records.len() * 16);
        out.extend_from_slice(EVENT_MAGIC);
        out.extend_from_slice(&EVENT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.t_us.to_le_bytes());
            out.extend_from_slice(&r.x.to_le_bytes());
            out.extend_from_slice(&r.y.to_le_bytes());
            out.push(r.polarity as u8);
            out.extend_from_slice(&[0u8; 3]);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EventStream> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != EVENT_MAGIC {
            return Err(Error::format(path, "not an event stream file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EVENT_VERSION {
            return Err(Error::format(path, format!("unsupported event format version {version}")));
        }
        let width = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
        let height = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + count * 16 {
            return Err(Error::format(path, "event record count does not match file size"));
        }
        let mut records = Vec::with_capacity(count);
        for chunk in bytes[16..].chunks_exact(16) {
            records.push(EventRecord {
                t_us: u64::from_le_bytes(chunk[..8].try_into().unwrap()),
                x: u16::from_le_bytes(chunk[8..10].try_into().unwrap()),
                y: u16::from_le_bytes(chunk[10..12].try_into().unwrap()),
                polarity: chunk[12] as i8,
            });
        }
        let stream = EventStream { width, height, records };
        stream.validate()?;
        Ok(stream)
    }
}

/// Signed per-pixel polarity accumulation over one time window.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<i32>,
    /// Window `[t_start, t_end)` in seconds.
    pub t_start: f64,
    pub t_end: f64,
}

impl EventFrame {
    /// Map signed counts to `[0, 1]` with zero activity at exactly 0.5:
    /// `0.5 + 0.5 * clamp(acc, -clip, clip) / clip`, replicated to three
    /// channels.
    pub fn normalize(&self, clip: f64) -> Result<FloatImage> {
        if clip <= 0.0 {
            return Err(Error::Contract("event clip must be positive".into()));
        }
        let mut img = FloatImage::new(self.width, self.height, 1);
        for (o, &c) in img.data.iter_mut().zip(&self.counts) {
            *o = 0.5 + 0.5 * (c as f64).clamp(-clip, clip) / clip;
        }
        Ok(img.replicate_3())
    }
}

/// Accumulate signed polarities into one frame per window `[t_k, t_k + window)`
/// (half-open; an event exactly at `t_k` belongs to window `k`). Events
/// outside every window are dropped. Overlapping windows are permitted but
/// logged as a warning.
pub fn accumulate_events(
    stream: &EventStream,
    frame_times: &[f64],
    window: f64,
) -> Result<Vec<EventFrame>> {
    if window <= 0.0 {
        return Err(Error::Contract("window length must be positive".into()));
    }
    if frame_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("frame times must be sorted".into()));
    }
    stream.validate()?;
    if frame_times.windows(2).any(|w| w[1] - w[0] < window) {
        log::warn!("event windows overlap: spacing below window length {window}");
    }

    let (w, h) = (stream.width as usize, stream.height as usize);
    let ts_us: Vec<u64> = stream.records.iter().map(|r| r.t_us).collect();
    let mut frames = Vec::with_capacity(frame_times.len());
    for &t0 in frame_times {
        let start_us = seconds_to_us(t0);
        let end_us = seconds_to_us(t0 + window);
        let lo = ts_us.partition_point(|&t| t < start_us);
        let hi = ts_us.partition_point(|&t| t < end_us);
        let mut counts = vec![0i32; w * h];
        for r in &stream.records[lo..hi] {
            counts[r.y as usize * w + r.x as usize] += r.polarity as i32;
        }
        frames.push(EventFrame { width: w, height: h, counts, t_start: t0, t_end: t0 + window });
    }
    Ok(frames)
}

fn seconds_to_us(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

/// Raw radiometric thermal image (16-bit counts).
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<u16>,
}

impl ThermalImage {
    pub fn new(width: usize, height: usize, raw: Vec<u16>) -> Result<Self> {
        if raw.len() != width * height || raw.is_empty() {
            return Err(Error::Contract("thermal image must be non-empty and match dimensions".into()));
        }
        Ok(ThermalImage { width, height, raw })
    }

    /// Rescale to 8 bits with locally adaptive range:
    ///
    /// 1. per-cell min and max over a `grid x grid` partition (edge cells
    ///    absorb the remainder),
    /// 2. `smoothing_rounds` rounds of 3x3 in-bounds box averaging on both
    ///    fields,
    /// 3. enforce `max >= min + 1` count per cell,
    /// 4. bilinear upsampling of both fields to full resolution,
    /// 5. `clamp(round(255 * (raw - min) / (max - min)), 0, 255)`.
    ///
    /// Pixels whose upsampled pre-enforcement range is exactly zero map to
    /// mid-gray 128. `grid = 1, smoothing_rounds = 0` degenerates to exact
    /// global min-max rescaling.
    pub fn enhance(&self, grid: usize, smoothing_rounds: usize) -> Result<Vec<u8>> {
        if grid == 0 {
            return Err(Error::Contract("grid must be >= 1".into()));
        }
        let (w, h) = (self.width, self.height);
        // cell size from the requested grid; shrink the cell count instead of
        // leaving empty cells when grid exceeds the image
        let cell_w = w.div_ceil(grid);
        let cell_h = h.div_ceil(grid);
        let gx = w.div_ceil(cell_w);
        let gy = h.div_ceil(cell_h);

        let mut min_field = vec![f64::INFINITY; gx * gy];
        let mut max_field = vec![f64::NEG_INFINITY; gx * gy];
        for y in 0..h {
            for x in 0..w {
                let c = (y / cell_h) * gx + x / cell_w;
                let v = self.raw[y * w + x] as f64;
                min_field[c] = min_field[c].min(v);
                max_field[c] = max_field[c].max(v);
            }
        }

        for _ in 0..smoothing_rounds {
            min_field = box_smooth_3x3(&min_field, gx, gy);
            max_field = box_smooth_3x3(&max_field, gx, gy);
        }

        let max_enforced: Vec<f64> =
            max_field.iter().zip(&min_field).map(|(&mx, &mn)| mx.max(mn + 1.0)).collect();

        let mut out = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1, fx) = upsample_stencil(x, w, gx);
                let (y0, y1, fy) = upsample_stencil(y, h, gy);
                let bilerp = |f: &[f64]| -> f64 {
                    let a = f[y0 * gx + x0] * (1.0 - fx) + f[y0 * gx + x1] * fx;
                    let b = f[y1 * gx + x0] * (1.0 - fx) + f[y1 * gx + x1] * fx;
                    a * (1.0 - fy) + b * fy
                };
                let mn = bilerp(&min_field);
                let range_raw = bilerp(&max_field) - mn;
                out[y * w + x] = if range_raw <= 0.0 {
                    128
                } else {
                    let mx = bilerp(&max_enforced);
                    let v = 255.0 * (self.raw[y * w + x] as f64 - mn) / (mx - mn);
                    v.round().clamp(0.0, 255.0) as u8
                };
            }
        }
        Ok(out)
    }

    /// Enhanced image as `[0, 1]` floats replicated to three channels, the
    /// form the cross-spectral loss consumes.
    pub fn enhanced_float(&self, grid: usize, smoothing_rounds: usize) -> Result<FloatImage> {
        let bytes = self.enhance(grid, smoothing_rounds)?;
        let mut img = FloatImage::new(self.width, self.height, 1);
        for (o, &b) in img.data.iter_mut().zip(&bytes) {
            *o = b as f64 / 255.0;
        }
        Ok(img.replicate_3())
    }
}

/// Average over the in-bounds 3x3 neighborhood of every cell.
fn box_smooth_3x3(field: &[f64], gx: usize, gy: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for y in 0..gy {
        for x in 0..gx {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < gx && (ny as usize) < gy {
                        sum += field[ny as usize * gx + nx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * gx + x] = sum / n;
        }
    }
    out
}

/// Bracketing cells and fraction for upsampling a `cells`-wide field to a
/// `dim`-wide image, cell centers spaced uniformly across the image.
fn upsample_stencil(p: usize, dim: usize, cells: usize) -> (usize, usize, f64) {
    if cells == 1 {
        return (0, 0, 0.0);
    }
    let g = (p as f64 + 0.5) / dim as f64 * cells as f64 - 0.5;
    if g <= 0.0 {
        (0, 0, 0.0)
    } else if g >= (cells - 1) as f64 {
        (cells - 1, cells - 1, 0.0)
    } else {
        let i0 = g.floor() as usize;
        (i0, i0 + 1, g - i0 as f64)
    }
}

/// Emit events from a luminance video via the standard contrast-threshold
/// mechanism: per pixel, the log-intensity reference steps by `threshold`
/// whenever the linearly interpolated log-intensity crosses it, one event per
/// step, timestamps interpolated inside the frame gap. Luminance is floored
/// at 1e-4 before the log.
pub fn synthesize_events(
    frames: &[FloatImage],
    times_s: &[f64],
    threshold: f64,
) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::Contract("event synthesis needs at least two frames".into()));
    }
    if frames.len() != times_s.len() {
        return Err(Error::Contract("one timestamp per frame required".into()));
    }
    if threshold <= 0.0 {
        return Err(Error::Contract("contrast threshold must be positive".into()));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    for f in frames {
        if f.width != w || f.height != h || f.channels != 1 {
            return Err(Error::Contract("luminance frames must share a single-channel shape".into()));
        }
    }

    let log_lum = |v: f64| v.max(1e-4).ln();
    let mut records = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut reference = log_lum(frames[0].data[idx]);
            for k in 1..frames.len() {
                let prev = log_lum(frames[k - 1].data[idx]);
                let cur = log_lum(frames[k].data[idx]);
                let (t0, t1) = (times_s[k - 1], times_s[k]);
                loop {
                    let (level, polarity) = if cur - reference >= threshold {
                        (reference + threshold, 1i8)
                    } else if reference - cur >= threshold {
                        (reference - threshold, -1i8)
                    } else {
                        break;
                    };
                    let frac = if (cur - prev).abs() > 1e-300 {
                        ((level - prev) / (cur - prev)).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    records.push(EventRecord {
                        t_us: seconds_to_us(t0 + frac * (t1 - t0)),
                        x: x as u16,
                        y: y as u16,
                        polarity,
                    });
                    reference = level;
                }
            }
        }
    }
    records.sort_by_key(|r| (r.t_us, r.y, r.x));
    let stream = EventStream { width: w as u16, height: h as u16, records };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t_s: f64, x: u16, y: u16, p: i8) -> EventRecord {
        EventRecord { t_us: (t_s * 1e6).round() as u64, x, y, polarity: p }
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        let stream = EventStream::new(4, 4);
        let frames = accumulate_events(&stream, &[0.0, 0.5], 0.5).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.counts.iter().all(|&c| c == 0)));
    }

    #[test]
    fn accumulation_matches_per_event_loop() {
        let mut stream = EventStream::new(2, 2);
        stream.records =
            vec![ev(0.2, 1, 0, 1), ev(0.3, 1, 0, 1), ev(0.7, 0, 0, -1)];
        let frames = accumulate_events(&stream, &[0.0, 0.5], 0.5).unwrap();
        assert_eq!(frames[0].counts, vec![0, 2, 0, 0]);
        assert_eq!(frames[1].counts, vec![-1, 0, 0, 0]);
    }

    #[test]
    fn boundary_event_belongs_to_the_starting_window() {
        let mut stream = EventStream::new(1, 1);
        stream.records = vec![ev(0.5, 0, 0, 1)];
        let frames = accumulate_events(&stream, &[0.0, 0.5], 0.5).unwrap();
        assert_eq!(frames[0].counts, vec![0]);
        assert_eq!(frames[1].counts, vec![1]);
    }

    #[test]
    fn unsorted_stream_rejected() {
        let mut stream = EventStream::new(1, 1);
        stream.records = vec![ev(0.5, 0, 0, 1), ev(0.2, 0, 0, 1)];
        assert!(accumulate_events(&stream, &[0.0], 1.0).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        let frame = EventFrame {
            width: 4,
            height: 1,
            counts: vec![0, 5, -5, 2],
            t_start: 0.0,
            t_end: 0.1,
        };
        let img = frame.normalize(5.0).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixel(0, 0), &[0.5, 0.5, 0.5]);
        assert_eq!(img.pixel(1, 0)[0], 1.0);
        assert_eq!(img.pixel(2, 0)[0], 0.0);
        // acc = clip / 2 -> 0.75 (here 2.5 would be clip/2; use clip 4)
        let img = frame.normalize(4.0).unwrap();
        assert_eq!(img.pixel(3, 0)[0], 0.75);
    }

    #[test]
    fn constant_thermal_image_maps_to_mid_gray() {
        let t = ThermalImage::new(5, 4, vec![1234; 20]).unwrap();
        for (g, k) in [(1, 0), (2, 0), (8, 3)] {
            let e = t.enhance(g, k).unwrap();
            assert!(e.iter().all(|&v| v == 128), "grid {g} rounds {k}");
        }
    }

    #[test]
    fn global_rescale_hits_endpoints() {
        let t = ThermalImage::new(2, 1, vec![100, 300]).unwrap();
        assert_eq!(t.enhance(1, 0).unwrap(), vec![0, 255]);
    }

    #[test]
    fn global_rescale_is_monotone() {
        let raw: Vec<u16> = vec![9000, 100, 700, 700, 65535, 3, 500, 65000, 12];
        let t = ThermalImage::new(3, 3, raw.clone()).unwrap();
        let e = t.enhance(1, 0).unwrap();
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] <= raw[j] {
                    assert!(e[i] <= e[j], "{} -> {}, {} -> {}", raw[i], e[i], raw[j], e[j]);
                }
            }
        }
    }

    #[test]
    fn enhancement_idempotent_on_full_range_input() {
        let raw: Vec<u16> = vec![0, 17, 200, 255, 34, 99, 128, 254, 1];
        let t = ThermalImage::new(3, 3, raw.clone()).unwrap();
        let e = t.enhance(1, 0).unwrap();
        for (a, b) in raw.iter().zip(&e) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    /// Hand-evaluated oracle for the full grid pipeline on a 4x4 image with
    /// 2x2 cells: steps (1)-(5) re-derived with straight-line arithmetic.
    #[test]
    fn grid_enhancement_matches_hand_pipeline() {
        #[rustfmt::skip]
        let raw: Vec<u16> = vec![
            1000, 1100, 2000, 2400,
            1050, 1200, 2100, 2600,
            3000, 3100, 4000, 4001,
            3050, 3300, 4000, 4001,
        ];
        let t = ThermalImage::new(4, 4, raw.clone()).unwrap();
        let got = t.enhance(2, 0).unwrap();

        // step 1: per-quadrant min/max (2x2 cells of 2x2 pixels)
        let min_f = [1000.0, 2000.0, 3000.0, 4000.0f64];
        let max_f = [1200.0, 2600.0, 3300.0, 4001.0f64];
        // step 2: no smoothing. step 3: max >= min + 1 (already true).
        // step 4: pixel centers map to grid coords (p + 0.5)/4*2 - 0.5,
        // clamped: fractions per axis are [0, 0.25, 0.75, 1] on cells (0,1).
        let coord = |p: usize| -> (usize, usize, f64) {
            match p {
                0 => (0, 0, 0.0),
                1 => (0, 1, 0.25),
                2 => (0, 1, 0.75),
                _ => (1, 1, 0.0),
            }
        };
        for y in 0..4 {
            for x in 0..4 {
                let (x0, x1, fx) = coord(x);
                let (y0, y1, fy) = coord(y);
                let lerp = |f: &[f64; 4]| {
                    let a = f[y0 * 2 + x0] * (1.0 - fx) + f[y0 * 2 + x1] * fx;
                    let b = f[y1 * 2 + x0] * (1.0 - fx) + f[y1 * 2 + x1] * fx;
                    a * (1.0 - fy) + b * fy
                };
                let (mn, mx) = (lerp(&min_f), lerp(&max_f));
                // step 5
                let expect =
                    (255.0 * (raw[y * 4 + x] as f64 - mn) / (mx - mn)).round().clamp(0.0, 255.0)
                        as u8;
                assert_eq!(got[y * 4 + x], expect, "pixel ({x}, {y})");
            }
        }
    }

    fn lum_frame(values: &[f64], w: usize, h: usize) -> FloatImage {
        FloatImage { width: w, height: h, channels: 1, data: values.to_vec() }
    }

    #[test]
    fn static_video_emits_no_events() {
        let f = lum_frame(&[0.5, 0.2, 0.9, 0.1], 2, 2);
        let s = synthesize_events(&[f.clone(), f.clone(), f], &[0.0, 0.1, 0.2], 0.2).unwrap();
        assert!(s.records.is_empty());
    }

    #[test]
    fn double_threshold_step_emits_two_events() {
        let c = 0.25f64;
        let base = 0.1;
        let stepped = base * (2.0 * c).exp();
        let f0 = lum_frame(&[base], 1, 1);
        let f1 = lum_frame(&[stepped], 1, 1);
        let s = synthesize_events(&[f0, f1], &[0.0, 0.1], c).unwrap();
        assert_eq!(s.records.len(), 2);
        assert!(s.records.iter().all(|r| r.polarity == 1));
        assert!(s.records[0].t_us <= s.records[1].t_us);
    }

    /// Independent per-pixel scalar crossing simulator: total signed events
    /// per pixel equal the signed reference-level steps.
    fn signed_crossings(lum: &[f64], threshold: f64) -> i64 {
        let log = |v: f64| v.max(1e-4).ln();
        let mut reference = log(lum[0]);
        let mut total = 0i64;
        for &l in &lum[1..] {
            let cur = log(l);
            while cur - reference >= threshold {
                reference += threshold;
                total += 1;
            }
            while reference - cur >= threshold {
                reference -= threshold;
                total -= 1;
            }
        }
        total
    }

    #[test]
    fn synthesis_round_trips_against_scalar_simulator() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (w, h, n) = (5, 4, 12);
        let frames: Vec<FloatImage> = (0..n)
            .map(|_| {
                let vals: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
                lum_frame(&vals, w, h)
            })
            .collect();
        let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.05).collect();
        let threshold = 0.3;
        let stream = synthesize_events(&frames, &times, threshold).unwrap();

        // accumulate everything in one giant window and compare per pixel
        let frames_acc = accumulate_events(&stream, &[0.0], 10.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let lum: Vec<f64> = (0..n).map(|k| frames[k].data[y * w + x]).collect();
                let expect = signed_crossings(&lum, threshold);
                let got = frames_acc[0].counts[y * w + x] as i64;
                assert_eq!(got, expect, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn binary_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut stream = EventStream::new(7, 3);
        stream.records = vec![ev(0.01, 6, 2, 1), ev(0.02, 0, 0, -1), ev(1.5, 3, 1, 1)];
        let path = dir.path().join("e.bin");
        stream.save(&path).unwrap();
        assert_eq!(EventStream::load(&path).unwrap(), stream);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        /// Splitting a stream at any timestamp and summing per-window
        /// accumulations equals accumulating the whole stream.
        #[test]
        fn accumulation_is_linear_in_the_stream(
            seed in 0u64..500, split_t in 0.0f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut records: Vec<EventRecord> = (0..100)
                .map(|_| ev(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0..3),
                    rng.gen_range(0..3),
                    if rng.gen_bool(0.5) { 1 } else { -1 },
                ))
                .collect();
            records.sort_by_key(|r| r.t_us);
            let full = EventStream { width: 3, height: 3, records: records.clone() };
            let split_us = (split_t * 1e6) as u64;
            let first = EventStream {
                width: 3, height: 3,
                records: records.iter().copied().filter(|r| r.t_us < split_us).collect(),
            };
            let second = EventStream {
                width: 3, height: 3,
                records: records.iter().copied().filter(|r| r.t_us >= split_us).collect(),
            };
            let times = [0.0, 0.25, 0.5, 0.75];
            let a = accumulate_events(&full, &times, 0.25).unwrap();
            let b = accumulate_events(&first, &times, 0.25).unwrap();
            let c = accumulate_events(&second, &times, 0.25).unwrap();
            for k in 0..times.len() {
                for i in 0..9 {
                    prop_assert_eq!(a[k].counts[i], b[k].counts[i] + c[k].counts[i]);
                }
            }
        }

        /// Enhancement outputs stay in range and the enforced fields keep
        /// max >= min.
        #[test]
        fn enhancement_output_in_range(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
            let raw: Vec<u16> = (0..w * h).map(|_| rng.gen()).collect();
            let t = ThermalImage::new(w, h, raw).unwrap();
            let g = rng.gen_range(1..6);
            let k = rng.gen_range(0..4);
            let e = t.enhance(g, k).unwrap();
            prop_assert_eq!(e.len(), w * h);
        }
    }
}
