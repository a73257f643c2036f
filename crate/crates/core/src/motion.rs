//! Motion sequences, the procedural dataset, and motion file I/O.
//!
//! Sequences are D channels per frame at a fixed fps. The synthetic
//! classes are band-limited oscillations with class-specific fundamental
//! frequency, amplitude, channel weighting and DC offset, plus a small
//! second harmonic and white jitter; class frequencies sit on the DFT
//! grid of 32-frame windows at 20 fps so windowed classification is
//! leakage-free. "run" oscillates at exactly twice "walk".

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::num::rng::Rng;

pub const MOTION_MAGIC: &[u8; 5] = b"FSMO1";

/// Default channel count of the synthetic data.
pub const DEFAULT_CHANNELS: usize = 16;
/// Lower edge of the supported output band; the synthetic data and all
/// latency budgets default to it.
pub const DEFAULT_FPS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    fps: f64,
    d: usize,
    /// frame-major payload, n_frames * d values
    data: Vec<f32>,
    /// optional class/prompt tag for dataset bookkeeping
    pub label: Option<String>,
}

impl MotionSequence {
    pub fn new(fps: f64, d: usize, data: Vec<f32>) -> Result<Self> {
        if !(20.0..=60.0).contains(&fps) {
            return Err(FloodError::Config(format!(
                "fps must lie in [20, 60], got {fps}"
            )));
        }
        if d == 0 {
            return Err(FloodError::Config("channel count must be >= 1".into()));
        }
        if data.len() % d != 0 {
            return Err(FloodError::Shape(format!(
                "payload of {} values is not a multiple of {d} channels",
                data.len()
            )));
        }
        Ok(MotionSequence {
            fps,
            d,
            data,
            label: None,
        })
    }

    pub fn zeros(fps: f64, d: usize, n_frames: usize) -> Result<Self> {
        MotionSequence::new(fps, d, vec![0.0; n_frames * d])
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn push_frame(&mut self, frame: &[f32]) -> Result<()> {
        if frame.len() != self.d {
            return Err(FloodError::Shape(format!(
                "frame has {} channels, sequence {}",
                frame.len(),
                self.d
            )));
        }
        self.data.extend_from_slice(frame);
        Ok(())
    }

    /// Channel c as a contiguous series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.n_frames())
            .map(|i| self.data[i * self.d + c] as f64)
            .collect()
    }

    /// Frames [lo, hi) as a new sequence.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<MotionSequence> {
        if lo > hi || hi > self.n_frames() {
            return Err(FloodError::Shape(format!(
                "slice [{lo},{hi}) of {} frames",
                self.n_frames()
            )));
        }
        MotionSequence::new(self.fps, self.d, self.data[lo * self.d..hi * self.d].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---- synthetic classes ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Walk,
    Run,
    Wave,
    Turn,
    Stand,
}

pub const ALL_CLASSES: [MotionClass; 5] = [
    MotionClass::Walk,
    MotionClass::Run,
    MotionClass::Wave,
    MotionClass::Turn,
    MotionClass::Stand,
];

impl MotionClass {
    pub fn name(&self) -> &'static str {
        match self {
            MotionClass::Walk => "walk",
            MotionClass::Run => "run",
            MotionClass::Wave => "wave",
            MotionClass::Turn => "turn",
            MotionClass::Stand => "stand",
        }
    }

    /// Fundamental frequency in Hz. All values are multiples of 0.625 so
    /// that 32-frame windows at 20 fps observe them without leakage.
    pub fn fundamental_hz(&self) -> f64 {
        match self {
            MotionClass::Walk => 1.25,
            MotionClass::Run => 2.5, // exactly 2x walk
            MotionClass::Wave => 1.875,
            MotionClass::Turn => 0.625,
            MotionClass::Stand => 0.625,
        }
    }

    pub fn amplitude(&self) -> f64 {
        match self {
            MotionClass::Walk => 1.0,
            MotionClass::Run => 1.4,
            MotionClass::Wave => 0.7,
            MotionClass::Turn => 1.1,
            MotionClass::Stand => 0.01,
        }
    }

    fn class_index(&self) -> usize {
        ALL_CLASSES.iter().position(|c| c == self).unwrap()
    }

    /// Per-channel amplitude weight; gait classes load the lower half of
    /// the channels, wave the upper half, turn alternates.
    fn channel_weight(&self, c: usize, d: usize) -> f64 {
        let lower = c < d / 2;
        match self {
            MotionClass::Walk | MotionClass::Run => {
                if lower {
                    1.0
                } else {
                    0.4
                }
            }
            MotionClass::Wave => {
                if lower {
                    0.3
                } else {
                    1.0
                }
            }
            MotionClass::Turn => {
                if c % 2 == 0 {
                    1.0
                } else {
                    0.5
                }
            }
            MotionClass::Stand => 1.0,
        }
    }

    fn dc_offset(&self, c: usize) -> f64 {
        0.3 * (0.7 * c as f64 + 1.3 * self.class_index() as f64).sin()
    }
}

impl FromStr for MotionClass {
    type Err = FloodError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_CLASSES
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| FloodError::Vocab(s.to_string()))
    }
}

/// Jitter applied to every class; also the full signal of "stand".
const JITTER_SIGMA: f64 = 0.01;

/// Deterministic-from-seed procedural motion for one class.
pub fn gen_synthetic(
    rng: &mut Rng,
    class: MotionClass,
    n_frames: usize,
    d: usize,
    fps: f64,
) -> Result<MotionSequence> {
    if n_frames < 8 {
        return Err(FloodError::Config(format!(
            "synthetic sequences need >= 8 frames, got {n_frames}"
        )));
    }
    let phase0 = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let amp_jitter = rng.uniform_in(0.9, 1.1);
    let f = class.fundamental_hz();
    let amp = class.amplitude() * amp_jitter;
    let mut data = Vec::with_capacity(n_frames * d);
    for i in 0..n_frames {
        let tau = i as f64 / fps;
        for c in 0..d {
            let phi = phase0 + c as f64 * std::f64::consts::PI / 8.0;
            let w = class.channel_weight(c, d);
            let base = (2.0 * std::f64::consts::PI * f * tau + phi).sin();
            let harm = 0.2 * (4.0 * std::f64::consts::PI * f * tau + 2.0 * phi + 1.0).sin();
            let v = class.dc_offset(c)
                + amp * w * (base + harm)
                + JITTER_SIGMA * rng.normal_f64();
            data.push(v as f32);
        }
    }
    let mut seq = MotionSequence::new(fps, d, data)?;
    seq.label = Some(class.name().to_string());
    Ok(seq)
}

/// Linear crossfade splice; crossfade 0 is plain concatenation. The blend
/// weights stay strictly inside (0,1) over the window.
pub fn splice(a: &MotionSequence, b: &MotionSequence, crossfade: usize) -> Result<MotionSequence> {
    if a.channels() != b.channels() {
        return Err(FloodError::Shape(format!(
            "splice channel mismatch: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    if a.fps() != b.fps() {
        return Err(FloodError::Config(format!(
            "splice fps mismatch: {} vs {}",
            a.fps(),
            b.fps()
        )));
    }
    if crossfade > a.n_frames() || crossfade > b.n_frames() {
        return Err(FloodError::Config(format!(
            "crossfade {crossfade} longer than an input ({} / {} frames)",
            a.n_frames(),
            b.n_frames()
        )));
    }
    let d = a.channels();
    let keep_a = a.n_frames() - crossfade;
    let mut data = Vec::with_capacity((keep_a + b.n_frames()) * d);
    data.extend_from_slice(&a.data()[..keep_a * d]);
    for i in 0..crossfade {
        let w = (i + 1) as f32 / (crossfade + 1) as f32;
        let fa = a.frame(keep_a + i);
        let fb = b.frame(i);
        for c in 0..d {
            data.push((1.0 - w) * fa[c] + w * fb[c]);
        }
    }
    data.extend_from_slice(&b.data()[crossfade * d..]);
    MotionSequence::new(a.fps(), d, data)
}

// ---- motion file I/O -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MotionHeader {
    fps: f64,
    d: usize,
    n_frames: usize,
}

/// Write magic "FSMO1", u32 LE header length, JSON header
/// {fps, d, n_frames}, then little-endian f32 payload, frame-major.
pub fn write_motion(seq: &MotionSequence, path: &Path) -> Result<()> {
    let header = MotionHeader {
        fps: seq.fps(),
        d: seq.channels(),
        n_frames: seq.n_frames(),
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| FloodError::Format(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(9 + hjson.len() + seq.data().len() * 4);
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| FloodError::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| FloodError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let bytes = fs::read(path).map_err(|e| FloodError::io(path.display().to_string(), e))?;
    if bytes.len() < 9 || &bytes[..5] != MOTION_MAGIC {
        return Err(FloodError::Format(format!(
            "{}: bad magic, want FSMO1",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + hlen {
        return Err(FloodError::Format(format!(
            "{}: truncated header, want {} bytes, have {}",
            path.display(),
            9 + hlen,
            bytes.len()
        )));
    }
    let header: MotionHeader = serde_json::from_slice(&bytes[9..9 + hlen])
        .map_err(|e| FloodError::Format(format!("{}: header decode: {e}", path.display())))?;
    let payload = &bytes[9 + hlen..];
    let want = header.n_frames * header.d * 4;
    if payload.len() != want {
        return Err(FloodError::Format(format!(
            "{}: payload wants {want} bytes ({} frames x {} channels), have {} bytes",
            path.display(),
            header.n_frames,
            header.d,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MotionSequence::new(header.fps, header.d, data)
}

// ---- prompt schedules ------------------------------------------------------

/// Time-indexed text instructions: (start motion frame, prompt), strictly
/// increasing, first entry at frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSchedule {
    entries: Vec<(usize, String)>,
}

impl PromptSchedule {
    pub fn new(entries: Vec<(usize, String)>) -> Result<Self> {
        if entries.is_empty() || entries[0].0 != 0 {
            return Err(FloodError::Config(
                "prompt schedule must cover frame 0".into(),
            ));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(FloodError::Config(format!(
                    "prompt schedule frames must increase: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(PromptSchedule { entries })
    }

    pub fn single(prompt: &str) -> Self {
        PromptSchedule {
            entries: vec![(0, prompt.to_string())],
        }
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry active at a motion frame: the latest entry with
    /// start <= frame.
    pub fn active_entry(&self, motion_frame: usize) -> usize {
        match self
            .entries
            .binary_search_by(|(start, _)| start.cmp(&motion_frame))
        {
            Ok(i) => i,
            Err(i) => i - 1, // entries[0].0 == 0, so i >= 1 here
        }
    }

    pub fn prompt_at(&self, motion_frame: usize) -> &str {
        &self.entries[self.active_entry(motion_frame)].1
    }

    /// Append an entry; a push that repeats the currently scheduled prompt
    /// coalesces into a no-op, a push at an existing start frame replaces
    /// that entry.
    pub fn push(&mut self, frame: usize, prompt: &str) -> Result<()> {
        let last = self.entries.last().expect("schedule never empty");
        if frame < last.0 {
            return Err(FloodError::Config(format!(
                "push at frame {frame} behind latest entry {}",
                last.0
            )));
        }
        if last.1 == prompt {
            return Ok(());
        }
        if frame == last.0 {
            self.entries.last_mut().unwrap().1 = prompt.to_string();
        } else {
            self.entries.push((frame, prompt.to_string()));
        }
        Ok(())
    }
}

/// Parse a JSON-lines file of {"frame": int, "prompt": string} records.
pub fn read_prompt_schedule(path: &Path) -> Result<PromptSchedule> {
    #[derive(Deserialize)]
    struct Line {
        frame: usize,
        prompt: String,
    }
    let text = fs::read_to_string(path).map_err(|e| FloodError::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line)
            .map_err(|e| FloodError::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        entries.push((rec.frame, rec.prompt));
    }
    PromptSchedule::new(entries)
}

pub fn write_prompt_schedule(schedule: &PromptSchedule, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (frame, prompt) in schedule.entries() {
        text.push_str(&format!(
            "{}\n",
            serde_json::json!({"frame": frame, "prompt": prompt})
        ));
    }
    fs::write(path, text).map_err(|e| FloodError::io(path.display().to_string(), e))
}
