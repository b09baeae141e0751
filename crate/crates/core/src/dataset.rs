//! Synthetic event-camera-like spike data and its on-disk container.
//!
//! Each sample is a bar sweeping across the frame in one of `classes`
//! evenly spaced directions. Channel 0 carries ON events (pixels the bar
//! has just covered), channel 1 OFF events (pixels it has just left). Bar
//! width, speed and offset are randomized, events are dropped at random and
//! background noise is added.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 8] = b"SPIKESET";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub label: u16,
    /// `[T, C, H, W]`, each 0 or 1.
    pub spikes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeDataset {
    pub time_steps: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format { kind: "spike dataset", msg: msg.into() }
}

impl SpikeDataset {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.time_steps * self.frame_len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for s in &self.samples {
            c[s.label as usize] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sample_len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.spikes.len() != n {
                return Err(fmt_err(format!("sample {i} has {} elements, header says {n}", s.spikes.len())));
            }
            if s.label as usize >= self.classes {
                return Err(fmt_err(format!("sample {i} label {} >= {} classes", s.label, self.classes)));
            }
            if let Some(v) = s.spikes.iter().find(|&&v| v > 1) {
                return Err(fmt_err(format!("sample {i} holds non-binary value {v}")));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        for v in [VERSION as usize, self.samples.len(), self.time_steps, self.channels, self.height, self.width, self.classes] {
            let v = u32::try_from(v).map_err(|_| fmt_err("header field exceeds 32 bits"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let mut packed = vec![0u8; self.sample_len().div_ceil(8)];
        for s in &self.samples {
            packed.iter_mut().for_each(|b| *b = 0);
            for (i, &v) in s.spikes.iter().enumerate() {
                packed[i / 8] |= v << (i % 8);
            }
            w.write_all(&s.label.to_le_bytes())?;
            w.write_all(&packed)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let mut field = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| fmt_err("truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = field()?;
        if version != VERSION as usize {
            return Err(fmt_err(format!("unsupported version {version} (expected {VERSION})")));
        }
        let (count, time_steps, channels, height, width, classes) = (field()?, field()?, field()?, field()?, field()?, field()?);
        let mut ds = SpikeDataset { time_steps, channels, height, width, classes, samples: Vec::with_capacity(count.min(1 << 20)) };
        let n = ds.sample_len();
        if n == 0 || n > (1 << 28) {
            return Err(fmt_err(format!("implausible sample size {n}")));
        }
        let mut packed = vec![0u8; n.div_ceil(8)];
        for i in 0..count {
            let mut lb = [0u8; 2];
            r.read_exact(&mut lb).map_err(|_| fmt_err(format!("payload ends at sample {i} of {count}")))?;
            r.read_exact(&mut packed).map_err(|_| fmt_err(format!("payload ends at sample {i} of {count}")))?;
            let spikes = (0..n).map(|j| (packed[j / 8] >> (j % 8)) & 1).collect();
            ds.samples.push(Sample { label: u16::from_le_bytes(lb), spikes });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes after {count} samples", rest.len())));
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    /// Total over all three splits.
    pub samples: usize,
    pub time_steps: usize,
    /// 1 (merged polarity) or 2 (ON, OFF).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Per-pixel, per-step background event probability.
    pub noise: f64,
    /// Probability that a true event is lost.
    pub event_drop: f64,
    /// Bar advance per step, in pixels, drawn uniformly.
    pub speed: [f64; 2],
    /// Bar thickness, in pixels, drawn uniformly.
    pub bar_width: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 2500,
            time_steps: 10,
            channels: 2,
            height: 16,
            width: 16,
            seed: 7,
            noise: 0.01,
            event_drop: 0.1,
            speed: [1.5, 2.5],
            bar_width: [2.0, 4.0],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(invalid(format!("class count {} outside 2..=65535", self.classes)));
        }
        if self.time_steps == 0 || self.height < 2 || self.width < 2 {
            return Err(invalid(format!(
                "invalid shape T={} H={} W={}",
                self.time_steps, self.height, self.width
            )));
        }
        if !(1..=2).contains(&self.channels) {
            return Err(invalid(format!("channels must be 1 or 2, got {}", self.channels)));
        }
        if self.samples < 10 {
            return Err(invalid("need at least 10 samples for a train/val/test split"));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.noise) || !prob(self.event_drop) {
            return Err(invalid("noise and event_drop must be probabilities"));
        }
        for (name, r) in [("speed", self.speed), ("bar_width", self.bar_width)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(invalid(format!("{name} range must be positive and ordered")));
            }
        }
        Ok(())
    }

    /// Split sizes (train, val, test) in the ratio 80/10/10.
    pub fn split_sizes(&self) -> [usize; 3] {
        let val = self.samples / 10;
        let train = self.samples - 2 * val;
        [train, val, val]
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SpikeDataset,
    pub val: SpikeDataset,
    pub test: SpikeDataset,
}

fn render(cfg: &GenConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (t_n, c_n, h, w) = (cfg.time_steps, cfg.channels, cfg.height, cfg.width);
    let angle = 2.0 * PI * label as f64 / cfg.classes as f64 + rng.gen_range(-0.15..0.15);
    let (dx, dy) = (angle.cos(), angle.sin());
    let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
    let width = rng.gen_range(cfg.bar_width[0]..=cfg.bar_width[1]);
    let start = -speed * t_n as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let covered = |t: isize, y: usize, x: usize| {
        let front = start + speed * t as f64;
        let p = (x as f64 - cx) * dx + (y as f64 - cy) * dy;
        p <= front && p > front - width
    };
    let mut out = vec![0u8; t_n * c_n * h * w];
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let now = covered(t as isize, y, x);
                let before = covered(t as isize - 1, y, x);
                let events = [now && !before, before && !now];
                for (pol, &ev) in events.iter().enumerate() {
                    let c = if c_n == 1 { 0 } else { pol };
                    let kept = ev && rng.gen::<f64>() >= cfg.event_drop;
                    let noisy = rng.gen::<f64>() < cfg.noise;
                    if kept || noisy {
                        out[((t * c_n + c) * h + y) * w + x] = 1;
                    }
                }
            }
        }
    }
    out
}

fn make_split(cfg: &GenConfig, n: usize, rng: &mut ChaCha8Rng) -> SpikeDataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let samples = labels
        .into_iter()
        .map(|l| Sample { label: l as u16, spikes: render(cfg, l, rng) })
        .collect();
    SpikeDataset {
        time_steps: cfg.time_steps,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes,
        samples,
    }
}

/// Deterministic in `cfg` (including the seed).
pub fn generate(cfg: &GenConfig) -> Result<Splits> {
    cfg.validate()?;
    let [a, b, c] = cfg.split_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Splits {
        train: make_split(cfg, a, &mut rng),
        val: make_split(cfg, b, &mut rng),
        test: make_split(cfg, c, &mut rng),
    })
}
