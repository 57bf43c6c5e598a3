//! "BADM" demonstration files, train/validation splits and mini-batches.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic          4 bytes "BADM"
//! version        u32     1
//! task           u32     0 = picktwo, 1 = pushbox
//! height, width  u32, u32
//! episode count  u32     E
//! creation seed  u64
//! step counts    E × u32
//! episode seeds  E × u64
//! records, episode by episode, step by step:
//!   step u32, gaze 2×f32, left 10×f32, right 10×f32, action 14×f32,
//!   grip flags 2×u8, image 3×H×W u8 (channel-major RGB)
//! ```

use std::path::Path;

use rand::seq::SliceRandom;

use crate::diffcore::{derive_seed, seeded, Tensor};
use crate::error::{Error, Result};
use crate::simenv::TaskKind;

pub const DATASET_MAGIC: &[u8; 4] = b"BADM";
pub const DATASET_VERSION: u32 = 1;
const HEADER_FIXED: usize = 4 + 4 * 5 + 8;
const RECORD_FIXED: usize = 4 + 4 * (2 + 10 + 10 + 14) + 2;
const UNIT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub step: u32,
    /// `3 × H × W` RGB bytes.
    pub image: Vec<u8>,
    pub gaze: [f64; 2],
    pub left: [f64; 10],
    pub right: [f64; 10],
    pub action: [f64; 14],
    pub grip: [u8; 2],
}

impl EpisodeStep {
    /// The 22-d state `[gaze, left, right]`.
    pub fn state(&self) -> [f64; 22] {
        let mut s = [0.0; 22];
        s[..2].copy_from_slice(&self.gaze);
        s[2..12].copy_from_slice(&self.left);
        s[12..].copy_from_slice(&self.right);
        s
    }

    /// Gripper angles (radians) of both arms.
    pub fn grippers(&self) -> [f64; 2] {
        [self.left[9], self.right[9]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Seed that reproduces the episode's initial world.
    pub seed: u64,
    pub steps: Vec<EpisodeStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

/// RGB bytes → `[3, H, W]` tensor in [0, 1].
pub fn image_tensor(bytes: &[u8], height: usize, width: usize) -> Result<Tensor> {
    if bytes.len() != 3 * height * width {
        return Err(Error::Dimension(format!(
            "{} image bytes for {height}×{width}",
            bytes.len()
        )));
    }
    Tensor::new(&[3, height, width], bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

impl Dataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let img = 3 * self.height * self.width;
        let mut out = Vec::with_capacity(HEADER_FIXED + self.episodes.len() * 12 + self.num_steps() * (RECORD_FIXED + img));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.task.code(),
            self.height as u32,
            self.width as u32,
            self.episodes.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for e in &self.episodes {
            out.extend_from_slice(&(e.steps.len() as u32).to_le_bytes());
        }
        for e in &self.episodes {
            out.extend_from_slice(&e.seed.to_le_bytes());
        }
        for e in &self.episodes {
            for s in &e.steps {
                if s.image.len() != img {
                    return Err(Error::Dimension(format!(
                        "step {} image has {} bytes, expected {img}",
                        s.step,
                        s.image.len()
                    )));
                }
                out.extend_from_slice(&s.step.to_le_bytes());
                for v in s.gaze.iter().chain(&s.left).chain(&s.right).chain(&s.action) {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                out.extend_from_slice(&s.grip);
                out.extend_from_slice(&s.image);
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a BADM dataset".into()));
        }
        if buf.len() < HEADER_FIXED {
            return Err(Error::Corruption("dataset header truncated".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let task = TaskKind::from_code(u32_at(8)).ok_or_else(|| Error::Format(format!("unknown task code {}", u32_at(8))))?;
        let (height, width) = (u32_at(12) as usize, u32_at(16) as usize);
        let count = u32_at(20) as usize;
        let seed = u64_at(24);
        let img = 3u64 * height as u64 * width as u64;
        let table_end = (HEADER_FIXED as u64) + 12 * count as u64;
        if (buf.len() as u64) < table_end {
            return Err(Error::Corruption("dataset episode table truncated".into()));
        }
        let counts: Vec<usize> = (0..count).map(|i| u32_at(HEADER_FIXED + 4 * i) as usize).collect();
        let seeds: Vec<u64> = (0..count).map(|i| u64_at(HEADER_FIXED + 4 * count + 8 * i)).collect();
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = table_end + total * (RECORD_FIXED as u64 + img);
        if expected != buf.len() as u64 {
            return Err(Error::Corruption(format!(
                "dataset is {} bytes, header implies {expected}",
                buf.len()
            )));
        }
        let img = img as usize;
        let mut pos = table_end as usize;
        let mut episodes = Vec::with_capacity(count);
        for (&n, &ep_seed) in counts.iter().zip(&seeds) {
            let mut steps = Vec::with_capacity(n);
            for _ in 0..n {
                let step = u32_at(pos);
                let mut vals = [0.0f64; 36];
                for (k, v) in vals.iter_mut().enumerate() {
                    let o = pos + 4 + 4 * k;
                    *v = f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
                }
                let g = pos + 4 + 4 * 36;
                let s = EpisodeStep {
                    step,
                    gaze: vals[..2].try_into().unwrap(),
                    left: vals[2..12].try_into().unwrap(),
                    right: vals[12..22].try_into().unwrap(),
                    action: vals[22..].try_into().unwrap(),
                    grip: [buf[g], buf[g + 1]],
                    image: buf[g + 2..g + 2 + img].to_vec(),
                };
                check_unit_pairs(&s)?;
                steps.push(s);
                pos += RECORD_FIXED + img;
            }
            episodes.push(Episode { seed: ep_seed, steps });
        }
        Ok(Dataset {
            task,
            height,
            width,
            seed,
            episodes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

fn check_unit_pairs(s: &EpisodeStep) -> Result<()> {
    for arm in [&s.left, &s.right] {
        for k in [3, 5, 7] {
            let n = arm[k].hypot(arm[k + 1]);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Data(format!(
                    "step {}: angle pair at {k} has norm {n}",
                    s.step
                )));
            }
        }
    }
    Ok(())
}

/// Episode indices of a seeded train/validation partition. The training
/// part has `round(ratio · n)` episodes, kept within `[1, n − 1]`.
pub fn split_train_val(n_episodes: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_episodes < 2 {
        return Err(Error::Usage(format!("cannot split {n_episodes} episodes")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Usage(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n_train = ((ratio * n_episodes as f64).round() as usize).clamp(1, n_episodes - 1);
    let mut idx: Vec<usize> = (0..n_episodes).collect();
    idx.shuffle(&mut seeded(derive_seed(seed, 0x5B11)));
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

/// `(episode, step)` references of every step in the given episodes.
pub fn step_refs(dataset: &Dataset, episodes: &[usize]) -> Vec<(usize, usize)> {
    episodes
        .iter()
        .flat_map(|&e| (0..dataset.episodes[e].steps.len()).map(move |s| (e, s)))
        .collect()
}

/// Shuffled mini-batches of step references; the last batch may be short.
pub fn make_batches<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut v = items.to_vec();
    v.shuffle(&mut seeded(derive_seed(seed, 0xBA7C)));
    Ok(v.chunks(batch_size).map(<[T]>::to_vec).collect())
}
