//! Attention rollout and per-domain attention traces.
//!
//! Attention matrices are row-stochastic with rows as queries. Sequence
//! positions are `[image, gaze×2, left×10, right×10]`, so the domain of a key
//! is determined by its column.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SEQ: usize = 23;
pub const DOMAINS: [&str; 4] = ["Image", "Gaze", "Left", "Right"];
/// Column ranges `[start, end)` of each domain.
pub const DOMAIN_COLUMNS: [(usize, usize); 4] = [(0, 1), (1, 3), (3, 13), (13, 23)];
pub const TRACE_LEN: usize = 100;
/// Row-sum tolerance accepted for stored attention matrices.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Head-averaged attention matrices of one forward pass, one per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub size: usize,
    pub layers: Vec<Vec<f64>>,
}

fn check_stochastic(m: &[f64], size: usize, tol: f64) -> Result<()> {
    if m.len() != size * size {
        return Err(Error::Dimension(format!("{} entries for a {size}×{size} matrix", m.len())));
    }
    for (r, row) in m.chunks(size).enumerate() {
        if row.iter().any(|&v| !(v >= -tol)) {
            return Err(Error::Data(format!("row {r} has a negative or NaN entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Data(format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl AttentionStack {
    pub fn new(size: usize, layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Data("attention stack without layers".into()));
        }
        for l in &layers {
            check_stochastic(l, size, STOCHASTIC_TOL)?;
        }
        Ok(AttentionStack { size, layers })
    }
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `Â_L ⋯ Â_1` with `Â = norm(0.5·A + 0.5·I)` when `residual`, else the plain
/// product of the layers.
pub fn attention_rollout(stack: &AttentionStack, residual: bool) -> Result<Vec<f64>> {
    let n = stack.size;
    let mut acc: Option<Vec<f64>> = None;
    for layer in &stack.layers {
        check_stochastic(layer, n, STOCHASTIC_TOL)?;
        let mut a = layer.clone();
        if residual {
            for i in 0..n {
                let row = &mut a[i * n..(i + 1) * n];
                row.iter_mut().for_each(|v| *v *= 0.5);
                row[i] += 0.5;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        acc = Some(match acc {
            None => a,
            Some(prev) => matmul_square(&a, &prev, n),
        });
    }
    acc.ok_or_else(|| Error::Data("attention stack without layers".into()))
}

/// Attention received by each domain, summed over all query rows.
pub fn domain_attention(rollout: &[f64]) -> Result<[f64; 4]> {
    if rollout.len() != SEQ * SEQ {
        return Err(Error::Dimension(format!("rollout has {} entries", rollout.len())));
    }
    let mut w = [0.0; 4];
    for row in rollout.chunks(SEQ) {
        for (d, &(lo, hi)) in DOMAIN_COLUMNS.iter().enumerate() {
            w[d] += row[lo..hi].iter().sum::<f64>();
        }
    }
    Ok(w)
}

/// Z-score with population statistics; all zeros for a constant series.
pub fn normalize_trace(series: &[f64]) -> Vec<f64> {
    if series.is_empty() {
        return Vec::new();
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (v - mean) / sd).collect()
}

/// Position of output sample `j` on the input index axis.
fn resample_position(j: usize, in_len: usize, out_len: usize) -> f64 {
    if out_len == 1 {
        return 0.0;
    }
    j as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
}

/// Linear interpolation onto `target_len` evenly spaced points of [0, 1].
pub fn resample_trace(series: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::Usage(format!("cannot resample a series of length {}", series.len())));
    }
    if target_len < 2 {
        return Err(Error::Usage(format!("target length {target_len} is too short")));
    }
    let last = series.len() - 1;
    Ok((0..target_len)
        .map(|j| {
            if j == target_len - 1 {
                return series[last];
            }
            let pos = resample_position(j, series.len(), target_len);
            let i = (pos.floor() as usize).min(last - 1);
            let f = pos - i as f64;
            series[i] + f * (series[i + 1] - series[i])
        })
        .collect())
}

/// Per-step domain attention of one evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTrace {
    pub episode: usize,
    /// Raw W per step, domains in [`DOMAINS`] order.
    pub raw: Vec<[f64; 4]>,
    /// Per-domain z-normalized W′ per step.
    pub normalized: Vec<[f64; 4]>,
    /// First step of the second subtask (equals the length if it never starts).
    pub split: usize,
}

impl DomainTrace {
    pub fn from_stacks(episode: usize, stacks: &[AttentionStack], split: usize, residual: bool) -> Result<Self> {
        let raw = stacks
            .iter()
            .map(|s| attention_rollout(s, residual).and_then(|r| domain_attention(&r)))
            .collect::<Result<Vec<_>>>()?;
        let mut normalized = vec![[0.0; 4]; raw.len()];
        for d in 0..4 {
            let series: Vec<f64> = raw.iter().map(|w| w[d]).collect();
            for (t, v) in normalize_trace(&series).into_iter().enumerate() {
                normalized[t][d] = v;
            }
        }
        Ok(DomainTrace {
            episode,
            raw,
            normalized,
            split: split.min(stacks.len()),
        })
    }
}

/// One exported sample on the normalized time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    /// 1-based index on the resampled axis.
    pub t: usize,
    pub subtask: usize,
    pub domain: usize,
    pub w_norm: f64,
}

/// Resamples every domain of every trace to [`TRACE_LEN`] points. Episodes
/// shorter than two steps are skipped.
pub fn trace_rows(traces: &[DomainTrace]) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for tr in traces {
        let len = tr.normalized.len();
        if len < 2 {
            continue;
        }
        let per_domain: Vec<Vec<f64>> = (0..4)
            .map(|d| resample_trace(&tr.normalized.iter().map(|w| w[d]).collect::<Vec<_>>(), TRACE_LEN))
            .collect::<Result<_>>()?;
        for j in 0..TRACE_LEN {
            let pos = resample_position(j, len, TRACE_LEN);
            let subtask = usize::from(pos >= tr.split as f64);
            for (d, series) in per_domain.iter().enumerate() {
                rows.push(TraceRow {
                    episode: tr.episode,
                    t: j + 1,
                    subtask,
                    domain: d,
                    w_norm: series[j],
                });
            }
        }
    }
    Ok(rows)
}

/// Mean W′ per (subtask, domain) over the given rows; `None` where no rows fall.
pub fn summarize(rows: &[TraceRow]) -> [[Option<f64>; 4]; 2] {
    let mut sum = [[0.0; 4]; 2];
    let mut count = [[0usize; 4]; 2];
    for r in rows {
        sum[r.subtask][r.domain] += r.w_norm;
        count[r.subtask][r.domain] += 1;
    }
    let mut out = [[None; 4]; 2];
    for s in 0..2 {
        for d in 0..4 {
            if count[s][d] > 0 {
                out[s][d] = Some(sum[s][d] / count[s][d] as f64);
            }
        }
    }
    out
}

/// Sign check of the subtask attention shift: left-arm attention is higher
/// during the first subtask, right-arm attention during the second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftCheck {
    pub left_first: f64,
    pub left_second: f64,
    pub right_first: f64,
    pub right_second: f64,
}

impl ShiftCheck {
    pub fn from_summary(s: &[[Option<f64>; 4]; 2]) -> Option<Self> {
        Some(ShiftCheck {
            left_first: s[0][2]?,
            left_second: s[1][2]?,
            right_first: s[0][3]?,
            right_second: s[1][3]?,
        })
    }

    pub fn passes(&self) -> bool {
        self.left_first > self.left_second && self.right_second > self.right_first
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation keeps re-exports byte-identical
    format!("{v:?}")
}

/// Writes the detail CSV and the per-subtask summary CSV.
pub fn export_traces(
    traces: &[DomainTrace],
    subtask_names: [&str; 2],
    detail: &Path,
    summary: &Path,
) -> Result<Vec<TraceRow>> {
    let rows = trace_rows(traces)?;
    let mut text = String::from("episode,t,subtask,domain,w_norm\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.episode,
            r.t,
            subtask_names[r.subtask],
            DOMAINS[r.domain],
            fmt_f64(r.w_norm)
        );
    }
    write_file(detail, text.as_bytes())?;
    let mut text = String::from("subtask,domain,mean_w_norm\n");
    for (s, row) in summarize(&rows).iter().enumerate() {
        for (d, m) in row.iter().enumerate() {
            if let Some(m) = m {
                let _ = writeln!(text, "{},{},{}", subtask_names[s], DOMAINS[d], fmt_f64(*m));
            }
        }
    }
    write_file(summary, text.as_bytes())?;
    Ok(rows)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub const STACKS_MAGIC: &[u8; 4] = b"BATT";
pub const STACKS_VERSION: u32 = 1;

/// Attention stacks of one evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeAttention {
    pub episode: usize,
    pub split: usize,
    pub stacks: Vec<AttentionStack>,
}

/// Encodes episodes as a "BATT" file: magic, version u32, episode count u32,
/// then per episode `episode u32, split u32, steps u32, layers u32, size u32`
/// followed by `steps × layers × size²` f64 values, all little-endian.
pub fn encode_stacks(episodes: &[EpisodeAttention]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STACKS_MAGIC);
    out.extend_from_slice(&STACKS_VERSION.to_le_bytes());
    out.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    for ep in episodes {
        let (layers, size) = ep.stacks.first().map_or((0, 0), |s| (s.layers.len(), s.size));
        if ep.stacks.iter().any(|s| s.layers.len() != layers || s.size != size) {
            return Err(Error::Dimension(format!("episode {} mixes stack shapes", ep.episode)));
        }
        for v in [ep.episode, ep.split, ep.stacks.len(), layers, size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &ep.stacks {
            for l in &s.layers {
                for v in l {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_stacks(buf: &[u8]) -> Result<Vec<EpisodeAttention>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if buf.len() - pos < n {
            return Err(Error::Corruption("attention file truncated".into()));
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(4).ok() != Some(STACKS_MAGIC.as_slice()) {
        return Err(Error::Format("not a BATT attention file".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = u32_of(take(4)?);
    if version != STACKS_VERSION as usize {
        return Err(Error::Format(format!("unsupported attention file version {version}")));
    }
    let count = u32_of(take(4)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let mut h = [0usize; 5];
        for v in &mut h {
            *v = u32_of(take(4)?);
        }
        let [episode, split, steps, layers, size] = h;
        let per = size.checked_mul(size).ok_or_else(|| Error::Corruption("bad stack size".into()))?;
        let total = steps
            .checked_mul(layers)
            .and_then(|v| v.checked_mul(per))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Corruption("bad stack extents".into()))?;
        let raw = take(total)?;
        let mut vals = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let mut stacks = Vec::with_capacity(steps);
        for _ in 0..steps {
            let ls = (0..layers).map(|_| vals.by_ref().take(per).collect()).collect();
            stacks.push(AttentionStack { size, layers: ls });
        }
        out.push(EpisodeAttention { episode, split, stacks });
    }
    if pos != buf.len() {
        return Err(Error::Corruption("trailing bytes after attention data".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_stochastic(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut m: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        for row in m.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    fn eye(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_layers_roll_out_to_identity() {
        let s = AttentionStack::new(SEQ, vec![eye(SEQ); 3]).unwrap();
        assert_eq!(attention_rollout(&s, true).unwrap(), eye(SEQ));
        assert_eq!(attention_rollout(&s, false).unwrap(), eye(SEQ));
    }

    #[test]
    fn uniform_layer_rows_sum_to_one() {
        let s = AttentionStack::new(SEQ, vec![vec![1.0 / 23.0; SEQ * SEQ]]).unwrap();
        let r = attention_rollout(&s, true).unwrap();
        for (i, row) in r.chunks(SEQ).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((row[i] - (0.5 / 23.0 + 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_stochastic_input_rejected() {
        let mut m = eye(SEQ);
        m[0] = 0.5;
        assert!(matches!(AttentionStack::new(SEQ, vec![m.clone()]), Err(Error::Data(_))));
        let s = AttentionStack { size: SEQ, layers: vec![m] };
        assert!(matches!(attention_rollout(&s, true), Err(Error::Data(_))));
    }

    #[test]
    fn domain_sums() {
        assert_eq!(domain_attention(&vec![1.0 / 23.0; SEQ * SEQ]).unwrap().map(|v| (v * 1e9).round() / 1e9), [1.0, 2.0, 10.0, 10.0]);
        assert_eq!(domain_attention(&eye(SEQ)).unwrap(), [1.0, 2.0, 10.0, 10.0]);
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize_trace(&[4.0; 7]), vec![0.0; 7]);
        let z = normalize_trace(&[1.0, 2.0, 3.0]);
        let e = 1.224_744_871_391_589;
        assert!((z[0] + e).abs() < 1e-12 && z[1].abs() < 1e-15 && (z[2] - e).abs() < 1e-12);
    }

    #[test]
    fn resample_cases() {
        assert_eq!(resample_trace(&[2.5; 9], 100).unwrap(), vec![2.5; 100]);
        let ramp: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let r = resample_trace(&ramp, 100).unwrap();
        assert_eq!(r[0], 0.0);
        assert_eq!(r[99], 1.0);
        for (j, v) in r.iter().enumerate() {
            assert!((v - j as f64 / 99.0).abs() < 1e-12);
        }
        assert!(matches!(resample_trace(&[1.0], 100), Err(Error::Usage(_))));
    }

    #[test]
    fn one_episode_exports_400_rows_deterministically() {
        let mut rng = crate::diffcore::seeded(7);
        let stacks: Vec<AttentionStack> = (0..30)
            .map(|_| AttentionStack::new(SEQ, (0..3).map(|_| random_stochastic(SEQ, &mut rng)).collect()).unwrap())
            .collect();
        let tr = DomainTrace::from_stacks(0, &stacks, 12, true).unwrap();
        for w in &tr.raw {
            assert!((w.iter().sum::<f64>() - 23.0).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let (d, s) = (dir.path().join("d.csv"), dir.path().join("s.csv"));
        let rows = export_traces(&[tr.clone()], ["left", "right"], &d, &s).unwrap();
        assert_eq!(rows.len(), 400);
        let first = (std::fs::read(&d).unwrap(), std::fs::read(&s).unwrap());
        export_traces(&[tr], ["left", "right"], &d, &s).unwrap();
        assert_eq!(first, (std::fs::read(&d).unwrap(), std::fs::read(&s).unwrap()));
        assert_eq!(String::from_utf8(first.0).unwrap().lines().count(), 401);
    }

    #[test]
    fn stacks_round_trip() {
        let mut rng = crate::diffcore::seeded(8);
        let eps: Vec<EpisodeAttention> = (0..3)
            .map(|e| EpisodeAttention {
                episode: e,
                split: e + 1,
                stacks: (0..4)
                    .map(|_| AttentionStack::new(SEQ, (0..2).map(|_| random_stochastic(SEQ, &mut rng)).collect()).unwrap())
                    .collect(),
            })
            .collect();
        let bytes = encode_stacks(&eps).unwrap();
        assert_eq!(decode_stacks(&bytes).unwrap(), eps);
        assert!(matches!(decode_stacks(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
        assert!(matches!(decode_stacks(b"XXXX\x01\0\0\0"), Err(Error::Format(_))));
    }
}
