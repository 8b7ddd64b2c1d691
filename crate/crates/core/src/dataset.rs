//! Offline data: generation from mixed-quality behavior policies, binary
//! shard persistence with a JSON manifest, segment sampling for training,
//! transition-level subsampling, and reward ternarization.

use crate::envs::mdp::{env_to_mdp, greedy_from_row, value_iteration};
use crate::envs::{env_step, initial_state, render_observation, EnvSpec, Task};
use crate::error::{Result, WamError};
use crate::rng::Rng64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const SHARD_MAGIC: &[u8; 4] = b"JOWD";
pub const SHARD_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u16 = 1;

/// One logged environment step. Observations are stored as u8 intensities
/// (value * 255) so in-memory data and shard bytes are identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub action: u8,
    pub raw_reward_bits: u32,
    pub ternary: i8,
    pub done: bool,
    pub episode: u32,
    pub step: u32,
}

impl Transition {
    pub fn raw_reward(&self) -> f32 {
        f32::from_bits(self.raw_reward_bits)
    }
}

/// sign(r) with sign(0) = 0. Non-finite rewards are a contract violation.
pub fn ternarize_reward(r: f64) -> Result<i8> {
    if !r.is_finite() {
        return Err(WamError::contract(format!("non-finite reward {}", r)));
    }
    Ok(if r > 0.0 {
        1
    } else if r < 0.0 {
        -1
    } else {
        0
    })
}

pub fn obs_to_u8(obs: &[f64]) -> Vec<u8> {
    obs.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn obs_to_f64(obs: &[u8]) -> Vec<f64> {
    obs.iter().map(|&b| b as f64 / 255.0).collect()
}

/// Behavior-policy descriptor recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyDescriptor {
    pub kind: String,
    pub eps_mixture: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShardEntry {
    pub file: String,
    pub task: String,
    pub records: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub obs_h: usize,
    pub obs_w: usize,
    pub env_specs: Vec<EnvSpec>,
    pub counts: Vec<u64>,
    pub policy: PolicyDescriptor,
    pub shards: Vec<ShardEntry>,
}

/// All transitions for one task plus episode ranges and the subsample mask.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: EnvSpec,
    pub transitions: Vec<Transition>,
    /// (start index, length) per episode, in order.
    pub episodes: Vec<(usize, usize)>,
    /// Subsample keep-mask; `None` means everything is kept.
    pub keep: Option<Vec<bool>>,
}

impl TaskData {
    fn rebuild_episodes(transitions: &[Transition]) -> Vec<(usize, usize)> {
        let mut episodes = Vec::new();
        let mut start = 0usize;
        for i in 0..transitions.len() {
            let boundary = i + 1 == transitions.len()
                || transitions[i].done
                || transitions[i + 1].episode != transitions[i].episode;
            if boundary {
                episodes.push((start, i + 1 - start));
                start = i + 1;
            }
        }
        episodes
    }

    pub fn kept_count(&self) -> usize {
        match &self.keep {
            None => self.transitions.len(),
            Some(mask) => mask.iter().filter(|&&k| k).count(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub tasks: Vec<TaskData>,
    pub policy: PolicyDescriptor,
}

/// A sampled training window: up to L real steps of one episode, right
/// aligned, with leading padding marked invalid.
#[derive(Debug, Clone)]
pub struct RawSegment {
    pub task: Task,
    /// Index of the task within its dataset.
    pub task_index: usize,
    /// One frame per timestep (pad timesteps hold zero frames).
    pub obs: Vec<Vec<u8>>,
    pub actions: Vec<u8>,
    pub ternary: Vec<i8>,
    pub done: Vec<bool>,
    /// done flags raised by the episode step limit rather than the dynamics.
    pub truncated: Vec<bool>,
    pub valid: Vec<bool>,
    /// Set for timesteps synthesized by the planner during fine-tuning.
    pub imagined: Vec<bool>,
    /// Source transition index per timestep (None for padding).
    pub indices: Vec<Option<usize>>,
}

impl RawSegment {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn pad_count(&self) -> usize {
        self.valid.iter().filter(|&&v| !v).count()
    }
}

// ── Generation ──────────────────────────────────────────────────────────

/// Roll out epsilon-greedy policies over the task's value-iteration oracle.
/// Epsilon is drawn per episode from `mixture`. Generation is deterministic
/// in `seed`.
pub fn generate_offline_dataset(
    specs: &[EnvSpec],
    mixture: &[f64],
    n_per_task: usize,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_task == 0 {
        return Err(WamError::contract("n_per_task must be >= 1"));
    }
    if mixture.is_empty() {
        return Err(WamError::contract("mixture must be nonempty"));
    }
    let mut tasks = Vec::new();
    for spec in specs {
        let env_mdp = env_to_mdp(spec);
        let q = value_iteration(&env_mdp.mdp, gamma, 1e-8)?;
        let mut rng = Rng64::stream(seed, spec.task.id() as u64 + 1);
        let mut transitions: Vec<Transition> = Vec::with_capacity(n_per_task);
        let mut episode: u32 = 0;
        while transitions.len() < n_per_task {
            let eps = *rng.choose(mixture);
            let mut state = initial_state(spec);
            let mut step: u32 = 0;
            loop {
                let action = if rng.chance(eps) {
                    *rng.choose(spec.task.valid_actions())
                } else {
                    let si = env_mdp
                        .state_index(&state)
                        .expect("reachable state enumerated");
                    spec.task.valid_actions()[greedy_from_row(&q[si])]
                };
                let (next, reward, done) = env_step(spec, &state, action, &mut rng)?;
                transitions.push(Transition {
                    obs: obs_to_u8(&render_observation(spec, &state)),
                    action: action as u8,
                    raw_reward_bits: (reward as f32).to_bits(),
                    ternary: ternarize_reward(reward)?,
                    done,
                    episode,
                    step,
                });
                state = next;
                step += 1;
                if done || transitions.len() >= n_per_task {
                    break;
                }
            }
            episode += 1;
        }
        transitions.truncate(n_per_task);
        let episodes = TaskData::rebuild_episodes(&transitions);
        tasks.push(TaskData {
            spec: spec.clone(),
            transitions,
            episodes,
            keep: None,
        });
    }
    Ok(Dataset {
        tasks,
        policy: PolicyDescriptor {
            kind: "eps-greedy-over-oracle".into(),
            eps_mixture: mixture.to_vec(),
            seed,
        },
    })
}

// ── Segment sampling ────────────────────────────────────────────────────

/// Valid anchor = (task, transition index) whose backward window of up to L
/// steps lies inside one episode with every step kept.
fn valid_anchors(data: &Dataset, seg_len: usize) -> Vec<(usize, usize)> {
    let mut anchors = Vec::new();
    for (ti, task) in data.tasks.iter().enumerate() {
        for &(start, len) in &task.episodes {
            for offset in 0..len {
                let anchor = start + offset;
                let w_start = anchor.saturating_sub(seg_len - 1).max(start);
                let all_kept = match &task.keep {
                    None => true,
                    Some(mask) => (w_start..=anchor).all(|i| mask[i]),
                };
                if all_kept {
                    anchors.push((ti, anchor));
                }
            }
        }
    }
    anchors
}

/// Uniformly sample `batch` segments of `seg_len` timesteps. Segments end at
/// the sampled anchor transition and are left-padded when the anchor sits
/// within the first `seg_len - 1` steps of its episode.
pub fn sample_segment_batch(
    data: &Dataset,
    seg_len: usize,
    batch: usize,
    rng: &mut Rng64,
) -> Result<Vec<RawSegment>> {
    let anchors = valid_anchors(data, seg_len);
    if anchors.is_empty() {
        return Err(WamError::contract("dataset has no sampleable segments"));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (ti, anchor) = anchors[rng.below(anchors.len())];
        out.push(cut_segment_indexed(&data.tasks[ti], ti, anchor, seg_len));
    }
    Ok(out)
}

/// Extract the window ending at `anchor`, left-padded to `seg_len`.
pub fn cut_segment(task: &TaskData, anchor: usize, seg_len: usize) -> RawSegment {
    cut_segment_indexed(task, 0, anchor, seg_len)
}

pub fn cut_segment_indexed(
    task: &TaskData,
    task_index: usize,
    anchor: usize,
    seg_len: usize,
) -> RawSegment {
    let (ep_start, _len) = *task
        .episodes
        .iter()
        .find(|&&(s, l)| anchor >= s && anchor < s + l)
        .expect("anchor inside an episode");
    let w_start = anchor.saturating_sub(seg_len - 1).max(ep_start);
    let content = anchor - w_start + 1;
    let pads = seg_len - content;
    let obs_len = task.transitions[anchor].obs.len();
    let mut seg = RawSegment {
        task: task.spec.task,
        task_index,
        obs: vec![vec![0u8; obs_len]; pads],
        actions: vec![0; pads],
        ternary: vec![0; pads],
        done: vec![false; pads],
        truncated: vec![false; pads],
        valid: vec![false; pads],
        imagined: vec![false; seg_len],
        indices: vec![None; pads],
    };
    for i in w_start..=anchor {
        let t = &task.transitions[i];
        seg.obs.push(t.obs.clone());
        seg.actions.push(t.action);
        seg.ternary.push(t.ternary);
        seg.done.push(t.done);
        seg.truncated
            .push(t.done && t.step + 1 >= task.spec.max_steps);
        seg.valid.push(true);
        seg.indices.push(Some(i));
    }
    seg
}

/// Uniform sample of `n` kept observations across every task, as f64 frames.
pub fn sample_observation_batch(data: &Dataset, n: usize, rng: &mut Rng64) -> Result<Vec<Vec<f64>>> {
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (ti, task) in data.tasks.iter().enumerate() {
        for i in 0..task.transitions.len() {
            let kept = task.keep.as_ref().map(|m| m[i]).unwrap_or(true);
            if kept {
                pool.push((ti, i));
            }
        }
    }
    if pool.is_empty() {
        return Err(WamError::contract("dataset has no kept transitions"));
    }
    Ok((0..n)
        .map(|_| {
            let (ti, i) = pool[rng.below(pool.len())];
            obs_to_f64(&data.tasks[ti].transitions[i].obs)
        })
        .collect())
}

// ── Subsampling ─────────────────────────────────────────────────────────

/// Per-task uniform transition-level subsample without replacement, keeping
/// exactly floor(fraction * n) records. Windows that would need removed
/// neighbors become unsampleable; kept transitions are never corrupted.
pub fn subsample(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(WamError::contract(format!(
            "fraction must be in (0, 1], got {}",
            fraction
        )));
    }
    let mut out = data.clone();
    if (fraction - 1.0).abs() < f64::EPSILON {
        return Ok(out);
    }
    for (ti, task) in out.tasks.iter_mut().enumerate() {
        let n = task.transitions.len();
        let target = (fraction * n as f64).floor() as usize;
        let mut rng = Rng64::stream(seed, 0x5u64 + ti as u64);
        // Partial Fisher-Yates: choose `target` distinct indices.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..target {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        let mut mask = vec![false; n];
        for &i in &idx[..target] {
            mask[i] = true;
        }
        // Compose with any existing mask.
        if let Some(prev) = &task.keep {
            for (m, p) in mask.iter_mut().zip(prev) {
                *m = *m && *p;
            }
        }
        task.keep = Some(mask);
    }
    Ok(out)
}

// ── Persistence ─────────────────────────────────────────────────────────

fn record_size(obs_len: usize) -> usize {
    obs_len + 1 + 4 + 1 + 1 + 4 + 4
}

fn encode_records(transitions: &[Transition]) -> Vec<u8> {
    let mut buf = Vec::new();
    for t in transitions {
        buf.extend_from_slice(&t.obs);
        buf.push(t.action);
        buf.extend_from_slice(&t.raw_reward_bits.to_le_bytes());
        buf.push(t.ternary as u8);
        buf.push(t.done as u8);
        buf.extend_from_slice(&t.episode.to_le_bytes());
        buf.extend_from_slice(&t.step.to_le_bytes());
    }
    buf
}

pub fn write_shard(path: &Path, transitions: &[Transition]) -> Result<String> {
    let payload = encode_records(transitions);
    let checksum = crate::config::fnv1a64(&payload);
    let mut f = std::fs::File::create(path)?;
    f.write_all(SHARD_MAGIC)?;
    f.write_all(&SHARD_VERSION.to_le_bytes())?;
    f.write_all(&(transitions.len() as u64).to_le_bytes())?;
    f.write_all(&payload)?;
    f.write_all(&checksum.to_le_bytes())?;
    Ok(format!("{:016x}", checksum))
}

pub fn read_shard(path: &Path, obs_len: usize) -> Result<(Vec<Transition>, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display();
    if bytes.len() < 14 || &bytes[0..4] != SHARD_MAGIC {
        return Err(WamError::integrity(format!("{}: bad magic or truncated header", name)));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SHARD_VERSION {
        return Err(WamError::integrity(format!(
            "{}: unsupported shard version {}",
            name, version
        )));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let rs = record_size(obs_len);
    let expected = 14 + count * rs + 8;
    if bytes.len() != expected {
        return Err(WamError::integrity(format!(
            "{}: expected {} bytes for {} records, found {}",
            name,
            expected,
            count,
            bytes.len()
        )));
    }
    let payload = &bytes[14..14 + count * rs];
    let stored = u64::from_le_bytes(bytes[14 + count * rs..].try_into().unwrap());
    let computed = crate::config::fnv1a64(payload);
    if stored != computed {
        return Err(WamError::integrity(format!(
            "{}: checksum mismatch (stored {:016x}, computed {:016x})",
            name, stored, computed
        )));
    }
    let mut transitions = Vec::with_capacity(count);
    for r in 0..count {
        let rec = &payload[r * rs..(r + 1) * rs];
        let obs = rec[..obs_len].to_vec();
        let action = rec[obs_len];
        let raw_reward_bits = u32::from_le_bytes(rec[obs_len + 1..obs_len + 5].try_into().unwrap());
        let ternary = rec[obs_len + 5] as i8;
        let done_byte = rec[obs_len + 6];
        let episode = u32::from_le_bytes(rec[obs_len + 7..obs_len + 11].try_into().unwrap());
        let step = u32::from_le_bytes(rec[obs_len + 11..obs_len + 15].try_into().unwrap());
        if done_byte > 1 {
            return Err(WamError::integrity(format!("{}: bad done flag", name)));
        }
        if !(-1..=1).contains(&ternary) {
            return Err(WamError::integrity(format!("{}: bad ternary value", name)));
        }
        let raw = f32::from_bits(raw_reward_bits);
        if raw.is_finite() && ternarize_reward(raw as f64).ok() != Some(ternary) {
            return Err(WamError::integrity(format!(
                "{}: ternary {} does not match sign of raw reward {}",
                name, ternary, raw
            )));
        }
        transitions.push(Transition {
            obs,
            action,
            raw_reward_bits,
            ternary,
            done: done_byte == 1,
            episode,
            step,
        });
    }
    Ok((transitions, format!("{:016x}", computed)))
}

/// Persist every kept transition as one shard per task plus `manifest.json`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    let mut counts = Vec::new();
    for task in &data.tasks {
        let kept: Vec<Transition> = match &task.keep {
            None => task.transitions.clone(),
            Some(mask) => task
                .transitions
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(t, _)| t.clone())
                .collect(),
        };
        let file = format!("{}.shard", task.spec.task.name());
        let checksum = write_shard(&dir.join(&file), &kept)?;
        counts.push(kept.len() as u64);
        shards.push(ShardEntry {
            file,
            task: task.spec.task.name().to_string(),
            records: kept.len() as u64,
            checksum,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        obs_h: crate::envs::OBS_H,
        obs_w: crate::envs::OBS_W,
        env_specs: data.tasks.iter().map(|t| t.spec.clone()).collect(),
        counts,
        policy: data.policy.clone(),
        shards,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load and validate a persisted dataset: checksums, counts and field
/// ranges are all checked.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        WamError::integrity(format!("cannot read {}: {}", manifest_path.display(), e))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| WamError::integrity(format!("bad manifest: {}", e)))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(WamError::integrity(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let obs_len = manifest.obs_h * manifest.obs_w;
    if manifest.shards.len() != manifest.env_specs.len()
        || manifest.counts.len() != manifest.shards.len()
    {
        return Err(WamError::integrity("manifest arrays disagree in length"));
    }
    let mut tasks = Vec::new();
    for (i, entry) in manifest.shards.iter().enumerate() {
        let spec = manifest.env_specs[i].clone();
        let (transitions, checksum) = read_shard(&dir.join(&entry.file), obs_len)?;
        if checksum != entry.checksum {
            return Err(WamError::integrity(format!(
                "{}: checksum {} does not match manifest {}",
                entry.file, checksum, entry.checksum
            )));
        }
        if transitions.len() as u64 != entry.records || entry.records != manifest.counts[i] {
            return Err(WamError::integrity(format!(
                "{}: record count mismatch",
                entry.file
            )));
        }
        for t in &transitions {
            if t.action as usize >= crate::envs::A_MAX {
                return Err(WamError::integrity(format!(
                    "{}: action {} out of range",
                    entry.file, t.action
                )));
            }
        }
        let episodes = TaskData::rebuild_episodes(&transitions);
        tasks.push(TaskData {
            spec,
            transitions,
            episodes,
            keep: None,
        });
    }
    Ok(Dataset {
        tasks,
        policy: manifest.policy,
    })
}
