//! Sectioned, versioned binary checkpoint: every parameter array, both
//! optimizer states, the target head, step counters and RNG streams. A
//! save/load/resume cycle reproduces training bit-exactly.

use crate::backbone::TargetHeadState;
use crate::config::{fnv1a64, Config};
use crate::error::{Result, WamError};
use crate::numerics::optim::OptimizerState;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"WAMC";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Counters {
    pub tokenizer_steps: u64,
    pub m1_steps: u64,
    pub m2_steps: u64,
    pub finetune_steps: u64,
}

pub struct CheckpointData {
    pub config: Config,
    pub tokenizer_params: Vec<(Vec<usize>, Vec<f64>)>,
    pub model_params: Vec<(Vec<usize>, Vec<f64>)>,
    pub target: TargetHeadState,
    pub tok_opt: OptimizerState,
    pub model_opt: OptimizerState,
    pub counters: Counters,
    pub rng_states: Vec<[u64; 4]>,
    pub tok_last_used: Vec<u64>,
    pub tok_data_initialized: bool,
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn tensors(&mut self, ts: &[(Vec<usize>, Vec<f64>)]) {
        self.u32(ts.len() as u32);
        for (shape, values) in ts {
            self.u8(shape.len() as u8);
            for &d in shape {
                self.u32(d as u32);
            }
            self.f64s(values);
        }
    }
    fn optimizer(&mut self, o: &OptimizerState) {
        self.f64(o.lr);
        self.f64(o.weight_decay);
        self.f64(o.beta1);
        self.f64(o.beta2);
        self.f64(o.eps);
        self.u64(o.step);
        let json = serde_json::to_vec(o).expect("optimizer serializes");
        self.bytes(&json);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            return Err(WamError::integrity("checkpoint truncated"));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }
    fn u16(&mut self) -> Result<u16> {
        self.need(2)?;
        let v = u16::from_le_bytes(self.buf[self.pos..self.pos + 2].try_into().unwrap());
        self.pos += 2;
        Ok(v)
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        self.need(n)?;
        let v = self.buf[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(v)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }
    fn tensors(&mut self) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let nd = self.u8()? as usize;
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(self.u32()? as usize);
            }
            out.push((shape, self.f64s()?));
        }
        Ok(out)
    }
    fn optimizer(&mut self) -> Result<OptimizerState> {
        // Scalar header is redundant with the JSON payload; both are kept
        // for forward inspection with external tools.
        let _ = self.f64()?;
        let _ = self.f64()?;
        let _ = self.f64()?;
        let _ = self.f64()?;
        let _ = self.f64()?;
        let _ = self.u64()?;
        let json = self.bytes()?;
        serde_json::from_slice(&json)
            .map_err(|e| WamError::integrity(format!("bad optimizer section: {}", e)))
    }
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut e = Enc::new();
    e.buf.extend_from_slice(CKPT_MAGIC);
    e.u16(CKPT_VERSION);
    let config_json = serde_json::to_vec(&data.config)?;
    // Hash over the canonical config string, matching Config::hash().
    let hash = fnv1a64(serde_json::to_string(&data.config)?.as_bytes());
    e.u64(hash);
    e.bytes(&config_json);
    e.tensors(&data.tokenizer_params);
    e.tensors(&data.model_params);
    // target head
    e.u64(data.target.last_sync);
    e.tensors(&data.target.tensors);
    e.optimizer(&data.tok_opt);
    e.optimizer(&data.model_opt);
    e.u64(data.counters.tokenizer_steps);
    e.u64(data.counters.m1_steps);
    e.u64(data.counters.m2_steps);
    e.u64(data.counters.finetune_steps);
    e.u32(data.rng_states.len() as u32);
    for st in &data.rng_states {
        for &w in st {
            e.u64(w);
        }
    }
    e.u64(data.tok_last_used.len() as u64);
    for &s in &data.tok_last_used {
        e.u64(s);
    }
    e.u8(data.tok_data_initialized as u8);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&e.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 6 || &buf[0..4] != CKPT_MAGIC {
        return Err(WamError::integrity("not a checkpoint file"));
    }
    let mut d = Dec { buf: &buf, pos: 4 };
    let version = d.u16()?;
    if version != CKPT_VERSION {
        return Err(WamError::config(format!(
            "checkpoint version {} unsupported (expected {})",
            version, CKPT_VERSION
        )));
    }
    let stored_hash = d.u64()?;
    let config_json = d.bytes()?;
    let config: Config = serde_json::from_slice(&config_json)
        .map_err(|e| WamError::integrity(format!("bad config section: {}", e)))?;
    let recomputed = fnv1a64(serde_json::to_string(&config)?.as_bytes());
    if recomputed != stored_hash {
        return Err(WamError::config(format!(
            "config hash mismatch: stored {:016x}, recomputed {:016x}",
            stored_hash, recomputed
        )));
    }
    let tokenizer_params = d.tensors()?;
    let model_params = d.tensors()?;
    let last_sync = d.u64()?;
    let target_tensors = d.tensors()?;
    let tok_opt = d.optimizer()?;
    let model_opt = d.optimizer()?;
    let counters = Counters {
        tokenizer_steps: d.u64()?,
        m1_steps: d.u64()?,
        m2_steps: d.u64()?,
        finetune_steps: d.u64()?,
    };
    let n_rng = d.u32()? as usize;
    let mut rng_states = Vec::with_capacity(n_rng);
    for _ in 0..n_rng {
        rng_states.push([d.u64()?, d.u64()?, d.u64()?, d.u64()?]);
    }
    let n_used = d.u64()? as usize;
    let mut tok_last_used = Vec::with_capacity(n_used);
    for _ in 0..n_used {
        tok_last_used.push(d.u64()?);
    }
    let tok_data_initialized = d.u8()? == 1;
    Ok(CheckpointData {
        config,
        tokenizer_params,
        model_params,
        target: TargetHeadState {
            tensors: target_tensors,
            last_sync,
        },
        tok_opt,
        model_opt,
        counters,
        rng_states,
        tok_last_used,
        tok_data_initialized,
    })
}
