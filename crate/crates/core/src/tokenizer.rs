//! Discrete autoencoder mapping observations to K tokens per frame and back:
//! a small convolutional encoder, a nearest-neighbor vector quantizer with a
//! straight-through estimator, and a mirrored decoder. Trained with L1
//! reconstruction plus the two stop-gradient quantization terms.

use crate::config::ModelConfig;
use crate::error::{Result, WamError};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParamSet, Tensor};
use crate::rng::Rng64;

/// Nearest codebook entry by L2 distance; ties break toward the lowest
/// index. Returns the index and a copy of the embedded vector.
pub fn quantize_nearest(latent: &[f64], codebook: &Tensor) -> Result<(usize, Vec<f64>)> {
    let shape = codebook.shape();
    let (v, d) = (shape[0], shape[1]);
    if latent.len() != d {
        return Err(WamError::contract(format!(
            "latent dim {} != codebook dim {}",
            latent.len(),
            d
        )));
    }
    let values = codebook.values();
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for i in 0..v {
        let row = &values[i * d..(i + 1) * d];
        let mut d2 = 0.0;
        for (a, b) in latent.iter().zip(row) {
            let diff = a - b;
            d2 += diff * diff;
        }
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    let row = values[best * d..(best + 1) * d].to_vec();
    Ok((best, row))
}

struct TokIds {
    enc_w1: usize,
    enc_b1: usize,
    enc_w2: usize,
    enc_b2: usize,
    dec_w1: usize,
    dec_b1: usize,
    dec_w2: usize,
    dec_b2: usize,
    codebook: usize,
}

/// Loss components, individually non-negative.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerLossParts {
    pub recon_l1: f64,
    pub codebook: f64,
    pub commit: f64,
}

impl TokenizerLossParts {
    pub fn total(&self) -> f64 {
        self.recon_l1 + self.codebook + self.commit
    }
}

pub struct Tokenizer {
    pub obs_h: usize,
    pub obs_w: usize,
    /// sqrt(K): tokens form a k_side x k_side grid.
    pub k_side: usize,
    pub vocab: usize,
    pub dim: usize,
    pub channels: usize,
    /// Patch-conv kernel/stride of the second encoder stage.
    patch: usize,
    pub params: ParamSet,
    ids: TokIds,
    /// Step at which each codebook entry was last selected (dead-code
    /// re-seeding).
    pub last_used: Vec<u64>,
    /// Codebook entries are re-initialized from data on the first batch.
    pub data_initialized: bool,
}

impl Tokenizer {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng64) -> Result<Tokenizer> {
        if cfg.obs_h != cfg.obs_w {
            return Err(WamError::config("tokenizer expects square observations"));
        }
        let k_side = (cfg.tokens_per_frame as f64).sqrt().round() as usize;
        if k_side * k_side != cfg.tokens_per_frame {
            return Err(WamError::config("tokens_per_frame must be a perfect square"));
        }
        let half = cfg.obs_h / 2;
        if cfg.obs_h % 2 != 0 || half % k_side != 0 {
            return Err(WamError::config(format!(
                "obs size {} incompatible with {} tokens per frame",
                cfg.obs_h, cfg.tokens_per_frame
            )));
        }
        let patch = half / k_side;
        let (c, d, v) = (cfg.enc_channels, cfg.code_dim, cfg.vocab_size);
        let mut params = ParamSet::new();
        let conv_std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let ids = TokIds {
            enc_w1: params.add(
                "tok.enc.w1",
                Tensor::randn(vec![c, 1, 3, 3], conv_std(9), rng),
                true,
            ),
            enc_b1: params.add("tok.enc.b1", Tensor::zeros(vec![c]), false),
            enc_w2: params.add(
                "tok.enc.w2",
                Tensor::randn(vec![d, c, patch, patch], conv_std(c * patch * patch), rng),
                true,
            ),
            enc_b2: params.add("tok.enc.b2", Tensor::zeros(vec![d]), false),
            dec_w1: params.add(
                "tok.dec.w1",
                Tensor::randn(vec![c, d, 3, 3], conv_std(d * 9), rng),
                true,
            ),
            dec_b1: params.add("tok.dec.b1", Tensor::zeros(vec![c]), false),
            dec_w2: params.add(
                "tok.dec.w2",
                Tensor::randn(vec![1, c, 3, 3], conv_std(c * 9), rng),
                true,
            ),
            dec_b2: params.add("tok.dec.b2", Tensor::zeros(vec![1]), false),
            codebook: params.add("tok.codebook", Tensor::randn(vec![v, d], 0.5, rng), false),
        };
        Ok(Tokenizer {
            obs_h: cfg.obs_h,
            obs_w: cfg.obs_w,
            k_side,
            vocab: v,
            dim: d,
            channels: c,
            patch,
            params,
            ids,
            last_used: vec![0; v],
            data_initialized: false,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.k_side * self.k_side
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.ids.codebook)
    }

    /// Encoder: obs [1,H,W] -> latents [K, d].
    fn encode_latents(&self, tape: &mut Tape, obs: Var) -> Var {
        let w1 = tape.param(&self.params, self.ids.enc_w1);
        let b1 = tape.param(&self.params, self.ids.enc_b1);
        let w2 = tape.param(&self.params, self.ids.enc_w2);
        let b2 = tape.param(&self.params, self.ids.enc_b2);
        let h1 = tape.conv2d(obs, w1, b1, 2, 1);
        let a1 = tape.mish(h1);
        let z = tape.conv2d(a1, w2, b2, self.patch, 0); // [d, k_side, k_side]
        let k = self.tokens_per_frame();
        let flat = tape.reshape(z, vec![self.dim, k]);
        tape.transpose(flat) // [K, d]
    }

    /// Decoder: quantized latents [K, d] -> raw image [1,H,W] (unclamped).
    fn decode_latents(&self, tape: &mut Tape, zq: Var) -> Var {
        let w1 = tape.param(&self.params, self.ids.dec_w1);
        let b1 = tape.param(&self.params, self.ids.dec_b1);
        let w2 = tape.param(&self.params, self.ids.dec_w2);
        let b2 = tape.param(&self.params, self.ids.dec_b2);
        let grid = tape.transpose(zq); // [d, K]
        let grid = tape.reshape(grid, vec![self.dim, self.k_side, self.k_side]);
        let up1 = tape.upsample_nearest(grid, self.patch);
        let h1 = tape.conv2d(up1, w1, b1, 1, 1);
        let a1 = tape.mish(h1);
        let up2 = tape.upsample_nearest(a1, 2);
        tape.conv2d(up2, w2, b2, 1, 1) // [1, H, W]
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_h * self.obs_w {
            return Err(WamError::contract(format!(
                "observation has {} pixels, config expects {}x{}",
                obs.len(),
                self.obs_h,
                self.obs_w
            )));
        }
        Ok(())
    }

    /// Map an observation to K token indices (deterministic).
    pub fn encode_observation(&self, obs: &[f64]) -> Result<Vec<u16>> {
        self.check_obs(obs)?;
        let mut tape = Tape::eval();
        let x = tape.leaf(vec![1, self.obs_h, self.obs_w], obs.to_vec());
        let latents = self.encode_latents(&mut tape, x);
        let zl = tape.value(latents);
        let k = self.tokens_per_frame();
        let mut tokens = Vec::with_capacity(k);
        for i in 0..k {
            let (idx, _) = quantize_nearest(&zl[i * self.dim..(i + 1) * self.dim], self.codebook())?;
            tokens.push(idx as u16);
        }
        Ok(tokens)
    }

    /// Decode token indices back to an image with values clamped to [0,1].
    pub fn decode_tokens(&self, tokens: &[u16]) -> Result<Vec<f64>> {
        let k = self.tokens_per_frame();
        if tokens.len() != k {
            return Err(WamError::contract(format!(
                "expected {} tokens, got {}",
                k,
                tokens.len()
            )));
        }
        for &t in tokens {
            if t as usize >= self.vocab {
                return Err(WamError::contract(format!(
                    "token {} out of vocabulary {}",
                    t, self.vocab
                )));
            }
        }
        let mut tape = Tape::eval();
        let cb = tape.param(&self.params, self.ids.codebook);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let zq = tape.gather_rows(cb, &idx);
        let img = self.decode_latents(&mut tape, zq);
        Ok(tape
            .value(img)
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect())
    }

    /// Re-seed the codebook from encoder outputs of a data batch. Called on
    /// the first training step so entries start inside the latent
    /// distribution.
    pub fn data_init_codebook(&mut self, batch: &[Vec<f64>], rng: &mut Rng64) -> Result<()> {
        let mut latents: Vec<Vec<f64>> = Vec::new();
        for obs in batch {
            self.check_obs(obs)?;
            let mut tape = Tape::eval();
            let x = tape.leaf(vec![1, self.obs_h, self.obs_w], obs.clone());
            let z = self.encode_latents(&mut tape, x);
            let zl = tape.value(z);
            for i in 0..self.tokens_per_frame() {
                latents.push(zl[i * self.dim..(i + 1) * self.dim].to_vec());
            }
        }
        let cb = self.params.get_mut(self.ids.codebook);
        let values = cb.values_mut();
        for e in 0..self.vocab {
            let src = &latents[rng.below(latents.len())];
            for j in 0..self.dim {
                values[e * self.dim + j] = src[j] + 0.01 * rng.normal();
            }
        }
        self.data_initialized = true;
        Ok(())
    }

    /// Re-seed entries not selected in the last `horizon` steps from random
    /// encoder outputs of the current batch.
    pub fn reseed_dead_codes(
        &mut self,
        step: u64,
        horizon: u64,
        batch: &[Vec<f64>],
        rng: &mut Rng64,
    ) -> Result<usize> {
        let dead: Vec<usize> = (0..self.vocab)
            .filter(|&e| step.saturating_sub(self.last_used[e]) > horizon)
            .collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let obs = &batch[rng.below(batch.len())];
        let mut tape = Tape::eval();
        let x = tape.leaf(vec![1, self.obs_h, self.obs_w], obs.clone());
        let z = self.encode_latents(&mut tape, x);
        let zl = tape.value(z).to_vec();
        let k = self.tokens_per_frame();
        let n_dead = dead.len();
        for e in dead {
            let i = rng.below(k);
            let cb = self.params.get_mut(self.ids.codebook);
            let values = cb.values_mut();
            for j in 0..self.dim {
                values[e * self.dim + j] = zl[i * self.dim + j] + 0.01 * rng.normal();
            }
            self.last_used[e] = step;
        }
        Ok(n_dead)
    }

    /// Training loss over a batch: L1 reconstruction + codebook + commitment
    /// terms, each reported separately. Marks codebook usage at `step`.
    pub fn loss(
        &mut self,
        tape: &mut Tape,
        batch: &[Vec<f64>],
        step: u64,
    ) -> Result<(Var, TokenizerLossParts)> {
        if batch.is_empty() {
            return Err(WamError::contract("tokenizer loss needs a nonempty batch"));
        }
        let cb = tape.param(&self.params, self.ids.codebook);
        let mut recon_terms = Vec::new();
        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for obs in batch {
            self.check_obs(obs)?;
            let x = tape.leaf(vec![1, self.obs_h, self.obs_w], obs.clone());
            let z_e = self.encode_latents(tape, x); // [K, d]
            // Quantize outside the graph; indices are discrete.
            let zl = tape.value(z_e).to_vec();
            let k = self.tokens_per_frame();
            let mut idx = Vec::with_capacity(k);
            for i in 0..k {
                let (e, _) = quantize_nearest(&zl[i * self.dim..(i + 1) * self.dim], self.codebook())?;
                idx.push(e);
                self.last_used[e] = step;
            }
            let e_rows = tape.gather_rows(cb, &idx); // [K, d]
            // Straight-through: z_q = z_e + sg(e - z_e)
            let diff = tape.sub(e_rows, z_e);
            let sg_diff = tape.stop_grad(diff);
            let z_q = tape.add(z_e, sg_diff);
            let recon = self.decode_latents(tape, z_q);
            let err = tape.sub(recon, x);
            let l1 = tape.abs(err);
            recon_terms.push(tape.mean(l1));
            // ||sg(z_e) - e||^2 -> codebook; ||sg(e) - z_e||^2 -> encoder
            let sg_ze = tape.stop_grad(z_e);
            let cb_err = tape.sub(sg_ze, e_rows);
            let cb_sq = tape.mul(cb_err, cb_err);
            codebook_terms.push(tape.mean(cb_sq));
            let sg_e = tape.stop_grad(e_rows);
            let cm_err = tape.sub(sg_e, z_e);
            let cm_sq = tape.mul(cm_err, cm_err);
            commit_terms.push(tape.mean(cm_sq));
        }
        let mean_of = |tape: &mut Tape, terms: &[Var]| {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            tape.scale(acc, 1.0 / terms.len() as f64)
        };
        let recon = mean_of(tape, &recon_terms);
        let code = mean_of(tape, &codebook_terms);
        let commit = mean_of(tape, &commit_terms);
        let parts = TokenizerLossParts {
            recon_l1: tape.scalar_value(recon),
            codebook: tape.scalar_value(code),
            commit: tape.scalar_value(commit),
        };
        let partial = tape.add(recon, code);
        let total = tape.add(partial, commit);
        Ok((total, parts))
    }

    /// Fraction of codebook entries selected at least once over the frames.
    pub fn codebook_usage(&self, frames: &[Vec<f64>]) -> Result<f64> {
        let mut used = vec![false; self.vocab];
        for obs in frames {
            for t in self.encode_observation(obs)? {
                used[t as usize] = true;
            }
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / self.vocab as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn desk_tokenizer(seed: u64) -> Tokenizer {
        let mut rng = Rng64::new(seed);
        Tokenizer::new(&ModelConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn quantize_nearest_neighbor_and_ties() {
        let cb = Tensor::new(vec![2, 1], vec![0.0, 1.0]);
        assert_eq!(quantize_nearest(&[0.4], &cb).unwrap().0, 0);
        // tie at 0.5 -> lowest index
        assert_eq!(quantize_nearest(&[0.5], &cb).unwrap().0, 0);
        assert_eq!(quantize_nearest(&[0.6], &cb).unwrap().0, 1);
        assert!(quantize_nearest(&[0.5, 0.5], &cb).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = Rng64::new(3);
        let cb = Tensor::randn(vec![8, 4], 1.0, &mut rng);
        for _ in 0..100 {
            let latent: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (idx, _) = quantize_nearest(&latent, &cb).unwrap();
            // brute force oracle
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for e in 0..8 {
                let row = &cb.values()[e * 4..(e + 1) * 4];
                let d: f64 = latent
                    .iter()
                    .zip(row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = e;
                }
            }
            assert_eq!(idx, best);
        }
    }

    #[test]
    fn encode_emits_k_indices_in_vocab() {
        let tok = desk_tokenizer(1);
        let obs = vec![0.5; 64];
        let tokens = tok.encode_observation(&obs).unwrap();
        assert_eq!(tokens.len(), 4);
        assert!(tokens.iter().all(|&t| (t as usize) < tok.vocab));
        // determinism
        assert_eq!(tokens, tok.encode_observation(&obs).unwrap());
        // wrong dims rejected
        assert!(tok.encode_observation(&vec![0.0; 63]).is_err());
    }

    #[test]
    fn paper_preset_emits_36_tokens() {
        let mut rng = Rng64::new(2);
        let tok = Tokenizer::new(&ModelConfig::paper(), &mut rng).unwrap();
        let obs = vec![0.25; 84 * 84];
        let tokens = tok.encode_observation(&obs).unwrap();
        assert_eq!(tokens.len(), 36);
    }

    #[test]
    fn decode_is_clamped_and_deterministic() {
        let tok = desk_tokenizer(5);
        let img = tok.decode_tokens(&[1, 2, 3, 4]).unwrap();
        assert_eq!(img.len(), 64);
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = tok.decode_tokens(&[1, 2, 3, 4]).unwrap();
        assert!(img
            .iter()
            .zip(&again)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(tok.decode_tokens(&[9999, 0, 0, 0]).is_err());
        assert!(tok.decode_tokens(&[0, 0, 0]).is_err());
    }

    #[test]
    fn loss_components_finite_and_nonnegative() {
        let mut tok = desk_tokenizer(7);
        let mut rng = Rng64::new(11);
        let batch: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..64).map(|_| rng.uniform()).collect())
            .collect();
        let mut tape = Tape::new();
        let (total, parts) = tok.loss(&mut tape, &batch, 0).unwrap();
        assert!(parts.recon_l1 >= 0.0 && parts.recon_l1.is_finite());
        assert!(parts.codebook >= 0.0 && parts.codebook.is_finite());
        assert!(parts.commit >= 0.0 && parts.commit.is_finite());
        assert!((tape.scalar_value(total) - parts.total()).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_routing() {
        // Commitment gradient reaches only the encoder; the codebook term
        // reaches only the codebook.
        let mut tok = desk_tokenizer(13);
        let batch = vec![vec![0.3; 64]];
        let mut tape = Tape::new();
        let (total, _) = tok.loss(&mut tape, &batch, 0).unwrap();
        let grads = tape.backward(total).unwrap();
        let cb_id = tok.params.id_of("tok.codebook").unwrap();
        let enc_w1 = tok.params.id_of("tok.enc.w1").unwrap();
        let dec_w1 = tok.params.id_of("tok.dec.w1").unwrap();
        let nonzero = |g: &[f64]| g.iter().any(|&x| x != 0.0);
        assert!(nonzero(grads.get(cb_id).unwrap()), "codebook receives grad");
        assert!(nonzero(grads.get(enc_w1).unwrap()), "encoder receives grad");
        assert!(nonzero(grads.get(dec_w1).unwrap()), "decoder receives grad");

        // With reconstruction and commitment terms removed, the encoder gets
        // nothing: only the codebook term remains.
        let mut tape = Tape::new();
        let cb = tape.param(&tok.params, cb_id);
        let x = tape.leaf(vec![1, 8, 8], vec![0.3; 64]);
        let z_e = tok.encode_latents(&mut tape, x);
        let zl = tape.value(z_e).to_vec();
        let mut idx = Vec::new();
        for i in 0..4 {
            idx.push(quantize_nearest(&zl[i * 64..(i + 1) * 64], tok.codebook()).unwrap().0);
        }
        let e_rows = tape.gather_rows(cb, &idx);
        let sg_ze = tape.stop_grad(z_e);
        let err = tape.sub(sg_ze, e_rows);
        let sq = tape.mul(err, err);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(nonzero(grads.get(cb_id).unwrap()));
        assert!(!nonzero(grads.get(enc_w1).unwrap()), "encoder blocked by sg");
    }

    #[test]
    fn dead_code_reseeding_revives_unused_entries() {
        let mut tok = desk_tokenizer(17);
        let mut rng = Rng64::new(19);
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..64).map(|_| rng.uniform()).collect())
            .collect();
        // Nothing used yet; at step 100 with horizon 10 all entries are dead.
        let n = tok.reseed_dead_codes(100, 10, &batch, &mut rng).unwrap();
        assert_eq!(n, tok.vocab);
        assert!(tok.last_used.iter().all(|&s| s == 100));
    }
}
