//! Stage A: the fMRI-to-embedding mapper.
//!
//! A voxel frame is chunked into fixed-size patches, encoded by a small
//! transformer, mean-pooled, and projected to the text-embedding space.
//! Training minimizes `MSE + lambda * InfoNCE`, where the contrastive pair
//! is the clean batch against a randomly masked copy, projected by a
//! separate head tapped at a configurable encoder layer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::data::{EmbeddingSeries, FmriSeries};
use crate::error::{Error, Result};
use crate::opt::{Adam, ParamSet};
use crate::rng::SeedStreams;
use crate::store;
use crate::util::mean_row_cosine;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapperConfig {
    pub input_voxels: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub patch_size: usize,
    /// Encoder layer feeding the contrastive projector (1-based).
    pub tap_layer: usize,
    pub mask_ratio: f64,
    /// Weight of the contrastive term in the hybrid loss.
    pub contrastive_weight: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub proj_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Also feed masked samples through the MSE branch (off by default).
    pub mse_on_masked: bool,
    /// Add the reversed-direction InfoNCE term (off by default).
    pub symmetric_infonce: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            input_voxels: 0,
            embed_dim: 0,
            encoder_layers: 2,
            encoder_width: 64,
            patch_size: 250,
            tap_layer: 2,
            mask_ratio: 0.05,
            contrastive_weight: 0.2,
            temperature: 0.1,
            batch_size: 32,
            seed: 0,
            proj_dim: 32,
            learning_rate: 1e-4,
            max_epochs: 200,
            patience: 20,
            mse_on_masked: false,
            symmetric_infonce: false,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_voxels == 0 || self.embed_dim == 0 {
            return Err(Error::Validation("input_voxels and embed_dim must be positive".into()));
        }
        if self.encoder_layers == 0 || self.encoder_width == 0 || self.patch_size == 0 {
            return Err(Error::Validation("encoder dimensions must be positive".into()));
        }
        if self.tap_layer == 0 || self.tap_layer > self.encoder_layers {
            return Err(Error::Validation(format!(
                "tap_layer {} out of range 1..={}",
                self.tap_layer, self.encoder_layers
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Validation(format!(
                "mask_ratio must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.contrastive_weight < 0.0 {
            return Err(Error::Validation("contrastive_weight must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.proj_dim == 0 {
            return Err(Error::Validation("batch_size and proj_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.input_voxels.div_ceil(self.patch_size)
    }
}

/// Trained mapper: encoder, embedding projector, contrastive projector, and
/// the config they were built with.
#[derive(Debug, Clone)]
pub struct MapperCheckpoint {
    config: MapperConfig,
    params: ParamSet,
}

fn init_params(cfg: &MapperConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    let w = cfg.encoder_width;
    let mut p = ParamSet::new();
    let std = 0.08;
    p.init_normal("enc.patch.w", cfg.patch_size, w, std, rng);
    p.init_zeros("enc.patch.b", 1, w);
    p.init_normal("enc.pos", cfg.n_patches(), w, std, rng);
    for l in 0..cfg.encoder_layers {
        for name in ["wq", "wk", "wv", "wo"] {
            p.init_normal(&format!("enc.l{l}.{name}"), w, w, std, rng);
        }
        p.init_ones(&format!("enc.l{l}.ln1.g"), 1, w);
        p.init_zeros(&format!("enc.l{l}.ln1.b"), 1, w);
        p.init_ones(&format!("enc.l{l}.ln2.g"), 1, w);
        p.init_zeros(&format!("enc.l{l}.ln2.b"), 1, w);
        p.init_normal(&format!("enc.l{l}.mlp.w1"), w, 2 * w, std, rng);
        p.init_zeros(&format!("enc.l{l}.mlp.b1"), 1, 2 * w);
        p.init_normal(&format!("enc.l{l}.mlp.w2"), 2 * w, w, std, rng);
        p.init_zeros(&format!("enc.l{l}.mlp.b2"), 1, w);
    }
    p.init_ones("enc.final.g", 1, w);
    p.init_zeros("enc.final.b", 1, w);
    p.init_normal("proj.embed.w1", w, w, std, rng);
    p.init_zeros("proj.embed.b1", 1, w);
    p.init_normal("proj.embed.w2", w, cfg.embed_dim, std, rng);
    p.init_zeros("proj.embed.b2", 1, cfg.embed_dim);
    p.init_normal("proj.nce.w1", w, w, std, rng);
    p.init_zeros("proj.nce.b1", 1, w);
    p.init_normal("proj.nce.w2", w, cfg.proj_dim, std, rng);
    p.init_zeros("proj.nce.b2", 1, cfg.proj_dim);
    p
}

impl MapperCheckpoint {
    /// Freshly initialized mapper (weights drawn from the seed's init stream).
    pub fn init(config: MapperConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStreams::new(config.seed).stream("mapper/init");
        let params = init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

struct MapperVars {
    by_name: HashMap<String, Var>,
}

impl MapperVars {
    fn leaf_all(tape: &mut Tape, params: &ParamSet) -> (Self, Vec<Var>) {
        let mut by_name = HashMap::new();
        let mut ordered = Vec::new();
        for (name, value) in params.iter() {
            let var = tape.leaf(value.clone());
            by_name.insert(name.to_string(), var);
            ordered.push(var);
        }
        (Self { by_name }, ordered)
    }

    fn get(&self, name: &str) -> Var {
        self.by_name[name]
    }
}

/// Rearranges `n x V` frames into `(n * P) x patch_size` rows, zero-padding
/// the final partial patch.
fn patchify(batch: &Array2<f64>, patch_size: usize) -> Array2<f64> {
    let (n, v) = batch.dim();
    let p = v.div_ceil(patch_size);
    let mut out = Array2::zeros((n * p, patch_size));
    for i in 0..n {
        for g in 0..p {
            let start = g * patch_size;
            let end = (start + patch_size).min(v);
            out.slice_mut(s![i * p + g, ..end - start])
                .assign(&batch.slice(s![i, start..end]));
        }
    }
    out
}

/// Encoder outputs for one batch (all `n x width`, pooled over patches).
struct Encoded {
    latent: Var,
    tap: Var,
}

fn encode(tape: &mut Tape, vars: &MapperVars, cfg: &MapperConfig, batch: &Array2<f64>) -> Encoded {
    let n = batch.nrows();
    let p = cfg.n_patches();
    let patches = tape.leaf(patchify(batch, cfg.patch_size));
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..p).collect();

    let emb = tape.matmul(patches, vars.get("enc.patch.w"));
    let emb = tape.add_row(emb, vars.get("enc.patch.b"));
    let pos = tape.gather(vars.get("enc.pos"), &pos_ids);
    let mut x = tape.add(emb, pos);

    let mut tap_stream = None;
    for l in 0..cfg.encoder_layers {
        let ln1 = tape.layer_norm(x, vars.get(&format!("enc.l{l}.ln1.g")), vars.get(&format!("enc.l{l}.ln1.b")));
        let q = tape.matmul(ln1, vars.get(&format!("enc.l{l}.wq")));
        let k = tape.matmul(ln1, vars.get(&format!("enc.l{l}.wk")));
        let v = tape.matmul(ln1, vars.get(&format!("enc.l{l}.wv")));
        let scores = tape.attn_scores(q, k, p);
        let attn = tape.block_softmax(scores, p, false);
        let ctx = tape.attn_apply(attn, v, p);
        let proj = tape.matmul(ctx, vars.get(&format!("enc.l{l}.wo")));
        x = tape.add(x, proj);

        let ln2 = tape.layer_norm(x, vars.get(&format!("enc.l{l}.ln2.g")), vars.get(&format!("enc.l{l}.ln2.b")));
        let h1 = tape.matmul(ln2, vars.get(&format!("enc.l{l}.mlp.w1")));
        let h1 = tape.add_row(h1, vars.get(&format!("enc.l{l}.mlp.b1")));
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, vars.get(&format!("enc.l{l}.mlp.w2")));
        let h2 = tape.add_row(h2, vars.get(&format!("enc.l{l}.mlp.b2")));
        x = tape.add(x, h2);
        if l + 1 == cfg.tap_layer && cfg.tap_layer < cfg.encoder_layers {
            tap_stream = Some(x);
        }
    }
    let final_norm = tape.layer_norm(x, vars.get("enc.final.g"), vars.get("enc.final.b"));
    let latent = tape.mean_pool_blocks(final_norm, p);
    let tap = match tap_stream {
        Some(stream) => tape.mean_pool_blocks(stream, p),
        None => latent,
    };
    Encoded { latent, tap }
}

fn project_embedding(tape: &mut Tape, vars: &MapperVars, latent: Var) -> Var {
    let h = tape.matmul(latent, vars.get("proj.embed.w1"));
    let h = tape.add_row(h, vars.get("proj.embed.b1"));
    let h = tape.tanh(h);
    let out = tape.matmul(h, vars.get("proj.embed.w2"));
    tape.add_row(out, vars.get("proj.embed.b2"))
}

fn project_contrastive(tape: &mut Tape, vars: &MapperVars, tap: Var) -> Var {
    let h = tape.matmul(tap, vars.get("proj.nce.w1"));
    let h = tape.add_row(h, vars.get("proj.nce.b1"));
    let h = tape.tanh(h);
    let out = tape.matmul(h, vars.get("proj.nce.w2"));
    let out = tape.add_row(out, vars.get("proj.nce.b2"));
    tape.l2_normalize_rows(out)
}

/// Encoder latents for a batch of frames; exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub latents: Array2<f64>,
    pub tap_latents: Array2<f64>,
}

pub fn encode_batch(ckpt: &MapperCheckpoint, frames: &Array2<f64>) -> Result<LatentBatch> {
    if frames.ncols() != ckpt.config.input_voxels {
        return Err(Error::Shape(format!(
            "expected {} voxels, got {}",
            ckpt.config.input_voxels,
            frames.ncols()
        )));
    }
    let mut tape = Tape::new();
    let (vars, _) = MapperVars::leaf_all(&mut tape, &ckpt.params);
    let enc = encode(&mut tape, &vars, &ckpt.config, frames);
    Ok(LatentBatch {
        latents: tape.value(enc.latent).clone(),
        tap_latents: tape.value(enc.tap).clone(),
    })
}

/// Maps every TR frame to a predicted text embedding.
pub fn forward_map(ckpt: &MapperCheckpoint, fmri: &FmriSeries) -> Result<EmbeddingSeries> {
    if fmri.n_voxels() != ckpt.config.input_voxels {
        return Err(Error::Shape(format!(
            "mapper expects {} voxels, series has {}",
            ckpt.config.input_voxels,
            fmri.n_voxels()
        )));
    }
    let m = fmri.n_trs();
    let mut out = Array2::zeros((m, ckpt.config.embed_dim));
    let chunk = 256;
    let mut start = 0;
    while start < m {
        let end = (start + chunk).min(m);
        let mut tape = Tape::new();
        let (vars, _) = MapperVars::leaf_all(&mut tape, &ckpt.params);
        let frames = fmri.data().slice(s![start..end, ..]).to_owned();
        let enc = encode(&mut tape, &vars, &ckpt.config, &frames);
        let pred = project_embedding(&mut tape, &vars, enc.latent);
        out.slice_mut(s![start..end, ..]).assign(tape.value(pred));
        start = end;
    }
    EmbeddingSeries::new(out, fmri.times(), false)
}

/// Projected contrastive representations for a clean batch and its masked
/// counterpart. Rows are L2-normalized by construction.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    h: Array2<f64>,
    h_m: Array2<f64>,
}

impl ContrastivePair {
    pub fn new(h: Array2<f64>, h_m: Array2<f64>) -> Result<Self> {
        if h.dim() != h_m.dim() {
            return Err(Error::Shape(format!("{:?} vs {:?}", h.dim(), h_m.dim())));
        }
        for mat in [&h, &h_m] {
            for row in mat.rows() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "contrastive rows must be L2-normalized (norm {norm})"
                    )));
                }
            }
        }
        Ok(Self { h, h_m })
    }

    pub fn anchors(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn masked(&self) -> &Array2<f64> {
        &self.h_m
    }

    pub fn batch_size(&self) -> usize {
        self.h.nrows()
    }
}

/// Mean over the batch of per-sample summed squared error (the feature sum
/// is not averaged).
pub fn mse_loss(e: &Array2<f64>, e_hat: &Array2<f64>) -> Result<f64> {
    if e.dim() != e_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", e.dim(), e_hat.dim())));
    }
    let n = e.nrows().max(1);
    let total: f64 = e
        .iter()
        .zip(e_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / n as f64)
}

/// One-directional InfoNCE over the pair, summed (not averaged) over the
/// batch, computed with max-subtraction.
pub fn infonce_loss(pair: &ContrastivePair, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = pair.batch_size();
    let logits = pair.h.dot(&pair.h_m.t()) / temperature;
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i).to_owned();
        total += log_sum_exp(row.as_slice().unwrap()) - row[i];
    }
    Ok(total)
}

/// `MSE + lambda * InfoNCE`.
pub fn hybrid_loss(
    e: &Array2<f64>,
    e_hat: &Array2<f64>,
    pair: &ContrastivePair,
    lambda: f64,
    temperature: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(mse_loss(e, e_hat)? + lambda * infonce_loss(pair, temperature)?)
}

/// Zeroes each entry independently with probability `ratio`.
pub fn random_mask(batch: &Array2<f64>, ratio: f64, rng: &mut ChaCha12Rng) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let mut out = batch.clone();
    if ratio > 0.0 {
        for v in out.iter_mut() {
            if rng.gen::<f64>() < ratio {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Builds the full training-step loss on a tape. `masked` enables the
/// contrastive term. Returns (total, mse, infonce) nodes.
fn build_step_loss(
    tape: &mut Tape,
    vars: &MapperVars,
    cfg: &MapperConfig,
    frames: &Array2<f64>,
    masked: Option<&Array2<f64>>,
    targets: &Array2<f64>,
) -> (Var, Var, Option<Var>) {
    let n = frames.nrows();
    let enc = encode(tape, vars, cfg, frames);
    let target_leaf = tape.leaf(targets.clone());

    let enc_masked = masked.map(|m| encode(tape, vars, cfg, m));

    let (sq_sum, mse_n) = if cfg.mse_on_masked && enc_masked.is_some() {
        let pred_clean = project_embedding(tape, vars, enc.latent);
        let pred_masked = project_embedding(tape, vars, enc_masked.as_ref().unwrap().latent);
        let d1 = tape.sub(pred_clean, target_leaf);
        let d2 = tape.sub(pred_masked, target_leaf);
        let sq1 = tape.mul_elem(d1, d1);
        let sq2 = tape.mul_elem(d2, d2);
        let s1 = tape.sum_all(sq1);
        let s2 = tape.sum_all(sq2);
        (tape.add(s1, s2), 2 * n)
    } else {
        let pred = project_embedding(tape, vars, enc.latent);
        let diff = tape.sub(pred, target_leaf);
        let sq = tape.mul_elem(diff, diff);
        (tape.sum_all(sq), n)
    };
    let mse = tape.scale(sq_sum, 1.0 / mse_n as f64);

    let nce = enc_masked.map(|enc_m| {
        let h = project_contrastive(tape, vars, enc.tap);
        let h_m = project_contrastive(tape, vars, enc_m.tap);
        let logits = tape.matmul_nt(h, h_m);
        let logits = tape.scale(logits, 1.0 / cfg.temperature);
        let loss = tape.info_nce(logits);
        if cfg.symmetric_infonce {
            let logits_rev = tape.matmul_nt(h_m, h);
            let scaled = tape.scale(logits_rev, 1.0 / cfg.temperature);
            let rev = tape.info_nce(scaled);
            tape.add(loss, rev)
        } else {
            loss
        }
    });

    let total = match nce {
        Some(nce) => {
            let weighted = tape.scale(nce, cfg.contrastive_weight);
            tape.add(mse, weighted)
        }
        None => mse,
    };
    (total, mse, nce)
}

/// Hybrid-loss value for a fixed (clean, masked, target) step; the masked
/// batch is supplied explicitly so finite differences can hold it constant.
pub fn step_loss_value(
    params: &ParamSet,
    cfg: &MapperConfig,
    frames: &Array2<f64>,
    masked: Option<&Array2<f64>>,
    targets: &Array2<f64>,
) -> f64 {
    let mut tape = Tape::new();
    let mut by_name = HashMap::new();
    for (name, value) in params.iter() {
        by_name.insert(name.to_string(), tape.leaf(value.clone()));
    }
    let vars = MapperVars { by_name };
    let (total, _, _) = build_step_loss(&mut tape, &vars, cfg, frames, masked, targets);
    tape.scalar(total)
}

/// Hybrid-loss gradients for a fixed step, keyed by parameter name.
pub fn step_loss_grads(
    params: &ParamSet,
    cfg: &MapperConfig,
    frames: &Array2<f64>,
    masked: Option<&Array2<f64>>,
    targets: &Array2<f64>,
) -> (f64, Vec<(String, Option<Array2<f64>>)>) {
    let mut tape = Tape::new();
    let (vars, ordered) = MapperVars::leaf_all(&mut tape, params);
    let (total, _, _) = build_step_loss(&mut tape, &vars, cfg, frames, masked, targets);
    tape.backward(total);
    let value = tape.scalar(total);
    let grads = params
        .iter()
        .zip(&ordered)
        .map(|((name, _), var)| (name.to_string(), tape.grad(*var).cloned()))
        .collect();
    (value, grads)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_infonce: f64,
    pub val_mse: f64,
    pub val_cosine: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub final_val_cosine: f64,
}

fn validation_metrics(ckpt: &MapperCheckpoint, frames: &Array2<f64>, targets: &Array2<f64>) -> (f64, f64) {
    let mut preds = Array2::zeros(targets.raw_dim());
    let chunk = 256;
    let mut start = 0;
    while start < frames.nrows() {
        let end = (start + chunk).min(frames.nrows());
        let mut tape = Tape::new();
        let (vars, _) = MapperVars::leaf_all(&mut tape, &ckpt.params);
        let part = frames.slice(s![start..end, ..]).to_owned();
        let enc = encode(&mut tape, &vars, &ckpt.config, &part);
        let pred = project_embedding(&mut tape, &vars, enc.latent);
        preds.slice_mut(s![start..end, ..]).assign(tape.value(pred));
        start = end;
    }
    let mse = mse_loss(targets, &preds).expect("aligned shapes");
    let cosine = mean_row_cosine(&preds, targets);
    (mse, cosine)
}

/// Trains the mapper on aligned (fMRI, embedding) rows with a contiguous
/// 80/20 train/validation split; selects the epoch with the best validation
/// MSE (patience-limited) and returns that checkpoint.
pub fn train_mapper(
    fmri: &FmriSeries,
    targets: &EmbeddingSeries,
    config: &MapperConfig,
) -> Result<(MapperCheckpoint, TrainLog)> {
    config.validate()?;
    if fmri.n_trs() != targets.len() {
        return Err(Error::Shape(format!(
            "{} fMRI rows vs {} target rows",
            fmri.n_trs(),
            targets.len()
        )));
    }
    if fmri.n_voxels() != config.input_voxels {
        return Err(Error::Shape(format!(
            "config expects {} voxels, series has {}",
            config.input_voxels,
            fmri.n_voxels()
        )));
    }
    if targets.dim() != config.embed_dim {
        return Err(Error::Shape(format!(
            "config expects {}-dim targets, series has {}",
            config.embed_dim,
            targets.dim()
        )));
    }
    let m = fmri.n_trs();
    if m < 5 {
        return Err(Error::Validation("need at least 5 rows to split 80/20".into()));
    }

    // Contiguous split: the BOLD signal is autocorrelated in time, so a
    // shuffled split would leak across the boundary.
    let n_train = m * 4 / 5;
    let train_x = fmri.data().slice(s![..n_train, ..]).to_owned();
    let train_y = targets.vectors().slice(s![..n_train, ..]).to_owned();
    let val_x = fmri.data().slice(s![n_train.., ..]).to_owned();
    let val_y = targets.vectors().slice(s![n_train.., ..]).to_owned();

    let mut ckpt = MapperCheckpoint::init(config.clone())?;
    let streams = SeedStreams::new(config.seed);
    let mut shuffle_rng = streams.stream("mapper/shuffle");
    let mut mask_rng = streams.stream("mapper/mask");
    let mut opt = Adam::new(config.learning_rate, &ckpt.params);

    let contrastive = config.contrastive_weight > 0.0;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mse: f64::INFINITY,
        final_val_cosine: 0.0,
    };
    let mut best_params = ckpt.params.clone();
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_mse = 0.0;
        let mut epoch_nce = 0.0;
        let mut batches = 0usize;

        for batch_ids in order.chunks(config.batch_size) {
            let mut frames = Array2::zeros((batch_ids.len(), config.input_voxels));
            let mut batch_targets = Array2::zeros((batch_ids.len(), config.embed_dim));
            for (r, &idx) in batch_ids.iter().enumerate() {
                frames.row_mut(r).assign(&train_x.row(idx));
                batch_targets.row_mut(r).assign(&train_y.row(idx));
            }
            // Fresh mask every optimization step.
            let masked = if contrastive {
                Some(random_mask(&frames, config.mask_ratio, &mut mask_rng)?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let (vars, ordered) = MapperVars::leaf_all(&mut tape, &ckpt.params);
            let (total, mse, nce) =
                build_step_loss(&mut tape, &vars, config, &frames, masked.as_ref(), &batch_targets);
            epoch_loss += tape.scalar(total);
            epoch_mse += tape.scalar(mse);
            if let Some(nce) = nce {
                epoch_nce += tape.scalar(nce);
            }
            batches += 1;

            tape.backward(total);
            let grads: Vec<Option<Array2<f64>>> =
                ordered.iter().map(|v| tape.grad(*v).cloned()).collect();
            opt.step(&mut ckpt.params, &grads);
        }

        let (val_mse, val_cosine) = validation_metrics(&ckpt, &val_x, &val_y);
        log.epochs.push(EpochStats {
            train_loss: epoch_loss / batches.max(1) as f64,
            train_mse: epoch_mse / batches.max(1) as f64,
            train_infonce: epoch_nce / batches.max(1) as f64,
            val_mse,
            val_cosine,
        });

        if val_mse < log.best_val_mse {
            log.best_val_mse = val_mse;
            log.best_epoch = epoch;
            best_params = ckpt.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    ckpt.params = best_params;
    let (_, final_cos) = validation_metrics(&ckpt, &val_x, &val_y);
    log.final_val_cosine = final_cos;
    Ok((ckpt, log))
}

/// Mean per-row cosine between mapped and ground-truth embeddings.
pub fn eval_mapper(ckpt: &MapperCheckpoint, fmri: &FmriSeries, targets: &EmbeddingSeries) -> Result<f64> {
    if fmri.n_trs() != targets.len() {
        return Err(Error::Shape(format!(
            "{} fMRI rows vs {} target rows",
            fmri.n_trs(),
            targets.len()
        )));
    }
    let preds = forward_map(ckpt, fmri)?;
    Ok(mean_row_cosine(preds.vectors(), targets.vectors()))
}

/// Persists the checkpoint directory: `config.json`, `manifest.json`, blobs.
pub fn save_checkpoint(ckpt: &MapperCheckpoint, dir: &Path) -> Result<()> {
    store::save_tensors(dir, &ckpt.params)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&ckpt.config)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<MapperCheckpoint> {
    let raw = fs::read(dir.join("config.json"))
        .map_err(|e| Error::Integrity(format!("missing config.json in {}: {e}", dir.display())))?;
    let config: MapperConfig =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("bad config.json: {e}")))?;
    config.validate()?;
    let params = store::load_tensors(dir)?;
    let reference = init_params(&config, &mut SeedStreams::new(0).stream("shape-check"));
    if params.len() != reference.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, layout requires {}",
            params.len(),
            reference.len()
        )));
    }
    for ((name, loaded), (ref_name, ref_value)) in params.iter().zip(reference.iter()) {
        if name != ref_name || loaded.dim() != ref_value.dim() {
            return Err(Error::Integrity(format!(
                "tensor {name} does not match expected layout ({ref_name} {:?})",
                ref_value.dim()
            )));
        }
    }
    Ok(MapperCheckpoint { config, params })
}
