//! Windowed transformer velocity predictor.
//!
//! Tokens are latent frames of one schedule window: committed context
//! (the last `context_horizon` frames left of the active window) plus the
//! active frames themselves, and, when the mask covers them (training),
//! future-noise frames whose keys are blocked. Prompt embeddings join
//! every attention op as extra key/value columns; a biased additive mask
//! routes each frame to exactly the prompt active at that frame and
//! decides frame-frame visibility:
//!
//!   active  -> active     bidirectional (lower-triangular in the
//!                         causal_window ablation)
//!   active  -> committed  enabled within the window
//!   committed -> committed causal
//!   anyone  -> future     blocked
//!
//! Blocked entries carry -1e9; after max-subtraction their softmax weight
//! underflows to exactly 0.0, so masked content cannot perturb outputs
//! even at the bit level. The final projection is zero-initialized, so an
//! untrained model predicts exactly zero velocity (identity flow).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::motion::PromptSchedule;
use crate::num::checkpoint;
use crate::num::rng::Rng;
use crate::num::scalar::Scalar;
use crate::num::tape::{NodeId, Tape};
use crate::num::tensor::Tensor;
use crate::schedule::{AlphaBetaVector, RegionPartition};

pub const MASK_BLOCK: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    BidirectionalWindow,
    CausalWindow,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub latent_dim: usize,
    /// committed frames visible to the window, in latent frames
    pub context_horizon: usize,
    pub attn_mode: AttnMode,
    /// motion frames per latent frame, for prompt-to-frame routing
    pub downsample: usize,
    pub vocab: Vec<String>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 4,
            heads: 4,
            model_dim: 64,
            latent_dim: 4,
            context_horizon: 32,
            attn_mode: AttnMode::BidirectionalWindow,
            downsample: 4,
            vocab: crate::motion::ALL_CLASSES
                .iter()
                .map(|c| c.name().to_string())
                .collect(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(FloodError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.model_dim == 0 || self.latent_dim == 0 {
            return Err(FloodError::Config("degenerate denoiser dims".into()));
        }
        if self.vocab.is_empty() {
            return Err(FloodError::Config("empty prompt vocabulary".into()));
        }
        Ok(())
    }

    pub fn vocab_id(&self, prompt: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|v| v == prompt)
            .ok_or_else(|| FloodError::Vocab(prompt.to_string()))
    }
}

/// Per-frame schedule region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Committed,
    Active,
    Future,
}

pub fn regions_from_partition(p: &RegionPartition) -> Vec<Region> {
    (0..p.seq_len)
        .map(|k| {
            if k < p.m {
                Region::Committed
            } else if k < p.n {
                Region::Active
            } else {
                Region::Future
            }
        })
        .collect()
}

/// Region labels straight from noise levels; used by the random/chunk
/// schedule ablations where regions are not contiguous.
pub fn regions_from_alphas(ab: &AlphaBetaVector) -> Vec<Region> {
    (0..ab.len())
        .map(|k| {
            let a = ab.alpha(k);
            if a >= 1.0 {
                Region::Committed
            } else if a <= 0.0 {
                Region::Future
            } else {
                Region::Active
            }
        })
        .collect()
}

/// Additive attention bias over one frame window plus prompt columns.
#[derive(Clone, Debug)]
pub struct AttentionMask<S> {
    /// global latent index of the first covered frame
    pub lo: usize,
    /// end of coverage (exclusive); columns in [n, hi) are future noise
    pub hi: usize,
    /// row offsets (relative to lo) the model outputs velocities for
    pub active_rows: Vec<usize>,
    /// vocabulary id per prompt column
    pub prompt_cols: Vec<usize>,
    /// (hi-lo) x (hi-lo + prompt_cols) additive bias, 0 or MASK_BLOCK
    pub bias: Tensor<S>,
}

impl<S: Scalar> AttentionMask<S> {
    pub fn n_frames(&self) -> usize {
        self.hi - self.lo
    }

    pub fn n_prompts(&self) -> usize {
        self.prompt_cols.len()
    }
}

/// Mask over the window of a contiguous partition: coverage starts
/// context_horizon frames left of the active window and runs to the
/// partition's seq_len (the streaming engine passes seq_len == n so no
/// future token is ever materialized there).
pub fn build_attention_mask<S: Scalar>(
    partition: &RegionPartition,
    schedule: &PromptSchedule,
    config: &DenoiserConfig,
) -> Result<AttentionMask<S>> {
    let lo = partition.m.saturating_sub(config.context_horizon);
    build_mask_from_regions(
        &regions_from_partition(partition),
        lo,
        partition.seq_len,
        schedule,
        config,
    )
}

/// General form over explicit per-frame regions covering [lo, hi).
pub fn build_mask_from_regions<S: Scalar>(
    regions: &[Region],
    lo: usize,
    hi: usize,
    schedule: &PromptSchedule,
    config: &DenoiserConfig,
) -> Result<AttentionMask<S>> {
    if hi > regions.len() || lo >= hi {
        return Err(FloodError::Shape(format!(
            "mask window [{lo},{hi}) over {} frames",
            regions.len()
        )));
    }
    let w = hi - lo;
    // prompt entry per covered frame: latest entry with
    // start <= downsample*k + downsample-1 motion frames
    let entry_of = |k: usize| -> usize {
        schedule.active_entry(config.downsample * k + config.downsample - 1)
    };
    let first_entry = entry_of(lo);
    let last_entry = entry_of(hi - 1);
    let mut prompt_cols = Vec::with_capacity(last_entry - first_entry + 1);
    for e in first_entry..=last_entry {
        prompt_cols.push(config.vocab_id(&schedule.entries()[e].1)?);
    }
    let p = prompt_cols.len();
    let block = S::from_f64c(MASK_BLOCK);
    let mut bias = Tensor::full(&[w, w + p], block);
    let mut active_rows = Vec::new();
    for i in 0..w {
        let gi = lo + i;
        let ri = regions[gi];
        if ri == Region::Active {
            active_rows.push(i);
        }
        for j in 0..w {
            let gj = lo + j;
            let enabled = match (ri, regions[gj]) {
                (_, Region::Future) => gi == gj, // future rows see only themselves
                (Region::Active, Region::Active) => match config.attn_mode {
                    AttnMode::BidirectionalWindow => true,
                    AttnMode::CausalWindow => gj <= gi,
                },
                (Region::Active, Region::Committed) => true,
                (Region::Committed, Region::Committed) => gj <= gi,
                (Region::Committed, Region::Active) => false,
                (Region::Future, _) => gi == gj,
            };
            if enabled {
                bias.data_mut()[i * (w + p) + j] = S::zero();
            }
        }
        // the one prompt column active at this frame
        let col = entry_of(gi) - first_entry;
        bias.data_mut()[i * (w + p) + w + col] = S::zero();
    }
    Ok(AttentionMask {
        lo,
        hi,
        active_rows,
        prompt_cols,
        bias,
    })
}

// ---- the transformer -------------------------------------------------------

#[derive(Clone, Debug)]
struct LayerParams<S> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    wq: Tensor<S>,
    wk: Tensor<S>,
    wv: Tensor<S>,
    wo: Tensor<S>,
    ob: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    w1: Tensor<S>,
    b1: Tensor<S>,
    w2: Tensor<S>,
    b2: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    in_w: Tensor<S>,
    in_b: Tensor<S>,
    noise_w: Tensor<S>,
    noise_b: Tensor<S>,
    prompt_emb: Tensor<S>,
    layers: Vec<LayerParams<S>>,
    lnf_g: Tensor<S>,
    lnf_b: Tensor<S>,
    out_w: Tensor<S>,
    out_b: Tensor<S>,
    /// per-channel latent standardization recorded by training
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let l = config.latent_dim;
        let v = config.vocab.len();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(&[d], S::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: rng.init_weight(d, d),
                wk: rng.init_weight(d, d),
                wv: rng.init_weight(d, d),
                wo: rng.init_weight(d, d),
                ob: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], S::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: rng.init_weight(d, 4 * d),
                b1: Tensor::zeros(&[4 * d]),
                w2: rng.init_weight(4 * d, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Denoiser {
            in_w: rng.init_weight(l, d),
            in_b: Tensor::zeros(&[d]),
            noise_w: rng.init_weight(d, d),
            noise_b: Tensor::zeros(&[d]),
            prompt_emb: rng.init_weight(v, d),
            layers,
            lnf_g: Tensor::full(&[d], S::one()),
            lnf_b: Tensor::zeros(&[d]),
            // zero-initialized velocity head: identity flow at init
            out_w: Tensor::zeros(&[d, l]),
            out_b: Tensor::zeros(&[l]),
            latent_mean: vec![0.0; l],
            latent_std: vec![1.0; l],
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("in_w".into(), &self.in_w),
            ("in_b".into(), &self.in_b),
            ("noise_w".into(), &self.noise_w),
            ("noise_b".into(), &self.noise_b),
            ("prompt_emb".into(), &self.prompt_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.ln1_g"), &l.ln1_g));
            out.push((format!("l{i}.ln1_b"), &l.ln1_b));
            out.push((format!("l{i}.wq"), &l.wq));
            out.push((format!("l{i}.wk"), &l.wk));
            out.push((format!("l{i}.wv"), &l.wv));
            out.push((format!("l{i}.wo"), &l.wo));
            out.push((format!("l{i}.ob"), &l.ob));
            out.push((format!("l{i}.ln2_g"), &l.ln2_g));
            out.push((format!("l{i}.ln2_b"), &l.ln2_b));
            out.push((format!("l{i}.w1"), &l.w1));
            out.push((format!("l{i}.b1"), &l.b1));
            out.push((format!("l{i}.w2"), &l.w2));
            out.push((format!("l{i}.b2"), &l.b2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![
            &mut self.in_w,
            &mut self.in_b,
            &mut self.noise_w,
            &mut self.noise_b,
            &mut self.prompt_emb,
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ob);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.w1);
            out.push(&mut l.b1);
            out.push(&mut l.w2);
            out.push(&mut l.b2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    /// Sinusoidal features of a scalar in feature width `dim`.
    fn sin_features(vals: &[f64], dim: usize, scale: f64) -> Vec<f64> {
        let half = dim / 2;
        let mut out = Vec::with_capacity(vals.len() * dim);
        for &v in vals {
            for i in 0..half {
                let freq = scale / 10000f64.powf(i as f64 / half as f64);
                out.push((v * freq).sin());
                out.push((v * freq).cos());
            }
            if dim % 2 == 1 {
                out.push(0.0);
            }
        }
        out
    }

    /// Insert all parameters as tape nodes (named_params order).
    pub fn param_nodes(&self, tape: &mut Tape<S>) -> Vec<NodeId> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    /// Velocity prediction over a window graph. `x_window` rows cover
    /// frames [mask.lo, mask.hi); `alphas` aligns with those rows.
    /// Returns None when the active window is empty.
    pub fn predict_graph(
        &self,
        tape: &mut Tape<S>,
        x_window: NodeId,
        alphas: &[f64],
        mask: &AttentionMask<S>,
        params: &[NodeId],
    ) -> Result<Option<NodeId>> {
        let w = mask.n_frames();
        let p = mask.n_prompts();
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let hd = d / heads;
        if tape.value(x_window).shape() != [w, self.config.latent_dim] {
            return Err(FloodError::Shape(format!(
                "window tensor {:?} vs mask coverage {w} x {}",
                tape.value(x_window).shape(),
                self.config.latent_dim
            )));
        }
        if alphas.len() != w {
            return Err(FloodError::Shape(format!(
                "{} alphas for {w} window frames",
                alphas.len()
            )));
        }
        if mask.active_rows.is_empty() {
            return Ok(None);
        }
        let widx = |name: &str| -> usize {
            self.named_params()
                .iter()
                .position(|(n, _)| n == name)
                .expect("param name")
        };
        let pn = |name: &str| params[widx(name)];

        // frame tokens: input proj + noise-level emb + absolute positions
        let xw = tape.matmul(x_window, pn("in_w"))?;
        let mut h = tape.add_bias(xw, pn("in_b"))?;
        let noise_feat = tape.constant(Tensor::from_f64(
            &[w, d],
            &Self::sin_features(alphas, d, 1000.0),
        )?);
        let nf = tape.matmul(noise_feat, pn("noise_w"))?;
        let nf = tape.add_bias(nf, pn("noise_b"))?;
        h = tape.add(h, nf)?;
        let positions: Vec<f64> = (0..w).map(|i| (mask.lo + i) as f64).collect();
        let pos = tape.constant(Tensor::from_f64(
            &[w, d],
            &Self::sin_features(&positions, d, 1.0),
        )?);
        h = tape.add(h, pos)?;

        // prompt tokens: static embedding rows as extra K/V columns
        let prompts = tape.gather_rows(pn("prompt_emb"), &mask.prompt_cols)?;
        let bias = tape.constant(mask.bias.clone());
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        for li in 0..self.config.layers {
            let ln1g = pn(&format!("l{li}.ln1_g"));
            let ln1b = pn(&format!("l{li}.ln1_b"));
            let normed = tape.layer_norm(h, ln1g, ln1b)?;
            let normed_p = tape.layer_norm(prompts, ln1g, ln1b)?;
            let kv_src = tape.concat_rows(&[normed, normed_p])?;
            let q_full = tape.matmul(normed, pn(&format!("l{li}.wq")))?;
            let k_full = tape.matmul(kv_src, pn(&format!("l{li}.wk")))?;
            let v_full = tape.matmul(kv_src, pn(&format!("l{li}.wv")))?;
            let mut head_outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let q = tape.slice_cols(q_full, hh * hd, (hh + 1) * hd)?;
                let k = tape.slice_cols(k_full, hh * hd, (hh + 1) * hd)?;
                let v = tape.slice_cols(v_full, hh * hd, (hh + 1) * hd)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let scores = tape.add(scores, bias)?;
                let attn = tape.softmax(scores)?;
                head_outs.push(tape.matmul(attn, v)?);
            }
            let merged = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(merged, pn(&format!("l{li}.wo")))?;
            let proj = tape.add_bias(proj, pn(&format!("l{li}.ob")))?;
            h = tape.add(h, proj)?;

            let ln2g = pn(&format!("l{li}.ln2_g"));
            let ln2b = pn(&format!("l{li}.ln2_b"));
            let n2 = tape.layer_norm(h, ln2g, ln2b)?;
            let m1 = tape.matmul(n2, pn(&format!("l{li}.w1")))?;
            let m1 = tape.add_bias(m1, pn(&format!("l{li}.b1")))?;
            let m1 = tape.silu(m1);
            let m2 = tape.matmul(m1, pn(&format!("l{li}.w2")))?;
            let m2 = tape.add_bias(m2, pn(&format!("l{li}.b2")))?;
            h = tape.add(h, m2)?;
        }

        let hn = tape.layer_norm(h, pn("lnf_g"), pn("lnf_b"))?;
        let active = tape.gather_rows(hn, &mask.active_rows)?;
        let v = tape.matmul(active, pn("out_w"))?;
        let v = tape.add_bias(v, pn("out_b"))?;
        let _ = p;
        Ok(Some(v))
    }

    /// Inference path: velocities for the active rows of the mask, given
    /// the window tensor (rows = frames [mask.lo, mask.hi)).
    pub fn predict_velocity(
        &self,
        x_window: &Tensor<S>,
        alphas: &[f64],
        mask: &AttentionMask<S>,
    ) -> Result<Option<Tensor<S>>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x_window.clone());
        let params = self.param_nodes(&mut tape);
        Ok(self
            .predict_graph(&mut tape, xid, alphas, mask, &params)?
            .map(|id| tape.value(id).clone()))
    }

    /// Convenience wrapper taking the full sequence tensor; slices the
    /// mask's coverage out of it, so content outside [lo, hi) can never
    /// influence the result.
    pub fn predict_velocity_full(
        &self,
        x_full: &Tensor<S>,
        alphas_full: &[f64],
        mask: &AttentionMask<S>,
    ) -> Result<Option<Tensor<S>>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x_full.clone());
        let xw = tape.slice_rows(xid, mask.lo, mask.hi)?;
        let params = self.param_nodes(&mut tape);
        Ok(self
            .predict_graph(&mut tape, xw, &alphas_full[mask.lo..mask.hi], mask, &params)?
            .map(|id| tape.value(id).clone()))
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "denoiser",
            "config": self.config,
            "latent_mean": self.latent_mean,
            "latent_std": self.latent_std,
            "extra": extra_meta,
        });
        checkpoint::save(path, &self.named_params(), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (tensors, meta) = checkpoint::load::<S>(path)?;
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| FloodError::Format(format!("denoiser config in checkpoint: {e}")))?;
        let mut model = Denoiser::init(config, &mut Rng::new(0))?;
        let expect: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        {
            let mut slots = model.params_mut();
            for (i, (name, tensor)) in tensors.into_iter().enumerate() {
                if i >= slots.len() || name != expect[i] {
                    return Err(FloodError::Format(format!(
                        "unexpected tensor '{name}' at slot {i} in denoiser checkpoint"
                    )));
                }
                if slots[i].shape() != tensor.shape() {
                    return Err(FloodError::Format(format!(
                        "tensor '{name}' shape {:?} vs expected {:?}",
                        tensor.shape(),
                        slots[i].shape()
                    )));
                }
                *slots[i] = tensor;
            }
        }
        if let Some(m) = meta["latent_mean"].as_array() {
            model.latent_mean = m.iter().filter_map(|v| v.as_f64()).collect();
        }
        if let Some(s) = meta["latent_std"].as_array() {
            model.latent_std = s.iter().filter_map(|v| v.as_f64()).collect();
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{partition, ScheduleParams};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            context_horizon: 8,
            ..Default::default()
        }
    }

    fn mask_for(
        t: f64,
        k_len: usize,
        schedule: &PromptSchedule,
        config: &DenoiserConfig,
    ) -> (AttentionMask<f32>, RegionPartition) {
        let params = ScheduleParams::triangular(4.0, k_len).unwrap();
        let part = partition(&params, t).unwrap();
        (
            build_attention_mask(&part, schedule, config).unwrap(),
            part,
        )
    }

    #[test]
    fn single_prompt_mask_structure() {
        // active {2,3,4}: the active block is fully enabled 3x3 and the
        // frame-prompt column is enabled everywhere
        let config = tiny_config();
        let schedule = PromptSchedule::single("walk");
        let (mask, part) = mask_for(1.25, 12, &schedule, &config);
        assert_eq!((part.m, part.n), (2, 5));
        assert_eq!(mask.lo, 0);
        assert_eq!(mask.hi, 12);
        assert_eq!(mask.n_prompts(), 1);
        let w = mask.n_frames();
        let cols = w + 1;
        for i in 2..5 {
            for j in 2..5 {
                assert_eq!(mask.bias.data()[i * cols + j], 0.0, "active {i},{j}");
            }
            assert_eq!(mask.bias.data()[i * cols + w], 0.0, "prompt col row {i}");
        }
        // no row may attend a future frame other than itself
        for i in 0..w {
            for j in part.n..w {
                if i != j {
                    assert!(mask.bias.data()[i * cols + j] < -1e8, "{i},{j}");
                }
            }
        }
    }

    #[test]
    fn prompt_switch_column_routing() {
        // prompts at motion frames 0 and 40 with downsample 4: latent
        // frames 0-9 attend the first prompt, 10+ the second
        let config = tiny_config();
        let schedule =
            PromptSchedule::new(vec![(0, "walk".into()), (40, "wave".into())]).unwrap();
        let (mask, _) = mask_for(4.0, 24, &schedule, &config);
        assert_eq!(mask.n_prompts(), 2);
        let w = mask.n_frames();
        let cols = w + 2;
        for i in 0..w {
            let gi = mask.lo + i;
            let want_col = if gi < 10 { w } else { w + 1 };
            let other_col = if gi < 10 { w + 1 } else { w };
            assert_eq!(mask.bias.data()[i * cols + want_col], 0.0, "frame {gi}");
            assert!(mask.bias.data()[i * cols + other_col] < -1e8, "frame {gi}");
        }
    }

    #[test]
    fn causal_window_blocks_upper_triangle_only() {
        let mut config = tiny_config();
        let schedule = PromptSchedule::single("walk");
        let (bidir, part) = mask_for(1.5, 12, &schedule, &config);
        config.attn_mode = AttnMode::CausalWindow;
        let (causal, _) = mask_for(1.5, 12, &schedule, &config);
        let w = bidir.n_frames();
        let cols = w + 1;
        let mut diffs = 0;
        for i in 0..w {
            for j in 0..cols {
                let a = bidir.bias.data()[i * cols + j];
                let b = causal.bias.data()[i * cols + j];
                if a != b {
                    diffs += 1;
                    let (gi, gj) = (bidir.lo + i, bidir.lo + j);
                    assert!(part.active().contains(&gi) && part.active().contains(&gj));
                    assert!(gj > gi, "only j > i inside the active block may differ");
                    assert_eq!(b, MASK_BLOCK as f32);
                }
            }
        }
        assert!(diffs > 0);
    }

    #[test]
    fn missing_frame_zero_prompt_is_error() {
        assert!(PromptSchedule::new(vec![(4, "walk".into())]).is_err());
    }

    #[test]
    fn unknown_prompt_rejected() {
        let config = tiny_config();
        let schedule = PromptSchedule::single("moonwalk");
        let params = ScheduleParams::triangular(4.0, 12).unwrap();
        let part = partition(&params, 1.25).unwrap();
        assert!(build_attention_mask::<f32>(&part, &schedule, &config).is_err());
    }

    #[test]
    fn zero_init_outputs_zero_velocity() {
        let config = tiny_config();
        let model = Denoiser::<f32>::init(config.clone(), &mut Rng::new(1)).unwrap();
        let schedule = PromptSchedule::single("walk");
        let (mask, _) = mask_for(1.25, 12, &schedule, &config);
        let x: Tensor<f32> = Rng::new(2).randn(&[12, 4]);
        let alphas: Vec<f64> = (0..12).map(|k| (1.25 - k as f64 / 4.0).clamp(0.0, 1.0)).collect();
        let v = model
            .predict_velocity_full(&x, &alphas, &mask)
            .unwrap()
            .unwrap();
        assert_eq!(v.shape(), &[3, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_rows_match_active_window() {
        let config = tiny_config();
        let mut model = Denoiser::<f32>::init(config.clone(), &mut Rng::new(3)).unwrap();
        // non-zero head so outputs are informative
        model.out_w = Rng::new(4).init_weight(config.model_dim, config.latent_dim);
        let schedule = PromptSchedule::single("run");
        for t in [0.3, 1.0, 1.25, 2.9, 5.0] {
            let params = ScheduleParams::triangular(4.0, 24).unwrap();
            let part = partition(&params, t).unwrap();
            let mask = build_attention_mask::<f32>(&part, &schedule, &config).unwrap();
            let x: Tensor<f32> = Rng::new(5).randn(&[24, 4]);
            let alphas: Vec<f64> =
                (0..24).map(|k| (t - k as f64 / 4.0).clamp(0.0, 1.0)).collect();
            let out = model.predict_velocity_full(&x, &alphas, &mask).unwrap();
            match out {
                Some(v) => assert_eq!(v.shape()[0], part.active_len()),
                None => assert_eq!(part.active_len(), 0),
            }
        }
    }

    #[test]
    fn future_noise_contents_cannot_leak() {
        // permuting future-noise frames leaves active outputs bit-identical
        let config = tiny_config();
        let mut model = Denoiser::<f32>::init(config.clone(), &mut Rng::new(6)).unwrap();
        model.out_w = Rng::new(7).init_weight(config.model_dim, config.latent_dim);
        let schedule = PromptSchedule::single("walk");
        let (mask, part) = mask_for(1.25, 16, &schedule, &config);
        let x: Tensor<f32> = Rng::new(8).randn(&[16, 4]);
        let alphas: Vec<f64> =
            (0..16).map(|k| (1.25 - k as f64 / 4.0).clamp(0.0, 1.0)).collect();
        let v1 = model.predict_velocity_full(&x, &alphas, &mask).unwrap().unwrap();
        let mut x2 = x.clone();
        for k in part.n..16 {
            for c in 0..4 {
                x2.data_mut()[k * 4 + c] = 13.0 + (k * 4 + c) as f32;
            }
        }
        let v2 = model.predict_velocity_full(&x2, &alphas, &mask).unwrap().unwrap();
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn context_beyond_horizon_cannot_leak() {
        // with horizon 8 and m = 40, frames left of 32 are outside the
        // window; changing them leaves the output bit-identical
        let config = tiny_config();
        let mut model = Denoiser::<f32>::init(config.clone(), &mut Rng::new(9)).unwrap();
        model.out_w = Rng::new(10).init_weight(config.model_dim, config.latent_dim);
        let schedule = PromptSchedule::single("walk");
        let t = 10.5; // m = ceil(4*(t-1)) = 38... use partition directly
        let params = ScheduleParams::triangular(4.0, 48).unwrap();
        let part = partition(&params, t).unwrap();
        assert!(part.m >= config.context_horizon);
        let mask = build_attention_mask::<f32>(&part, &schedule, &config).unwrap();
        assert_eq!(mask.lo, part.m - config.context_horizon);
        let x: Tensor<f32> = Rng::new(11).randn(&[48, 4]);
        let alphas: Vec<f64> = (0..48).map(|k| (t - k as f64 / 4.0).clamp(0.0, 1.0)).collect();
        let v1 = model.predict_velocity_full(&x, &alphas, &mask).unwrap().unwrap();
        let mut x2 = x.clone();
        for k in 0..mask.lo {
            for c in 0..4 {
                x2.data_mut()[k * 4 + c] = -99.0;
            }
        }
        let v2 = model.predict_velocity_full(&x2, &alphas, &mask).unwrap().unwrap();
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn mask_soundness_zero_weight_on_blocked() {
        // softmax of random scores + bias puts exactly zero mass on
        // blocked columns
        let config = tiny_config();
        let schedule =
            PromptSchedule::new(vec![(0, "walk".into()), (24, "wave".into())]).unwrap();
        let (mask, _) = mask_for(2.0, 16, &schedule, &config);
        let w = mask.n_frames();
        let cols = w + mask.n_prompts();
        let mut tape = Tape::<f32>::new();
        let scores = tape.constant(Rng::new(12).randn(&[w, cols]));
        let bias = tape.constant(mask.bias.clone());
        let sum = tape.add(scores, bias).unwrap();
        let probs = tape.softmax(sum).unwrap();
        for i in 0..w {
            for j in 0..cols {
                if mask.bias.data()[i * cols + j] < -1e8 {
                    assert_eq!(tape.value(probs).data()[i * cols + j], 0.0, "{i},{j}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_with_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.fsck");
        let config = tiny_config();
        let mut model = Denoiser::<f32>::init(config.clone(), &mut Rng::new(13)).unwrap();
        model.latent_mean = vec![0.1, 0.2, 0.3, 0.4];
        model.latent_std = vec![1.1, 1.2, 1.3, 1.4];
        model
            .save(&path, serde_json::json!({"schedule_kind": "triangular"}))
            .unwrap();
        let (loaded, meta) = Denoiser::<f32>::load(&path).unwrap();
        assert_eq!(meta["extra"]["schedule_kind"], "triangular");
        assert_eq!(loaded.config.vocab, config.vocab);
        assert_eq!(loaded.latent_mean, model.latent_mean);
        for ((_, a), (_, b)) in model.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(*a, &b);
        }
    }
}
