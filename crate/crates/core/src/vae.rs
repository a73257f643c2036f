//! Strictly causal temporal VAE.
//!
//! The encoder maps D-channel motion at the stream rate to 4-channel
//! latents at a quarter rate through two stride-2 causal convolutions
//! (left edge padded by replicating the first frame) and a linear
//! projection; a learnable linear head turns the encoder output e into
//! the latent z. The decoder mirrors this with two stride-2 causal
//! transposed convolutions. Receptive fields are one-sided: latent t
//! depends only on motion frames <= 4t, decoded frame p only on latents
//! <= floor(p/4), so the decoder adds no look-back slack.
//!
//! Training objective (means over elements):
//!
//!   L = ||x - D(z)||^2 + ||sg[e] - z||^2 + gamma * ||sg[z] - e||^2
//!
//! with e = E(x), z = head(e). The stop-gradients route term 2 to the
//! head alone (its z replica is computed from a detached e) and term 3 to
//! the encoder alone; reconstruction trains decoder, head and encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::motion::MotionSequence;
use crate::num::adam::{adam_step, AdamConfig, AdamState};
use crate::num::checkpoint;
use crate::num::rng::Rng;
use crate::num::scalar::Scalar;
use crate::num::tape::{NodeId, Tape};
use crate::num::tensor::Tensor;

/// Decoded frame p depends on latents up to floor(p/4) exactly; there is
/// no additional look-back, so reconstruction causality probes compare
/// strictly left of the perturbed frame.
pub const DECODER_SLACK: usize = 0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VaeConfig {
    pub d_in: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub gamma: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            d_in: crate::motion::DEFAULT_CHANNELS,
            latent_dim: 4,
            downsample: 4,
            hidden: 64,
            kernel: 4,
            gamma: 0.25,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != 4 || self.downsample != 4 {
            return Err(FloodError::Config(
                "latent_dim and downsample are fixed to 4".into(),
            ));
        }
        if self.hidden == 0 || self.kernel == 0 || self.d_in == 0 {
            return Err(FloodError::Config("hidden, kernel, d_in must be >= 1".into()));
        }
        Ok(())
    }
}

/// Causal-VAE latents: rows are latent frames at fps/downsample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<S> {
    pub data: Tensor<S>,
    pub latent_fps: f64,
}

impl<S: Scalar> LatentSequence<S> {
    pub fn n_frames(&self) -> usize {
        self.data.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Vae<S> {
    pub config: VaeConfig,
    pub enc1_w: Tensor<S>,
    pub enc1_b: Tensor<S>,
    pub enc2_w: Tensor<S>,
    pub enc2_b: Tensor<S>,
    pub enc_proj_w: Tensor<S>,
    pub enc_proj_b: Tensor<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pub dec1_w: Tensor<S>,
    pub dec1_b: Tensor<S>,
    pub dec2_w: Tensor<S>,
    pub dec2_b: Tensor<S>,
    pub dec_proj_w: Tensor<S>,
    pub dec_proj_b: Tensor<S>,
}

/// Node handles of one training forward pass.
pub struct VaeGraph {
    pub params: Vec<NodeId>,
    pub e: NodeId,
    pub z: NodeId,
    pub xhat: NodeId,
}

/// Loss node plus the three term values (term3 unscaled).
pub struct VaeLoss {
    pub total: NodeId,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

impl<S: Scalar> Vae<S> {
    pub fn init(config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, l, k) = (config.d_in, config.hidden, config.latent_dim, config.kernel);
        Ok(Vae {
            config,
            enc1_w: rng.init_weight(k * d, h),
            enc1_b: Tensor::zeros(&[h]),
            enc2_w: rng.init_weight(k * h, h),
            enc2_b: Tensor::zeros(&[h]),
            enc_proj_w: rng.init_weight(h, l),
            enc_proj_b: Tensor::zeros(&[l]),
            head_w: rng.init_weight(l, l),
            head_b: Tensor::zeros(&[l]),
            dec1_w: rng.init_weight(k * l, h),
            dec1_b: Tensor::zeros(&[h]),
            dec2_w: rng.init_weight(k * h, h),
            dec2_b: Tensor::zeros(&[h]),
            dec_proj_w: rng.init_weight(h, d),
            dec_proj_b: Tensor::zeros(&[d]),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("enc1_w".into(), &self.enc1_w),
            ("enc1_b".into(), &self.enc1_b),
            ("enc2_w".into(), &self.enc2_w),
            ("enc2_b".into(), &self.enc2_b),
            ("enc_proj_w".into(), &self.enc_proj_w),
            ("enc_proj_b".into(), &self.enc_proj_b),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
            ("dec1_w".into(), &self.dec1_w),
            ("dec1_b".into(), &self.dec1_b),
            ("dec2_w".into(), &self.dec2_w),
            ("dec2_b".into(), &self.dec2_b),
            ("dec_proj_w".into(), &self.dec_proj_w),
            ("dec_proj_b".into(), &self.dec_proj_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.enc_proj_w,
            &mut self.enc_proj_b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.dec1_w,
            &mut self.dec1_b,
            &mut self.dec2_w,
            &mut self.dec2_b,
            &mut self.dec_proj_w,
            &mut self.dec_proj_b,
        ]
    }

    /// Parameters of encoder+head / decoder as tape nodes, in
    /// named_params order.
    fn param_nodes(&self, tape: &mut Tape<S>) -> Vec<NodeId> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    /// e = proj(silu(conv2(silu(conv1(x))))), given parameter nodes.
    fn encode_graph(&self, tape: &mut Tape<S>, x: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let k = self.config.kernel;
        let h1 = tape.causal_conv_s2(x, p[0], p[1], k)?;
        let h1 = tape.silu(h1);
        let h2 = tape.causal_conv_s2(h1, p[2], p[3], k)?;
        let h2 = tape.silu(h2);
        let e = tape.matmul(h2, p[4])?;
        tape.add_bias(e, p[5])
    }

    fn head_graph(&self, tape: &mut Tape<S>, e: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let z = tape.matmul(e, p[6])?;
        tape.add_bias(z, p[7])
    }

    fn decode_graph(&self, tape: &mut Tape<S>, z: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let k = self.config.kernel;
        let g1 = tape.causal_tconv_s2(z, p[8], p[9], k)?;
        let g1 = tape.silu(g1);
        let g2 = tape.causal_tconv_s2(g1, p[10], p[11], k)?;
        let g2 = tape.silu(g2);
        let xhat = tape.matmul(g2, p[12])?;
        tape.add_bias(xhat, p[13])
    }

    /// Full training-forward graph over a constant input node.
    pub fn forward_graph(&self, tape: &mut Tape<S>, x: NodeId) -> Result<VaeGraph> {
        let params = self.param_nodes(tape);
        let e = self.encode_graph(tape, x, &params)?;
        let z = self.head_graph(tape, e, &params)?;
        let xhat = self.decode_graph(tape, z, &params)?;
        Ok(VaeGraph { params, e, z, xhat })
    }

    /// The three-term objective; see the module docs for the gradient
    /// routing. Returns the loss node and term values.
    pub fn loss_graph(&self, tape: &mut Tape<S>, x: NodeId, graph: &VaeGraph) -> Result<VaeLoss> {
        let term1 = tape.mse(graph.xhat, x)?;
        // z replica from a detached e: term 2 trains the head only
        let e_d = tape.detach(graph.e);
        let z2 = self.head_graph(tape, e_d, &graph.params)?;
        let term2 = tape.mse(e_d, z2)?;
        // term 3 pulls the encoder toward the frozen latent
        let z_d = tape.detach(graph.z);
        let term3 = tape.mse(z_d, graph.e)?;
        let t3_scaled = tape.scale(term3, self.config.gamma);
        let partial = tape.add(term1, term2)?;
        let total = tape.add(partial, t3_scaled)?;
        Ok(VaeLoss {
            total,
            term1: tape.value(term1).item().to_f64c(),
            term2: tape.value(term2).item().to_f64c(),
            term3: tape.value(term3).item().to_f64c(),
        })
    }

    /// Inference-path encode of a (T, D) tensor; T >= downsample.
    pub fn encode_tensor(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rows() < self.config.downsample {
            return Err(FloodError::Shape(format!(
                "encode wants >= {} frames, got {}",
                self.config.downsample,
                x.rows()
            )));
        }
        if x.shape()[1] != self.config.d_in {
            return Err(FloodError::Shape(format!(
                "encode wants {} channels, got {}",
                self.config.d_in,
                x.shape()[1]
            )));
        }
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let params = self.param_nodes(&mut tape);
        let e = self.encode_graph(&mut tape, xid, &params)?;
        let z = self.head_graph(&mut tape, e, &params)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode(&self, x: &MotionSequence) -> Result<LatentSequence<S>> {
        let t = Tensor::from_f64(
            &[x.n_frames(), x.channels()],
            &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )?;
        Ok(LatentSequence {
            data: self.encode_tensor(&t)?,
            latent_fps: x.fps() / self.config.downsample as f64,
        })
    }

    /// Batch decode; defined as the fold of the incremental decoder so the
    /// streaming path is bit-identical by construction.
    pub fn decode_tensor(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.shape()[1] != self.config.latent_dim {
            return Err(FloodError::Shape(format!(
                "decode wants latent dim {}, got {}",
                self.config.latent_dim,
                z.shape()[1]
            )));
        }
        let mut state = IncrementalDecoder::new(self);
        let mut out = Vec::with_capacity(z.rows() * 4 * self.config.d_in);
        for q in 0..z.rows() {
            let frames = state.push_latent(z.row(q));
            out.extend_from_slice(&frames);
        }
        Tensor::new(vec![z.rows() * 4, self.config.d_in], out)
    }

    pub fn decode(&self, z: &LatentSequence<S>, fps: f64) -> Result<MotionSequence> {
        let x = self.decode_tensor(&z.data)?;
        MotionSequence::new(
            fps,
            self.config.d_in,
            x.data().iter().map(|v| v.to_f64c() as f32).collect(),
        )
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vae",
            "config": self.config,
            "extra": extra_meta,
        });
        checkpoint::save(path, &self.named_params(), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (tensors, meta) = checkpoint::load::<S>(path)?;
        let config: VaeConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| FloodError::Format(format!("vae config in checkpoint: {e}")))?;
        let mut rng = Rng::new(0);
        let mut vae = Vae::init(config, &mut rng)?;
        {
            let expect: Vec<String> = vae.named_params().iter().map(|(n, _)| n.clone()).collect();
            let mut slots = vae.params_mut();
            for (i, (name, tensor)) in tensors.into_iter().enumerate() {
                if i >= slots.len() || name != expect[i] {
                    return Err(FloodError::Format(format!(
                        "unexpected tensor '{name}' at slot {i} in vae checkpoint"
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
        Ok((vae, meta))
    }
}

/// Persistent per-stream decoder state: one pending input row per
/// transposed stage. Each committed latent yields exactly 4 motion frames
/// in O(1) work.
pub struct IncrementalDecoder<'a, S> {
    vae: &'a Vae<S>,
    z_prev: Option<Vec<S>>,
    h1_prev: Option<Vec<S>>,
    /// next output index per stage, for tap alignment
    next_latent: usize,
}

impl<'a, S: Scalar> IncrementalDecoder<'a, S> {
    pub fn new(vae: &'a Vae<S>) -> Self {
        IncrementalDecoder {
            vae,
            z_prev: None,
            h1_prev: None,
            next_latent: 0,
        }
    }

    /// Transposed-conv taps of output row s: pairs (j, t) with s = 2t + j,
    /// summed in ascending j exactly like the batch path.
    fn tconv_row(
        s: usize,
        k: usize,
        w: &Tensor<S>,
        b: &Tensor<S>,
        get_in: impl Fn(usize) -> Option<Vec<S>>,
        cin: usize,
        cout: usize,
    ) -> Vec<S> {
        let mut out = b.data().to_vec();
        for j in 0..k {
            if s < j || (s - j) % 2 != 0 {
                continue;
            }
            let t = (s - j) / 2;
            let row = match get_in(t) {
                Some(r) => r,
                None => continue,
            };
            for (ci, &xv) in row.iter().enumerate().take(cin) {
                let wrow = &w.data()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                for (ov, &wv) in out.iter_mut().zip(wrow) {
                    *ov = *ov + xv * wv;
                }
            }
        }
        out
    }

    /// Feed one latent frame, get its 4 decoded motion frames.
    pub fn push_latent(&mut self, z_row: &[S]) -> Vec<S> {
        let cfg = &self.vae.config;
        let (l, h, d, k) = (cfg.latent_dim, cfg.hidden, cfg.d_in, cfg.kernel);
        let q = self.next_latent;
        self.next_latent += 1;
        let z_cur = z_row.to_vec();
        let z_at = |t: usize| -> Option<Vec<S>> {
            if t == q {
                Some(z_cur.clone())
            } else if t + 1 == q {
                self.z_prev.clone()
            } else {
                None
            }
        };
        // stage 1 rows 2q and 2q+1
        let mut h1_rows = Vec::with_capacity(2);
        for s in [2 * q, 2 * q + 1] {
            let mut row = Self::tconv_row(s, k, &self.vae.dec1_w, &self.vae.dec1_b, &z_at, l, h);
            for v in &mut row {
                *v = silu_scalar(*v);
            }
            h1_rows.push(row);
        }
        // stage 2 rows 4q..4q+3; taps reach h1[2q-1] from the previous push
        let h1_at = |t: usize| -> Option<Vec<S>> {
            if t == 2 * q {
                Some(h1_rows[0].clone())
            } else if t == 2 * q + 1 {
                Some(h1_rows[1].clone())
            } else if t + 1 == 2 * q {
                self.h1_prev.clone()
            } else {
                None
            }
        };
        let mut out = Vec::with_capacity(4 * d);
        for s in 4 * q..4 * q + 4 {
            let mut row = Self::tconv_row(s, k, &self.vae.dec2_w, &self.vae.dec2_b, &h1_at, h, h);
            for v in &mut row {
                *v = silu_scalar(*v);
            }
            // final projection row: matmul accumulation from zero, bias
            // added afterwards, matching the tape path bit for bit
            let mut proj = vec![S::zero(); d];
            for (ci, &xv) in row.iter().enumerate() {
                let wrow = &self.vae.dec_proj_w.data()[ci * d..(ci + 1) * d];
                for (ov, &wv) in proj.iter_mut().zip(wrow) {
                    *ov = *ov + xv * wv;
                }
            }
            for (ov, &bv) in proj.iter_mut().zip(self.vae.dec_proj_b.data()) {
                *ov = *ov + bv;
            }
            out.extend_from_slice(&proj);
        }
        self.z_prev = Some(z_cur);
        self.h1_prev = Some(h1_rows.pop().unwrap());
        out
    }
}

/// Matches the tape's silu elementwise arithmetic exactly: sigmoid is
/// rounded first, then multiplied.
pub(crate) fn silu_scalar<S: Scalar>(x: S) -> S {
    let cap = S::from_f64c(crate::num::scalar::EXP_CLAMP);
    let nx = if -x > cap { cap } else { -x };
    let s = S::one() / (S::one() + nx.exp());
    x * s
}

// ---- training ---------------------------------------------------------------

pub struct VaeTrainReport {
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Train on motion sequences; batch 16, Adam at the default lr. Aborts
/// with a divergence error if the loss exceeds 10x the initial value.
pub fn train_vae<S: Scalar>(
    vae: &mut Vae<S>,
    dataset: &[MotionSequence],
    rng: &mut Rng,
    steps: usize,
    batch: usize,
) -> Result<VaeTrainReport> {
    if dataset.is_empty() {
        return Err(FloodError::Config("empty dataset".into()));
    }
    let names: Vec<String> = vae.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut adam = {
        let refs: Vec<&Tensor<S>> = vae.named_params().into_iter().map(|(_, t)| t).collect();
        AdamState::new(&refs)
    };
    let cfg = AdamConfig::default();
    let mut losses = Vec::with_capacity(steps);
    let mut initial = f64::NAN;
    for step in 0..steps {
        let mut tape = Tape::new();
        let mut sample_losses = Vec::with_capacity(batch);
        let mut grads_acc: Option<Vec<Tensor<S>>> = None;
        for _ in 0..batch {
            let seq = &dataset[rng.uniform_usize(dataset.len())];
            let x = Tensor::from_f64(
                &[seq.n_frames(), seq.channels()],
                &seq.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            )?;
            let xid = tape.constant(x);
            let graph = vae.forward_graph(&mut tape, xid)?;
            let loss = vae.loss_graph(&mut tape, xid, &graph)?;
            sample_losses.push((loss.total, graph.params));
        }
        let loss_ids: Vec<NodeId> = sample_losses.iter().map(|(l, _)| *l).collect();
        let stacked = tape.concat_rows(&loss_ids)?;
        let total = tape.mean(stacked);
        let loss_val = tape.value(total).item().to_f64c();
        if step == 0 {
            initial = loss_val;
        }
        if !loss_val.is_finite() || loss_val > 10.0 * initial.max(1e-12) {
            return Err(FloodError::Divergence(format!(
                "vae loss {loss_val:.6} at step {step} (initial {initial:.6})"
            )));
        }
        losses.push(loss_val);
        tape.backward(total)?;
        // sum gradients across the batch's per-sample parameter nodes
        for (_, pids) in &sample_losses {
            let these: Vec<Tensor<S>> = pids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
                })
                .collect();
            match &mut grads_acc {
                None => grads_acc = Some(these),
                Some(acc) => {
                    for (a, t) in acc.iter_mut().zip(these) {
                        for (av, tv) in a.data_mut().iter_mut().zip(t.data()) {
                            *av = *av + *tv;
                        }
                    }
                }
            }
        }
        let grads = grads_acc.expect("batch nonempty");
        let mut params = vae.params_mut();
        adam_step(&mut params, &grads, &names, &mut adam, &cfg)?;
    }
    Ok(VaeTrainReport {
        losses,
        steps,
    })
}

/// Mean squared reconstruction error relative to the data variance.
pub fn relative_recon_error<S: Scalar>(vae: &Vae<S>, seqs: &[MotionSequence]) -> Result<f64> {
    let mut num = 0.0;
    let mut mean_acc = 0.0;
    let mut count = 0.0;
    let mut sq_acc = 0.0;
    for seq in seqs {
        let z = vae.encode(seq)?;
        let xhat = vae.decode_tensor(&z.data)?;
        let t = seq.n_frames().min(xhat.rows());
        for i in 0..t {
            let f = seq.frame(i);
            for c in 0..seq.channels() {
                let x = f[c] as f64;
                let r = xhat.data()[i * seq.channels() + c].to_f64c();
                num += (x - r) * (x - r);
                mean_acc += x;
                sq_acc += x * x;
                count += 1.0;
            }
        }
    }
    let mean = mean_acc / count;
    let var = sq_acc / count - mean * mean;
    Ok(num / count / var.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{gen_synthetic, MotionClass};

    fn tiny_vae(seed: u64) -> Vae<f32> {
        let cfg = VaeConfig {
            hidden: 16,
            ..Default::default()
        };
        Vae::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn latent_length_is_quarter() {
        let vae = tiny_vae(1);
        let x: Tensor<f32> = Rng::new(2).randn(&[16, 16]);
        let z = vae.encode_tensor(&x).unwrap();
        assert_eq!(z.shape(), &[4, 4]);
        let back = vae.decode_tensor(&z).unwrap();
        assert_eq!(back.shape(), &[16, 16]);
    }

    #[test]
    fn too_short_input_rejected() {
        let vae = tiny_vae(1);
        let x: Tensor<f32> = Rng::new(2).randn(&[3, 16]);
        assert!(vae.encode_tensor(&x).is_err());
    }

    #[test]
    fn constant_input_constant_latents() {
        let vae = tiny_vae(3);
        let x = Tensor::<f32>::full(&[32, 16], 0.37);
        let z = vae.encode_tensor(&x).unwrap();
        let first = z.row(0).to_vec();
        for q in 1..z.rows() {
            assert_eq!(z.row(q), &first[..], "latent {q} differs");
        }
    }

    #[test]
    fn encoder_causality_exact() {
        // perturb motion frame 40: latents strictly left of 10 unchanged
        let vae = tiny_vae(4);
        let x: Tensor<f32> = Rng::new(5).randn(&[64, 16]);
        let mut x2 = x.clone();
        x2.data_mut()[40 * 16 + 3] += 1.0;
        let z1 = vae.encode_tensor(&x).unwrap();
        let z2 = vae.encode_tensor(&x2).unwrap();
        for q in 0..10 {
            assert_eq!(z1.row(q), z2.row(q), "latent {q} changed");
        }
        assert_ne!(z1.data(), z2.data());
    }

    #[test]
    fn decoder_causality_exact() {
        // perturb latent 5: decoded frames strictly left of 20 unchanged
        let vae = tiny_vae(6);
        let z: Tensor<f32> = Rng::new(7).randn(&[12, 4]);
        let mut z2 = z.clone();
        z2.data_mut()[5 * 4 + 1] += 1.0;
        let x1 = vae.decode_tensor(&z).unwrap();
        let x2 = vae.decode_tensor(&z2).unwrap();
        for p in 0..20 {
            assert_eq!(x1.row(p), x2.row(p), "frame {p} changed");
        }
        assert_ne!(x1.data(), x2.data());
    }

    #[test]
    fn zero_latents_decode_deterministically() {
        let vae = tiny_vae(8);
        let z = Tensor::<f32>::zeros(&[6, 4]);
        let a = vae.decode_tensor(&z).unwrap();
        let b = vae.decode_tensor(&z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_matches_batch_decode() {
        let vae = tiny_vae(9);
        let z: Tensor<f32> = Rng::new(10).randn(&[9, 4]);
        let batch = vae.decode_tensor(&z).unwrap();
        let mut inc = IncrementalDecoder::new(&vae);
        let mut rows = Vec::new();
        for q in 0..z.rows() {
            rows.extend_from_slice(&inc.push_latent(z.row(q)));
        }
        assert_eq!(batch.data(), &rows[..]);
    }

    #[test]
    fn tape_decode_matches_incremental() {
        // the training-path decoder (tape tconv ops) and the streaming
        // decoder must agree bit for bit
        let vae = tiny_vae(11);
        let z: Tensor<f32> = Rng::new(12).randn(&[8, 4]);
        let mut tape = Tape::new();
        let zid = tape.constant(z.clone());
        let params = vae.param_nodes(&mut tape);
        let xhat = vae.decode_graph(&mut tape, zid, &params).unwrap();
        let tape_out = tape.value(xhat).clone();
        let inc_out = vae.decode_tensor(&z).unwrap();
        assert_eq!(tape_out.data(), inc_out.data());
    }

    #[test]
    fn loss_zero_for_identity_codec() {
        // loss terms vanish when xhat == x and z == e; emulate by feeding
        // the loss graph values from a contrived identity pipeline
        let vae = tiny_vae(13);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Rng::new(14).randn(&[8, 16]));
        let e = tape.constant(Rng::new(15).randn(&[2, 4]));
        // term1 with xhat == x, terms 2/3 with z == e
        let t1 = tape.mse(x, x).unwrap();
        let t2 = tape.mse(e, e).unwrap();
        let t3s = tape.scale(t2, vae.config.gamma);
        let partial = tape.add(t1, t2).unwrap();
        let total = tape.add(partial, t3s).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
    }

    #[test]
    fn loss_decomposition_exact() {
        let vae = tiny_vae(16);
        let x: Tensor<f32> = Rng::new(17).randn(&[16, 16]);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let graph = vae.forward_graph(&mut tape, xid).unwrap();
        let loss = vae.loss_graph(&mut tape, xid, &graph).unwrap();
        let total = tape.value(loss.total).item() as f64;
        let recomposed = loss.term1 + loss.term2 + vae.config.gamma * loss.term3;
        assert!(
            ((total - recomposed) / recomposed.abs().max(1e-12)).abs() < 1e-6,
            "total {total} vs {recomposed}"
        );
        // gamma = 0 removes term 3 from the total
        let mut vae0 = tiny_vae(16);
        vae0.config.gamma = 0.0;
        let mut tape0 = Tape::new();
        let x0: Tensor<f32> = Rng::new(17).randn(&[16, 16]);
        let xid0 = tape0.constant(x0);
        let graph0 = vae0.forward_graph(&mut tape0, xid0).unwrap();
        let loss0 = vae0.loss_graph(&mut tape0, xid0, &graph0).unwrap();
        let total0 = tape0.value(loss0.total).item() as f64;
        assert!(((total0 - (loss0.term1 + loss0.term2)) / total0.abs().max(1e-12)).abs() < 1e-6);
    }

    #[test]
    fn stop_gradient_routing_on_toy() {
        // 2-parameter toy: E(x) = a*x, head = fixed 0.5 scale, D(z) = d*z.
        // Tape gradient for a must equal FD of term1 plus gamma * FD of
        // term3 with the sg buffers frozen; term 2 contributes nothing.
        let gamma = 0.25;
        let x = 1.3f64;
        let (a0, d0) = (0.8f64, 1.7f64);
        let c = 0.5f64; // head scale
        let build = |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let xid = tape.constant(Tensor::scalar(x));
            let e = tape.mul(ids[0], xid).unwrap(); // E(x) = a*x
            let cs = tape.constant(Tensor::scalar(c));
            let z = tape.mul(e, cs).unwrap(); // z = head(e)
            let xhat = tape.mul(ids[1], z).unwrap(); // D(z) = d*z
            let term1 = tape.mse(xhat, xid).unwrap();
            let e_d = tape.detach(e);
            let z2 = tape.mul(e_d, cs).unwrap();
            let term2 = tape.mse(e_d, z2).unwrap();
            let z_d = tape.detach(z);
            let term3 = tape.mse(z_d, e).unwrap();
            let t3 = tape.scale(term3, gamma);
            let p = tape.add(term1, term2).unwrap();
            tape.add(p, t3).unwrap()
        };
        let inputs = [Tensor::scalar(a0), Tensor::scalar(d0)];
        let (_, grads) = crate::num::gradcheck::tape_grads(&inputs, build);
        let grad_a = grads[0].item();

        // frozen-buffer oracle: term2 constant, term3 target frozen
        let e_val = a0 * x;
        let z_val = c * e_val;
        let f = |a: f64| -> f64 {
            let xhat = d0 * c * a * x;
            let term1 = (xhat - x) * (xhat - x);
            let term3 = (z_val - a * x) * (z_val - a * x);
            term1 + gamma * term3
        };
        let h = 1e-5;
        let fd = (f(a0 + h) - f(a0 - h)) / (2.0 * h);
        assert!(
            ((grad_a - fd) / fd.abs().max(1e-9)).abs() < 1e-6,
            "tape {grad_a} vs frozen-sg fd {fd}"
        );
        // sanity: the naive oracle that lets term 2 vary disagrees
        let f_naive = |a: f64| -> f64 {
            let e = a * x;
            let z = c * e;
            let xhat = d0 * z;
            (xhat - x) * (xhat - x) + (e - z) * (e - z) + gamma * (z_val - e) * (z_val - e)
        };
        let fd_naive = (f_naive(a0 + h) - f_naive(a0 - h)) / (2.0 * h);
        assert!(((grad_a - fd_naive) / fd_naive.abs().max(1e-9)).abs() > 1e-3);
    }

    #[test]
    fn zero_step_train_keeps_init() {
        let mut vae = tiny_vae(20);
        let snapshot: Vec<Tensor<f32>> = vae.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        let data = vec![gen_synthetic(&mut Rng::new(1), MotionClass::Walk, 32, 16, 20.0).unwrap()];
        train_vae(&mut vae, &data, &mut Rng::new(2), 0, 4).unwrap();
        for ((_, t), s) in vae.named_params().iter().zip(&snapshot) {
            assert_eq!(*t, s);
        }
    }

    #[test]
    fn vae_train_determinism_and_descent() {
        let run = || -> Vec<f64> {
            let mut vae = tiny_vae(21);
            let mut rng = Rng::new(22);
            let data: Vec<_> = (0..8)
                .map(|_| gen_synthetic(&mut rng, MotionClass::Walk, 32, 16, 20.0).unwrap())
                .collect();
            train_vae(&mut vae, &data, &mut Rng::new(23), 30, 4)
                .unwrap()
                .losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give identical loss curves");
        assert!(a.last().unwrap() < a.first().unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.fsck");
        let vae = tiny_vae(30);
        vae.save(&path, serde_json::json!({"step": 7})).unwrap();
        let (loaded, meta) = Vae::<f32>::load(&path).unwrap();
        assert_eq!(meta["extra"]["step"], 7);
        for ((_, a), (_, b)) in vae.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(a, b);
        }
        let x: Tensor<f32> = Rng::new(31).randn(&[16, 16]);
        assert_eq!(
            vae.encode_tensor(&x).unwrap(),
            loaded.encode_tensor(&x).unwrap()
        );
    }
}
