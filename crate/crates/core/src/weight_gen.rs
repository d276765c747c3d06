//! Conditional diffusion over neuron-weight vectors. A small transformer
//! denoiser reads the weight vector as a sequence of fixed-size patches,
//! predicts the velocity mixture of noise and signal at each timestep, and a
//! deterministic reverse pass turns query embeddings into fresh weights. The
//! model trains in the bank's standardized space and can mix in zero-weight
//! rows for familiar-but-unedited queries so they generate silent neurons.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{BankStats, WeightBank};
use crate::numerics::io::{digest_tensors, load_tensor_map, save_tensors};
use crate::numerics::{Graph, Optimizer, Rng, Tensor, TensorIoError, Var};
use crate::toy_lm::{LmError, NeuronWeights};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("timestep {t} outside the schedule range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("{n} sampling steps exceed the schedule's {t_max} timesteps")]
    StepsOutOfRange { n: usize, t_max: usize },
    #[error("the weight bank has no converged pairs to train on")]
    EmptyBank,
    #[error("augmentation is on but no pseudo-query conditions were given")]
    AugmentationNeedsConditions,
    #[error("condition has width {got}, the denoiser expects {want}")]
    ConditionWidth { got: usize, want: usize },
    #[error("checkpoint is inconsistent: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Weights(#[from] LmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

// ---- noise schedule ----

/// Linear-beta variance-preserving schedule. For timestep t the forward
/// process mixes signal and noise as `w_t = alpha(t) * w + beta(t) * eps`
/// with `alpha(t)^2 + beta(t)^2 = 1`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    /// Cumulative signal fractions, index 0..=t_max, entry 0 is exactly 1.
    alphas_bar: Vec<f32>,
}

/// Schedule parameters small enough to live in a JSON sidecar.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { t_max: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Self {
        let ScheduleParams { t_max, beta_start, beta_end } = params;
        assert!(t_max >= 1, "schedule needs at least one timestep");
        assert!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let mut alphas_bar = Vec::with_capacity(t_max + 1);
        alphas_bar.push(1.0f32);
        let mut acc = 1.0f64;
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alphas_bar.push(acc as f32);
        }
        for w in alphas_bar.windows(2) {
            assert!(w[1] < w[0], "cumulative signal fraction must strictly decrease");
        }
        NoiseSchedule { t_max, beta_start, beta_end, alphas_bar }
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams { t_max: self.t_max, beta_start: self.beta_start, beta_end: self.beta_end }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alphas_bar[t]
    }

    /// Signal and noise coefficients (alpha_t, beta_t) at timestep t; t = 0
    /// is the clean endpoint (1, 0).
    pub fn coeffs(&self, t: usize) -> (f32, f32) {
        let ab = self.alphas_bar[t] as f64;
        (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
    }

    fn check_t(&self, t: usize) -> Result<(), GenError> {
        if t == 0 || t > self.t_max {
            return Err(GenError::TimestepOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    /// Forward noising: `alpha_t * w + beta_t * eps`.
    pub fn q_sample(&self, w: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>, GenError> {
        self.check_t(t)?;
        assert_eq!(w.len(), eps.len(), "noise must match the weight shape");
        let (a, b) = self.coeffs(t);
        Ok(w.iter().zip(eps).map(|(&wv, &ev)| a * wv + b * ev).collect())
    }

    /// Training target: the velocity `alpha_t * eps - beta_t * w`.
    pub fn velocity_target(&self, w: &[f32], eps: &[f32], t: usize) -> Result<Vec<f32>, GenError> {
        self.check_t(t)?;
        assert_eq!(w.len(), eps.len(), "noise must match the weight shape");
        let (a, b) = self.coeffs(t);
        Ok(w.iter().zip(eps).map(|(&wv, &ev)| a * ev - b * wv).collect())
    }

    /// Clean reconstruction from a noisy state and a velocity:
    /// `alpha_t * w_t - beta_t * v`.
    pub fn reconstruct_clean(&self, w_t: &[f32], v: &[f32], t: usize) -> Vec<f32> {
        let (a, b) = self.coeffs(t);
        w_t.iter().zip(v).map(|(&xv, &vv)| a * xv - b * vv).collect()
    }

    /// Noise reconstruction: `beta_t * w_t + alpha_t * v`.
    pub fn reconstruct_noise(&self, w_t: &[f32], v: &[f32], t: usize) -> Vec<f32> {
        let (a, b) = self.coeffs(t);
        w_t.iter().zip(v).map(|(&xv, &vv)| b * xv + a * vv).collect()
    }

    /// Uniformly spaced descending timesteps, `n` of them, starting at the
    /// noisiest step and ready for a final hop to the clean state.
    pub fn subsequence(&self, n: usize) -> Result<Vec<usize>, GenError> {
        if n == 0 || n > self.t_max {
            return Err(GenError::StepsOutOfRange { n, t_max: self.t_max });
        }
        Ok((0..n).map(|k| self.t_max - k * self.t_max / n).collect())
    }
}

// ---- patch layout ----

/// Splits a flat weight vector into fixed-size patches, zero-padding the
/// tail so the last patch is full.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub weight_len: usize,
    pub patch_size: usize,
    pub n_patches: usize,
    pub pad_len: usize,
}

impl PatchLayout {
    pub fn new(weight_len: usize, patch_size: usize) -> Self {
        assert!(weight_len > 0 && patch_size > 0);
        let n_patches = weight_len.div_ceil(patch_size);
        PatchLayout {
            weight_len,
            patch_size,
            n_patches,
            pad_len: n_patches * patch_size - weight_len,
        }
    }

    /// Total padded length, `n_patches * patch_size`.
    pub fn padded_len(&self) -> usize {
        self.n_patches * self.patch_size
    }

    pub fn pad(&self, w: &[f32]) -> Vec<f32> {
        assert_eq!(w.len(), self.weight_len);
        let mut out = w.to_vec();
        out.resize(self.padded_len(), 0.0);
        out
    }

    pub fn unpad(&self, padded: &[f32]) -> Vec<f32> {
        assert_eq!(padded.len(), self.padded_len());
        padded[..self.weight_len].to_vec()
    }
}

// ---- denoiser ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub weight_len: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_cond: usize,
    pub t_embed: usize,
}

impl DenoiserConfig {
    pub fn default_for(weight_len: usize, d_cond: usize) -> Self {
        DenoiserConfig {
            weight_len,
            patch_size: 100,
            width: 128,
            depth: 4,
            heads: 4,
            d_cond,
            t_embed: 128,
        }
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout::new(self.weight_len, self.patch_size)
    }

    fn validate(&self) {
        assert!(self.width % self.heads == 0, "head width must divide evenly");
        assert!(self.t_embed % 2 == 0, "timestep embedding pairs sines and cosines");
        assert!(self.depth > 0 && self.d_cond > 0 && self.weight_len > 0);
    }
}

/// Per-condition modulation of one sublayer: shift and scale reshape the
/// normalized stream, the gate throttles what the sublayer writes back.
struct Modulation {
    w_shift: Tensor,
    b_shift: Tensor,
    w_scale: Tensor,
    b_scale: Tensor,
    w_gate: Tensor,
    b_gate: Tensor,
}

struct ModulationVars {
    shift: Var,
    scale: Var,
    gate: Var,
}

struct GenBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    mod_attn: Modulation,
    mod_mlp: Modulation,
}

struct GenBlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    mod_attn: [Var; 6],
    mod_mlp: [Var; 6],
}

/// Patch-sequence transformer that predicts the velocity for a batch of
/// noisy weight vectors, conditioned on a timestep and a query embedding.
/// The modulation and output layers start at zero, so a fresh denoiser
/// predicts exactly zero velocity everywhere.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    w_patch: Tensor,
    b_patch: Tensor,
    pos: Tensor,
    wt1: Tensor,
    bt1: Tensor,
    wt2: Tensor,
    bt2: Tensor,
    wz1: Tensor,
    bz1: Tensor,
    wz2: Tensor,
    bz2: Tensor,
    blocks: Vec<GenBlock>,
    w_shift_f: Tensor,
    b_shift_f: Tensor,
    w_scale_f: Tensor,
    b_scale_f: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

pub struct DenoiserVars {
    w_patch: Var,
    b_patch: Var,
    pos: Var,
    wt1: Var,
    bt1: Var,
    wt2: Var,
    bt2: Var,
    wz1: Var,
    bz1: Var,
    wz2: Var,
    bz2: Var,
    blocks: Vec<GenBlockVars>,
    w_shift_f: Var,
    b_shift_f: Var,
    w_scale_f: Var,
    b_scale_f: Var,
    w_out: Var,
    b_out: Var,
    ordered: Vec<Var>,
}

impl DenoiserVars {
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

const LN_EPS: f32 = 1e-5;

/// Sine and cosine features of the raw timestep at geometrically spaced
/// frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::exp(-libm::log(10000.0) * i as f64 / half as f64) as f32;
        out.push(libm::sinf(t as f32 * freq));
    }
    for i in 0..half {
        let freq = libm::exp(-libm::log(10000.0) * i as f64 / half as f64) as f32;
        out.push(libm::cosf(t as f32 * freq));
    }
    out
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = Rng::derived(seed, "weight_gen/init");
        let mut init = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| 0.02 * rng.normal()).collect())
        };
        let w = cfg.width;
        let layout = cfg.layout();
        let zero_mod = || Modulation {
            w_shift: Tensor::zeros(vec![w, w]),
            b_shift: Tensor::zeros(vec![w]),
            w_scale: Tensor::zeros(vec![w, w]),
            b_scale: Tensor::zeros(vec![w]),
            w_gate: Tensor::zeros(vec![w, w]),
            b_gate: Tensor::zeros(vec![w]),
        };
        let blocks = (0..cfg.depth)
            .map(|_| GenBlock {
                wq: init(vec![w, w]),
                wk: init(vec![w, w]),
                wv: init(vec![w, w]),
                wo: init(vec![w, w]),
                w1: init(vec![w, 4 * w]),
                b1: Tensor::zeros(vec![4 * w]),
                w2: init(vec![4 * w, w]),
                b2: Tensor::zeros(vec![w]),
                mod_attn: zero_mod(),
                mod_mlp: zero_mod(),
            })
            .collect();
        Denoiser {
            w_patch: init(vec![cfg.patch_size, w]),
            b_patch: Tensor::zeros(vec![w]),
            pos: init(vec![layout.n_patches, w]),
            wt1: init(vec![cfg.t_embed, w]),
            bt1: Tensor::zeros(vec![w]),
            wt2: init(vec![w, w]),
            bt2: Tensor::zeros(vec![w]),
            wz1: init(vec![cfg.d_cond, w]),
            bz1: Tensor::zeros(vec![w]),
            wz2: init(vec![w, w]),
            bz2: Tensor::zeros(vec![w]),
            blocks,
            w_shift_f: Tensor::zeros(vec![w, w]),
            b_shift_f: Tensor::zeros(vec![w]),
            w_scale_f: Tensor::zeros(vec![w, w]),
            b_scale_f: Tensor::zeros(vec![w]),
            w_out: Tensor::zeros(vec![w, cfg.patch_size]),
            b_out: Tensor::zeros(vec![cfg.patch_size]),
            cfg,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("w_patch".into(), &self.w_patch),
            ("b_patch".into(), &self.b_patch),
            ("pos".into(), &self.pos),
            ("wt1".into(), &self.wt1),
            ("bt1".into(), &self.bt1),
            ("wt2".into(), &self.wt2),
            ("bt2".into(), &self.bt2),
            ("wz1".into(), &self.wz1),
            ("bz1".into(), &self.bz1),
            ("wz2".into(), &self.wz2),
            ("bz2".into(), &self.bz2),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
                ("attn_w_shift", &b.mod_attn.w_shift),
                ("attn_b_shift", &b.mod_attn.b_shift),
                ("attn_w_scale", &b.mod_attn.w_scale),
                ("attn_b_scale", &b.mod_attn.b_scale),
                ("attn_w_gate", &b.mod_attn.w_gate),
                ("attn_b_gate", &b.mod_attn.b_gate),
                ("mlp_w_shift", &b.mod_mlp.w_shift),
                ("mlp_b_shift", &b.mod_mlp.b_shift),
                ("mlp_w_scale", &b.mod_mlp.w_scale),
                ("mlp_b_scale", &b.mod_mlp.b_scale),
                ("mlp_w_gate", &b.mod_mlp.w_gate),
                ("mlp_b_gate", &b.mod_mlp.b_gate),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("w_shift_f".into(), &self.w_shift_f));
        out.push(("b_shift_f".into(), &self.b_shift_f));
        out.push(("w_scale_f".into(), &self.w_scale_f));
        out.push(("b_scale_f".into(), &self.b_scale_f));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.w_patch,
            &mut self.b_patch,
            &mut self.pos,
            &mut self.wt1,
            &mut self.bt1,
            &mut self.wt2,
            &mut self.bt2,
            &mut self.wz1,
            &mut self.bz1,
            &mut self.wz2,
            &mut self.bz2,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
            out.push(&mut b.mod_attn.w_shift);
            out.push(&mut b.mod_attn.b_shift);
            out.push(&mut b.mod_attn.w_scale);
            out.push(&mut b.mod_attn.b_scale);
            out.push(&mut b.mod_attn.w_gate);
            out.push(&mut b.mod_attn.b_gate);
            out.push(&mut b.mod_mlp.w_shift);
            out.push(&mut b.mod_mlp.b_shift);
            out.push(&mut b.mod_mlp.w_scale);
            out.push(&mut b.mod_mlp.b_scale);
            out.push(&mut b.mod_mlp.w_gate);
            out.push(&mut b.mod_mlp.b_gate);
        }
        out.push(&mut self.w_shift_f);
        out.push(&mut self.b_shift_f);
        out.push(&mut self.w_scale_f);
        out.push(&mut self.b_scale_f);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn content_hash(&self) -> String {
        let named = self.named_params();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        digest_tensors(&refs)
    }

    pub fn params_into_graph(&self, g: &mut Graph, trainable: bool) -> DenoiserVars {
        let mut ordered = Vec::new();
        let lift = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        macro_rules! take {
            ($t:expr) => {{
                let v = lift(g, $t);
                ordered.push(v);
                v
            }};
        }
        let w_patch = take!(&self.w_patch);
        let b_patch = take!(&self.b_patch);
        let pos = take!(&self.pos);
        let wt1 = take!(&self.wt1);
        let bt1 = take!(&self.bt1);
        let wt2 = take!(&self.wt2);
        let bt2 = take!(&self.bt2);
        let wz1 = take!(&self.wz1);
        let bz1 = take!(&self.bz1);
        let wz2 = take!(&self.wz2);
        let bz2 = take!(&self.bz2);
        let blocks = self
            .blocks
            .iter()
            .map(|b| GenBlockVars {
                wq: take!(&b.wq),
                wk: take!(&b.wk),
                wv: take!(&b.wv),
                wo: take!(&b.wo),
                w1: take!(&b.w1),
                b1: take!(&b.b1),
                w2: take!(&b.w2),
                b2: take!(&b.b2),
                mod_attn: [
                    take!(&b.mod_attn.w_shift),
                    take!(&b.mod_attn.b_shift),
                    take!(&b.mod_attn.w_scale),
                    take!(&b.mod_attn.b_scale),
                    take!(&b.mod_attn.w_gate),
                    take!(&b.mod_attn.b_gate),
                ],
                mod_mlp: [
                    take!(&b.mod_mlp.w_shift),
                    take!(&b.mod_mlp.b_shift),
                    take!(&b.mod_mlp.w_scale),
                    take!(&b.mod_mlp.b_scale),
                    take!(&b.mod_mlp.w_gate),
                    take!(&b.mod_mlp.b_gate),
                ],
            })
            .collect();
        let w_shift_f = take!(&self.w_shift_f);
        let b_shift_f = take!(&self.b_shift_f);
        let w_scale_f = take!(&self.w_scale_f);
        let b_scale_f = take!(&self.b_scale_f);
        let w_out = take!(&self.w_out);
        let b_out = take!(&self.b_out);
        DenoiserVars {
            w_patch,
            b_patch,
            pos,
            wt1,
            bt1,
            wt2,
            bt2,
            wz1,
            bz1,
            wz2,
            bz2,
            blocks,
            w_shift_f,
            b_shift_f,
            w_scale_f,
            b_scale_f,
            w_out,
            b_out,
            ordered,
        }
    }

    fn modulation(
        g: &mut Graph,
        cond: Var,
        vars: &[Var; 6],
        b: usize,
        width: usize,
    ) -> ModulationVars {
        let linear = |g: &mut Graph, w: Var, bias: Var| {
            let m = g.matmul(cond, w);
            let m = g.add(m, bias);
            g.reshape(m, vec![b, 1, width])
        };
        ModulationVars {
            shift: linear(g, vars[0], vars[1]),
            scale: linear(g, vars[2], vars[3]),
            gate: linear(g, vars[4], vars[5]),
        }
    }

    fn modulate(g: &mut Graph, x: Var, m: &ModulationVars) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let scale1 = g.add_scalar(m.scale, 1.0);
        let scaled = g.mul(n, scale1);
        g.add(scaled, m.shift)
    }

    /// Velocity prediction for a batch: `x` is the padded patch stream
    /// `[b * n_patches, patch]`, `t_emb` the timestep features `[b, t_embed]`,
    /// `z` the conditions `[b, d_cond]`. Returns `[b, padded_len]`.
    pub fn build_v(
        &self,
        g: &mut Graph,
        vars: &DenoiserVars,
        x: Var,
        t_emb: Var,
        z: Var,
        b: usize,
    ) -> Var {
        let cfg = &self.cfg;
        let layout = cfg.layout();
        let (n, w) = (layout.n_patches, cfg.width);
        let scale = 1.0 / libm::sqrtf((w / cfg.heads) as f32);

        // Patch tokens plus learned positions.
        let tok = g.matmul(x, vars.w_patch);
        let tok = g.add(tok, vars.b_patch);
        let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..n as u32).collect();
        let pos = g.embedding(vars.pos, &pos_ids);
        let tok = g.add(tok, pos);
        let mut h = g.reshape(tok, vec![b, n, w]);

        // Shared condition vector from timestep and query embedding.
        let ht = g.matmul(t_emb, vars.wt1);
        let ht = g.add(ht, vars.bt1);
        let ht = g.gelu(ht);
        let ct = g.matmul(ht, vars.wt2);
        let ct = g.add(ct, vars.bt2);
        let hz = g.matmul(z, vars.wz1);
        let hz = g.add(hz, vars.bz1);
        let hz = g.gelu(hz);
        let cz = g.matmul(hz, vars.wz2);
        let cz = g.add(cz, vars.bz2);
        let c = g.add(ct, cz);
        let c = g.gelu(c);

        for bv in &vars.blocks {
            // Attention over the patch sequence, modulated by the condition.
            let m = Self::modulation(g, c, &bv.mod_attn, b, w);
            let hn = Self::modulate(g, h, &m);
            let hf = g.reshape(hn, vec![b * n, w]);
            let q = g.matmul(hf, bv.wq);
            let k = g.matmul(hf, bv.wk);
            let v = g.matmul(hf, bv.wv);
            let q3 = g.reshape(q, vec![b, n, w]);
            let k3 = g.reshape(k, vec![b, n, w]);
            let v3 = g.reshape(v, vec![b, n, w]);
            let qh = g.split_heads(q3, cfg.heads);
            let kh = g.split_heads(k3, cfg.heads);
            let vh = g.split_heads(v3, cfg.heads);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_last(scores);
            let ctx = g.matmul(probs, vh);
            let merged = g.merge_heads(ctx);
            let mf = g.reshape(merged, vec![b * n, w]);
            let proj = g.matmul(mf, bv.wo);
            let proj3 = g.reshape(proj, vec![b, n, w]);
            let gated = g.mul(proj3, m.gate);
            h = g.add(h, gated);

            // Feed-forward, same modulation pattern.
            let m = Self::modulation(g, c, &bv.mod_mlp, b, w);
            let hn = Self::modulate(g, h, &m);
            let hf = g.reshape(hn, vec![b * n, w]);
            let u = g.matmul(hf, bv.w1);
            let u = g.add(u, bv.b1);
            let u = g.gelu(u);
            let y = g.matmul(u, bv.w2);
            let y = g.add(y, bv.b2);
            let y3 = g.reshape(y, vec![b, n, w]);
            let gated = g.mul(y3, m.gate);
            h = g.add(h, gated);
        }

        // Final modulated projection back to patch space.
        let shift = {
            let m = g.matmul(c, vars.w_shift_f);
            let m = g.add(m, vars.b_shift_f);
            g.reshape(m, vec![b, 1, w])
        };
        let scale_f = {
            let m = g.matmul(c, vars.w_scale_f);
            let m = g.add(m, vars.b_scale_f);
            let m = g.add_scalar(m, 1.0);
            g.reshape(m, vec![b, 1, w])
        };
        let hn = g.layer_norm(h, LN_EPS);
        let hn = g.mul(hn, scale_f);
        let hn = g.add(hn, shift);
        let hf = g.reshape(hn, vec![b * n, w]);
        let out = g.matmul(hf, vars.w_out);
        let out = g.add(out, vars.b_out);
        g.reshape(out, vec![b, n * cfg.patch_size])
    }

    /// Eager velocity prediction; `x` is `[b, padded_len]`, `z` is
    /// `[b, d_cond]`, all rows share timestep `t`.
    pub fn predict_v(&self, x: &Tensor, t: usize, z: &Tensor) -> Result<Tensor, GenError> {
        let b = x.shape()[0];
        assert_eq!(z.shape()[0], b, "conditions must match the batch");
        if z.shape()[1] != self.cfg.d_cond {
            return Err(GenError::ConditionWidth { got: z.shape()[1], want: self.cfg.d_cond });
        }
        let layout = self.cfg.layout();
        assert_eq!(x.shape()[1], layout.padded_len(), "input must be padded patches");
        let mut g = Graph::new();
        let vars = self.params_into_graph(&mut g, false);
        let xi = g.input(x.reshaped(vec![b * layout.n_patches, layout.patch_size]));
        let mut te = Vec::with_capacity(b * self.cfg.t_embed);
        for _ in 0..b {
            te.extend(timestep_embedding(t, self.cfg.t_embed));
        }
        let ti = g.input(Tensor::new(vec![b, self.cfg.t_embed], te));
        let zi = g.input(z.clone());
        let v = self.build_v(&mut g, &vars, xi, ti, zi, b);
        Ok(g.value(v).clone())
    }

    // ---- persistence ----

    pub fn save(&self, dir: &Path) -> Result<(), GenError> {
        fs::create_dir_all(dir)?;
        let named: Vec<(String, Tensor)> =
            self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&dir.join("denoiser.tensors"), &refs)?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: DenoiserConfig) -> Result<Self, GenError> {
        let mut map = load_tensor_map(&dir.join("denoiser.tensors"))?;
        let mut den = Denoiser::new(cfg, 0);
        let expected: Vec<(String, Vec<usize>)> = den
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(den.params_mut()) {
            let tensor = map
                .remove(name)
                .ok_or_else(|| GenError::Checkpoint(format!("missing tensor {name}")))?;
            if tensor.shape() != &shape[..] {
                return Err(GenError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor;
        }
        if let Some(extra) = map.keys().next() {
            return Err(GenError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(den)
    }
}

// ---- sampling ----

/// Deterministic reverse pass in standardized space. `z` is `[b, d_cond]`,
/// one row per condition, `seeds` one initial-noise seed per row. Returns
/// `[b, padded_len]` clean reconstructions.
pub fn sample_std_batch(
    den: &Denoiser,
    sched: &NoiseSchedule,
    z: &Tensor,
    n_steps: usize,
    seeds: &[u64],
) -> Result<Tensor, GenError> {
    let taus = sched.subsequence(n_steps)?;
    let b = z.shape()[0];
    assert_eq!(seeds.len(), b, "one seed per condition");
    let layout = den.cfg.layout();
    let l = layout.padded_len();

    let mut data = Vec::with_capacity(b * l);
    for &seed in seeds {
        let mut rng = Rng::derived(seed, "weight_gen/sample/noise");
        data.extend((0..l).map(|_| rng.normal()));
    }
    let mut x = Tensor::new(vec![b, l], data);

    for (k, &t) in taus.iter().enumerate() {
        let v = den.predict_v(&x, t, z)?;
        let mut next = Vec::with_capacity(b * l);
        let (a, bt) = sched.coeffs(t);
        if let Some(&t_prev) = taus.get(k + 1) {
            let (ap, bp) = sched.coeffs(t_prev);
            for (&xv, &vv) in x.data().iter().zip(v.data()) {
                let clean = a * xv - bt * vv;
                let noise = bt * xv + a * vv;
                next.push(ap * clean + bp * noise);
            }
        } else {
            for (&xv, &vv) in x.data().iter().zip(v.data()) {
                next.push(a * xv - bt * vv);
            }
        }
        x = Tensor::new(vec![b, l], next);
    }
    Ok(x)
}

// ---- training ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate at the final epoch; cosine-annealed from `lr`. Equal
    /// values hold the rate constant.
    pub lr_final: f32,
    pub weight_decay: f32,
    pub augment: bool,
    /// Real rows per zero row when augmentation is on.
    pub augment_ratio: usize,
    /// Evaluate the sampling gate every this many epochs.
    pub check_every: usize,
    /// Sampling steps used for gate checks.
    pub gate_steps: usize,
    /// Stop once mean + std of the gate distances drops below this.
    pub gate_threshold: f32,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 4000,
            batch_size: 32,
            lr: 1e-3,
            lr_final: 1e-4,
            weight_decay: 0.0,
            augment: true,
            augment_ratio: 4,
            check_every: 200,
            gate_steps: 50,
            gate_threshold: 0.5,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f32>,
    /// Mean and standard deviation of L2(sampled, target) over the bank in
    /// standardized space, at the last gate check.
    pub gate_mean: f32,
    pub gate_std: f32,
    pub gate_met: bool,
}

/// Measures how closely conditional samples land on their bank targets:
/// L2 distances in standardized space, returned as (mean, std).
pub fn sampling_gate(
    den: &Denoiser,
    sched: &NoiseSchedule,
    weights_std: &Tensor,
    conditions: &Tensor,
    n_steps: usize,
    seed: u64,
) -> Result<(f32, f32), GenError> {
    let n = weights_std.shape()[0];
    let layout = den.cfg.layout();
    let seeds: Vec<u64> = (0..n)
        .map(|i| {
            let mut r = Rng::derived(seed, &format!("weight_gen/gate/{i}"));
            r.below(u32::MAX as usize) as u64
        })
        .collect();
    let sampled = sample_std_batch(den, sched, conditions, n_steps, &seeds)?;
    let p = weights_std.shape()[1];
    let mut dists = Vec::with_capacity(n);
    for i in 0..n {
        let target = &weights_std.data()[i * p..(i + 1) * p];
        let got = &sampled.data()[i * layout.padded_len()..i * layout.padded_len() + p];
        let d2: f64 = target
            .iter()
            .zip(got)
            .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
            .sum();
        dists.push(d2.sqrt());
    }
    let mean = dists.iter().sum::<f64>() / n as f64;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    Ok((mean as f32, var.sqrt() as f32))
}

/// Trains the denoiser to predict velocities for the bank's standardized
/// weights, optionally mixing in zero-weight rows conditioned on pseudo
/// queries so familiar-but-unedited text generates a silent neuron. Stops
/// early once the sampling gate is met.
pub fn train_diffusion(
    den: &mut Denoiser,
    bank: &WeightBank,
    pseudo_conditions: Option<&Tensor>,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionTrainReport, GenError> {
    let (weights_std, conditions) = {
        if bank.converged().next().is_none() {
            return Err(GenError::EmptyBank);
        }
        bank.converged_training_set()
    };
    let n = weights_std.shape()[0];
    let p = weights_std.shape()[1];
    let d = conditions.shape()[1];
    if d != den.cfg.d_cond {
        return Err(GenError::ConditionWidth { got: d, want: den.cfg.d_cond });
    }
    let aug = if cfg.augment {
        let pc = pseudo_conditions.ok_or(GenError::AugmentationNeedsConditions)?;
        if pc.shape()[1] != d {
            return Err(GenError::ConditionWidth { got: pc.shape()[1], want: d });
        }
        Some(pc)
    } else {
        None
    };
    let zero_row = bank.stats.standardize_row(&vec![0.0; p]);
    let layout = den.cfg.layout();
    let l = layout.padded_len();

    // Row-major padded training matrix, real rows first, then one zero row
    // per `augment_ratio` real rows with cycling pseudo conditions.
    let mut rows: Vec<Vec<f32>> = (0..n)
        .map(|i| layout.pad(&weights_std.data()[i * p..(i + 1) * p]))
        .collect();
    let mut conds: Vec<Vec<f32>> =
        (0..n).map(|i| conditions.data()[i * d..(i + 1) * d].to_vec()).collect();
    if let Some(pc) = aug {
        let m = pc.shape()[0];
        let n_zero = n.div_ceil(cfg.augment_ratio.max(1));
        let padded_zero = layout.pad(&zero_row);
        for j in 0..n_zero {
            let src = j % m;
            rows.push(padded_zero.clone());
            conds.push(pc.data()[src * d..(src + 1) * d].to_vec());
        }
    }
    let total = rows.len();

    let mut opt = Optimizer::adamw_default(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..total).collect();
    let mut epoch_losses = Vec::new();
    let mut gate = (f32::INFINITY, f32::INFINITY);
    let mut gate_met = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        if cfg.epochs > 1 {
            let frac = epoch as f64 / (cfg.epochs - 1) as f64;
            let cos = 0.5 * (1.0 + libm::cos(std::f64::consts::PI * frac));
            let lr = cfg.lr_final as f64 + (cfg.lr as f64 - cfg.lr_final as f64) * cos;
            opt.set_lr(lr as f32);
        }
        let mut rng = Rng::derived(cfg.seed, &format!("weight_gen/train/epoch{epoch}"));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x_data = Vec::with_capacity(b * l);
            let mut v_data = Vec::with_capacity(b * l);
            let mut t_data = Vec::with_capacity(b * den.cfg.t_embed);
            let mut z_data = Vec::with_capacity(b * d);
            for &idx in chunk {
                let t = 1 + rng.below(sched.t_max());
                let eps: Vec<f32> = (0..l).map(|_| rng.normal()).collect();
                let w = &rows[idx];
                x_data.extend(sched.q_sample(w, t, &eps)?);
                v_data.extend(sched.velocity_target(w, &eps, t)?);
                t_data.extend(timestep_embedding(t, den.cfg.t_embed));
                z_data.extend_from_slice(&conds[idx]);
            }
            let mut g = Graph::new();
            let vars = den.params_into_graph(&mut g, true);
            let xi = g.input(Tensor::new(vec![b * layout.n_patches, layout.patch_size], x_data));
            let ti = g.input(Tensor::new(vec![b, den.cfg.t_embed], t_data));
            let zi = g.input(Tensor::new(vec![b, d], z_data));
            let pred = den.build_v(&mut g, &vars, xi, ti, zi, b);
            let target = g.input(Tensor::new(vec![b, l], v_data));
            let loss = g.mse(pred, target);
            g.backward(loss).expect("loss is scalar");
            epoch_loss += g.value(loss).item() as f64;
            batches += 1;
            let grads: Vec<Option<Tensor>> =
                vars.ordered().iter().map(|&v| g.grad(v).cloned()).collect();
            drop(g);
            let mut params = den.params_mut();
            opt.step_refs(&mut params, &grads).expect("gradient shapes track parameters");
        }
        epoch_losses.push((epoch_loss / batches.max(1) as f64) as f32);
        epochs_run = epoch + 1;

        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.check_every.max(1) == 0 || last {
            gate = sampling_gate(den, sched, &weights_std, &conditions, cfg.gate_steps, cfg.seed)?;
            if gate.0 + gate.1 < cfg.gate_threshold {
                gate_met = true;
                break;
            }
        }
    }

    Ok(DiffusionTrainReport {
        epochs_run,
        epoch_losses,
        gate_mean: gate.0,
        gate_std: gate.1,
        gate_met,
    })
}

// ---- packaged generator ----

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    cfg: DenoiserConfig,
    schedule: ScheduleParams,
    stats: BankStats,
    corpus_hash: String,
}

/// A trained denoiser bundled with everything sampling needs: the schedule
/// and the bank statistics that map standardized space back to raw weights.
pub struct WeightGenerator {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub stats: BankStats,
}

impl WeightGenerator {
    pub fn new(denoiser: Denoiser, schedule: NoiseSchedule, stats: BankStats) -> Self {
        assert_eq!(
            stats.mean.len(),
            denoiser.cfg.weight_len,
            "stats must cover the weight vector"
        );
        WeightGenerator { denoiser, schedule, stats }
    }

    /// Generates neuron weights for one condition. Deterministic in
    /// (condition, n_steps, noise_seed).
    pub fn generate(
        &self,
        z: &[f32],
        n_steps: usize,
        noise_seed: u64,
    ) -> Result<NeuronWeights, GenError> {
        if z.len() != self.denoiser.cfg.d_cond {
            return Err(GenError::ConditionWidth {
                got: z.len(),
                want: self.denoiser.cfg.d_cond,
            });
        }
        let zt = Tensor::new(vec![1, z.len()], z.to_vec());
        let out = sample_std_batch(&self.denoiser, &self.schedule, &zt, n_steps, &[noise_seed])?;
        let layout = self.denoiser.cfg.layout();
        let std_row = layout.unpad(out.data());
        let raw = self.stats.destandardize_row(&std_row);
        Ok(NeuronWeights::from_flat(&raw)?)
    }

    pub fn content_hash(&self) -> String {
        self.denoiser.content_hash()
    }

    pub fn save(&self, dir: &Path, corpus_hash: &str) -> Result<(), GenError> {
        fs::create_dir_all(dir)?;
        self.denoiser.save(dir)?;
        let meta = GeneratorMeta {
            cfg: self.denoiser.cfg,
            schedule: self.schedule.params(),
            stats: self.stats.clone(),
            corpus_hash: corpus_hash.to_string(),
        };
        fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String), GenError> {
        let meta: GeneratorMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("generator.json"))?)
                .map_err(|e| GenError::Checkpoint(format!("bad sidecar: {e}")))?;
        let denoiser = Denoiser::load(dir, meta.cfg)?;
        let gen = WeightGenerator::new(denoiser, NoiseSchedule::linear(meta.schedule), meta.stats);
        Ok((gen, meta.corpus_hash))
    }
}
