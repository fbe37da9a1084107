//! U-Net style unmixing autoencoder.
//!
//! Encoder stages run at full, half, quarter ... resolution. The deepest
//! features feed two branches: a global average and dense layer produce the
//! endmember matrix `M` (softplus keeps it non-negative), and a decoder with
//! skip connections produces per-pixel logits that a softmax turns into
//! abundances. The reconstruction is the plain product `A M`.

mod checkpoint;
mod layers;

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{augment, extract_patches, stitch_patches, HyperCube, PadMode};
use crate::endmember::{default_names, EndmemberSet};
use crate::error::{Error, Result};
use crate::metrics::min_cost_assignment;
use crate::mixer::AbundanceMap;
use crate::vca::vca_extract;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
use layers::{
    avg_pool2, avg_pool2_backward, concat, global_avg, silu, silu_backward, softmax_channels,
    softmax_channels_backward, softplus, softplus_grad, softplus_inv, split, standardize,
    standardize_backward, upsample2, upsample2_backward, Conv, Tensor,
};

/// Floor applied to signatures before inverting softplus.
const INIT_FLOOR: f64 = 1e-4;
/// Tangents shorter than this are treated as an angle of zero.
const ANGLE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndmemberInit {
    /// Seeded random head bias.
    Random,
    /// Head bias set from VCA signatures of the training cube.
    #[default]
    Vca,
    /// Head bias set from `reference_endmembers`.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmixerConfig {
    pub patch_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Width of the per-pixel spectral path into the abundance head.
    pub spectral_channels: usize,
    pub endmembers: usize,
    pub bands: usize,
    pub lambda_sad: f64,
    pub lambda_cos: f64,
    pub lambda_ref: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence_window: usize,
    pub convergence_eps: f64,
    pub seed: u64,
    /// Step between patch origins; half the patch size when absent.
    pub patch_stride: Option<usize>,
    pub endmember_init: EndmemberInit,
    /// Epochs during which the endmember branch is held fixed.
    pub endmember_warmup_epochs: usize,
    pub reference_endmembers: Option<EndmemberSet>,
}

impl Default for UnmixerConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            levels: 3,
            base_channels: 32,
            spectral_channels: 32,
            endmembers: 3,
            bands: 0,
            lambda_sad: 0.1,
            lambda_cos: 0.01,
            lambda_ref: 0.0,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 1001,
            convergence_window: 20,
            convergence_eps: 1e-5,
            seed: 0,
            patch_stride: None,
            endmember_init: EndmemberInit::Vca,
            endmember_warmup_epochs: 0,
            reference_endmembers: None,
        }
    }
}

impl UnmixerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.levels > 16 {
            return bad(format!("levels = {} is too deep", self.levels));
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of 2^(levels-1) = {div}",
                self.patch_size
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.spectral_channels == 0 {
            return bad("spectral_channels must be >= 1".into());
        }
        if self.endmembers < 2 {
            return bad(format!("endmembers must be >= 2, got {}", self.endmembers));
        }
        if self.bands == 0 {
            return bad("bands must be >= 1".into());
        }
        for (name, v) in [("lambda_sad", self.lambda_sad), ("lambda_cos", self.lambda_cos), ("lambda_ref", self.lambda_ref)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be >= 1".into());
        }
        if !self.convergence_eps.is_finite() || self.convergence_eps < 0.0 {
            return bad(format!("convergence_eps must be >= 0, got {}", self.convergence_eps));
        }
        if self.patch_stride == Some(0) {
            return bad("patch_stride must be >= 1".into());
        }
        match &self.reference_endmembers {
            Some(r) => {
                if r.count() != self.endmembers || r.bands() != self.bands {
                    return bad(format!(
                        "reference endmembers are {}x{}, model is {}x{}",
                        r.count(),
                        r.bands(),
                        self.endmembers,
                        self.bands
                    ));
                }
                if let Some(e) = (0..r.count()).find(|&e| r.signature(e).iter().all(|v| *v == 0.0)) {
                    return bad(format!("reference endmember {e} is all zero"));
                }
            }
            None if self.lambda_ref > 0.0 => return bad("lambda_ref > 0 needs reference_endmembers".into()),
            None if self.endmember_init == EndmemberInit::Reference => {
                return bad("endmember_init = reference needs reference_endmembers".into())
            }
            None => {}
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.patch_stride.unwrap_or((self.patch_size / 2).max(1))
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn same_architecture(&self, other: &Self) -> bool {
        let key = |c: &Self| (c.patch_size, c.levels, c.base_channels, c.spectral_channels, c.endmembers, c.bands);
        key(self) == key(other)
    }
}

/// One named tensor of weights (or of gradients, with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn layout(cfg: &UnmixerConfig) -> Vec<(String, Vec<usize>)> {
    let (l, b, e) = (cfg.levels, cfg.bands, cfg.endmembers);
    let mut out = Vec::new();
    for lv in 0..l {
        let cin = if lv == 0 { b } else { cfg.channels(lv - 1) };
        let c = cfg.channels(lv);
        out.push((format!("enc{lv}.weight"), vec![c, cin, 3, 3]));
    }
    for lv in 0..l - 1 {
        let cin = cfg.channels(lv + 1) + cfg.channels(lv);
        let c = cfg.channels(lv);
        out.push((format!("dec{lv}.weight"), vec![c, cin, 3, 3]));
    }
    let sc = cfg.spectral_channels;
    out.push(("spectral.weight".into(), vec![sc, b, 1, 1]));
    out.push(("spectral.bias".into(), vec![sc]));
    out.push(("head.weight".into(), vec![e, cfg.channels(0) + sc, 1, 1]));
    out.push(("head.bias".into(), vec![e]));
    let deep = cfg.channels(l - 1);
    out.push(("endmember.weight".into(), vec![e * b, deep]));
    out.push(("endmember.bias".into(), vec![e * b]));
    out
}

pub fn parameter_count(cfg: &UnmixerConfig) -> usize {
    layout(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

fn enc_idx(lv: usize) -> usize {
    lv
}

fn dec_idx(cfg: &UnmixerConfig, lv: usize) -> usize {
    cfg.levels + lv
}

fn spectral_idx(cfg: &UnmixerConfig) -> usize {
    2 * cfg.levels - 1
}

fn head_idx(cfg: &UnmixerConfig) -> usize {
    spectral_idx(cfg) + 2
}

fn em_idx(cfg: &UnmixerConfig) -> usize {
    head_idx(cfg) + 2
}

#[derive(Debug, Clone)]
pub struct UnmixerState {
    pub config: UnmixerConfig,
    pub params: Vec<Param>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed training epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl UnmixerState {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Sets the endmember head so its output starts at `signatures` for any input.
    pub fn init_endmembers(&mut self, signatures: ArrayView2<'_, f64>) -> Result<()> {
        let (e, b) = (self.config.endmembers, self.config.bands);
        if signatures.dim() != (e, b) {
            return Err(Error::Dimension(format!("init signatures {:?}, model {e}x{b}", signatures.dim())));
        }
        let i = em_idx(&self.config);
        for v in &mut self.params[i].data {
            *v = 0.0;
        }
        for (d, s) in self.params[i + 1].data.iter_mut().zip(signatures.iter()) {
            *d = softplus_inv(s.max(INIT_FLOOR));
        }
        Ok(())
    }

    /// Convolutions feeding a standardization carry no bias.
    fn conv(&self, idx: usize) -> Conv<'_> {
        Conv {
            weight: &self.params[idx].data,
            bias: None,
            out_c: self.params[idx].shape[0],
            k: self.params[idx].shape[2],
        }
    }

    fn biased_conv(&self, idx: usize) -> Conv<'_> {
        Conv {
            weight: &self.params[idx].data,
            bias: Some(&self.params[idx + 1].data),
            out_c: self.params[idx].shape[0],
            k: self.params[idx].shape[2],
        }
    }

    fn rng_state(&self) -> ([u8; 32], u64, u128) {
        (self.rng.get_seed(), self.rng.get_stream(), self.rng.get_word_pos())
    }

    fn from_parts(config: UnmixerConfig, params: Vec<Param>, step: u64, epoch: usize, rng: ([u8; 32], u64, u128)) -> Self {
        let mut r = ChaCha8Rng::from_seed(rng.0);
        r.set_stream(rng.1);
        r.set_word_pos(rng.2);
        Self {
            config,
            params,
            step,
            epoch,
            rng: r,
        }
    }
}

/// Seeded He-normal convolution weights, zero biases.
pub fn build(config: &UnmixerConfig) -> Result<UnmixerState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let em = em_idx(config);
    let mut params = Vec::new();
    for (i, (name, shape)) in layout(config).into_iter().enumerate() {
        let len: usize = shape.iter().product();
        let data = if i == em + 1 {
            (0..len).map(|_| softplus_inv(rng.gen_range(0.05..1.0))).collect()
        } else if name.ends_with(".bias") {
            vec![0.0; len]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = if i == em { 0.01 / (fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        };
        params.push(Param { name, shape, data });
    }
    Ok(UnmixerState {
        config: config.clone(),
        params,
        step: 0,
        epoch: 0,
        rng,
    })
}

struct Stage {
    input: Tensor,
    norm: Tensor,
    inv: Vec<f64>,
    out: Tensor,
}

fn stage_forward(conv: &Conv<'_>, input: Tensor) -> Stage {
    let (norm, inv) = standardize(&conv.forward(&input));
    let out = silu(&norm);
    Stage { input, norm, inv, out }
}

fn stage_backward(conv: &Conv<'_>, st: &Stage, dout: &Tensor, grads: &mut [Param], idx: usize) -> Tensor {
    let dn = silu_backward(&st.norm, dout);
    let dc = standardize_backward(&st.norm, &st.inv, &dn);
    conv.backward(&st.input, &dc, &mut grads[idx].data, None)
}

struct PatchPass {
    enc: Vec<Stage>,
    /// Decoder stages in execution order, deepest first.
    dec: Vec<Stage>,
    spectral_pre: Tensor,
    head_in: Tensor,
    abund: Tensor,
    gap: Vec<f64>,
    em_pre: Vec<f64>,
}

fn patch_forward(state: &UnmixerState, x: &Tensor) -> PatchPass {
    let cfg = &state.config;
    let l = cfg.levels;
    let mut enc: Vec<Stage> = Vec::with_capacity(l);
    for lv in 0..l {
        let input = if lv == 0 { x.clone() } else { avg_pool2(&enc[lv - 1].out) };
        enc.push(stage_forward(&state.conv(enc_idx(lv)), input));
    }
    let deep = &enc[l - 1].out;
    let gap = global_avg(deep);
    let em = em_idx(cfg);
    let (w, bias) = (&state.params[em].data, &state.params[em + 1].data);
    let c = gap.len();
    let em_pre: Vec<f64> = (0..bias.len())
        .map(|r| bias[r] + w[r * c..(r + 1) * c].iter().zip(&gap).map(|(a, b)| a * b).sum::<f64>())
        .collect();

    let mut dec = Vec::with_capacity(l - 1);
    let mut cur = deep.clone();
    for lv in (0..l - 1).rev() {
        let cat = concat(&upsample2(&cur), &enc[lv].out);
        let st = stage_forward(&state.conv(dec_idx(cfg, lv)), cat);
        cur = st.out.clone();
        dec.push(st);
    }
    let spectral_pre = state.biased_conv(spectral_idx(cfg)).forward(x);
    let head_in = concat(&cur, &silu(&spectral_pre));
    let logits = state.biased_conv(head_idx(cfg)).forward(&head_in);
    let abund = softmax_channels(&logits);
    PatchPass {
        enc,
        dec,
        spectral_pre,
        head_in,
        abund,
        gap,
        em_pre,
    }
}

/// Accumulates parameter gradients for one patch given the gradient of the
/// loss w.r.t. its abundances and its endmember-head pre-activation.
fn patch_backward(state: &UnmixerState, pass: &PatchPass, d_abund: &Tensor, d_em_pre: &[f64], grads: &mut [Param]) {
    let cfg = &state.config;
    let l = cfg.levels;
    let dz = softmax_channels_backward(&pass.abund, d_abund);
    let hi = head_idx(cfg);
    let d_head_in = {
        let (gw, gb) = grads.split_at_mut(hi + 1);
        state.biased_conv(hi).backward(&pass.head_in, &dz, &mut gw[hi].data, Some(&mut gb[0].data))
    };
    let (mut dcur, d_spectral) = split(&d_head_in, cfg.channels(0));
    let d_pre = silu_backward(&pass.spectral_pre, &d_spectral);
    let si = spectral_idx(cfg);
    {
        let (gw, gb) = grads.split_at_mut(si + 1);
        let x = &pass.enc[0].input;
        state.biased_conv(si).backward(x, &d_pre, &mut gw[si].data, Some(&mut gb[0].data));
    }

    let mut d_enc: Vec<Tensor> = pass.enc.iter().map(|s| Tensor::zeros_like(&s.out)).collect();
    for (st, lv) in pass.dec.iter().rev().zip(0..l - 1) {
        let idx = dec_idx(cfg, lv);
        let dcat = stage_backward(&state.conv(idx), st, &dcur, grads, idx);
        let (dup, dskip) = split(&dcat, cfg.channels(lv + 1));
        d_enc[lv].add_assign(&dskip);
        dcur = upsample2_backward(&dup);
    }
    d_enc[l - 1].add_assign(&dcur);

    let em = em_idx(cfg);
    let c = pass.gap.len();
    let w = &state.params[em].data;
    let mut dgap = vec![0.0; c];
    for (r, &g) in d_em_pre.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for k in 0..c {
            grads[em].data[r * c + k] += g * pass.gap[k];
            dgap[k] += g * w[r * c + k];
        }
        grads[em + 1].data[r] += g;
    }
    let deep = &mut d_enc[l - 1];
    let plane = deep.plane() as f64;
    for (k, g) in dgap.iter().enumerate() {
        for v in deep.channel_mut(k) {
            *v += g / plane;
        }
    }

    for lv in (0..l).rev() {
        let idx = enc_idx(lv);
        let din = stage_backward(&state.conv(idx), &pass.enc[lv], &d_enc[lv], grads, idx);
        if lv > 0 {
            let d = avg_pool2_backward(&din);
            d_enc[lv - 1].add_assign(&d);
        }
    }
}

/// `sum_e a[.., .., e] * m[e, ..]` at every pixel.
pub fn linear_mix(abundances: ArrayView3<'_, f64>, m: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (h, w, e) = abundances.dim();
    if m.nrows() != e {
        return Err(Error::Dimension(format!("{e} abundance planes for {} endmembers", m.nrows())));
    }
    let flat = abundances
        .to_owned()
        .into_shape_with_order((h * w, e))
        .map_err(|err| Error::Dimension(err.to_string()))?;
    flat.dot(&m)
        .into_shape_with_order((h, w, m.ncols()))
        .map_err(|err| Error::Dimension(err.to_string()))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One `P x P x E` tensor per patch.
    pub abundances: Vec<Array3<f64>>,
    /// `E x B`, averaged over the batch.
    pub endmembers: Array2<f64>,
    /// One `P x P x B` tensor per patch.
    pub reconstruction: Vec<Array3<f64>>,
}

struct BatchPass {
    passes: Vec<PatchPass>,
    endmembers: Array2<f64>,
}

fn check_batch(state: &UnmixerState, batch: &[Array3<f64>]) -> Result<()> {
    let cfg = &state.config;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let want = (cfg.patch_size, cfg.patch_size, cfg.bands);
    if let Some(p) = batch.iter().find(|p| p.dim() != want) {
        return Err(Error::Dimension(format!("patch {:?}, model expects {want:?}", p.dim())));
    }
    Ok(())
}

fn batch_forward(state: &UnmixerState, inputs: &[Tensor]) -> BatchPass {
    let (e, b) = (state.config.endmembers, state.config.bands);
    let passes: Vec<PatchPass> = inputs.iter().map(|x| patch_forward(state, x)).collect();
    let mut m = Array2::<f64>::zeros((e, b));
    for p in &passes {
        for (d, z) in m.iter_mut().zip(&p.em_pre) {
            *d += softplus(*z);
        }
    }
    m /= passes.len() as f64;
    BatchPass { passes, endmembers: m }
}

pub fn forward(state: &UnmixerState, batch: &[Array3<f64>]) -> Result<ForwardOutput> {
    check_batch(state, batch)?;
    let inputs: Vec<Tensor> = batch.iter().map(|p| Tensor::from_hwc(p.view())).collect();
    let bp = batch_forward(state, &inputs);
    let abundances: Vec<Array3<f64>> = bp.passes.iter().map(|p| p.abund.to_hwc()).collect();
    let reconstruction = abundances
        .iter()
        .map(|a| linear_mix(a.view(), bp.endmembers.view()))
        .collect::<Result<_>>()?;
    Ok(ForwardOutput {
        abundances,
        endmembers: bp.endmembers,
        reconstruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub re: f64,
    pub sad: f64,
    pub cos: f64,
    pub reference: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(re: f64, sad: f64, cos: f64, reference: f64, cfg: &UnmixerConfig) -> Self {
        Self {
            re,
            sad,
            cos,
            reference,
            total: re + cfg.lambda_sad * sad + cfg.lambda_cos * cos + cfg.lambda_ref * reference,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [("RE", self.re), ("SAD", self.sad), ("cos", self.cos), ("ref", self.reference), ("total", self.total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name });
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Angle between `a` and `t`, with its gradient w.r.t. `a`.
fn angle_and_grad(a: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let (na, nt) = (norm(a), norm(t));
    let c: f64 = a.iter().zip(t).map(|(x, y)| x * y).sum::<f64>() / (na * nt);
    let c = c.clamp(-1.0, 1.0);
    let w: Vec<f64> = a.iter().zip(t).map(|(x, y)| y / nt - c * x / na).collect();
    let wn = norm(&w);
    let grad = if wn > ANGLE_EPS {
        w.iter().map(|v| -v / (wn * na)).collect()
    } else {
        vec![0.0; a.len()]
    };
    (c.acos(), grad)
}

/// Cosine of `a` and `b`, with its gradient w.r.t. `a`.
fn cosine_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let grad = a.iter().zip(b).map(|(x, y)| (y / nb - c * x / na) / na).collect();
    (c, grad)
}

struct LossGrads {
    parts: LossBreakdown,
    /// Per patch, `P x P x B` layout flattened pixel-major.
    d_recon: Vec<Vec<f64>>,
    d_m: Array2<f64>,
}

/// Works on pixel-major flattened patches (`B` contiguous values per pixel).
fn loss_core(inputs: &[&[f64]], recon: &[&[f64]], m: ArrayView2<'_, f64>, cfg: &UnmixerConfig) -> Result<LossGrads> {
    let (e, b) = m.dim();
    for r in 0..e {
        if m.row(r).iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNorm(r));
        }
    }
    let pixels: usize = inputs.iter().map(|p| p.len() / b).sum();
    let mut re = 0.0;
    let mut sad_sum = 0.0;
    let mut sad_count = 0usize;
    let mut d_recon: Vec<Vec<f64>> = recon.iter().map(|r| vec![0.0; r.len()]).collect();
    for ((x, xh), d) in inputs.iter().zip(recon).zip(&mut d_recon) {
        for ((px, ph), dp) in x.chunks(b).zip(xh.chunks(b)).zip(d.chunks_mut(b)) {
            for ((v, vh), g) in px.iter().zip(ph).zip(dp.iter_mut()) {
                re += (vh - v) * (vh - v);
                *g = 2.0 * (vh - v) / pixels as f64;
            }
        }
    }
    re /= pixels as f64;

    let mut sad_grads: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (n, (x, xh)) in inputs.iter().zip(recon).enumerate() {
        for (i, (px, ph)) in x.chunks(b).zip(xh.chunks(b)).enumerate() {
            if norm(px) == 0.0 || norm(ph) == 0.0 {
                continue;
            }
            let (theta, g) = angle_and_grad(ph, px);
            sad_sum += theta;
            sad_count += 1;
            if cfg.lambda_sad != 0.0 {
                sad_grads.push((n, i, g));
            }
        }
    }
    let sad = if sad_count > 0 { sad_sum / sad_count as f64 } else { 0.0 };
    for (n, i, g) in sad_grads {
        for (d, gv) in d_recon[n][i * b..(i + 1) * b].iter_mut().zip(g) {
            *d += cfg.lambda_sad * gv / sad_count as f64;
        }
    }

    let mut d_m = Array2::<f64>::zeros((e, b));
    let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    let pairs = e * (e - 1) / 2;
    let mut cos = 0.0;
    for i in 0..e {
        for j in i + 1..e {
            let (c, gi) = cosine_and_grad(&rows[i], &rows[j]);
            let (_, gj) = cosine_and_grad(&rows[j], &rows[i]);
            cos += c;
            if cfg.lambda_cos != 0.0 {
                let w = cfg.lambda_cos / pairs as f64;
                d_m.row_mut(i).iter_mut().zip(gi).for_each(|(d, g)| *d += w * g);
                d_m.row_mut(j).iter_mut().zip(gj).for_each(|(d, g)| *d += w * g);
            }
        }
    }
    cos /= pairs as f64;

    let mut reference = 0.0;
    if let Some(refs) = &cfg.reference_endmembers {
        let ref_rows: Vec<Vec<f64>> = refs.signatures.rows().into_iter().map(|r| r.to_vec()).collect();
        let cost: Vec<Vec<f64>> = rows
            .iter()
            .map(|a| ref_rows.iter().map(|t| angle_and_grad(a, t).0).collect())
            .collect();
        let perm = min_cost_assignment(&cost);
        for (i, &j) in perm.iter().enumerate() {
            let (theta, g) = angle_and_grad(&rows[i], &ref_rows[j]);
            reference += theta;
            if cfg.lambda_ref != 0.0 {
                let w = cfg.lambda_ref / e as f64;
                d_m.row_mut(i).iter_mut().zip(g).for_each(|(d, gv)| *d += w * gv);
            }
        }
        reference /= e as f64;
    }

    let parts = LossBreakdown::combine(re, sad, cos, reference, cfg);
    parts.check_finite()?;
    Ok(LossGrads { parts, d_recon, d_m })
}

/// Composite loss of a batch: `RE + lambda_sad SAD + lambda_cos cos + lambda_ref ref`.
/// The reference term uses `config.reference_endmembers` when present.
pub fn loss(inputs: &[Array3<f64>], recon: &[Array3<f64>], m: ArrayView2<'_, f64>, config: &UnmixerConfig) -> Result<LossBreakdown> {
    if inputs.len() != recon.len() || inputs.is_empty() {
        return Err(Error::Dimension(format!("{} inputs, {} reconstructions", inputs.len(), recon.len())));
    }
    if let Some((a, b)) = inputs.iter().zip(recon).find(|(a, b)| a.dim() != b.dim() || a.dim().2 != m.ncols()) {
        return Err(Error::Dimension(format!("input {:?}, reconstruction {:?}, M {:?}", a.dim(), b.dim(), m.dim())));
    }
    let xs: Vec<Array3<f64>> = inputs.iter().map(|a| a.as_standard_layout().to_owned()).collect();
    let rs: Vec<Array3<f64>> = recon.iter().map(|a| a.as_standard_layout().to_owned()).collect();
    let xs_s: Vec<&[f64]> = xs.iter().map(|a| a.as_slice().expect("standard layout")).collect();
    let rs_s: Vec<&[f64]> = rs.iter().map(|a| a.as_slice().expect("standard layout")).collect();
    Ok(loss_core(&xs_s, &rs_s, m, config)?.parts)
}

fn batch_gradients(state: &UnmixerState, inputs: &[Tensor]) -> Result<(LossBreakdown, Vec<Param>)> {
    let cfg = &state.config;
    let (e, b) = (cfg.endmembers, cfg.bands);
    let bp = batch_forward(state, inputs);
    let m = &bp.endmembers;
    let xs: Vec<Array3<f64>> = inputs.iter().map(|t| t.to_hwc()).collect();
    let abund: Vec<Array3<f64>> = bp.passes.iter().map(|p| p.abund.to_hwc()).collect();
    let recon: Vec<Array3<f64>> = abund
        .iter()
        .map(|a| linear_mix(a.view(), m.view()))
        .collect::<Result<_>>()?;
    let xs_s: Vec<&[f64]> = xs.iter().map(|a| a.as_slice().expect("standard layout")).collect();
    let rs_s: Vec<&[f64]> = recon.iter().map(|a| a.as_slice().expect("standard layout")).collect();
    let lg = loss_core(&xs_s, &rs_s, m.view(), cfg)?;

    let mut grads: Vec<Param> = state
        .params
        .iter()
        .map(|p| Param {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: vec![0.0; p.data.len()],
        })
        .collect();
    let mut d_m = lg.d_m.clone();
    let mut d_abund: Vec<Tensor> = Vec::with_capacity(inputs.len());
    for (a, dr) in abund.iter().zip(&lg.d_recon) {
        let (h, w, _) = a.dim();
        let dr = Array2::from_shape_vec((h * w, b), dr.clone()).expect("patch layout");
        let a2 = a.view().into_shape_with_order((h * w, e)).expect("standard layout");
        d_m += &a2.t().dot(&dr);
        let da = dr.dot(&m.t()).into_shape_with_order((h, w, e)).expect("patch layout");
        d_abund.push(Tensor::from_hwc(da.view()));
    }
    let n = inputs.len() as f64;
    for (pass, da) in bp.passes.iter().zip(&d_abund) {
        let d_em_pre: Vec<f64> = d_m
            .iter()
            .zip(&pass.em_pre)
            .map(|(g, z)| g / n * softplus_grad(*z))
            .collect();
        patch_backward(state, pass, da, &d_em_pre, &mut grads);
    }
    Ok((lg.parts, grads))
}

/// Loss and exact gradients of the composite loss for one batch.
pub fn gradients(state: &UnmixerState, batch: &[Array3<f64>]) -> Result<(LossBreakdown, Vec<Param>)> {
    check_batch(state, batch)?;
    let inputs: Vec<Tensor> = batch.iter().map(|p| Tensor::from_hwc(p.view())).collect();
    let (parts, grads) = batch_gradients(state, &inputs)?;
    if let Some(g) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        log::error!("non-finite gradient in {}", g.name);
        return Err(Error::NonFinite { component: "gradient" });
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub re: f64,
    pub sad: f64,
    pub cos: f64,
    pub reference: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub loss_trace: Vec<EpochLoss>,
    pub converged: bool,
}

fn converged(trace: &[EpochLoss], window: usize, eps: f64) -> bool {
    if trace.len() < window {
        return false;
    }
    let tail = &trace[trace.len() - window..];
    let max = tail.iter().map(|t| t.re).fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().map(|t| t.re).fold(f64::INFINITY, f64::min);
    max - min < eps
}

fn patch_set(cube: &HyperCube, cfg: &UnmixerConfig) -> Result<crate::cube::PatchSet> {
    let pad = if cfg.patch_size > cube.lines() && cfg.patch_size > cube.samples() {
        PadMode::Zero
    } else {
        PadMode::Reflect
    };
    extract_patches(cube, cfg.patch_size, cfg.stride(), pad)
}

/// Plain SGD over seeded-shuffled, dihedrally augmented patches until
/// `config.max_epochs` total epochs or RE convergence.
///
/// `config` may change training settings of `state` but not its architecture.
pub fn train(mut state: UnmixerState, cube: &HyperCube, config: &UnmixerConfig) -> Result<(UnmixerState, TrainReport)> {
    config.validate()?;
    if !config.same_architecture(&state.config) {
        return Err(Error::Config("training config architecture differs from the model".into()));
    }
    if cube.bands() != config.bands {
        return Err(Error::Dimension(format!("cube has {} bands, model {}", cube.bands(), config.bands)));
    }
    state.config = config.clone();
    let mut trace = Vec::new();
    if state.epoch >= config.max_epochs {
        return Ok((
            state,
            TrainReport {
                epochs_run: 0,
                loss_trace: trace,
                converged: false,
            },
        ));
    }
    if state.step == 0 {
        match config.endmember_init {
            EndmemberInit::Random => {}
            EndmemberInit::Vca => {
                let set = vca_extract(cube, config.endmembers, config.seed)?;
                state.init_endmembers(set.signatures.view())?;
            }
            EndmemberInit::Reference => {
                let r = config.reference_endmembers.clone().expect("validated");
                state.init_endmembers(r.signatures.view())?;
            }
        }
    }
    let patches = patch_set(cube, config)?.patches;
    let mut is_converged = false;
    while state.epoch < config.max_epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let op: u8 = state.rng.gen_range(0..8);
                inputs.push(Tensor::from_hwc(augment(patches[i].view(), op)?.view()));
            }
            let diverged = |component: String, trace: &Vec<EpochLoss>, epoch: usize| Error::Diverged {
                epoch,
                component,
                trace: trace.clone(),
            };
            let (parts, grads) = match batch_gradients(&state, &inputs) {
                Ok(v) => v,
                Err(Error::NonFinite { component }) => {
                    return Err(diverged(format!("non-finite {component} loss"), &trace, state.epoch))
                }
                Err(Error::ZeroNorm(row)) => return Err(diverged(format!("endmember {row} collapsed to zero"), &trace, state.epoch)),
                Err(e) => return Err(e),
            };
            if let Some(g) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(diverged(format!("non-finite gradient in {}", g.name), &trace, state.epoch));
            }
            let frozen = state.epoch < config.endmember_warmup_epochs;
            for (p, g) in state.params.iter_mut().zip(&grads) {
                if frozen && p.name.starts_with("endmember.") {
                    continue;
                }
                for (w, d) in p.data.iter_mut().zip(&g.data) {
                    *w -= config.learning_rate * d;
                }
            }
            state.step += 1;
            let k = chunk.len() as f64;
            sums[0] += k * parts.re;
            sums[1] += k * parts.sad;
            sums[2] += k * parts.cos;
            sums[3] += k * parts.reference;
            seen += chunk.len();
        }
        let n = seen as f64;
        let parts = LossBreakdown::combine(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, config);
        trace.push(EpochLoss {
            epoch: state.epoch,
            re: parts.re,
            sad: parts.sad,
            cos: parts.cos,
            reference: parts.reference,
            total: parts.total,
        });
        state.epoch += 1;
        log::debug!("epoch {} RE {:.6e} total {:.6e}", state.epoch, parts.re, parts.total);
        if converged(&trace, config.convergence_window, config.convergence_eps) {
            is_converged = true;
            break;
        }
    }
    Ok((
        state,
        TrainReport {
            epochs_run: trace.len(),
            loss_trace: trace,
            converged: is_converged,
        },
    ))
}

/// Abundances for every pixel (overlapping patch outputs averaged) and the
/// endmembers averaged over all patches.
pub fn infer(state: &UnmixerState, cube: &HyperCube) -> Result<(AbundanceMap, EndmemberSet)> {
    let cfg = &state.config;
    if cube.bands() != cfg.bands {
        return Err(Error::Dimension(format!("cube has {} bands, model {}", cube.bands(), cfg.bands)));
    }
    let set = patch_set(cube, cfg)?;
    let (e, b) = (cfg.endmembers, cfg.bands);
    let mut m = Array2::<f64>::zeros((e, b));
    let mut planes = Vec::with_capacity(set.patches.len());
    for p in &set.patches {
        let pass = patch_forward(state, &Tensor::from_hwc(p.view()));
        for (d, z) in m.iter_mut().zip(&pass.em_pre) {
            *d += softplus(*z);
        }
        planes.push(pass.abund.to_hwc());
    }
    m /= set.patches.len() as f64;
    let mut values = stitch_patches(&planes, &set.origins, cube.lines(), cube.samples())?;
    for mut px in values.lanes_mut(ndarray::Axis(2)) {
        let s = px.sum();
        px.mapv_inplace(|v| v / s);
    }
    let names = cfg
        .reference_endmembers
        .as_ref()
        .map_or_else(|| default_names(e), |r| r.names.clone());
    let abundances = AbundanceMap::new(values, names.clone())?;
    let endmembers = EndmemberSet::new(names, cube.wavelengths().to_vec(), m, None)?;
    Ok((abundances, endmembers))
}

/// `epoch,re,sad,cos,ref,total` rows.
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,re,sad,cos,ref,total\n");
    for t in trace {
        out.push_str(&format!("{},{},{},{},{},{}\n", t.epoch, t.re, t.sad, t.cos, t.reference, t.total));
    }
    out
}

pub fn write_trace_csv(trace: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

/// One patch view of a cube region, for tests and tools.
pub fn patch_at(cube: &HyperCube, line: usize, sample: usize, size: usize) -> Result<Array3<f64>> {
    if line + size > cube.lines() || sample + size > cube.samples() {
        return Err(Error::Dimension(format!("patch at ({line}, {sample}) of size {size} leaves the cube")));
    }
    Ok(cube.data().slice(s![line..line + size, sample..sample + size, ..]).to_owned())
}

#[cfg(test)]
mod tests;
