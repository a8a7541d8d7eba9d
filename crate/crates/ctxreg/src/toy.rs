//! Deterministic miniature encoder + cross-attention denoiser.
//!
//! Everything is 64-bit and single-threaded so finite-difference checks,
//! bitwise reproducibility assertions and schedule contracts are all
//! meaningful at desk scale. The encoder is a small bidirectional
//! transformer (tokens mix, so context outputs respond to concept-slot
//! changes); the denoiser applies a stack of cross-attention layers over
//! a flattened latent grid with softmax on the token axis.

use crate::autodiff::{Graph, NodeId};
use crate::backend::{
    Backend, BackendError, DenoisePass, NoiseSchedule, ParamBinding, SeqNode, Side, TokenId,
    Vocabulary, WeightGroup,
};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub encoder_layers: usize,
    pub denoiser_attn_layers: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub schedule_steps: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 16,
            seq_len: 12,
            encoder_layers: 2,
            denoiser_attn_layers: 4,
            latent_height: 8,
            latent_width: 8,
            latent_channels: 4,
            schedule_steps: 100,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn latent_positions(&self) -> usize {
        self.latent_height * self.latent_width
    }
}

/// Word-level vocabulary: ids 0..4 are reserved (`pad`, `bos`, `eos`,
/// concept placeholder); other words hash into the remaining range.
/// Any angle-bracketed word maps to the placeholder id.
#[derive(Debug, Clone)]
pub struct ToyVocab {
    vocab_size: usize,
}

pub const PAD_ID: TokenId = TokenId(0);
pub const BOS_ID: TokenId = TokenId(1);
pub const EOS_ID: TokenId = TokenId(2);
pub const PLACEHOLDER_ID: TokenId = TokenId(3);
const RESERVED: u32 = 4;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Vocabulary for ToyVocab {
    fn encode_word(&self, word: &str) -> Result<Vec<TokenId>, BackendError> {
        if word.is_empty() {
            return Err(BackendError::UnknownWord(word.to_string()));
        }
        if word.starts_with('<') && word.ends_with('>') {
            return Ok(vec![PLACEHOLDER_ID]);
        }
        let span = self.vocab_size as u64 - RESERVED as u64;
        let id = RESERVED as u64 + fnv1a(word.as_bytes()) % span;
        Ok(vec![TokenId(id as u32)])
    }

    fn token_text(&self, id: TokenId) -> String {
        match id {
            PAD_ID => "<pad>".into(),
            BOS_ID => "<bos>".into(),
            EOS_ID => "<eos>".into(),
            PLACEHOLDER_ID => "<s*>".into(),
            TokenId(n) => format!("#{n}"),
        }
    }

    fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    fn eos_id(&self) -> TokenId {
        EOS_ID
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
    g_attn: Array1<f64>,
    g_mlp: Array1<f64>,
}

#[derive(Debug, Clone)]
struct DenoiserLayer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    g: Array1<f64>,
}

pub struct ToyBackend {
    cfg: ToyConfig,
    vocab: ToyVocab,
    table: Array2<f64>,
    pos: Array2<f64>,
    enc: Vec<EncoderLayer>,
    t_proj: Array2<f64>,
    den: Vec<DenoiserLayer>,
    w_out: Array2<f64>,
    schedule: NoiseSchedule,
    trainable_enc: bool,
    trainable_den: bool,
}

const T_FEAT_DIM: usize = 8;

impl ToyBackend {
    /// Backend with weights drawn from the config seed.
    pub fn seeded(cfg: &ToyConfig) -> Self {
        let mut rng = crate::rng::stream(cfg.seed, "toy.init");
        let d = cfg.embed_dim;
        let c = cfg.latent_channels;
        let h = 2 * d;
        let dv = 2 * c;
        let emb_scale = 1.0 / (d as f64).sqrt();
        let proj_scale = 1.0 / (d as f64).sqrt();

        let table = crate::rng::normal_array2(&mut rng, cfg.vocab_size, d, emb_scale);
        let pos = crate::rng::normal_array2(&mut rng, cfg.seq_len, d, 0.5 * emb_scale);
        let enc = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer {
                wq: crate::rng::normal_array2(&mut rng, d, d, proj_scale),
                wk: crate::rng::normal_array2(&mut rng, d, d, proj_scale),
                wv: crate::rng::normal_array2(&mut rng, d, d, proj_scale),
                wo: crate::rng::normal_array2(&mut rng, d, d, proj_scale),
                w1: crate::rng::normal_array2(&mut rng, d, h, proj_scale),
                w2: crate::rng::normal_array2(&mut rng, h, d, 1.0 / (h as f64).sqrt()),
                g_attn: Array1::ones(d),
                g_mlp: Array1::ones(d),
            })
            .collect();
        let t_proj =
            crate::rng::normal_array2(&mut rng, T_FEAT_DIM, c, 1.0 / (T_FEAT_DIM as f64).sqrt());
        let den = (0..cfg.denoiser_attn_layers)
            .map(|_| DenoiserLayer {
                wq: crate::rng::normal_array2(&mut rng, c, d, 1.0 / (c as f64).sqrt()),
                wk: crate::rng::normal_array2(&mut rng, d, d, proj_scale),
                wv: crate::rng::normal_array2(&mut rng, d, dv, proj_scale),
                wo: crate::rng::normal_array2(&mut rng, dv, c, 1.0 / (dv as f64).sqrt()),
                g: Array1::ones(c),
            })
            .collect();
        let w_out = crate::rng::normal_array2(&mut rng, c, c, 1.0 / (c as f64).sqrt());

        Self {
            cfg: cfg.clone(),
            vocab: ToyVocab { vocab_size: cfg.vocab_size },
            table,
            pos,
            enc,
            t_proj,
            den,
            w_out,
            schedule: NoiseSchedule::linear(cfg.schedule_steps),
            trainable_enc: false,
            trainable_den: false,
        }
    }

    /// Encoder that is the exact identity: zero positional embeddings and
    /// zero residual-branch output projections.
    pub fn encoder_identity(cfg: &ToyConfig) -> Self {
        let mut b = Self::seeded(cfg);
        b.pos.fill(0.0);
        for layer in &mut b.enc {
            layer.wo.fill(0.0);
            layer.w2.fill(0.0);
        }
        b
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn rms_norm(
        &self,
        g: &mut Graph,
        x: NodeId,
        gain: NodeId,
    ) -> NodeId {
        let sq = g.square(x);
        let ms = g.row_mean(sq);
        let eps = g.add_scalar(ms, 1e-8);
        let denom = g.sqrt(eps);
        let normed = g.div_col(x, denom);
        g.mul_row(normed, gain)
    }

    /// Sinusoidal timestep features, fixed (not learned).
    fn timestep_features(&self, t: usize) -> Array1<f64> {
        let mut f = Array1::zeros(T_FEAT_DIM);
        let half = T_FEAT_DIM / 2;
        for j in 0..half {
            let omega = 1.0 / 10_000_f64.powf(j as f64 / half as f64);
            f[2 * j] = (t as f64 * omega).sin();
            f[2 * j + 1] = (t as f64 * omega).cos();
        }
        f
    }

    fn bind_enc(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        value: &Array2<f64>,
    ) -> NodeId {
        binding.get_or_insert(g, name, &value.clone().into_dyn(), self.trainable_enc)
    }

    fn bind_enc1(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        value: &Array1<f64>,
    ) -> NodeId {
        binding.get_or_insert(g, name, &value.clone().into_dyn(), self.trainable_enc)
    }

    fn bind_den(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        value: &Array2<f64>,
    ) -> NodeId {
        binding.get_or_insert(g, name, &value.clone().into_dyn(), self.trainable_den)
    }

    fn bind_den1(
        &self,
        g: &mut Graph,
        binding: &mut ParamBinding,
        name: &str,
        value: &Array1<f64>,
    ) -> NodeId {
        binding.get_or_insert(g, name, &value.clone().into_dyn(), self.trainable_den)
    }

    fn param_mut(&mut self, name: &str) -> Option<(&mut [f64], Vec<usize>)> {
        fn view2(a: &mut Array2<f64>) -> (&mut [f64], Vec<usize>) {
            let shape = a.shape().to_vec();
            (a.as_slice_mut().unwrap(), shape)
        }
        fn view1(a: &mut Array1<f64>) -> (&mut [f64], Vec<usize>) {
            let shape = a.shape().to_vec();
            (a.as_slice_mut().unwrap(), shape)
        }
        let mut parts = name.split('.');
        match parts.next()? {
            "table" => Some(view2(&mut self.table)),
            "pos" => Some(view2(&mut self.pos)),
            "enc" => {
                let idx: usize = parts.next()?.strip_prefix('l')?.parse().ok()?;
                let layer = self.enc.get_mut(idx)?;
                match parts.next()? {
                    "wq" => Some(view2(&mut layer.wq)),
                    "wk" => Some(view2(&mut layer.wk)),
                    "wv" => Some(view2(&mut layer.wv)),
                    "wo" => Some(view2(&mut layer.wo)),
                    "w1" => Some(view2(&mut layer.w1)),
                    "w2" => Some(view2(&mut layer.w2)),
                    "g_attn" => Some(view1(&mut layer.g_attn)),
                    "g_mlp" => Some(view1(&mut layer.g_mlp)),
                    _ => None,
                }
            }
            "den" => match parts.next()? {
                "t_proj" => Some(view2(&mut self.t_proj)),
                "w_out" => Some(view2(&mut self.w_out)),
                part => {
                    let idx: usize = part.strip_prefix('l')?.parse().ok()?;
                    let layer = self.den.get_mut(idx)?;
                    match parts.next()? {
                        "wq" => Some(view2(&mut layer.wq)),
                        "wk" => Some(view2(&mut layer.wk)),
                        "wv" => Some(view2(&mut layer.wv)),
                        "wo" => Some(view2(&mut layer.wo)),
                        "g" => Some(view1(&mut layer.g)),
                        _ => None,
                    }
                }
            },
            _ => None,
        }
    }

    fn group_params(&self, group: WeightGroup) -> Vec<(String, Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<(String, Vec<f64>, Vec<usize>)>, name: String, a: &Array2<f64>| {
            out.push((name, a.iter().cloned().collect(), a.shape().to_vec()));
        };
        let push1 = |out: &mut Vec<(String, Vec<f64>, Vec<usize>)>, name: String, a: &Array1<f64>| {
            out.push((name, a.to_vec(), a.shape().to_vec()));
        };
        match group {
            WeightGroup::TextEncoder => {
                push2(&mut out, "table".into(), &self.table);
                push2(&mut out, "pos".into(), &self.pos);
                for (i, l) in self.enc.iter().enumerate() {
                    push2(&mut out, format!("enc.l{i}.wq"), &l.wq);
                    push2(&mut out, format!("enc.l{i}.wk"), &l.wk);
                    push2(&mut out, format!("enc.l{i}.wv"), &l.wv);
                    push2(&mut out, format!("enc.l{i}.wo"), &l.wo);
                    push2(&mut out, format!("enc.l{i}.w1"), &l.w1);
                    push2(&mut out, format!("enc.l{i}.w2"), &l.w2);
                    push1(&mut out, format!("enc.l{i}.g_attn"), &l.g_attn);
                    push1(&mut out, format!("enc.l{i}.g_mlp"), &l.g_mlp);
                }
            }
            WeightGroup::Denoiser => {
                push2(&mut out, "den.t_proj".into(), &self.t_proj);
                for (i, l) in self.den.iter().enumerate() {
                    push2(&mut out, format!("den.l{i}.wq"), &l.wq);
                    push2(&mut out, format!("den.l{i}.wk"), &l.wk);
                    push2(&mut out, format!("den.l{i}.wv"), &l.wv);
                    push2(&mut out, format!("den.l{i}.wo"), &l.wo);
                    push1(&mut out, format!("den.l{i}.g"), &l.g);
                }
                push2(&mut out, "den.w_out".into(), &self.w_out);
            }
        }
        out
    }

    /// Deterministic latent sampler: ancestral-free (eta = 0) reverse
    /// walk over a strided subset of the schedule from seeded noise.
    pub fn sample_latent(
        &self,
        cond: &crate::backend::EmbeddingSequence,
        seed: u64,
        stream_key: &str,
    ) -> Result<Array2<f64>, BackendError> {
        let p = self.latent_positions();
        let c = self.cfg.latent_channels;
        let mut rng = crate::rng::stream(seed, stream_key);
        let mut buf = vec![0.0; p * c];
        crate::rng::fill_standard_normal(&mut rng, &mut buf);
        let mut z = Array2::from_shape_vec((p, c), buf).unwrap();

        let steps = self.schedule.steps();
        let stride = (steps / 10).max(1);
        let mut ts: Vec<usize> = (0..steps).step_by(stride).collect();
        ts.reverse();
        for (i, &t) in ts.iter().enumerate() {
            let (eps, _) = crate::backend::denoise_value(self, &z, t, cond)?;
            let ab_t = self.schedule.alpha_bar(t)?;
            let z0 = (&z - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
            if i + 1 < ts.len() {
                let ab_prev = self.schedule.alpha_bar(ts[i + 1])?;
                z = &z0 * ab_prev.sqrt() + &eps * (1.0 - ab_prev).sqrt();
            } else {
                z = z0;
            }
        }
        Ok(z)
    }
}

impl Backend for ToyBackend {
    fn vocab(&self) -> &dyn Vocabulary {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.cfg.seq_len
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn latent_positions(&self) -> usize {
        self.cfg.latent_positions()
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn latent_grid(&self) -> (usize, usize) {
        (self.cfg.latent_height, self.cfg.latent_width)
    }

    fn attn_layer_count(&self) -> usize {
        self.cfg.denoiser_attn_layers
    }

    fn embedding_table(&self) -> &Array2<f64> {
        &self.table
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn set_trainable(&mut self, group: WeightGroup, trainable: bool) {
        match group {
            WeightGroup::TextEncoder => self.trainable_enc = trainable,
            WeightGroup::Denoiser => self.trainable_den = trainable,
        }
    }

    fn is_trainable(&self, group: WeightGroup) -> bool {
        match group {
            WeightGroup::TextEncoder => self.trainable_enc,
            WeightGroup::Denoiser => self.trainable_den,
        }
    }

    fn encode_graph(
        &self,
        g: &mut Graph,
        input: SeqNode,
        binding: &mut ParamBinding,
    ) -> Result<SeqNode, BackendError> {
        if input.side != Side::Input {
            return Err(BackendError::SideMismatch { expected: Side::Input, got: input.side });
        }
        let shape = g.value(input.node).shape().to_vec();
        if shape != [self.cfg.seq_len, self.cfg.embed_dim] {
            return Err(BackendError::ShapeMismatch {
                expected: vec![self.cfg.seq_len, self.cfg.embed_dim],
                got: shape,
            });
        }
        let scale = 1.0 / (self.cfg.embed_dim as f64).sqrt();
        let pos = self.bind_enc(g, binding, "pos", &self.pos);
        let mut x = g.add(input.node, pos);
        for (i, layer) in self.enc.iter().enumerate() {
            let wq = self.bind_enc(g, binding, &format!("enc.l{i}.wq"), &layer.wq);
            let wk = self.bind_enc(g, binding, &format!("enc.l{i}.wk"), &layer.wk);
            let wv = self.bind_enc(g, binding, &format!("enc.l{i}.wv"), &layer.wv);
            let wo = self.bind_enc(g, binding, &format!("enc.l{i}.wo"), &layer.wo);
            let w1 = self.bind_enc(g, binding, &format!("enc.l{i}.w1"), &layer.w1);
            let w2 = self.bind_enc(g, binding, &format!("enc.l{i}.w2"), &layer.w2);
            let g_attn = self.bind_enc1(g, binding, &format!("enc.l{i}.g_attn"), &layer.g_attn);
            let g_mlp = self.bind_enc1(g, binding, &format!("enc.l{i}.g_mlp"), &layer.g_mlp);

            let a_in = self.rms_norm(g, x, g_attn);
            let q = g.matmul(a_in, wq);
            let k = g.matmul(a_in, wk);
            let v = g.matmul(a_in, wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let ctx = g.matmul(attn, v);
            let proj = g.matmul(ctx, wo);
            x = g.add(x, proj);

            let m_in = self.rms_norm(g, x, g_mlp);
            let h1 = g.matmul(m_in, w1);
            let act = g.tanh(h1);
            let h2 = g.matmul(act, w2);
            x = g.add(x, h2);
        }
        Ok(SeqNode { node: x, side: Side::Output, real_len: input.real_len })
    }

    fn denoise_graph(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        t: usize,
        cond: SeqNode,
        binding: &mut ParamBinding,
    ) -> Result<DenoisePass, BackendError> {
        if cond.side != Side::Output {
            return Err(BackendError::SideMismatch { expected: Side::Output, got: cond.side });
        }
        if t >= self.schedule.steps() {
            return Err(BackendError::TimestepOutOfRange { t, steps: self.schedule.steps() });
        }
        let p = self.latent_positions();
        let c = self.cfg.latent_channels;
        let shape = g.value(z_t).shape().to_vec();
        if shape != [p, c] {
            return Err(BackendError::ShapeMismatch { expected: vec![p, c], got: shape });
        }

        let t_feat = g.constant(self.timestep_features(t).insert_axis(ndarray::Axis(0)).into_dyn());
        let t_proj = self.bind_den(g, binding, "den.t_proj", &self.t_proj);
        let t_row_m = g.matmul(t_feat, t_proj);
        let t_row = g.row(t_row_m, 0);
        let mut z = g.add_row(z_t, t_row);

        let mut maps = Vec::with_capacity(self.den.len());
        let da_scale = 1.0 / (self.cfg.embed_dim as f64).sqrt();
        for (i, layer) in self.den.iter().enumerate() {
            let wq = self.bind_den(g, binding, &format!("den.l{i}.wq"), &layer.wq);
            let wk = self.bind_den(g, binding, &format!("den.l{i}.wk"), &layer.wk);
            let wv = self.bind_den(g, binding, &format!("den.l{i}.wv"), &layer.wv);
            let wo = self.bind_den(g, binding, &format!("den.l{i}.wo"), &layer.wo);
            let gain = self.bind_den1(g, binding, &format!("den.l{i}.g"), &layer.g);

            let zn = self.rms_norm(g, z, gain);
            let q = g.matmul(zn, wq);
            let k = g.matmul(cond.node, wk);
            let v = g.matmul(cond.node, wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, da_scale);
            let attn = g.softmax_rows(scores);
            maps.push(attn);
            let ctx = g.matmul(attn, v);
            let proj = g.matmul(ctx, wo);
            z = g.add(z, proj);
        }
        let w_out = self.bind_den(g, binding, "den.w_out", &self.w_out);
        let pred = g.matmul(z, w_out);
        Ok(DenoisePass { noise_pred: pred, attn: maps })
    }

    fn param_names(&self, group: WeightGroup) -> Vec<String> {
        self.group_params(group).into_iter().map(|(n, _, _)| n).collect()
    }

    fn apply_param_update(&mut self, name: &str, delta: &ndarray::ArrayD<f64>) -> Result<(), BackendError> {
        let (slice, shape) = self
            .param_mut(name)
            .ok_or_else(|| BackendError::UnknownParam(name.to_string()))?;
        if delta.shape() != shape.as_slice() {
            return Err(BackendError::ShapeMismatch {
                expected: shape,
                got: delta.shape().to_vec(),
            });
        }
        for (p, d) in slice.iter_mut().zip(delta.iter()) {
            *p += d;
        }
        Ok(())
    }

    fn weights_digest(&self, group: WeightGroup) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, values, shape) in self.group_params(group) {
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn export_weights(&self, group: WeightGroup) -> Vec<(String, Vec<f64>, Vec<usize>)> {
        self.group_params(group)
    }

    fn import_weights(
        &mut self,
        group: WeightGroup,
        weights: &[(String, Vec<f64>, Vec<usize>)],
    ) -> Result<(), BackendError> {
        let expected = self.param_names(group);
        for (name, values, shape) in weights {
            if !expected.contains(name) {
                return Err(BackendError::UnknownParam(name.clone()));
            }
            let (slice, own_shape) = self.param_mut(name).unwrap();
            if own_shape != *shape || slice.len() != values.len() {
                return Err(BackendError::ShapeMismatch {
                    expected: own_shape,
                    got: shape.clone(),
                });
            }
            slice.copy_from_slice(values);
        }
        Ok(())
    }
}

/// Seeded synthetic latents standing in for encoded concept images:
/// smooth two-sinusoid mixtures per channel over the latent grid.
pub fn make_toy_dataset(cfg: &ToyConfig, n_images: usize, seed: u64) -> Vec<Array2<f64>> {
    use rand::Rng;
    assert!(n_images >= 1, "dataset needs at least one latent");
    let mut rng = crate::rng::stream(seed, "toy.dataset");
    let (hgt, wid) = (cfg.latent_height, cfg.latent_width);
    let p = cfg.latent_positions();
    let c = cfg.latent_channels;
    (0..n_images)
        .map(|_| {
            let mut z = Array2::zeros((p, c));
            for ch in 0..c {
                let amp1: f64 = rng.gen_range(0.4..1.0);
                let amp2: f64 = rng.gen_range(0.2..0.6);
                let kx: f64 = rng.gen_range(0.5..2.5);
                let ky: f64 = rng.gen_range(0.5..2.5);
                let phase1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for y in 0..hgt {
                    for x in 0..wid {
                        let u = x as f64 / wid as f64;
                        let v = y as f64 / hgt as f64;
                        let val = amp1 * (std::f64::consts::TAU * (kx * u + ky * v) + phase1).sin()
                            + amp2 * (std::f64::consts::TAU * (kx * v - ky * u) + phase2).cos();
                        z[(y * wid + x, ch)] = val;
                    }
                }
            }
            z
        })
        .collect()
}

/// Latent dump file format: the grid shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDump {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentDump {
    pub fn from_latent(z: &Array2<f64>, grid: (usize, usize)) -> Self {
        let (height, width) = grid;
        let channels = z.ncols();
        assert_eq!(z.nrows(), height * width, "latent does not match grid");
        Self { height, width, channels, data: z.iter().cloned().collect() }
    }

    pub fn to_latent(&self) -> Result<Array2<f64>, BackendError> {
        let p = self.height * self.width;
        if self.data.len() != p * self.channels {
            return Err(BackendError::ShapeMismatch {
                expected: vec![p, self.channels],
                got: vec![self.data.len()],
            });
        }
        Ok(Array2::from_shape_vec((p, self.channels), self.data.clone()).unwrap())
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(self).expect("serialize"))
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Loads every `*.json` latent dump in a directory, sorted by filename.
pub fn load_latent_dir(
    dir: &std::path::Path,
    expected_grid: (usize, usize),
    expected_channels: usize,
) -> std::io::Result<Vec<Array2<f64>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let dump = LatentDump::load(&path)?;
        if (dump.height, dump.width) != expected_grid || dump.channels != expected_channels {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "{}: latent grid {}x{}x{} does not match backend {}x{}x{}",
                    path.display(),
                    dump.height,
                    dump.width,
                    dump.channels,
                    expected_grid.0,
                    expected_grid.1,
                    expected_channels
                ),
            ));
        }
        out.push(dump.to_latent().map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?);
    }
    Ok(out)
}
