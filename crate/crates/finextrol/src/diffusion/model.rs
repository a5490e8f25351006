//! The x0-predicting denoiser and its controlled dual-branch variant.
//!
//! The base model embeds the noisy motion frame-wise, embeds the coarse text
//! through a learned pooled token path, adds the timestep embedding into the
//! text slot, and runs a small transformer whose motion positions are
//! projected back to pose space.
//!
//! The control branch is a trainable copy of the base trunk. The projected
//! control embedding is added to its input sequence, and per-layer linear
//! connectors with zero-initialized weights and biases feed its features
//! into the base stream, so before any control training the controlled
//! forward equals the base forward exactly.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::nn::{
    sinusoidal_positions, timestep_embedding, Activation, BlockCache, Embedding, LayerNorm,
    Linear, LnCache, Param, TransformerBlock,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub motion_dim: usize,
    pub text_embed_dim: usize,
    pub max_text_len: usize,
    /// Width of the frozen control embedding consumed by the control branch.
    pub control_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            motion_dim: 12,
            text_embed_dim: 32,
            max_text_len: 512,
            control_embed_dim: 32,
        }
    }
}

/// Learned text-conditioning path: token embeddings scaled by per-position
/// gains, mean-pooled, then projected to the model width. The null condition
/// replaces the pooled vector with zeros.
#[derive(Debug, Clone)]
pub struct TextPath {
    pub tok: Embedding,
    pub pos_gain: Param,
    pub proj: Linear,
}

pub struct TextCache {
    ids: Vec<usize>,
    emb: Array2<f64>,
    pooled: Array2<f64>,
}

impl TextPath {
    pub fn new(vocab_size: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> TextPath {
        TextPath {
            tok: Embedding::new(rng, vocab_size, cfg.text_embed_dim),
            pos_gain: Param::from_value(Array2::ones((cfg.max_text_len, cfg.text_embed_dim))),
            proj: Linear::new(rng, cfg.text_embed_dim, cfg.d_model),
        }
    }

    /// `ids = None` is the null condition: a zero pooled feature.
    pub fn forward(
        &self,
        ids: Option<&[usize]>,
        cache: Option<&mut Option<TextCache>>,
    ) -> Result<Array2<f64>, DiffusionError> {
        let e = self.tok.table.v.ncols();
        let (pooled, emb, kept_ids) = match ids {
            None => (Array2::zeros((1, e)), Array2::zeros((0, e)), Vec::new()),
            Some(ids) if ids.is_empty() => {
                (Array2::zeros((1, e)), Array2::zeros((0, e)), Vec::new())
            }
            Some(ids) => {
                if ids.len() > self.pos_gain.v.nrows() {
                    return Err(DiffusionError::TextTooLong {
                        len: ids.len(),
                        max: self.pos_gain.v.nrows(),
                    });
                }
                let emb = self.tok.forward(ids);
                let gained = &emb * &self.pos_gain.v.slice(s![..ids.len(), ..]);
                let pooled = gained.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
                (pooled, emb, ids.to_vec())
            }
        };
        let out = self.proj.forward(&pooled);
        if let Some(slot) = cache {
            *slot = Some(TextCache {
                ids: kept_ids,
                emb,
                pooled,
            });
        }
        Ok(out)
    }

    pub fn backward(&mut self, cache: &TextCache, g_out: &Array2<f64>) {
        let g_pooled = self.proj.backward(&cache.pooled, g_out);
        if cache.ids.is_empty() {
            return; // null condition: nothing upstream of the projection
        }
        let n = cache.ids.len();
        let scale = 1.0 / n as f64;
        let mut g_emb = Array2::zeros(cache.emb.raw_dim());
        for i in 0..n {
            for c in 0..cache.emb.ncols() {
                let g = g_pooled[[0, c]] * scale;
                g_emb[[i, c]] = g * self.pos_gain.v[[i, c]];
                self.pos_gain.g[[i, c]] += g * cache.emb[[i, c]];
            }
        }
        self.tok.backward(&cache.ids, &g_emb);
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.tok.visit(&format!("{prefix}.tok"), f);
        f(format!("{prefix}.pos_gain"), &mut self.pos_gain);
        self.proj.visit(&format!("{prefix}.proj"), f);
    }
}

/// Input process plus transformer trunk shared by both branches.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub text: TextPath,
    pub motion_in: Linear,
    pub t_lin1: Linear,
    pub t_lin2: Linear,
    pub blocks: Vec<TransformerBlock>,
}

pub struct EmbedCache {
    x_t: Array2<f64>,
    text: Option<TextCache>,
    t_sin: Array2<f64>,
    t_pre: Array2<f64>,
    t_hidden: Array2<f64>,
}

impl Trunk {
    pub fn new(vocab_size: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Trunk {
        Trunk {
            text: TextPath::new(vocab_size, cfg, rng),
            motion_in: Linear::new(rng, cfg.motion_dim, cfg.d_model),
            t_lin1: Linear::new(rng, cfg.d_model, cfg.d_model),
            t_lin2: Linear::new(rng, cfg.d_model, cfg.d_model),
            blocks: (0..cfg.n_layers)
                .map(|_| TransformerBlock::new(rng, cfg.d_model, cfg.n_heads, cfg.d_ff))
                .collect(),
        }
    }

    /// Builds the (T+1) x d input sequence: text slot (with the timestep
    /// embedding summed in) followed by the embedded motion frames, plus
    /// sinusoidal positions.
    pub fn embed_seq(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        text_ids: Option<&[usize]>,
        mut cache: Option<&mut Option<EmbedCache>>,
    ) -> Result<Array2<f64>, DiffusionError> {
        let d = self.motion_in.w.v.ncols();
        let mut text_cache = None;
        let e_p = self.text.forward(
            text_ids,
            if cache.is_some() { Some(&mut text_cache) } else { None },
        )?;
        let t_sin = timestep_embedding(t, d);
        let t_pre = self.t_lin1.forward(&t_sin);
        let t_hidden = t_pre.mapv(|v| Activation::Gelu.apply(v));
        let t_emb = self.t_lin2.forward(&t_hidden);

        let e_x = self.motion_in.forward(x_t);
        let n = x_t.nrows();
        let mut seq = Array2::zeros((n + 1, d));
        seq.row_mut(0).assign(&(&e_p.row(0) + &t_emb.row(0)));
        seq.slice_mut(s![1.., ..]).assign(&e_x);
        seq += &sinusoidal_positions(n + 1, d);

        if let Some(slot) = cache.as_deref_mut() {
            *slot = Some(EmbedCache {
                x_t: x_t.clone(),
                text: text_cache,
                t_sin,
                t_pre,
                t_hidden,
            });
        }
        Ok(seq)
    }

    /// Routes the input-sequence gradient back through the text, timestep,
    /// and motion embedding paths.
    pub fn backward_embed(&mut self, cache: &EmbedCache, g_seq: &Array2<f64>) {
        let g_slot0 = g_seq.row(0).insert_axis(Axis(0)).to_owned();
        let g_temb = g_slot0.clone();
        let g_thidden = self.t_lin2.backward(&cache.t_hidden, &g_temb);
        let g_tpre = &g_thidden * &cache.t_pre.mapv(|v| Activation::Gelu.derivative(v));
        self.t_lin1.backward(&cache.t_sin, &g_tpre);
        if let Some(tc) = &cache.text {
            self.text.backward(tc, &g_slot0);
        }
        let g_ex = g_seq.slice(s![1.., ..]).to_owned();
        self.motion_in.backward(&cache.x_t, &g_ex);
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.text.visit(&format!("{prefix}.text"), f);
        self.motion_in.visit(&format!("{prefix}.motion_in"), f);
        self.t_lin1.visit(&format!("{prefix}.t_lin1"), f);
        self.t_lin2.visit(&format!("{prefix}.t_lin2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// The single-branch denoiser.
#[derive(Debug, Clone)]
pub struct BaseDenoiser {
    pub trunk: Trunk,
    pub final_ln: LayerNorm,
    pub motion_out: Linear,
    pub config: DenoiserConfig,
}

pub struct BaseCache {
    embed: Option<EmbedCache>,
    blocks: Vec<Option<BlockCache>>,
    final_ln: Option<LnCache>,
    h_motion: Array2<f64>,
}

impl BaseDenoiser {
    pub fn new(vocab_size: usize, config: &DenoiserConfig, rng: &mut ChaCha8Rng) -> BaseDenoiser {
        BaseDenoiser {
            trunk: Trunk::new(vocab_size, config, rng),
            final_ln: LayerNorm::new(config.d_model),
            motion_out: Linear::new(rng, config.d_model, config.motion_dim),
            config: config.clone(),
        }
    }

    pub fn forward(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        text_ids: Option<&[usize]>,
    ) -> Result<Array2<f64>, DiffusionError> {
        let mut h = self.trunk.embed_seq(x_t, t, text_ids, None)?;
        for block in &self.trunk.blocks {
            h = block.forward(&h, None, None);
        }
        let h = self.final_ln.forward(&h, None);
        Ok(self.motion_out.forward(&h.slice(s![1.., ..]).to_owned()))
    }

    pub fn forward_train(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        text_ids: Option<&[usize]>,
    ) -> Result<(Array2<f64>, BaseCache), DiffusionError> {
        let mut cache = BaseCache {
            embed: None,
            blocks: vec![None; self.trunk.blocks.len()],
            final_ln: None,
            h_motion: Array2::zeros((0, 0)),
        };
        let mut h = self.trunk.embed_seq(x_t, t, text_ids, Some(&mut cache.embed))?;
        for (i, block) in self.trunk.blocks.iter().enumerate() {
            h = block.forward(&h, None, Some(&mut cache.blocks[i]));
        }
        let h = self.final_ln.forward(&h, Some(&mut cache.final_ln));
        cache.h_motion = h.slice(s![1.., ..]).to_owned();
        let out = self.motion_out.forward(&cache.h_motion);
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &BaseCache, g_out: &Array2<f64>) {
        let g_hmotion = self.motion_out.backward(&cache.h_motion, g_out);
        let mut g_h = Array2::zeros((g_hmotion.nrows() + 1, g_hmotion.ncols()));
        g_h.slice_mut(s![1.., ..]).assign(&g_hmotion);
        let mut g_h = self
            .final_ln
            .backward(cache.final_ln.as_ref().unwrap(), &g_h);
        for (i, block) in self.trunk.blocks.iter_mut().enumerate().rev() {
            g_h = block.backward(cache.blocks[i].as_ref().unwrap(), &g_h);
        }
        self.trunk
            .backward_embed(cache.embed.as_ref().unwrap(), &g_h);
    }

    pub fn visit<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.trunk.visit("base", f);
        self.final_ln.visit("base.final_ln", f);
        self.motion_out.visit("base.motion_out", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut copy = self.clone();
        copy.visit(&mut |_, p| n += p.count());
        n
    }
}

/// Trainable copy of the base trunk plus the control-embedding projection
/// and the per-layer zero-initialized connectors.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub trunk: Trunk,
    pub ctrl_proj: Linear,
    pub connectors: Vec<Linear>,
}

pub struct ControlledCache {
    base_embed: Option<EmbedCache>,
    ctrl_embed: Option<EmbedCache>,
    e_c: Array2<f64>,
    base_blocks: Vec<Option<BlockCache>>,
    ctrl_blocks: Vec<Option<BlockCache>>,
    /// Control-stream activations entering each connector.
    h_ctrl: Vec<Array2<f64>>,
    final_ln: Option<LnCache>,
    h_motion: Array2<f64>,
}

impl ControlBranch {
    /// Clones the base trunk and zero-initializes every connector, so the
    /// branch is a silent passenger until trained.
    pub fn from_base(base: &BaseDenoiser, rng: &mut ChaCha8Rng) -> ControlBranch {
        let d = base.config.d_model;
        ControlBranch {
            trunk: base.trunk.clone(),
            ctrl_proj: Linear::new(rng, base.config.control_embed_dim, d),
            connectors: (0..base.config.n_layers)
                .map(|_| Linear::new_zero(d, d))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.trunk.visit("ctrl", f);
        self.ctrl_proj.visit("ctrl.ctrl_proj", f);
        for (i, c) in self.connectors.iter_mut().enumerate() {
            c.visit(&format!("ctrl.connector{i}"), f);
        }
    }
}

/// Dual-branch forward: the control stream runs the trainable copy modulated
/// by the control embedding, and each layer's connector output is added to
/// the base stream before the next base block. The base output head reads
/// the fused stream.
pub fn controlled_forward(
    base: &BaseDenoiser,
    ctrl: &ControlBranch,
    x_t: &Array2<f64>,
    t: usize,
    text_ids: Option<&[usize]>,
    e_c: &Array1<f64>,
) -> Result<Array2<f64>, DiffusionError> {
    check_control_dim(base, e_c)?;
    let e_c_row = e_c.view().insert_axis(Axis(0)).to_owned();
    let ctrl_add = ctrl.ctrl_proj.forward(&e_c_row);

    let mut h_out = base.trunk.embed_seq(x_t, t, text_ids, None)?;
    let mut h_c = ctrl.trunk.embed_seq(x_t, t, text_ids, None)?;
    h_c += &ctrl_add; // broadcast over all positions
    for l in 0..base.trunk.blocks.len() {
        h_c = ctrl.trunk.blocks[l].forward(&h_c, None, None);
        let h_ori = base.trunk.blocks[l].forward(&h_out, None, None);
        h_out = h_ori + ctrl.connectors[l].forward(&h_c);
    }
    let h = base.final_ln.forward(&h_out, None);
    Ok(base.motion_out.forward(&h.slice(s![1.., ..]).to_owned()))
}

pub fn controlled_forward_train(
    base: &BaseDenoiser,
    ctrl: &ControlBranch,
    x_t: &Array2<f64>,
    t: usize,
    text_ids: Option<&[usize]>,
    e_c: &Array1<f64>,
) -> Result<(Array2<f64>, ControlledCache), DiffusionError> {
    check_control_dim(base, e_c)?;
    let n_layers = base.trunk.blocks.len();
    let mut cache = ControlledCache {
        base_embed: None,
        ctrl_embed: None,
        e_c: e_c.view().insert_axis(Axis(0)).to_owned(),
        base_blocks: vec![None; n_layers],
        ctrl_blocks: vec![None; n_layers],
        h_ctrl: Vec::with_capacity(n_layers),
        final_ln: None,
        h_motion: Array2::zeros((0, 0)),
    };
    let ctrl_add = ctrl.ctrl_proj.forward(&cache.e_c);

    let mut h_out = base
        .trunk
        .embed_seq(x_t, t, text_ids, Some(&mut cache.base_embed))?;
    let mut h_c = ctrl
        .trunk
        .embed_seq(x_t, t, text_ids, Some(&mut cache.ctrl_embed))?;
    h_c += &ctrl_add;
    for l in 0..n_layers {
        h_c = ctrl.trunk.blocks[l].forward(&h_c, None, Some(&mut cache.ctrl_blocks[l]));
        cache.h_ctrl.push(h_c.clone());
        let h_ori = base.trunk.blocks[l].forward(&h_out, None, Some(&mut cache.base_blocks[l]));
        h_out = h_ori + ctrl.connectors[l].forward(&h_c);
    }
    let h = base.final_ln.forward(&h_out, Some(&mut cache.final_ln));
    cache.h_motion = h.slice(s![1.., ..]).to_owned();
    let out = base.motion_out.forward(&cache.h_motion);
    Ok((out, cache))
}

/// Backward through both branches. Base parameters always accumulate
/// gradients; the caller decides whether to step them.
pub fn controlled_backward(
    base: &mut BaseDenoiser,
    ctrl: &mut ControlBranch,
    cache: &ControlledCache,
    g_out: &Array2<f64>,
) {
    let g_hmotion = base.motion_out.backward(&cache.h_motion, g_out);
    let mut g_h = Array2::zeros((g_hmotion.nrows() + 1, g_hmotion.ncols()));
    g_h.slice_mut(s![1.., ..]).assign(&g_hmotion);
    let mut g_out_stream = base
        .final_ln
        .backward(cache.final_ln.as_ref().unwrap(), &g_h);

    let n_layers = base.trunk.blocks.len();
    let mut g_ctrl_stream: Option<Array2<f64>> = None;
    for l in (0..n_layers).rev() {
        // fused output: h_out_l = base_block_l(h_out_{l-1}) + P_l(h_c_l)
        let g_conn_in = ctrl.connectors[l].backward(&cache.h_ctrl[l], &g_out_stream);
        let g_c = match g_ctrl_stream.take() {
            Some(acc) => acc + &g_conn_in,
            None => g_conn_in,
        };
        g_ctrl_stream = Some(
            ctrl.trunk.blocks[l].backward(cache.ctrl_blocks[l].as_ref().unwrap(), &g_c),
        );
        g_out_stream =
            base.trunk.blocks[l].backward(cache.base_blocks[l].as_ref().unwrap(), &g_out_stream);
    }

    base.trunk
        .backward_embed(cache.base_embed.as_ref().unwrap(), &g_out_stream);
    let g_ctrl_seq = g_ctrl_stream.expect("at least one layer");
    // the control addition broadcasts over positions, so its gradient sums
    let g_ctrl_add = g_ctrl_seq.sum_axis(Axis(0)).insert_axis(Axis(0));
    ctrl.ctrl_proj.backward(&cache.e_c, &g_ctrl_add);
    ctrl.trunk
        .backward_embed(cache.ctrl_embed.as_ref().unwrap(), &g_ctrl_seq);
}

fn check_control_dim(base: &BaseDenoiser, e_c: &Array1<f64>) -> Result<(), DiffusionError> {
    if e_c.len() != base.config.control_embed_dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "control embedding has width {}, model expects {}",
            e_c.len(),
            base.config.control_embed_dim
        )));
    }
    Ok(())
}

/// Which training recipe produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Control,
    Direct,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Base => "base",
            ModelKind::Control => "control",
            ModelKind::Direct => "direct",
        };
        f.write_str(s)
    }
}
