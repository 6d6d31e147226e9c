//! Single-stream and dual-stream blocks, the gated high-frequency branch and
//! the full velocity network.

use std::rc::Rc;

use ndarr::{Tape, Tensor, Var};

use super::patch::DownsampledMask;
use super::state::{ModelState, StreamParams};
use super::tokens::TokenBatch;
use crate::error::{contract, Result};

const NORM_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;

/// 2D rotary tables for a token sequence.
#[derive(Clone, Debug)]
pub struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    tokens: usize,
}

impl RopeTable {
    /// One `(row, col)` position per token. In every head the first half of
    /// the rotation pairs follows the row, the second half the column.
    pub fn new(positions: &[(f64, f64)], width: usize, heads: usize, base: f64) -> Self {
        let hd = width / heads;
        let quarter = hd / 4;
        let mut cos = Vec::with_capacity(positions.len() * width / 2);
        let mut sin = Vec::with_capacity(cos.capacity());
        for &(row, col) in positions {
            for _ in 0..heads {
                for k in 0..hd / 2 {
                    let (pos, j) = if k < quarter {
                        (row, k)
                    } else {
                        (col, k - quarter)
                    };
                    let angle = pos * base.powf(-(j as f64) / quarter as f64);
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        Self {
            cos,
            sin,
            tokens: positions.len(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn concat(&self, other: &RopeTable) -> RopeTable {
        let mut cos = self.cos.clone();
        cos.extend_from_slice(&other.cos);
        let mut sin = self.sin.clone();
        sin.extend_from_slice(&other.sin);
        RopeTable {
            cos,
            sin,
            tokens: self.tokens + other.tokens,
        }
    }

    fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.rope(Rc::from(self.cos.as_slice()), Rc::from(self.sin.as_slice()))?)
    }
}

/// Text positions `(0, j)`; visual segment `s` occupies rows
/// `1 + s·gh .. 1 + (s+1)·gh` so segments never share a position.
pub fn token_positions(
    text_len: usize,
    grid: (usize, usize),
    segments: usize,
) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let text = (0..text_len).map(|j| (0.0, j as f64)).collect();
    let (gh, gw) = grid;
    let mut visual = Vec::with_capacity(segments * gh * gw);
    for s in 0..segments {
        for r in 0..gh {
            for c in 0..gw {
                visual.push(((1 + s * gh + r) as f64, c as f64));
            }
        }
    }
    (text, visual)
}

/// Token streams handled by one block.
#[derive(Clone, Copy, Debug)]
pub struct Streams<'t> {
    pub text: Var<'t>,
    pub visual: Var<'t>,
}

/// The inputs of one velocity evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub z: &'a TokenBatch,
    pub z_hf: &'a TokenBatch,
    pub t: f64,
    pub mask: &'a DownsampledMask,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Route each gated branch through a fresh leaf so its gradient can be
    /// inspected in isolation.
    pub probe_sea: bool,
}

#[derive(Debug)]
pub struct ForwardOutput<'t> {
    /// `[n, C·p²]` velocity for the noisy segment.
    pub velocity: Var<'t>,
    /// Leaves fed into each gated branch when probing.
    pub sea_probes: Vec<Var<'t>>,
}

/// Something that predicts the velocity of the noisy segment on a tape.
pub trait VelocityField<'t> {
    /// `slot` is the position of the sample in the current batch; learned
    /// models ignore it.
    fn velocity(&self, input: &ModelInput<'_>, slot: usize) -> Result<Var<'t>>;
}

/// A model state bound to a tape.
pub struct Dit<'s, 't> {
    pub state: &'s ModelState,
    pub params: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'s, 't> Dit<'s, 't> {
    /// Parameters as differentiable leaves.
    pub fn trainable(state: &'s ModelState, tape: &'t Tape) -> Self {
        Self {
            state,
            params: state.vars(tape),
            tape,
        }
    }

    /// Parameters as constants.
    pub fn frozen(state: &'s ModelState, tape: &'t Tape) -> Self {
        Self {
            state,
            params: state.constants(tape),
            tape,
        }
    }

    /// Parameters supplied by the caller, in layout order.
    pub fn with_params(
        state: &'s ModelState,
        tape: &'t Tape,
        params: Vec<Var<'t>>,
    ) -> Result<Self> {
        if params.len() != state.layout.len() {
            return contract(format!(
                "expected {} parameter tensors, got {}",
                state.layout.len(),
                params.len()
            ));
        }
        Ok(Self {
            state,
            params,
            tape,
        })
    }

    fn p(&self, i: usize) -> Var<'t> {
        self.params[i]
    }

    fn width(&self) -> usize {
        self.state.config.width
    }

    /// Sinusoidal features of `t`, then a two-layer MLP.
    pub fn time_embedding(&self, t: f64) -> Result<Var<'t>> {
        let d = self.width();
        let half = d / 2;
        let mut feats = Vec::with_capacity(d);
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            feats.push((t * TIME_SCALE * f).cos());
        }
        for k in 0..d - half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            feats.push((t * TIME_SCALE * f).sin());
        }
        let l = &self.state.layout;
        let x = self.tape.constant(Tensor::new(&[1, d], feats)?);
        let h = x
            .matmul(self.p(l.time_w1))?
            .add(self.p(l.time_b1))?
            .gelu()?;
        Ok(h.matmul(self.p(l.time_w2))?.add(self.p(l.time_b2))?)
    }

    fn linear(&self, x: Var<'t>, w: usize, b: usize) -> Result<Var<'t>> {
        Ok(x.matmul(self.p(w))?.add(self.p(b))?)
    }

    /// `rmsnorm(x)·(1 + scale) + shift`
    fn modulate(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
        Ok(x.rmsnorm(NORM_EPS)?
            .mul(scale.add_scalar(1.0)?)?
            .add(shift)?)
    }

    /// `(shift1, scale1, shift2, scale2)` from the conditioning vector.
    fn modulation(&self, sp: &StreamParams, cond: Var<'t>) -> Result<[Var<'t>; 4]> {
        let d = self.width();
        let m = self.linear(cond, sp.mod_w, sp.mod_b)?;
        Ok([
            m.slice(1, 0, d)?,
            m.slice(1, d, d)?,
            m.slice(1, 2 * d, d)?,
            m.slice(1, 3 * d, d)?,
        ])
    }

    fn check_width(&self, x: Var<'t>) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.width() {
            return contract(format!(
                "token matrix {s:?} does not have width {}",
                self.width()
            ));
        }
        Ok(())
    }

    /// Multi-head attention over `qkv` rows `[N, 3d]` with rotary positions.
    fn attention(&self, qkv: Var<'t>, rope: &RopeTable) -> Result<Var<'t>> {
        let d = self.width();
        let heads = self.state.config.heads;
        let hd = d / heads;
        if rope.tokens() != qkv.shape()[0] {
            return contract("rotary table length differs from the token count");
        }
        let q = rope.apply(qkv.slice(1, 0, d)?)?;
        let k = rope.apply(qkv.slice(1, d, d)?)?;
        let v = qkv.slice(1, 2 * d, d)?;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * hd, hd)?;
            let kh = k.slice(1, h * hd, hd)?;
            let vh = v.slice(1, h * hd, hd)?;
            let att = qh.matmul(kh.transpose()?)?.scale(inv)?.softmax()?;
            outs.push(att.matmul(vh)?);
        }
        Ok(self.tape.concat(&outs, 1)?)
    }

    /// Residual MLP half of a block.
    fn mlp(
        &self,
        sp: &StreamParams,
        x: Var<'t>,
        shift: Var<'t>,
        scale: Var<'t>,
    ) -> Result<Var<'t>> {
        let h = Self::modulate(x, shift, scale)?;
        let h = self.linear(h, sp.mlp1_w, sp.mlp1_b)?.gelu()?;
        Ok(x.add(self.linear(h, sp.mlp2_w, sp.mlp2_b)?)?)
    }

    /// Self-attention and MLP for one stream on its own.
    fn stream_block(
        &self,
        sp: &StreamParams,
        x: Var<'t>,
        cond: Var<'t>,
        rope: &RopeTable,
    ) -> Result<Var<'t>> {
        let [sh1, sc1, sh2, sc2] = self.modulation(sp, cond)?;
        let qkv = self.linear(Self::modulate(x, sh1, sc1)?, sp.qkv_w, sp.qkv_b)?;
        let a = self.linear(self.attention(qkv, rope)?, sp.out_w, sp.out_b)?;
        self.mlp(sp, x.add(a)?, sh2, sc2)
    }

    /// Single-stream block `i`: text and visual refined separately.
    pub fn single_block(
        &self,
        i: usize,
        s: Streams<'t>,
        cond: Var<'t>,
        text_rope: &RopeTable,
        visual_rope: &RopeTable,
    ) -> Result<Streams<'t>> {
        let bp = self.block(&self.state.layout.single, i)?;
        self.check_width(s.text)?;
        self.check_width(s.visual)?;
        Ok(Streams {
            text: self.stream_block(&bp.text, s.text, cond, text_rope)?,
            visual: self.stream_block(&bp.visual, s.visual, cond, visual_rope)?,
        })
    }

    /// Visual-only half of a single-stream block.
    fn single_visual(
        &self,
        i: usize,
        x: Var<'t>,
        cond: Var<'t>,
        rope: &RopeTable,
    ) -> Result<Var<'t>> {
        let bp = self.block(&self.state.layout.single, i)?;
        self.stream_block(&bp.visual, x, cond, rope)
    }

    fn block(
        &self,
        blocks: &[super::state::BlockParams],
        i: usize,
    ) -> Result<super::state::BlockParams> {
        match blocks.get(i) {
            Some(b) => Ok(*b),
            None => contract(format!("block index {i} out of range")),
        }
    }

    /// Dual-stream block `i`: joint attention over `[text; visual]` with
    /// stream-specific projections. `rope` covers the joint sequence.
    pub fn dual_block(
        &self,
        i: usize,
        s: Streams<'t>,
        cond: Var<'t>,
        rope: &RopeTable,
    ) -> Result<Streams<'t>> {
        let bp = self.block(&self.state.layout.dual, i)?;
        self.check_width(s.text)?;
        self.check_width(s.visual)?;
        let nt = s.text.shape()[0];
        let nv = s.visual.shape()[0];
        let [tsh1, tsc1, tsh2, tsc2] = self.modulation(&bp.text, cond)?;
        let [vsh1, vsc1, vsh2, vsc2] = self.modulation(&bp.visual, cond)?;
        let tq = self.linear(
            Self::modulate(s.text, tsh1, tsc1)?,
            bp.text.qkv_w,
            bp.text.qkv_b,
        )?;
        let vq = self.linear(
            Self::modulate(s.visual, vsh1, vsc1)?,
            bp.visual.qkv_w,
            bp.visual.qkv_b,
        )?;
        let joint = self.attention(self.tape.concat(&[tq, vq], 0)?, rope)?;
        let ta = self.linear(joint.slice(0, 0, nt)?, bp.text.out_w, bp.text.out_b)?;
        let va = self.linear(joint.slice(0, nt, nv)?, bp.visual.out_w, bp.visual.out_b)?;
        Ok(Streams {
            text: self.mlp(&bp.text, s.text.add(ta)?, tsh2, tsc2)?,
            visual: self.mlp(&bp.visual, s.visual.add(va)?, vsh2, vsc2)?,
        })
    }

    /// One gated dual-stream step: both streams go through the same block;
    /// the high-frequency result, restricted by `mask_col`, is added to the
    /// main visual stream scaled by the block's gate. Returns the main and
    /// high-frequency streams plus the probe leaf if requested.
    pub fn sea_forward(
        &self,
        i: usize,
        z: Streams<'t>,
        z_hf: Streams<'t>,
        cond: Var<'t>,
        rope: &RopeTable,
        mask_col: Var<'t>,
        probe: bool,
    ) -> Result<(Streams<'t>, Streams<'t>, Option<Var<'t>>)> {
        if z.visual.shape() != z_hf.visual.shape() || z.text.shape() != z_hf.text.shape() {
            return contract("main and high-frequency streams are segmented differently");
        }
        if mask_col.shape() != [z.visual.shape()[0], 1] {
            return contract("mask column does not match the visual token count");
        }
        let Some(&alpha) = self.state.layout.sea_alpha.get(i) else {
            return contract(format!("no gate for dual block {i}"));
        };
        let main = self.dual_block(i, z, cond, rope)?;
        let hf = self.dual_block(i, z_hf, cond, rope)?;
        let branch = if probe { hf.visual.detach() } else { hf.visual };
        let gated = branch.mul(mask_col)?.mul(self.p(alpha))?;
        let out = Streams {
            text: main.text,
            visual: main.visual.add(gated)?,
        };
        Ok((out, hf, probe.then_some(branch)))
    }

    /// Input embedding of a batch: latent tokens projected to width `d`
    /// plus per-segment embeddings.
    pub fn embed_visual(&self, batch: &TokenBatch) -> Result<Var<'t>> {
        let l = &self.state.layout;
        let d = self.width();
        let x = self.tape.constant(batch.visual.clone());
        let h = self.linear(x, l.patch_w, l.patch_b)?;
        let mut index = Vec::with_capacity(batch.visual.shape()[0] * d);
        for (s, &n) in batch.segment_lengths.iter().enumerate() {
            for _ in 0..n {
                index.extend((0..d).map(|c| s * d + c));
            }
        }
        let shape = h.shape();
        let seg = self.p(l.segment_embed).gather(index.into(), &shape)?;
        Ok(h.add(seg)?)
    }

    pub fn embed_text(&self, ids: &[usize]) -> Result<Var<'t>> {
        let cfg = &self.state.config;
        if ids.is_empty() || ids.len() > cfg.max_text_len {
            return contract(format!(
                "text of {} tokens outside 1..={}",
                ids.len(),
                cfg.max_text_len
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return contract(format!("token id {bad} outside the vocabulary"));
        }
        let d = cfg.width;
        let index: Vec<usize> = ids
            .iter()
            .flat_map(|&id| (0..d).map(move |c| id * d + c))
            .collect();
        Ok(self
            .p(self.state.layout.text_embed)
            .gather(index.into(), &[ids.len(), d])?)
    }

    /// Full forward pass: single-stream blocks on both token sequences,
    /// then gated dual-stream blocks, then the output head on the noisy
    /// segment.
    pub fn forward(
        &self,
        input: &ModelInput<'_>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.state.config;
        let (z, z_hf) = (input.z, input.z_hf);
        if !z.same_segmentation(z_hf) || z.text != z_hf.text {
            return contract("joint and high-frequency batches differ in layout");
        }
        let n = cfg.tokens_per_segment();
        if z.segment_lengths != [n; 3] || z.visual.shape()[1] != cfg.latent_dim() {
            return contract("batch does not match the model's token grid");
        }
        if (input.mask.grid_h, input.mask.grid_w) != z.grid || z.grid != (cfg.grid(), cfg.grid()) {
            return contract("down-sampled mask is not aligned with the token grid");
        }
        let cond = self.time_embedding(input.t)?.gelu()?;
        let (tpos, vpos) = token_positions(z.text.len(), z.grid, 3);
        let trope = RopeTable::new(&tpos, cfg.width, cfg.heads, cfg.rope_base);
        let vrope = RopeTable::new(&vpos, cfg.width, cfg.heads, cfg.rope_base);
        let jrope = trope.concat(&vrope);

        let mut main = Streams {
            text: self.embed_text(&z.text)?,
            visual: self.embed_visual(z)?,
        };
        let mut hf_visual = if cfg.use_sea {
            Some(self.embed_visual(z_hf)?)
        } else {
            None
        };
        for i in 0..cfg.single_blocks {
            main = self.single_block(i, main, cond, &trope, &vrope)?;
            // the text half only sees text, so the high-frequency copy of it
            // would be identical; only its visual half is recomputed
            if let Some(v) = hf_visual {
                hf_visual = Some(self.single_visual(i, v, cond, &vrope)?);
            }
        }

        let mut probes = Vec::new();
        if let Some(v) = hf_visual {
            let mut col = vec![0.0; 3 * n];
            for (j, &on) in input.mask.cells.iter().enumerate() {
                if on {
                    col[2 * n + j] = 1.0;
                }
            }
            let mask_col = self.tape.constant(Tensor::new(&[3 * n, 1], col)?);
            let mut hf = Streams {
                text: main.text,
                visual: v,
            };
            for i in 0..cfg.dual_blocks {
                let (m, h, probe) =
                    self.sea_forward(i, main, hf, cond, &jrope, mask_col, opts.probe_sea)?;
                main = m;
                hf = h;
                probes.extend(probe);
            }
        } else {
            for i in 0..cfg.dual_blocks {
                main = self.dual_block(i, main, cond, &jrope)?;
            }
        }

        let l = &self.state.layout;
        let d = cfg.width;
        let noisy = main.visual.slice(0, 2 * n, n)?;
        let m = self.linear(cond, l.head_mod_w, l.head_mod_b)?;
        let h = Self::modulate(noisy, m.slice(1, 0, d)?, m.slice(1, d, d)?)?;
        Ok(ForwardOutput {
            velocity: self.linear(h, l.head_w, l.head_b)?,
            sea_probes: probes,
        })
    }
}

impl<'t> VelocityField<'t> for Dit<'_, 't> {
    fn velocity(&self, input: &ModelInput<'_>, _slot: usize) -> Result<Var<'t>> {
        Ok(self.forward(input, ForwardOptions::default())?.velocity)
    }
}

/// Velocity of `state` on a private tape, without gradients.
pub fn predict_velocity(state: &ModelState, input: &ModelInput<'_>) -> Result<Tensor> {
    let tape = Tape::new();
    let v = Dit::frozen(state, &tape)
        .forward(input, ForwardOptions::default())?
        .velocity;
    let out = (*v.value()).clone();
    Ok(out)
}
