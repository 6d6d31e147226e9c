//! Model configuration, parameter layout and initialization.

use ndarr::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub single_blocks: usize,
    pub dual_blocks: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Adds the gated high-frequency branch to every dual-stream block.
    pub use_sea: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            width: 64,
            heads: 4,
            single_blocks: 2,
            dual_blocks: 2,
            mlp_ratio: 2,
            vocab_size: vocab::size(),
            max_text_len: 16,
            use_sea: true,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return contract(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return contract(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            ));
        }
        // rotary halves: one per spatial axis, each made of pairs
        if (self.width / self.heads) % 4 != 0 {
            return contract("head width must be a multiple of 4 for 2D rotary embeddings");
        }
        if self.channels == 0
            || self.vocab_size < 2
            || self.max_text_len == 0
            || self.mlp_ratio == 0
        {
            return contract("channels, vocab, text length and mlp ratio must be positive");
        }
        Ok(())
    }

    /// Side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Length of one space-to-depth latent token.
    pub fn latent_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `N(0, 1/fan_in)`
    Fan(usize),
    Normal(f64),
    Zero,
}

/// Indices of one stream's weights inside a block.
#[derive(Clone, Copy, Debug)]
pub struct StreamParams {
    pub mod_w: usize,
    pub mod_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub mlp1_w: usize,
    pub mlp1_b: usize,
    pub mlp2_w: usize,
    pub mlp2_b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub text: StreamParams,
    pub visual: StreamParams,
}

/// Where every named parameter lives in the flat parameter list.
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub segment_embed: usize,
    pub text_embed: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub single: Vec<BlockParams>,
    pub dual: Vec<BlockParams>,
    /// One gate per dual-stream block, present only with SEA.
    pub sea_alpha: Vec<usize>,
    pub head_mod_w: usize,
    pub head_mod_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let d = cfg.width;
        let p = cfg.latent_dim();
        let hidden = d * cfg.mlp_ratio;

        let patch_w = add("patch_embed.w".into(), vec![p, d], Init::Fan(p));
        let patch_b = add("patch_embed.b".into(), vec![1, d], Init::Zero);
        let segment_embed = add("segment_embed".into(), vec![3, d], Init::Normal(0.02));
        let text_embed = add(
            "text_embed".into(),
            vec![cfg.vocab_size, d],
            Init::Normal(0.5),
        );
        let time_w1 = add("time.w1".into(), vec![d, d], Init::Fan(d));
        let time_b1 = add("time.b1".into(), vec![1, d], Init::Zero);
        let time_w2 = add("time.w2".into(), vec![d, d], Init::Fan(d));
        let time_b2 = add("time.b2".into(), vec![1, d], Init::Zero);

        let mut stream = |prefix: String| StreamParams {
            mod_w: add(format!("{prefix}.mod.w"), vec![d, 4 * d], Init::Zero),
            mod_b: add(format!("{prefix}.mod.b"), vec![1, 4 * d], Init::Zero),
            qkv_w: add(format!("{prefix}.qkv.w"), vec![d, 3 * d], Init::Fan(d)),
            qkv_b: add(format!("{prefix}.qkv.b"), vec![1, 3 * d], Init::Zero),
            out_w: add(format!("{prefix}.out.w"), vec![d, d], Init::Zero),
            out_b: add(format!("{prefix}.out.b"), vec![1, d], Init::Zero),
            mlp1_w: add(format!("{prefix}.mlp1.w"), vec![d, hidden], Init::Fan(d)),
            mlp1_b: add(format!("{prefix}.mlp1.b"), vec![1, hidden], Init::Zero),
            mlp2_w: add(format!("{prefix}.mlp2.w"), vec![hidden, d], Init::Zero),
            mlp2_b: add(format!("{prefix}.mlp2.b"), vec![1, d], Init::Zero),
        };
        let single = (0..cfg.single_blocks)
            .map(|i| BlockParams {
                text: stream(format!("single.{i}.text")),
                visual: stream(format!("single.{i}.visual")),
            })
            .collect();
        let dual = (0..cfg.dual_blocks)
            .map(|i| BlockParams {
                text: stream(format!("dual.{i}.text")),
                visual: stream(format!("dual.{i}.visual")),
            })
            .collect();
        let sea_alpha = if cfg.use_sea {
            (0..cfg.dual_blocks)
                .map(|i| add(format!("dual.{i}.sea_alpha"), vec![1], Init::Zero))
                .collect()
        } else {
            Vec::new()
        };
        let head_mod_w = add("head.mod.w".into(), vec![d, 2 * d], Init::Zero);
        let head_mod_b = add("head.mod.b".into(), vec![1, 2 * d], Init::Zero);
        let head_w = add("head.w".into(), vec![d, p], Init::Fan(d));
        let head_b = add("head.b".into(), vec![1, p], Init::Zero);

        Ok(Self {
            patch_w,
            patch_b,
            segment_embed,
            text_embed,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            single,
            dual,
            sea_alpha,
            head_mod_w,
            head_mod_b,
            head_w,
            head_b,
            specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.specs[i].0
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.specs[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.0 == name)
    }
}

/// Rounds to the nearest `f32`; persisted state is single precision.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// All learnable parameters, stored in layout order.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Tensor>,
}

impl ModelState {
    /// Training initialization: block output projections and modulation
    /// weights start at zero so every block is a residual identity, and each
    /// SEA gate starts at zero so the model starts as the base model.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, false)
    }

    /// Every parameter random, including gates; used to exercise all paths
    /// in gradient checks.
    pub fn init_dense(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, true)
    }

    fn init_with(config: &ModelConfig, seed: u64, dense: bool) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|(_, shape, init)| {
                let n: usize = shape.iter().product();
                let std = match (init, dense) {
                    (Init::Fan(f), _) => 1.0 / (*f as f64).sqrt(),
                    (Init::Normal(s), _) => *s,
                    (Init::Zero, false) => 0.0,
                    (Init::Zero, true) => 0.3,
                };
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        round_f32(z * std)
                    })
                    .collect();
                Tensor::new(shape, data)
            })
            .collect::<ndarr::Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(i) = self.layout.index_of(name) else {
            return contract(format!("no parameter named {name}"));
        };
        if value.shape() != self.layout.shape(i) {
            return contract(format!("shape mismatch for {name}"));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Sets every SEA gate to `value`.
    pub fn set_sea_alpha(&mut self, value: f64) -> Result<()> {
        for &i in &self.layout.sea_alpha {
            self.params[i] = Tensor::scalar(value);
        }
        Ok(())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn vars<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect()
    }
}
