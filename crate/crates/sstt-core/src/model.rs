//! The stack spatial-temporal transformer: linear embedding with per-joint
//! identity vectors, a class token carried as a virtual joint in every frame,
//! sinusoidal encoding over the frame axis, N Post-Norm blocks with a
//! whole-block bypass (B2T), and a class-token readout head.
//!
//! Block wiring:
//!   h1    = LN1(x + spatial_mhsa(x))
//!   h2    = LN2(h1 + temporal_mhsa(h1))
//!   x_out = LN3(ffn_core(h2) + h2 + x)
//! where the trailing `+ x` is the bypass that skips all three sub-layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::derive_rng;
use crate::tensor::serialize::TensorRecord;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

fn default_c_emb() -> usize {
    64
}
fn default_heads() -> usize {
    8
}
fn default_blocks() -> usize {
    10
}
fn default_ffn_ratio() -> usize {
    4
}
fn default_rpe_clip() -> usize {
    64
}
fn default_scale_attention() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub t_len: usize,
    pub joints: usize,
    pub in_channels: usize,
    #[serde(default = "default_c_emb")]
    pub c_emb: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_rpe_clip")]
    pub rpe_clip: usize,
    #[serde(default = "default_scale_attention")]
    pub scale_attention: bool,
    #[serde(default)]
    pub dropout: f32,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.t_len == 0 || self.joints == 0 || self.in_channels == 0 {
            return fail(format!(
                "model: t_len/joints/in_channels must be positive, got {}/{}/{}",
                self.t_len, self.joints, self.in_channels
            ));
        }
        if self.heads == 0 || self.c_emb % self.heads != 0 {
            return fail(format!("model.heads: {} must divide model.c_emb {}", self.heads, self.c_emb));
        }
        if self.c_emb % 2 != 0 {
            return fail(format!("model.c_emb: {} must be even for the sinusoidal encoding", self.c_emb));
        }
        if self.blocks == 0 {
            return fail("model.blocks: must be >= 1".into());
        }
        if self.rpe_clip == 0 {
            return fail("model.rpe_clip: must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("model.num_classes: {} must be >= 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout: {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.c_emb / self.heads
    }
}

pub struct Linear<E: Scalar> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Scalar> Linear<E> {
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.matmul(&self.w).add(&self.b)
    }
}

pub struct AttentionParams<E: Scalar> {
    pub w_q: Linear<E>,
    pub w_k: Linear<E>,
    pub w_v: Linear<E>,
    pub w_o: Linear<E>,
    /// learned per-head relative-offset bias [H, 2K+1]; temporal only
    pub rpe_bias: Option<Tensor<E>>,
}

pub struct LayerNormParams<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Scalar> LayerNormParams<E> {
    fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.layer_norm(&self.gamma, &self.beta, E::from_f64c(LN_EPS))
    }
}

pub struct BlockParams<E: Scalar> {
    pub spatial: AttentionParams<E>,
    pub temporal: AttentionParams<E>,
    pub ffn_w1: Linear<E>,
    pub ffn_w2: Linear<E>,
    pub ln1: LayerNormParams<E>,
    pub ln2: LayerNormParams<E>,
    pub ln3: LayerNormParams<E>,
}

pub struct ModelParams<E: Scalar> {
    pub embed: Linear<E>,
    pub class_token: Tensor<E>,
    /// per-joint identity embedding, row V is the class token's
    pub joint_embed: Tensor<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub head: Linear<E>,
}

pub struct NamedParam<E: Scalar> {
    pub name: String,
    pub tensor: Tensor<E>,
    /// decoupled weight decay applies only to weight matrices
    pub decay: bool,
}

fn xavier_uniform<E: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| E::from_f64c(rng.gen_range(-bound..bound))).collect()
}

fn normal_002<E: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<E> {
    // Box-Muller; two uniforms per draw keeps the stream layout simple
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            E::from_f64c(0.02 * z)
        })
        .collect()
}

fn init_linear<E: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<E> {
    Linear {
        w: Tensor::param(&[fan_in, fan_out], xavier_uniform(rng, fan_in, fan_out)),
        b: Tensor::param(&[fan_out], vec![E::zero(); fan_out]),
    }
}

fn init_attention<E: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig, with_rpe: bool) -> AttentionParams<E> {
    let c = cfg.c_emb;
    AttentionParams {
        w_q: init_linear(rng, c, c),
        w_k: init_linear(rng, c, c),
        w_v: init_linear(rng, c, c),
        w_o: init_linear(rng, c, c),
        rpe_bias: with_rpe
            .then(|| Tensor::param(&[cfg.heads, 2 * cfg.rpe_clip + 1], vec![E::zero(); cfg.heads * (2 * cfg.rpe_clip + 1)])),
    }
}

fn init_layer_norm<E: Scalar>(c: usize) -> LayerNormParams<E> {
    LayerNormParams {
        gamma: Tensor::param(&[c], vec![E::one(); c]),
        beta: Tensor::param(&[c], vec![E::zero(); c]),
    }
}

pub fn init_params<E: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<E> {
    let mut rng = derive_rng(seed, "init", &[]);
    let c = cfg.c_emb;
    let embed = init_linear(&mut rng, cfg.in_channels, c);
    let class_token = Tensor::param(&[c], normal_002(&mut rng, c));
    let joint_embed = Tensor::param(&[cfg.joints + 1, c], normal_002(&mut rng, (cfg.joints + 1) * c));
    let blocks = (0..cfg.blocks)
        .map(|_| BlockParams {
            spatial: init_attention(&mut rng, cfg, false),
            temporal: init_attention(&mut rng, cfg, true),
            ffn_w1: init_linear(&mut rng, c, cfg.ffn_ratio * c),
            ffn_w2: init_linear(&mut rng, cfg.ffn_ratio * c, c),
            ln1: init_layer_norm(c),
            ln2: init_layer_norm(c),
            ln3: init_layer_norm(c),
        })
        .collect();
    let head = init_linear(&mut rng, c, cfg.num_classes);
    ModelParams { embed, class_token, joint_embed, blocks, head }
}

impl<E: Scalar> ModelParams<E> {
    /// Deterministic parameter order; the checkpoint codec and the optimizer
    /// both iterate this list.
    pub fn named(&self) -> Vec<NamedParam<E>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor<E>, decay: bool| {
            out.push(NamedParam { name, tensor: tensor.clone(), decay });
        };
        push("embed.w".into(), &self.embed.w, true);
        push("embed.b".into(), &self.embed.b, false);
        push("class_token".into(), &self.class_token, false);
        push("joint_embed".into(), &self.joint_embed, false);
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, attn) in [("spatial", &b.spatial), ("temporal", &b.temporal)] {
                for (w, lin) in [("w_q", &attn.w_q), ("w_k", &attn.w_k), ("w_v", &attn.w_v), ("w_o", &attn.w_o)] {
                    push(format!("blocks.{i}.{tag}.{w}.w"), &lin.w, true);
                    push(format!("blocks.{i}.{tag}.{w}.b"), &lin.b, false);
                }
                if let Some(rpe) = &attn.rpe_bias {
                    push(format!("blocks.{i}.{tag}.rpe_bias"), rpe, false);
                }
            }
            push(format!("blocks.{i}.ffn.w1.w"), &b.ffn_w1.w, true);
            push(format!("blocks.{i}.ffn.w1.b"), &b.ffn_w1.b, false);
            push(format!("blocks.{i}.ffn.w2.w"), &b.ffn_w2.w, true);
            push(format!("blocks.{i}.ffn.w2.b"), &b.ffn_w2.b, false);
            for (tag, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2), ("ln3", &b.ln3)] {
                push(format!("blocks.{i}.{tag}.gamma"), &ln.gamma, false);
                push(format!("blocks.{i}.{tag}.beta"), &ln.beta, false);
            }
        }
        push("head.w".into(), &self.head.w, true);
        push("head.b".into(), &self.head.b, false);
        out
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.named()
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                shape: p.tensor.shape(),
                data: p.tensor.data().iter().map(|v| v.to_f32c()).collect(),
            })
            .collect()
    }

    /// Load values from records; every named parameter must be present with
    /// the exact shape the config implies.
    pub fn load_records(&self, records: &[TensorRecord]) -> Result<(), Error> {
        let by_name: std::collections::HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in self.named() {
            let rec = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if rec.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?} does not match config shape {:?}",
                    p.name,
                    rec.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data(rec.data.iter().map(|&v| E::from_f32c(v)).collect());
        }
        Ok(())
    }
}

pub struct Model<E: Scalar> {
    pub cfg: ModelConfig,
    pub params: ModelParams<E>,
}

impl<E: Scalar> Model<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let params = init_params(&cfg, seed);
        Model { cfg, params }
    }

    /// Linear channel embedding applied identically to every (t, v), plus the
    /// per-joint identity embedding.
    pub fn embed(&self, frames: &Tensor<E>) -> Tensor<E> {
        let s = frames.shape();
        assert_eq!(s.len(), 4, "embed: expected [B,T,V,C_in], got {s:?}");
        let (b, t, v, c_in) = (s[0], s[1], s[2], s[3]);
        assert_eq!(v, self.cfg.joints, "embed: {v} joints vs config {}", self.cfg.joints);
        assert_eq!(c_in, self.cfg.in_channels, "embed: {c_in} channels vs config {}", self.cfg.in_channels);
        let flat = frames.reshape(&[b * t * v, c_in]);
        let x = self.params.embed.apply(&flat).reshape(&[b, t, v, self.cfg.c_emb]);
        let joint_id = self.params.joint_embed.narrow(0, 0, v);
        x.add(&joint_id)
    }

    /// Prepend the class token as virtual joint 0 of every frame.
    pub fn attach_class_token(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        let (b, t, _v, c) = (s[0], s[1], s[2], s[3]);
        let token = self
            .params
            .class_token
            .add(&self.params.joint_embed.narrow(0, self.cfg.joints, 1).reshape(&[c]));
        let field = token.reshape(&[1, 1, 1, c]).broadcast_to(&[b, t, 1, c]);
        field.concat(x, 2)
    }

    /// Standard sinusoidal code over the frame index, identical for every
    /// joint of a frame.
    pub fn add_positional_encoding(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        let (t, c) = (s[1], s[3]);
        assert_eq!(c % 2, 0, "positional encoding: C={c} must be even");
        let mut pe = Vec::with_capacity(t * c);
        for ti in 0..t {
            for i in 0..c / 2 {
                let rate = (ti as f64) / 10000f64.powf(2.0 * i as f64 / c as f64);
                pe.push(E::from_f64c(rate.sin()));
                pe.push(E::from_f64c(rate.cos()));
            }
        }
        let pe = Tensor::from_vec(&[t, 1, c], pe);
        x.add(&pe)
    }

    /// Shared q/k/v/softmax/o pipeline over `x3 [N, L, C]` with optional
    /// Toeplitz logit bias and optional additive key mask.
    /// Row-stochastic attention weights `[N*H, L, L]` for one attention
    /// layer; split out of [`Self::mhsa`] so tests can probe the rows.
    pub fn attention_weights(
        &self,
        x3: &Tensor<E>,
        p: &AttentionParams<E>,
        mask: Option<&[bool]>,
    ) -> Tensor<E> {
        let s = x3.shape();
        let (n, l) = (s[0], s[1]);
        let h = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let split = |t: &Tensor<E>| t.reshape(&[n, l, h, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * h, l, dh]);
        let mut q = split(&p.w_q.apply(x3));
        let k = split(&p.w_k.apply(x3));
        if self.cfg.scale_attention {
            q = q.scale(E::from_f64c(1.0 / (dh as f64).sqrt()));
        }
        let mut logits = q.matmul_nt(&k);
        if let Some(rpe) = &p.rpe_bias {
            let bias = rpe.toeplitz(l);
            logits = logits.reshape(&[n, h, l, l]).add(&bias).reshape(&[n * h, l, l]);
        }
        if let Some(valid) = mask {
            assert_eq!(valid.len(), l, "mask length {} vs attention axis {l}", valid.len());
            let m: Vec<E> = valid.iter().map(|&ok| if ok { E::zero() } else { E::from_f64c(MASK_NEG) }).collect();
            logits = logits.add(&Tensor::from_vec(&[l], m));
        }
        logits.softmax(2)
    }

    fn mhsa(
        &self,
        x3: &Tensor<E>,
        p: &AttentionParams<E>,
        len: usize,
        mask: Option<&[bool]>,
    ) -> Tensor<E> {
        let s = x3.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        debug_assert_eq!(l, len);
        let h = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let split = |t: &Tensor<E>| t.reshape(&[n, l, h, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * h, l, dh]);
        let v = split(&p.w_v.apply(x3));
        let attn = self.attention_weights(x3, p, mask);
        let out = attn.matmul(&v);
        let merged = out.reshape(&[n, h, l, dh]).permute(&[0, 2, 1, 3]).reshape(&[n, l, c]);
        p.w_o.apply(&merged)
    }

    /// Flatten `[B,T,V,C]` into the per-frame view `[B*T, V, C]` the spatial
    /// attention runs over.
    pub fn spatial_view(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        x.reshape(&[s[0] * s[1], s[2], s[3]])
    }

    /// Flatten `[B,T,V,C]` into the per-joint view `[B*V, T, C]` the
    /// temporal attention runs over.
    pub fn temporal_view(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        x.permute(&[0, 2, 1, 3]).reshape(&[s[0] * s[2], s[1], s[3]])
    }

    /// Attention across joints within each frame.
    pub fn spatial_mhsa(&self, x: &Tensor<E>, block: &BlockParams<E>) -> Tensor<E> {
        let s = x.shape();
        let (b, t, v, c) = (s[0], s[1], s[2], s[3]);
        let x3 = x.reshape(&[b * t, v, c]);
        self.mhsa(&x3, &block.spatial, v, None).reshape(&[b, t, v, c])
    }

    /// Attention across frames per joint, with the relative-position logit
    /// bias. `mask` marks valid frames; masked frames get no attention mass.
    pub fn temporal_mhsa(&self, x: &Tensor<E>, block: &BlockParams<E>, mask: Option<&[bool]>) -> Tensor<E> {
        let s = x.shape();
        let (b, t, v, c) = (s[0], s[1], s[2], s[3]);
        let xt = x.permute(&[0, 2, 1, 3]).reshape(&[b * v, t, c]);
        let out = self.mhsa(&xt, &block.temporal, t, mask);
        out.reshape(&[b, v, t, c]).permute(&[0, 2, 1, 3])
    }

    fn ffn_core(&self, x: &Tensor<E>, block: &BlockParams<E>) -> Tensor<E> {
        block.ffn_w2.apply(&block.ffn_w1.apply(x).gelu())
    }

    /// Two-layer FFN with GELU; the residual addition is part of the op.
    pub fn ffn(&self, x: &Tensor<E>, block: &BlockParams<E>) -> Tensor<E> {
        self.ffn_core(x, block).add(x)
    }

    pub fn block_forward(&self, x: &Tensor<E>, block: &BlockParams<E>, mask: Option<&[bool]>) -> Tensor<E> {
        let h1 = block.ln1.apply(&x.add(&self.spatial_mhsa(x, block)));
        let h2 = block.ln2.apply(&h1.add(&self.temporal_mhsa(&h1, block, mask)));
        block.ln3.apply(&self.ffn_core(&h2, block).add(&h2).add(x))
    }

    pub fn forward(&self, frames: &Tensor<E>) -> Tensor<E> {
        self.forward_with(frames, None, None)
    }

    /// Full pipeline. `mask` restricts temporal attention to valid frames;
    /// `dropout_rng` enables dropout (training mode only).
    pub fn forward_with(
        &self,
        frames: &Tensor<E>,
        mask: Option<&[bool]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<E> {
        let s = frames.shape();
        let (b, t) = (s[0], s[1]);
        assert_eq!(t, self.cfg.t_len, "forward: {t} frames vs config t_len {}", self.cfg.t_len);
        let mut x = self.add_positional_encoding(&self.attach_class_token(&self.embed(frames)));
        for block in self.blocks() {
            x = self.block_forward(&x, block, mask);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = self.dropout(&x, rng);
            }
        }
        let cls = x.narrow(2, 0, 1).reshape(&[b, t, self.cfg.c_emb]);
        let pooled = match mask {
            None => cls.mean_axis(1),
            Some(valid) => {
                // mean over valid frames only
                let n_valid = valid.iter().filter(|&&v| v).count().max(1);
                let w: Vec<E> = valid
                    .iter()
                    .map(|&ok| if ok { E::one() / E::from_f64c(n_valid as f64) } else { E::zero() })
                    .collect();
                let w = Tensor::from_vec(&[t, 1], w);
                cls.mul(&w.reshape(&[1, t, 1])).reshape(&[b, t, self.cfg.c_emb]).sum_frames(b, t, self.cfg.c_emb)
            }
        };
        self.params.head.apply(&pooled)
    }

    fn dropout(&self, x: &Tensor<E>, rng: &mut ChaCha8Rng) -> Tensor<E> {
        let rate = self.cfg.dropout as f64;
        if rate <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - rate;
        let scale = E::from_f64c(1.0 / keep);
        let mask: Vec<E> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { E::zero() })
            .collect();
        x.mul(&Tensor::from_vec(&x.shape(), mask))
    }

    fn blocks(&self) -> &[BlockParams<E>] {
        &self.params.blocks
    }
}

trait SumFrames<E: Scalar> {
    fn sum_frames(&self, b: usize, t: usize, c: usize) -> Tensor<E>;
}

impl<E: Scalar> SumFrames<E> for Tensor<E> {
    fn sum_frames(&self, b: usize, t: usize, c: usize) -> Tensor<E> {
        // sum over the frame axis = mean * t
        self.reshape(&[b, t, c]).mean_axis(1).scale(E::from_f64c(t as f64))
    }
}
