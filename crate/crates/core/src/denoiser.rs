//! Tiny bidirectional-attention conditional denoiser.
//!
//! Every frame of a window becomes one token. A token carries its latent, a
//! learned position, and an embedding of its own noise level (clean
//! condition frames carry `t = 0`). Layout tokens enter additively through a
//! zero-initialized projector. Per-frame ego actions drive AdaLN-style
//! shift/scale/gate modulation of both sublayers of every block, also through
//! zero-initialized projectors, so an untrained model ignores its controls.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{sinusoidal_embedding, sinusoidal_embedding_with_period, RngState, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub layout_dim: usize,
    /// Sinusoidal channels per action component.
    pub action_embed_dim: usize,
    pub time_embed_dim: usize,
    pub ffn_mult: usize,
    /// Multipliers applied to (Δx, Δy, Δyaw) before embedding.
    pub action_scale: [f32; 3],
    pub action_max_period: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_frames: 64,
            layout_dim: 4,
            action_embed_dim: 16,
            time_embed_dim: 32,
            ffn_mult: 4,
            action_scale: [10.0, 10.0, 30.0],
            action_max_period: 100.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_dim,
            self.d_model,
            self.layers,
            self.heads,
            self.max_frames,
            self.layout_dim,
            self.action_embed_dim,
            self.time_embed_dim,
            self.ffn_mult,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::config("denoiser dimensions must all be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.action_embed_dim % 2 != 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("embedding dims must be even"));
        }
        Ok(())
    }

    /// Width of the modulation produced per frame and layer: shift, scale and
    /// gate for the attention and feed-forward sublayers.
    pub fn modulation_width(&self) -> usize {
        6 * self.d_model
    }

    fn action_features(&self) -> usize {
        3 * self.action_embed_dim
    }

    /// Names, shapes and initializers of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (dz, d, ff) = (self.latent_dim, self.d_model, self.d_model * self.ffn_mult);
        let mut specs = vec![
            ParamSpec::new("frame_in.w", [dz, d], Init::Fan(dz)),
            ParamSpec::new("frame_in.b", [1, d], Init::Zero),
            ParamSpec::new("pos", [self.max_frames, d], Init::Positional),
            ParamSpec::new("time.w", [self.time_embed_dim, d], Init::Fan(self.time_embed_dim)),
            ParamSpec::new("time.b", [1, d], Init::Zero),
            ParamSpec::new("layout.adapter.w", [self.layout_dim, d], Init::Fan(self.layout_dim)),
            ParamSpec::new("layout.adapter.b", [1, d], Init::Zero),
            ParamSpec::new("layout.zero.w", [d, d], Init::Zero),
            ParamSpec::new("layout.zero.b", [1, d], Init::Zero),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                ParamSpec::new(p("action_zero.w"), [self.action_features(), self.modulation_width()], Init::Zero),
                ParamSpec::new(p("action_zero.b"), [1, self.modulation_width()], Init::Zero),
                ParamSpec::new(p("attn.q"), [d, d], Init::Fan(d)),
                ParamSpec::new(p("attn.k"), [d, d], Init::Fan(d)),
                ParamSpec::new(p("attn.v"), [d, d], Init::Fan(d)),
                ParamSpec::new(p("attn.o"), [d, d], Init::Fan(d)),
                ParamSpec::new(p("ffn.w1"), [d, ff], Init::Fan(d)),
                ParamSpec::new(p("ffn.b1"), [1, ff], Init::Zero),
                ParamSpec::new(p("ffn.w2"), [ff, d], Init::Fan(ff)),
                ParamSpec::new(p("ffn.b2"), [1, d], Init::Zero),
            ]);
        }
        specs.extend([
            ParamSpec::new("frame_out.w", [d, dz], Init::Fan(d)),
            ParamSpec::new("frame_out.b", [1, dz], Init::Zero),
        ]);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Normal with std `1/sqrt(fan_in)`.
    Fan(usize),
    /// Fixed sinusoidal table at half amplitude.
    Positional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: [usize; 2], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

// Fixed slots of the non-layer parameters.
const FRAME_IN_W: usize = 0;
const FRAME_IN_B: usize = 1;
const POS: usize = 2;
const TIME_W: usize = 3;
const TIME_B: usize = 4;
const LAYOUT_ADAPTER_W: usize = 5;
const LAYOUT_ADAPTER_B: usize = 6;
const LAYOUT_ZERO_W: usize = 7;
const LAYOUT_ZERO_B: usize = 8;
const LAYER_BASE: usize = 9;
const PER_LAYER: usize = 10;

/// Per-frame noise times; condition frames carry exactly `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameNoiseLevels(pub Vec<f32>);

impl FrameNoiseLevels {
    /// `condition` clean frames followed by `chunk` frames sharing level `t`.
    pub fn window(condition: usize, chunk: usize, t: f32) -> Self {
        let mut v = vec![0.0; condition];
        v.extend(std::iter::repeat_n(t, chunk));
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Frame-aligned conditioning: layout tokens `[F, layout_dim]` (ego-frame
/// landmark coordinates) and residual actions `[F, 3]` = (Δx, Δy, Δyaw).
#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    pub layout: Tensor,
    pub actions: Tensor,
}

impl Controls {
    pub fn new(layout: Tensor, actions: Tensor) -> Result<Self> {
        ensure!(
            layout.rows() == actions.rows() && actions.cols() == 3,
            "controls misaligned: layout {:?}, actions {:?}",
            layout.shape(),
            actions.shape()
        );
        Ok(Self { layout, actions })
    }

    pub fn frames(&self) -> usize {
        self.layout.rows()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            layout: self.layout.slice_rows(start, len)?,
            actions: self.actions.slice_rows(start, len)?,
        })
    }

    pub fn concat(parts: &[&Controls]) -> Result<Self> {
        let layouts: Vec<&Tensor> = parts.iter().map(|c| &c.layout).collect();
        let actions: Vec<&Tensor> = parts.iter().map(|c| &c.actions).collect();
        Self::new(Tensor::concat_rows(&layouts)?, Tensor::concat_rows(&actions)?)
    }

    /// The unconditional variant: zero layout tokens and zero actions.
    pub fn dropped(&self) -> Self {
        Self {
            layout: Tensor::zeros(self.layout.shape().to_vec()),
            actions: Tensor::zeros(self.actions.shape().to_vec()),
        }
    }
}

/// All learnable weights of one denoiser instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub tensors: Vec<Tensor>,
}

impl DenoiserParams {
    pub fn init(config: &DenoiserConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for spec in config.param_specs() {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(spec.shape.clone()),
                Init::Fan(fan) => rng.normal_tensor(spec.shape.clone(), 1.0 / (fan as f64).sqrt()),
                Init::Positional => {
                    let idx: Vec<f32> = (0..spec.shape[0]).map(|i| i as f32).collect();
                    sinusoidal_embedding(&idx, spec.shape[1])?.scale(0.5)
                }
            };
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds params from stored tensors, checking them against the config.
    pub fn from_tensors(config: &DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        ensure!(
            specs.len() == tensors.len(),
            "expected {} parameter tensors, got {}",
            specs.len(),
            tensors.len()
        );
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Shape {
                    op: "DenoiserParams::from_tensors",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|s| s.name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Content hash used to tell whether cached rollouts are stale.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }

    /// Places every tensor on `tape` (as trainable leaves when `trainable`).
    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>, trainable: bool) -> BoundParams {
        let cast: Vec<Tensor<F>> = self.tensors.iter().map(|t| t.cast::<F>()).collect();
        bind_tensors(&self.config, &cast, tape, trainable)
    }

    /// Velocity prediction without gradients.
    pub fn predict(&self, z: &Tensor, t: &FrameNoiseLevels, controls: &Controls) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z);
        let out = bound.forward(&mut tape, zv, t, controls)?;
        Ok(tape.value(out))
    }
}

/// Binds arbitrary-precision copies of the parameters; used for 64-bit replay.
pub fn bind_tensors<F: Scalar>(
    config: &DenoiserConfig,
    tensors: &[Tensor<F>],
    tape: &mut Tape<F>,
    trainable: bool,
) -> BoundParams {
    BoundParams {
        config: config.clone(),
        vars: tensors.iter().map(|t| tape.leaf(t, trainable)).collect(),
    }
}

/// Parameters living on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: DenoiserConfig,
    pub vars: Vec<Var>,
}

struct LayerSlots {
    action_w: Var,
    action_b: Var,
    q: Var,
    k: Var,
    v: Var,
    o: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn cast_tensor<F: Scalar>(t: &Tensor) -> Tensor<F> {
    t.cast::<F>()
}

impl BoundParams {
    fn layer(&self, l: usize) -> LayerSlots {
        let b = LAYER_BASE + l * PER_LAYER;
        let v = &self.vars;
        LayerSlots {
            action_w: v[b],
            action_b: v[b + 1],
            q: v[b + 2],
            k: v[b + 3],
            v: v[b + 4],
            o: v[b + 5],
            w1: v[b + 6],
            b1: v[b + 7],
            w2: v[b + 8],
            b2: v[b + 9],
        }
    }

    fn out_slots(&self) -> (Var, Var) {
        let b = LAYER_BASE + self.config.layers * PER_LAYER;
        (self.vars[b], self.vars[b + 1])
    }

    /// `hidden + f_zero(adapter(layout))`.
    pub fn inject_layout<F: Scalar>(&self, tape: &mut Tape<F>, hidden: Var, layout: &Tensor) -> Result<Var> {
        let frames = tape.shape(hidden)[0];
        ensure!(
            layout.rows() == frames && layout.cols() == self.config.layout_dim,
            "layout {:?} does not match {frames} frames x {}",
            layout.shape(),
            self.config.layout_dim
        );
        let lv = tape.constant(&cast_tensor::<F>(layout));
        let a = tape.matmul(lv, self.vars[LAYOUT_ADAPTER_W])?;
        let a = tape.add_row(a, self.vars[LAYOUT_ADAPTER_B])?;
        let a = tape.silu(a)?;
        let p = tape.matmul(a, self.vars[LAYOUT_ZERO_W])?;
        let p = tape.add_row(p, self.vars[LAYOUT_ZERO_B])?;
        tape.add(hidden, p)
    }

    /// Sinusoidal features of the scaled per-frame actions, `[F, 3·e]`.
    pub fn action_features(&self, actions: &Tensor) -> Result<Tensor> {
        ensure!(actions.cols() == 3, "actions must be [F, 3], got {:?}", actions.shape());
        let c = &self.config;
        let mut rows = Vec::with_capacity(actions.rows());
        for f in 0..actions.rows() {
            let a = actions.row(f);
            let mut row = Vec::with_capacity(3 * c.action_embed_dim);
            for ch in 0..3 {
                let e = sinusoidal_embedding_with_period(&[a[ch] * c.action_scale[ch]], c.action_embed_dim, c.action_max_period)?;
                row.extend_from_slice(e.data());
            }
            rows.push(row);
        }
        Tensor::from_rows(&rows)
    }

    /// Per-frame modulation `[F, 6d]` of layer `l` from action features.
    pub fn action_modulation<F: Scalar>(&self, tape: &mut Tape<F>, features: Var, l: usize) -> Result<Var> {
        let s = self.layer(l);
        let m = tape.matmul(features, s.action_w)?;
        tape.add_row(m, s.action_b)
    }

    /// One modulated sublayer: `h + gate ⊙ sublayer(LN(h) ⊙ (1 + scale) + shift)`.
    pub fn adaln_sublayer<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        hidden: Var,
        modulation: Var,
        group: usize,
        sublayer: impl FnOnce(&mut Tape<F>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let base = group * 3 * d;
        let shift = tape.slice_cols(modulation, base, d)?;
        let scale = tape.slice_cols(modulation, base + d, d)?;
        let gate = tape.slice_cols(modulation, base + 2 * d, d)?;
        let x = self.modulated_input(tape, hidden, shift, scale)?;
        let y = sublayer(tape, x)?;
        let gated = tape.mul(gate, y)?;
        tape.add(hidden, gated)
    }

    /// `LN(h) ⊙ (1 + scale) + shift`.
    pub fn modulated_input<F: Scalar>(&self, tape: &mut Tape<F>, hidden: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = tape.layer_norm(hidden)?;
        let one_plus = tape.offset(scale, F::one())?;
        let x = tape.mul(n, one_plus)?;
        tape.add(x, shift)
    }

    pub fn attention<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, l: usize) -> Result<Var> {
        let s = self.layer(l);
        let (d, h) = (self.config.d_model, self.config.heads);
        let dh = d / h;
        let q = tape.matmul(x, s.q)?;
        let k = tape.matmul(x, s.k)?;
        let v = tape.matmul(x, s.v)?;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = tape.slice_cols(q, i * dh, dh)?;
            let kh = tape.slice_cols(k, i * dh, dh)?;
            let vh = tape.slice_cols(v, i * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.softmax(scores)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.matmul(cat, s.o)
    }

    pub fn feed_forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, l: usize) -> Result<Var> {
        let s = self.layer(l);
        let h = tape.matmul(x, s.w1)?;
        let h = tape.add_row(h, s.b1)?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, s.w2)?;
        tape.add_row(h, s.b2)
    }

    /// v-prediction for every frame of the window `z: [F, latent_dim]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, z: Var, t: &FrameNoiseLevels, controls: &Controls) -> Result<Var> {
        let c = &self.config;
        let frames = tape.shape(z)[0];
        ensure!(
            frames <= c.max_frames,
            "window of {frames} frames exceeds max_frames {}",
            c.max_frames
        );
        ensure!(
            tape.shape(z)[1] == c.latent_dim,
            "latent width {} != {}",
            tape.shape(z)[1],
            c.latent_dim
        );
        ensure!(t.len() == frames, "{} noise levels for {frames} frames", t.len());
        ensure!(controls.frames() == frames, "{} control frames for {frames} frames", controls.frames());
        ensure!(
            t.0.iter().all(|v| (0.0..=1.0).contains(v)),
            "noise levels must lie in [0, 1]"
        );

        let h = tape.matmul(z, self.vars[FRAME_IN_W])?;
        let h = tape.add_row(h, self.vars[FRAME_IN_B])?;
        let pos = tape.slice_rows(self.vars[POS], 0, frames)?;
        let h = tape.add(h, pos)?;
        let scaled_t: Vec<f32> = t.0.iter().map(|v| v * 1000.0).collect();
        let te = tape.constant(&cast_tensor::<F>(&sinusoidal_embedding(&scaled_t, c.time_embed_dim)?));
        let te = tape.matmul(te, self.vars[TIME_W])?;
        let te = tape.add_row(te, self.vars[TIME_B])?;
        let h = tape.add(h, te)?;
        let mut h = self.inject_layout(tape, h, &controls.layout)?;

        let feats = tape.constant(&cast_tensor::<F>(&self.action_features(&controls.actions)?));
        for l in 0..c.layers {
            let m = self.action_modulation(tape, feats, l)?;
            h = self.adaln_sublayer(tape, h, m, 0, |tp, x| self.attention(tp, x, l))?;
            h = self.adaln_sublayer(tape, h, m, 1, |tp, x| self.feed_forward(tp, x, l))?;
        }
        let (w, b) = self.out_slots();
        let n = tape.layer_norm(h)?;
        let out = tape.matmul(n, w)?;
        tape.add_row(out, b)
    }
}
