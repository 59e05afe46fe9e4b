//! Landmark-to-landmark face generator.
//!
//! Pipeline: landmark attention, appearance and shape encoders, `K` rounds
//! of bipartite landmark reasoning followed by landmark-appearance
//! aggregation, then separate image and attention decoders whose outputs
//! are blended with the condition image.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, LandmarkAttention};
use crate::error::{Error, Result};
use crate::nn::{conv2d, instance_norm, leaky_relu, sigmoid, upsample_nearest, Init, Weights, DEVICE, DTYPE};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Channel width `D` of appearance and shape codes.
    pub feature_dim: usize,
    /// Reasoning/aggregation rounds `K`.
    pub iterations: usize,
    pub gcn_layers: usize,
    pub share_reasoning_weights: bool,
    pub residual_blocks: usize,
    pub attention_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            feature_dim: 64,
            iterations: 3,
            gcn_layers: 1,
            share_reasoning_weights: false,
            residual_blocks: 1,
            attention_kernel: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 {
            return Err(Error::Config(format!("feature_dim {} < 4", self.feature_dim)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be >= 1".into()));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "attention_kernel {} must be odd",
                self.attention_kernel
            )));
        }
        Ok(())
    }
}

/// `F_k^i`, shape `(B, D, h, w)`.
#[derive(Debug, Clone)]
pub struct AppearanceCode(pub Tensor);

/// `F_k^{lms}` and `F_k^{lmc}`, each `(B, D, h, w)`.
#[derive(Debug, Clone)]
pub struct ShapeCodes {
    pub f_lms: Tensor,
    pub f_lmc: Tensor,
}

/// Cross-partition edges of the landmark graph. Nodes are the `h*w`
/// spatial positions on each side.
#[derive(Debug, Clone)]
pub enum CrossEdges {
    /// Every source node linked to every condition node, weight `1/N`.
    Full,
    /// No cross edges; each side only sees itself.
    Severed,
    /// Source-by-condition weights `(N_s, N_c)`; the reverse direction uses
    /// the transpose.
    Custom(Tensor),
}

#[derive(Debug, Clone)]
pub struct BipartiteGraphConfig {
    pub num_iterations: usize,
    pub gcn_layers_per_iteration: usize,
    pub feature_dim: usize,
    pub edges: CrossEdges,
}

impl BipartiteGraphConfig {
    pub fn from_generator(cfg: &GeneratorConfig) -> Self {
        BipartiteGraphConfig {
            num_iterations: cfg.iterations,
            gcn_layers_per_iteration: cfg.gcn_layers,
            feature_dim: cfg.feature_dim,
            edges: CrossEdges::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `Ĩ_g`, `(B, 3, H, W)` in `[-1, 1]`.
    pub intermediate: Tensor,
    /// `A_i`, `(B, 1, H, W)` in `[0, 1]`.
    pub attention_mask: Tensor,
    /// `I_g = I_c * A_i + Ĩ_g * (1 - A_i)`.
    pub final_image: Tensor,
    pub landmark_weights: Option<AttentionWeights>,
    /// Codes after every round, filled when tracing is requested.
    pub trace: Vec<(AppearanceCode, ShapeCodes)>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Replace the decoded attention mask by a constant.
    pub force_attention: Option<f64>,
    pub trace: bool,
}

/// Batched generator inputs, all sharing `(B, H, W)`.
#[derive(Debug, Clone)]
pub struct GeneratorInputs {
    pub condition: Tensor,
    pub context: Tensor,
    pub context_mask: Tensor,
    pub lm_source: Tensor,
    pub lm_condition: Tensor,
}

/// Downsampling conv encoder: one full-resolution conv, two stride-2 stages
/// and residual blocks, giving `(B, D, H/4, W/4)`.
#[derive(Debug, Clone, Copy)]
struct Encoder {
    in_channels: usize,
    width: usize,
    residual_blocks: usize,
}

impl Encoder {
    fn init(&self, init: &mut Init) -> Result<()> {
        let half = (self.width / 2).max(1);
        init.conv("stem", self.in_channels, half, 3)?;
        init.conv("down0", half, self.width, 4)?;
        init.conv("down1", self.width, self.width, 4)?;
        for r in 0..self.residual_blocks {
            init.conv(&format!("res{r}.conv0"), self.width, self.width, 3)?;
            init.conv(&format!("res{r}.conv1"), self.width, self.width, 3)?;
        }
        Ok(())
    }

    fn forward(&self, w: &Weights, x: &Tensor) -> Result<Tensor> {
        let mut h = instance_norm(&conv2d(w, "stem", x, 1, 1)?)?.relu()?;
        h = instance_norm(&conv2d(w, "down0", &h, 2, 1)?)?.relu()?;
        h = instance_norm(&conv2d(w, "down1", &h, 2, 1)?)?.relu()?;
        for r in 0..self.residual_blocks {
            let y = instance_norm(&conv2d(w, &format!("res{r}.conv0"), &h, 1, 1)?)?.relu()?;
            let y = instance_norm(&conv2d(w, &format!("res{r}.conv1"), &y, 1, 1)?)?;
            h = (h + y)?;
        }
        Ok(h)
    }
}

/// Nearest-neighbour upsampling decoder, mirror of [`Encoder`].
#[derive(Debug, Clone, Copy)]
struct Decoder {
    width: usize,
    out_channels: usize,
}

impl Decoder {
    fn widths(&self) -> (usize, usize) {
        ((self.width / 2).max(1), (self.width / 4).max(1))
    }

    fn init(&self, init: &mut Init) -> Result<()> {
        let (w1, w2) = self.widths();
        init.conv("up0", self.width, w1, 3)?;
        init.conv("up1", w1, w2, 3)?;
        init.conv("out", w2, self.out_channels, 3)
    }

    /// Pre-activation output.
    fn forward(&self, w: &Weights, x: &Tensor) -> Result<Tensor> {
        let mut y = upsample_nearest(x, 2)?;
        y = instance_norm(&conv2d(w, "up0", &y, 1, 1)?)?.relu()?;
        y = upsample_nearest(&y, 2)?;
        y = instance_norm(&conv2d(w, "up1", &y, 1, 1)?)?.relu()?;
        conv2d(w, "out", &y, 1, 1)
    }
}

/// One bipartite reasoning block of `layers` GCN layers.
///
/// Per layer, with node features `X_s, X_c` of shape `(B, N, D)`:
/// `X_s' = X_s + lrelu(X_s W_self_s + A X_c W_cross_s)` and
/// `X_c' = X_c + lrelu(X_c W_self_c + Aᵀ X_s W_cross_c)`, both computed from
/// the pre-layer features.
#[derive(Debug, Clone, Copy)]
pub struct BipartiteReasoning {
    pub feature_dim: usize,
    pub layers: usize,
}

impl BipartiteReasoning {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        let d = self.feature_dim;
        for l in 0..self.layers {
            init.scoped(format!("layer{l}"), |i| {
                i.linear("w_self_s", d, d)?;
                i.linear("w_cross_s", d, d)?;
                i.linear("w_self_c", d, d)?;
                i.linear("w_cross_c", d, d)
            })?;
        }
        Ok(())
    }

    pub fn forward(&self, w: &Weights, codes: &ShapeCodes, edges: &CrossEdges) -> Result<ShapeCodes> {
        let (b, d, h, wd) = codes.f_lms.dims4()?;
        if codes.f_lmc.dims() != codes.f_lms.dims() {
            return Err(Error::shape(format!(
                "shape codes {:?} vs {:?}",
                codes.f_lms.dims(),
                codes.f_lmc.dims()
            )));
        }
        if d != self.feature_dim {
            return Err(Error::shape(format!("feature dim {d} != {}", self.feature_dim)));
        }
        let n = h * wd;
        if let CrossEdges::Custom(a) = edges {
            if a.dims() != [n, n] {
                return Err(Error::shape(format!("adjacency {:?} for {n} nodes", a.dims())));
            }
        }
        let to_nodes = |t: &Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, d, n))?.transpose(1, 2)?.contiguous()?)
        };
        let mut xs = to_nodes(&codes.f_lms)?;
        let mut xc = to_nodes(&codes.f_lmc)?;
        for l in 0..self.layers {
            let lw = w.pp(format!("layer{l}"));
            let self_s = xs.broadcast_matmul(&lw.get("w_self_s")?)?;
            let self_c = xc.broadcast_matmul(&lw.get("w_self_c")?)?;
            let (pre_s, pre_c) = match edges {
                CrossEdges::Severed => (self_s, self_c),
                CrossEdges::Full => {
                    let msg_c = xc.mean_keepdim(1)?.broadcast_matmul(&lw.get("w_cross_s")?)?;
                    let msg_s = xs.mean_keepdim(1)?.broadcast_matmul(&lw.get("w_cross_c")?)?;
                    (self_s.broadcast_add(&msg_c)?, self_c.broadcast_add(&msg_s)?)
                }
                CrossEdges::Custom(a) => {
                    let msg_c = a
                        .broadcast_matmul(&xc)?
                        .broadcast_matmul(&lw.get("w_cross_s")?)?;
                    let msg_s = a
                        .t()?
                        .contiguous()?
                        .broadcast_matmul(&xs)?
                        .broadcast_matmul(&lw.get("w_cross_c")?)?;
                    ((self_s + msg_c)?, (self_c + msg_s)?)
                }
            };
            let next_s = (&xs + leaky_relu(&pre_s, SLOPE)?)?;
            let next_c = (&xc + leaky_relu(&pre_c, SLOPE)?)?;
            xs = next_s;
            xc = next_c;
        }
        let from_nodes = |t: &Tensor| -> Result<Tensor> {
            Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, d, h, wd))?)
        };
        Ok(ShapeCodes {
            f_lms: from_nodes(&xs)?,
            f_lmc: from_nodes(&xc)?,
        })
    }
}

/// Landmark-appearance aggregation:
/// `F' = F + sigmoid(conv(lms ‖ lmc)) ⊙ lrelu(conv(F ‖ lms ‖ lmc))`.
#[derive(Debug, Clone, Copy)]
pub struct Aggregation {
    pub feature_dim: usize,
}

impl Aggregation {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        let d = self.feature_dim;
        init.conv("gate", 2 * d, d, 3)?;
        init.conv("update", 3 * d, d, 3)
    }

    pub fn forward(&self, w: &Weights, appearance: &AppearanceCode, codes: &ShapeCodes) -> Result<AppearanceCode> {
        let f = &appearance.0;
        if f.dims() != codes.f_lms.dims() || f.dims() != codes.f_lmc.dims() {
            return Err(Error::shape(format!(
                "appearance {:?} vs shape codes {:?}",
                f.dims(),
                codes.f_lms.dims()
            )));
        }
        let shapes = Tensor::cat(&[&codes.f_lms, &codes.f_lmc], 1)?;
        let gate = sigmoid(&conv2d(w, "gate", &shapes, 1, 1)?)?;
        let joint = Tensor::cat(&[f, &codes.f_lms, &codes.f_lmc], 1)?;
        let update = leaky_relu(&conv2d(w, "update", &joint, 1, 1)?, SLOPE)?;
        Ok(AppearanceCode((f + gate.mul(&update)?)?))
    }
}

/// The full generator. Parameter sub-trees: `attention`,
/// `appearance_encoder`, `shape_encoder`, `reasoning.{k}`,
/// `aggregation.{k}`, `image_decoder`, `attention_decoder`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub landmark_channels: usize,
    pub attention: LandmarkAttention,
    pub edges: CrossEdges,
}

/// Appearance input: condition (3) ‖ context (3) ‖ context mask (1).
pub const APPEARANCE_CHANNELS: usize = 7;

impl Generator {
    pub fn new(config: GeneratorConfig, landmark_channels: usize, landmark_attention: bool) -> Result<Self> {
        config.validate()?;
        if landmark_channels == 0 {
            return Err(Error::Config("landmark channel count is zero".into()));
        }
        let attention = LandmarkAttention::new(config.attention_kernel, landmark_attention)?;
        Ok(Generator {
            config,
            landmark_channels,
            attention,
            edges: CrossEdges::Full,
        })
    }

    fn appearance_encoder(&self) -> Encoder {
        Encoder {
            in_channels: APPEARANCE_CHANNELS,
            width: self.config.feature_dim,
            residual_blocks: self.config.residual_blocks,
        }
    }

    fn shape_encoder(&self) -> Encoder {
        Encoder {
            in_channels: self.landmark_channels,
            width: self.config.feature_dim,
            residual_blocks: self.config.residual_blocks,
        }
    }

    pub fn reasoning(&self) -> BipartiteReasoning {
        BipartiteReasoning {
            feature_dim: self.config.feature_dim,
            layers: self.config.gcn_layers,
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        Aggregation {
            feature_dim: self.config.feature_dim,
        }
    }

    fn block_slot(&self, k: usize) -> usize {
        if self.config.share_reasoning_weights {
            0
        } else {
            k
        }
    }

    fn image_decoder(&self) -> Decoder {
        Decoder {
            width: self.config.feature_dim,
            out_channels: 3,
        }
    }

    fn attention_decoder(&self) -> Decoder {
        Decoder {
            width: self.config.feature_dim,
            out_channels: 1,
        }
    }

    /// Declares every generator parameter under the current init scope.
    pub fn init(&self, init: &mut Init) -> Result<()> {
        // attention weights exist even when disabled so that checkpoints keep
        // one layout across ablations
        init.scoped("attention", |i| self.attention.init(i))?;
        init.scoped("appearance_encoder", |i| self.appearance_encoder().init(i))?;
        init.scoped("shape_encoder", |i| self.shape_encoder().init(i))?;
        let blocks = if self.config.share_reasoning_weights {
            1
        } else {
            self.config.iterations
        };
        for k in 0..blocks {
            init.scoped(format!("reasoning.{k}"), |i| self.reasoning().init(i))?;
            init.scoped(format!("aggregation.{k}"), |i| self.aggregation().init(i))?;
        }
        init.scoped("image_decoder", |i| self.image_decoder().init(i))?;
        init.scoped("attention_decoder", |i| self.attention_decoder().init(i))
    }

    fn check_spatial(&self, t: &Tensor, what: &str, channels: usize, b: usize, h: usize, w: usize) -> Result<()> {
        let dims = t.dims4()?;
        if dims != (b, channels, h, w) {
            return Err(Error::shape(format!(
                "{what}: expected {:?}, got {:?}",
                (b, channels, h, w),
                dims
            )));
        }
        Ok(())
    }

    pub fn encode_appearance(&self, w: &Weights, condition: &Tensor, context: &Tensor, context_mask: &Tensor) -> Result<AppearanceCode> {
        let (b, _, h, wd) = condition.dims4()?;
        self.check_spatial(condition, "condition", 3, b, h, wd)?;
        self.check_spatial(context, "context", 3, b, h, wd)?;
        self.check_spatial(context_mask, "context mask", 1, b, h, wd)?;
        if h % 4 != 0 || wd % 4 != 0 {
            return Err(Error::shape(format!("resolution {h}x{wd} not divisible by 4")));
        }
        let x = Tensor::cat(&[condition, context, context_mask], 1)?;
        Ok(AppearanceCode(self.appearance_encoder().forward(&w.pp("appearance_encoder"), &x)?))
    }

    /// Encodes both halves of the attended `(B, 2C, H, W)` maps with one
    /// shared encoder.
    pub fn encode_shape(&self, w: &Weights, weighted_maps: &Tensor) -> Result<ShapeCodes> {
        let (b, c2, h, wd) = weighted_maps.dims4()?;
        if c2 != 2 * self.landmark_channels {
            return Err(Error::shape(format!(
                "weighted maps carry {c2} channels, expected {}",
                2 * self.landmark_channels
            )));
        }
        if h % 4 != 0 || wd % 4 != 0 {
            return Err(Error::shape(format!("resolution {h}x{wd} not divisible by 4")));
        }
        let c = self.landmark_channels;
        let stacked = Tensor::cat(&[weighted_maps.narrow(1, 0, c)?, weighted_maps.narrow(1, c, c)?], 0)?;
        let codes = self.shape_encoder().forward(&w.pp("shape_encoder"), &stacked)?;
        Ok(ShapeCodes {
            f_lms: codes.narrow(0, 0, b)?,
            f_lmc: codes.narrow(0, b, b)?,
        })
    }

    pub fn bipartite_reason(&self, w: &Weights, k: usize, codes: &ShapeCodes) -> Result<ShapeCodes> {
        let slot = self.block_slot(k);
        self.reasoning()
            .forward(&w.pp(format!("reasoning.{slot}")), codes, &self.edges)
    }

    pub fn aggregate(&self, w: &Weights, k: usize, appearance: &AppearanceCode, codes: &ShapeCodes) -> Result<AppearanceCode> {
        let slot = self.block_slot(k);
        self.aggregation()
            .forward(&w.pp(format!("aggregation.{slot}")), appearance, codes)
    }

    pub fn forward(&self, w: &Weights, inputs: &GeneratorInputs, opts: &ForwardOptions) -> Result<GeneratorOutput> {
        let (b, _, h, wd) = inputs.condition.dims4()?;
        let c = self.landmark_channels;
        self.check_spatial(&inputs.lm_source, "source landmark map", c, b, h, wd)?;
        self.check_spatial(&inputs.lm_condition, "condition landmark map", c, b, h, wd)?;

        let attended = self
            .attention
            .forward(&w.pp("attention"), &inputs.lm_source, &inputs.lm_condition)?;
        let mut appearance = self.encode_appearance(w, &inputs.condition, &inputs.context, &inputs.context_mask)?;
        let mut codes = self.encode_shape(w, &attended.maps)?;
        let mut trace = Vec::new();
        for k in 0..self.config.iterations {
            codes = self.bipartite_reason(w, k, &codes)?;
            appearance = self.aggregate(w, k, &appearance, &codes)?;
            if opts.trace {
                trace.push((appearance.clone(), codes.clone()));
            }
        }
        let intermediate = self
            .image_decoder()
            .forward(&w.pp("image_decoder"), &appearance.0)?
            .tanh()?;
        let attention_mask = match opts.force_attention {
            Some(v) => Tensor::full(v, (b, 1, h, wd), &DEVICE)?,
            None => sigmoid(&self.attention_decoder().forward(&w.pp("attention_decoder"), &appearance.0)?)?,
        };
        let final_image = blend(&inputs.condition, &intermediate, &attention_mask)?;
        Ok(GeneratorOutput {
            intermediate,
            attention_mask,
            final_image,
            landmark_weights: attended.weights,
            trace,
        })
    }
}

/// `condition * mask + intermediate * (1 - mask)`, mask broadcast over
/// channels.
pub fn blend(condition: &Tensor, intermediate: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let a = mask.broadcast_as(condition.shape())?;
    let one_minus = (Tensor::ones(condition.shape(), DTYPE, &DEVICE)? - &a)?;
    Ok((condition.mul(&a)? + intermediate.mul(&one_minus)?)?)
}

/// Sum of squares of a code; used for finiteness and change checks.
pub fn code_energy(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.flatten_all()?.sum(D::Minus1)?.to_scalar::<f64>()?)
}
