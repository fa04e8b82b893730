//! Single-stage fusion networks and the two-stage coarse/filter/refine model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::encoder::{Encoder, EncoderConfig, FusionKind};
use super::layers::{join, Param, Slot, Stateful};
use super::tensor::Tensor;
use crate::datamodel::{DenseDepthMap, FusionSample, Image, SparseDepthMap, DEFAULT_MAX_DEPTH, MIN_PREDICTION};
use crate::error::{Error, Result};
use crate::filtering::{keeps, ThresholdParams};
use crate::objective::LossWeights;

/// Spatial stride of the encoder; inputs must be multiples of this.
pub const STRIDE: usize = 32;

/// Architecture and scaling shared by every network in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// RGB stage widths; depth branches use a quarter of each.
    pub rgb_channels: [usize; 4],
    /// Width after the decoder bottleneck; halved by each UpProj unit.
    pub decoder_channels: usize,
    /// Meters per network unit for depth inputs and outputs.
    pub depth_scale: f32,
    /// Initial output bias, meters.
    pub init_depth: f32,
    pub max_depth: f32,
    pub seed: u64,
}

impl Default for NetworkConfig {
    /// Reduced widths that train on a CPU in minutes.
    fn default() -> Self {
        Self {
            rgb_channels: [16, 32, 64, 128],
            decoder_channels: 128,
            depth_scale: 3.0,
            init_depth: 15.0,
            max_depth: DEFAULT_MAX_DEPTH,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Full 18-layer residual widths.
    pub fn resnet18() -> Self {
        Self {
            rgb_channels: [64, 128, 256, 512],
            decoder_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_channels < 1 << super::decoder::UP_UNITS {
            return Err(Error::Config(format!(
                "decoder_channels must be at least {} to survive five halvings",
                1 << super::decoder::UP_UNITS
            )));
        }
        if !(self.depth_scale > 0.0) || !(self.max_depth > MIN_PREDICTION) {
            return Err(Error::Config("depth_scale and max_depth must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder + UpProj decoder producing one dense depth channel.
#[derive(Clone, Debug)]
pub struct SingleStageModel {
    net: NetworkConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl SingleStageModel {
    pub fn new(net: &NetworkConfig, enc: &EncoderConfig, depth_grad: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        net.validate()?;
        let encoder = Encoder::new(enc, depth_grad, rng)?;
        let decoder = Decoder::new(enc.out_channels(), net.decoder_channels, net.init_depth / net.depth_scale, rng);
        Ok(Self {
            net: net.clone(),
            encoder,
            decoder,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn network_config(&self) -> &NetworkConfig {
        &self.net
    }

    /// Raw depth in meters for `[n, 3, h, w]` RGB and `[n, k, h, w]` depth
    /// (meters). `h` and `w` must be multiples of 32.
    pub fn forward(&mut self, rgb: &Tensor, depth: Option<&Tensor>, train: bool) -> Result<Tensor> {
        check_divisible(rgb.h, rgb.w)?;
        let want = self.encoder.config().depth_inputs;
        let scaled = match depth {
            Some(d) if want > 0 => {
                if d.c != want || (d.n, d.h, d.w) != (rgb.n, rgb.h, rgb.w) {
                    return Err(Error::Shape(format!(
                        "depth input {:?} does not match rgb {:?} with {want} channels",
                        d.shape(),
                        rgb.shape()
                    )));
                }
                let mut s = d.clone();
                s.scale(1.0 / self.net.depth_scale);
                Some(s)
            }
            None if want > 0 => return Err(Error::Shape(format!("model expects {want} depth channels"))),
            _ => None,
        };
        let feat = self.encoder.forward(rgb, scaled.as_ref(), train);
        let mut out = self.decoder.forward(&feat, train);
        out.scale(self.net.depth_scale);
        Ok(out)
    }

    /// Backpropagates `d loss / d depth` (meters); returns the gradient with
    /// respect to the depth input when the model was built with `depth_grad`.
    pub fn backward(&mut self, grad: &Tensor) -> Option<Tensor> {
        let mut g = grad.clone();
        g.scale(self.net.depth_scale);
        let gf = self.decoder.backward(&g);
        let mut gd = self.encoder.backward(&gf)?;
        gd.scale(1.0 / self.net.depth_scale);
        Some(gd)
    }

    /// Number of trainable scalars.
    pub fn param_count(&mut self) -> usize {
        let mut slots = Vec::new();
        self.slots("", &mut slots);
        slots
            .iter()
            .map(|(_, s)| match s {
                Slot::Param(p) => p.len(),
                Slot::Buffer(_) => 0,
            })
            .sum()
    }
}

impl Stateful for SingleStageModel {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.encoder.slots(&join(prefix, "encoder"), out);
        self.decoder.slots(&join(prefix, "decoder"), out);
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    let pad_h = (STRIDE - h % STRIDE) % STRIDE;
    let pad_w = (STRIDE - w % STRIDE) % STRIDE;
    if pad_h != 0 || pad_w != 0 {
        return Err(Error::NeedsPadding {
            height: h,
            width: w,
            pad_h,
            pad_w,
        });
    }
    Ok(())
}

/// Rows and columns needed to reach the next multiple of 32.
pub fn required_padding(h: usize, w: usize) -> (usize, usize) {
    ((STRIDE - h % STRIDE) % STRIDE, (STRIDE - w % STRIDE) % STRIDE)
}

/// Stacks images into `[n, 3, h, w]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape("images in a batch must share a shape".into()));
        }
        data.extend(img.to_planar());
    }
    Tensor::from_vec(images.len(), 3, h, w, data)
}

/// Stacks per-sample channel lists into `[n, k, h, w]`.
pub fn channels_to_tensor(samples: &[Vec<&[f32]>], h: usize, w: usize) -> Result<Tensor> {
    let k = samples.first().map(|s| s.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len() * k * h * w);
    for chans in samples {
        if chans.len() != k {
            return Err(Error::Shape("inconsistent depth channel count in batch".into()));
        }
        for ch in chans {
            if ch.len() != h * w {
                return Err(Error::Shape(format!("depth channel has {} values, expected {}", ch.len(), h * w)));
            }
            data.extend_from_slice(ch);
        }
    }
    Tensor::from_vec(samples.len(), k, h, w, data)
}

fn to_dense(t: &Tensor, b: usize, h: usize, w: usize, max_depth: f32) -> Result<DenseDepthMap> {
    let plane = t.plane(b, 0);
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        v.extend_from_slice(&plane[y * t.w..y * t.w + w]);
    }
    DenseDepthMap::from_raw(h, w, v, max_depth)
}

/// Eval-mode prediction for one image at any resolution: inputs are padded
/// to a multiple of 32 (edge-replicated RGB, zero depth) and the output is
/// cropped back and clamped.
pub fn forward_single(m: &mut SingleStageModel, image: &Image, depth: &[&[f32]]) -> Result<DenseDepthMap> {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = required_padding(h, w);
    let rgb = images_to_tensor(&[image])?.pad_bottom_right(ph, pw, true);
    let d = if depth.is_empty() {
        None
    } else {
        Some(channels_to_tensor(&[depth.to_vec()], h, w)?.pad_bottom_right(ph, pw, false))
    };
    let out = m.forward(&rgb, d.as_ref(), false)?;
    if !out.is_finite() {
        return Err(Error::InvalidValue("network produced non-finite depth".into()));
    }
    to_dense(&out, 0, h, w, m.net.max_depth)
}

/// Coarse network, radar filter, refinement network, and the learned loss
/// weights. Both stages are late-fusion models with separate parameters.
#[derive(Clone, Debug)]
pub struct TwoStageModel {
    pub stage1: SingleStageModel,
    pub stage2: SingleStageModel,
    /// `[w1, w2]`.
    pub loss_weights: Param,
    pub filter: ThresholdParams,
}

/// Batched two-stage forward results; all tensors are `[n, 1, h, w]`.
#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub stage1: Tensor,
    pub filtered: Tensor,
    pub final_depth: Tensor,
}

impl TwoStageModel {
    pub fn new(net: &NetworkConfig, filter: ThresholdParams, rng: &mut ChaCha8Rng) -> Result<Self> {
        filter.validate()?;
        let enc1 = EncoderConfig {
            rgb_channels: net.rgb_channels,
            fusion: FusionKind::Late,
            depth_inputs: 1,
        };
        let enc2 = EncoderConfig {
            depth_inputs: 2,
            ..enc1.clone()
        };
        Ok(Self {
            stage1: SingleStageModel::new(net, &enc1, false, rng)?,
            stage2: SingleStageModel::new(net, &enc2, true, rng)?,
            loss_weights: Param::filled(vec![2], 0.0),
            filter,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w1: self.loss_weights.value[0] as f64,
            w2: self.loss_weights.value[1] as f64,
        }
    }

    /// Filters radar `[n, 1, h, w]` against the clamped coarse prediction.
    pub fn filter_radar(&self, radar: &Tensor, coarse: &Tensor) -> Tensor {
        let max_depth = self.stage1.net.max_depth;
        let mut out = radar.clone();
        for (r, c) in out.data.iter_mut().zip(&coarse.data) {
            if *r > 0.0 && !keeps(*r as f64, c.clamp(MIN_PREDICTION, max_depth) as f64, &self.filter) {
                *r = 0.0;
            }
        }
        out
    }

    /// Runs both stages on padded tensors. The keep/drop mask is a constant
    /// for differentiation; the coarse prediction reaches stage 2 as a
    /// differentiable input channel.
    pub fn forward(&mut self, rgb: &Tensor, radar: &Tensor, train: bool) -> Result<TwoStageOutput> {
        let stage1 = self.stage1.forward(rgb, Some(radar), train)?;
        let filtered = self.filter_radar(radar, &stage1);
        let input2 = Tensor::concat_channels(&[&filtered, &stage1]);
        let final_depth = self.stage2.forward(rgb, Some(&input2), train)?;
        Ok(TwoStageOutput {
            stage1,
            filtered,
            final_depth,
        })
    }

    /// Backpropagates loss gradients for both outputs through both stages.
    pub fn backward(&mut self, d_stage1: &Tensor, d_final: &Tensor) {
        let g_in2 = self.stage2.backward(d_final).expect("stage 2 depth gradient");
        let mut g1 = g_in2.split_channels(&[1, 1]).swap_remove(1);
        g1.add_assign(d_stage1);
        self.stage1.backward(&g1);
    }
}

impl Stateful for TwoStageModel {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.stage1.slots(&join(prefix, "stage1"), out);
        self.stage2.slots(&join(prefix, "stage2"), out);
        out.push((join(prefix, "loss_weights"), Slot::Param(&mut self.loss_weights)));
    }
}

/// Eval-mode two-stage prediction: `(stage1, filtered radar, final)`.
pub fn forward_two_stage(m: &mut TwoStageModel, s: &FusionSample) -> Result<(DenseDepthMap, SparseDepthMap, DenseDepthMap)> {
    let (h, w) = (s.height(), s.width());
    let (ph, pw) = required_padding(h, w);
    let rgb = images_to_tensor(&[&s.image])?.pad_bottom_right(ph, pw, true);
    let radar = channels_to_tensor(&[vec![s.radar.depth()]], h, w)?.pad_bottom_right(ph, pw, false);
    let out = m.forward(&rgb, &radar, false)?;
    if !out.stage1.is_finite() || !out.final_depth.is_finite() {
        return Err(Error::InvalidValue("network produced non-finite depth".into()));
    }
    let max_depth = m.stage1.net.max_depth;
    let stage1 = to_dense(&out.stage1, 0, h, w, max_depth)?;
    let filtered = out.filtered.crop(h, w);
    let filtered = SparseDepthMap::new(h, w, filtered.data)?;
    let final_depth = to_dense(&out.final_depth, 0, h, w, max_depth)?;
    Ok((stage1, filtered, final_depth))
}

/// Which network a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// Single-branch encoder with no depth input.
    RgbOnly,
    SingleStage { fusion: FusionKind },
    TwoStage { smoothness: bool },
}

impl Variant {
    /// Short label used in tables and file names.
    pub fn label(&self) -> String {
        match self {
            Variant::RgbOnly => "rgb_only".into(),
            Variant::SingleStage { fusion } => format!("{}_fusion", fusion.as_str()),
            Variant::TwoStage { smoothness: true } => "two_stage_smooth".into(),
            Variant::TwoStage { smoothness: false } => "two_stage_no_smooth".into(),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_only" => Ok(Variant::RgbOnly),
            "two_stage" | "two_stage_smooth" => Ok(Variant::TwoStage { smoothness: true }),
            "two_stage_no_smooth" => Ok(Variant::TwoStage { smoothness: false }),
            other => {
                let fusion = other.strip_suffix("_fusion").unwrap_or(other);
                fusion
                    .parse()
                    .map(|fusion| Variant::SingleStage { fusion })
                    .map_err(|_| Error::Config(format!("unknown model variant {other:?}")))
            }
        }
    }
}

/// Output of [`DepthModel::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub stage1: Option<DenseDepthMap>,
    pub filtered: Option<SparseDepthMap>,
    pub final_depth: DenseDepthMap,
}

/// A trainable model of any variant.
#[derive(Clone, Debug)]
pub enum DepthModel {
    Single(SingleStageModel),
    TwoStage(TwoStageModel),
}

impl DepthModel {
    pub fn new(variant: Variant, net: &NetworkConfig, filter: ThresholdParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(net.seed);
        let enc = |fusion, depth_inputs| EncoderConfig {
            rgb_channels: net.rgb_channels,
            fusion,
            depth_inputs,
        };
        Ok(match variant {
            Variant::RgbOnly => DepthModel::Single(SingleStageModel::new(net, &enc(FusionKind::Early, 0), false, &mut rng)?),
            Variant::SingleStage { fusion } => DepthModel::Single(SingleStageModel::new(net, &enc(fusion, 1), false, &mut rng)?),
            Variant::TwoStage { .. } => DepthModel::TwoStage(TwoStageModel::new(net, filter, &mut rng)?),
        })
    }

    pub fn network_config(&self) -> &NetworkConfig {
        match self {
            DepthModel::Single(m) => m.network_config(),
            DepthModel::TwoStage(m) => m.stage1.network_config(),
        }
    }

    /// Eval-mode prediction for one sample.
    pub fn predict(&mut self, s: &FusionSample) -> Result<Prediction> {
        match self {
            DepthModel::Single(m) => {
                let depth: Vec<&[f32]> = if m.encoder_config().depth_inputs > 0 {
                    vec![s.radar.depth()]
                } else {
                    Vec::new()
                };
                Ok(Prediction {
                    stage1: None,
                    filtered: None,
                    final_depth: forward_single(m, &s.image, &depth)?,
                })
            }
            DepthModel::TwoStage(m) => {
                let (stage1, filtered, final_depth) = forward_two_stage(m, s)?;
                Ok(Prediction {
                    stage1: Some(stage1),
                    filtered: Some(filtered),
                    final_depth,
                })
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut slots = Vec::new();
        self.slots("", &mut slots);
        slots
            .iter()
            .map(|(_, s)| match s {
                Slot::Param(p) => p.len(),
                Slot::Buffer(_) => 0,
            })
            .sum()
    }
}

impl Stateful for DepthModel {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        match self {
            DepthModel::Single(m) => m.slots(prefix, out),
            DepthModel::TwoStage(m) => m.slots(prefix, out),
        }
    }
}
