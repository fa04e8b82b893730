//! Residual encoders (18-layer layout: stem + 4 stages of 2 basic blocks)
//! and the four RGB/depth fusion wirings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, BatchNorm2d, Conv2d, MaxPool, Relu, Slot, Stateful};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Where the depth branch joins the RGB branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Depth concatenated to RGB at the input; one branch.
    Early,
    /// Branches merged after stage 2.
    Mid,
    /// Branches merged after stage 4.
    Late,
    /// Branches merged after every stage.
    Multilayer,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Early, FusionKind::Mid, FusionKind::Late, FusionKind::Multilayer];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Early => "early",
            FusionKind::Mid => "mid",
            FusionKind::Late => "late",
            FusionKind::Multilayer => "multilayer",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionKind::Early),
            "mid" => Ok(FusionKind::Mid),
            "late" => Ok(FusionKind::Late),
            "multilayer" | "multi-layer" => Ok(FusionKind::Multilayer),
            other => Err(Error::Config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output widths of the four RGB stages; the stem matches stage 1.
    pub rgb_channels: [usize; 4],
    pub fusion: FusionKind,
    /// Channels of the sparse depth input; 0 builds an RGB-only encoder.
    pub depth_inputs: usize,
}

impl EncoderConfig {
    /// Depth-branch widths, a quarter of the RGB widths.
    pub fn depth_channels(&self) -> [usize; 4] {
        self.rgb_channels.map(|c| c / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.rgb_channels.iter().find(|c| **c == 0 || **c % 4 != 0) {
            return Err(Error::Config(format!(
                "encoder width {c} is not a positive multiple of 4; depth branch widths must be exactly a quarter"
            )));
        }
        if self.depth_inputs == 0 && self.fusion != FusionKind::Early {
            return Err(Error::Config(format!(
                "{} fusion needs a depth input; RGB-only encoders use the single-branch layout",
                self.fusion.as_str()
            )));
        }
        Ok(())
    }

    fn has_depth_branch(&self) -> bool {
        self.depth_inputs > 0 && self.fusion != FusionKind::Early
    }

    /// Channels of the encoder output feature map.
    pub fn out_channels(&self) -> usize {
        let c4 = self.rgb_channels[3];
        match self.fusion {
            FusionKind::Late | FusionKind::Multilayer if self.has_depth_branch() => c4 + c4 / 4,
            _ => c4,
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let down = (stride != 1 || in_c != out_c)
            .then(|| (Conv2d::new(in_c, out_c, 1, stride, 0, false, rng), BatchNorm2d::new(out_c)));
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_c),
            down,
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv1.forward(x, train);
        let h = self.bn1.forward(&h, train);
        let h = self.relu1.forward(h, train);
        let h = self.conv2.forward(&h, train);
        let mut h = self.bn2.forward(&h, train);
        match &mut self.down {
            Some((conv, bn)) => {
                let s = conv.forward(x, train);
                h.add_assign(&bn.forward(&s, train));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward(h, train)
    }

    fn backward(&mut self, g: Tensor) -> Tensor {
        let g = self.relu_out.backward(g);
        let gm = self.bn2.backward(&g);
        let gm = self.conv2.backward(&gm).expect("inner conv");
        let gm = self.relu1.backward(gm);
        let gm = self.bn1.backward(&gm);
        let dx_main = self.conv1.backward(&gm);
        let dx_short = match &mut self.down {
            Some((conv, bn)) => {
                let gs = bn.backward(&g);
                conv.backward(&gs)
            }
            None => Some(g),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("block input gradient requested"),
        }
    }
}

impl Stateful for BasicBlock {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.conv1.slots(&join(prefix, "conv1"), out);
        self.bn1.slots(&join(prefix, "bn1"), out);
        self.conv2.slots(&join(prefix, "conv2"), out);
        self.bn2.slots(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.down {
            conv.slots(&join(prefix, "downsample.0"), out);
            bn.slots(&join(prefix, "downsample.1"), out);
        }
    }
}

/// One residual branch: 7x7/2 stem, 3x3/2 max pool, up to four 2-block stages.
#[derive(Clone, Debug)]
struct Branch {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    pool: MaxPool,
    stages: Vec<Vec<BasicBlock>>,
}

impl Branch {
    /// `extra[i]` channels are concatenated onto the input of stage `i`.
    fn new(in_c: usize, widths: [usize; 4], extra: [usize; 4], n_stages: usize, input_grad: bool, rng: &mut impl Rng) -> Self {
        let mut stem = Conv2d::new(in_c, widths[0], 7, 2, 3, false, rng);
        stem.input_grad = input_grad;
        let mut prev = widths[0];
        let stages = (0..n_stages)
            .map(|i| {
                let stride = if i == 0 { 1 } else { 2 };
                let first = BasicBlock::new(prev + extra[i], widths[i], stride, rng);
                let second = BasicBlock::new(widths[i], widths[i], 1, rng);
                prev = widths[i];
                vec![first, second]
            })
            .collect();
        Self {
            stem,
            stem_bn: BatchNorm2d::new(widths[0]),
            stem_relu: Relu::default(),
            pool: MaxPool::default(),
            stages,
        }
    }

    fn stem_forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.stem.forward(x, train);
        let h = self.stem_bn.forward(&h, train);
        let h = self.stem_relu.forward(h, train);
        self.pool.forward(&h, train)
    }

    fn stem_backward(&mut self, g: &Tensor) -> Option<Tensor> {
        let g = self.pool.backward(g);
        let g = self.stem_relu.backward(g);
        let g = self.stem_bn.backward(&g);
        self.stem.backward(&g)
    }

    fn stage_forward(&mut self, i: usize, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for block in &mut self.stages[i] {
            h = block.forward(&h, train);
        }
        h
    }

    fn stage_backward(&mut self, i: usize, g: Tensor) -> Tensor {
        let mut g = g;
        for block in self.stages[i].iter_mut().rev() {
            g = block.backward(g);
        }
        g
    }

    fn stages_forward(&mut self, range: std::ops::Range<usize>, x: Tensor, train: bool) -> Tensor {
        range.fold(x, |h, i| self.stage_forward(i, &h, train))
    }

    fn stages_backward(&mut self, range: std::ops::Range<usize>, g: Tensor) -> Tensor {
        range.rev().fold(g, |g, i| self.stage_backward(i, g))
    }
}

impl Stateful for Branch {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.stem.slots(&join(prefix, "conv1"), out);
        self.stem_bn.slots(&join(prefix, "bn1"), out);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.slots(&join(prefix, &format!("layer{}.{j}", i + 1)), out);
            }
        }
    }
}

/// RGB encoder with an optional quarter-width depth branch.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    rgb: Branch,
    depth: Option<Branch>,
}

impl Encoder {
    /// `depth_grad` requests gradients with respect to the depth input, for
    /// when that input is itself a network output.
    pub fn new(cfg: &EncoderConfig, depth_grad: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let rgb_w = cfg.rgb_channels;
        let dep_w = cfg.depth_channels();
        let (rgb, depth) = match (cfg.fusion, cfg.has_depth_branch()) {
            (FusionKind::Early, _) | (_, false) => {
                let b = Branch::new(3 + cfg.depth_inputs, rgb_w, [0; 4], 4, depth_grad && cfg.depth_inputs > 0, rng);
                (b, None)
            }
            (FusionKind::Mid, true) => (
                Branch::new(3, rgb_w, [0, 0, dep_w[1], 0], 4, false, rng),
                Some(Branch::new(cfg.depth_inputs, dep_w, [0; 4], 2, depth_grad, rng)),
            ),
            (FusionKind::Late, true) => (
                Branch::new(3, rgb_w, [0; 4], 4, false, rng),
                Some(Branch::new(cfg.depth_inputs, dep_w, [0; 4], 4, depth_grad, rng)),
            ),
            (FusionKind::Multilayer, true) => (
                Branch::new(3, rgb_w, [0, dep_w[0], dep_w[1], dep_w[2]], 4, false, rng),
                Some(Branch::new(cfg.depth_inputs, dep_w, [0; 4], 4, depth_grad, rng)),
            ),
        };
        Ok(Self {
            cfg: cfg.clone(),
            rgb,
            depth,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on `[n, 3, h, w]` RGB and `[n, depth_inputs, h, w]`
    /// depth; returns the stride-32 feature map.
    pub fn forward(&mut self, rgb: &Tensor, depth: Option<&Tensor>, train: bool) -> Tensor {
        let dep_w = self.cfg.depth_channels();
        match (&mut self.depth, self.cfg.fusion) {
            (None, _) => {
                let x = match depth {
                    Some(d) if self.cfg.depth_inputs > 0 => Tensor::concat_channels(&[rgb, d]),
                    _ => rgb.clone(),
                };
                let h = self.rgb.stem_forward(&x, train);
                self.rgb.stages_forward(0..4, h, train)
            }
            (Some(db), FusionKind::Mid) => {
                let d = depth.expect("depth input");
                let r = self.rgb.stem_forward(rgb, train);
                let r = self.rgb.stages_forward(0..2, r, train);
                let dh = db.stem_forward(d, train);
                let dh = db.stages_forward(0..2, dh, train);
                debug_assert_eq!(dh.c, dep_w[1]);
                let f = Tensor::concat_channels(&[&r, &dh]);
                self.rgb.stages_forward(2..4, f, train)
            }
            (Some(db), FusionKind::Late) => {
                let d = depth.expect("depth input");
                let r = self.rgb.stem_forward(rgb, train);
                let r = self.rgb.stages_forward(0..4, r, train);
                let dh = db.stem_forward(d, train);
                let dh = db.stages_forward(0..4, dh, train);
                Tensor::concat_channels(&[&r, &dh])
            }
            (Some(db), FusionKind::Multilayer) => {
                let d = depth.expect("depth input");
                let mut f = self.rgb.stem_forward(rgb, train);
                let mut dh = db.stem_forward(d, train);
                for i in 0..4 {
                    let r = self.rgb.stage_forward(i, &f, train);
                    dh = db.stage_forward(i, &dh, train);
                    f = Tensor::concat_channels(&[&r, &dh]);
                }
                f
            }
            (Some(_), FusionKind::Early) => unreachable!("early fusion has no depth branch"),
        }
    }

    /// Backpropagates the feature gradient; returns the depth-input gradient
    /// when the encoder was built with `depth_grad`.
    pub fn backward(&mut self, g: &Tensor) -> Option<Tensor> {
        let rgb_w = self.cfg.rgb_channels;
        let dep_w = self.cfg.depth_channels();
        match (&mut self.depth, self.cfg.fusion) {
            (None, _) => {
                let g = self.rgb.stages_backward(0..4, g.clone());
                let gx = self.rgb.stem_backward(&g)?;
                (self.cfg.depth_inputs > 0).then(|| gx.split_channels(&[3, self.cfg.depth_inputs]).swap_remove(1))
            }
            (Some(db), FusionKind::Mid) => {
                let gf = self.rgb.stages_backward(2..4, g.clone());
                let mut parts = gf.split_channels(&[rgb_w[1], dep_w[1]]);
                let gd = parts.pop().expect("depth part");
                let gr = parts.pop().expect("rgb part");
                let gr = self.rgb.stages_backward(0..2, gr);
                self.rgb.stem_backward(&gr);
                let gd = db.stages_backward(0..2, gd);
                db.stem_backward(&gd)
            }
            (Some(db), FusionKind::Late) => {
                let mut parts = g.split_channels(&[rgb_w[3], dep_w[3]]);
                let gd = parts.pop().expect("depth part");
                let gr = parts.pop().expect("rgb part");
                let gr = self.rgb.stages_backward(0..4, gr);
                self.rgb.stem_backward(&gr);
                let gd = db.stages_backward(0..4, gd);
                db.stem_backward(&gd)
            }
            (Some(db), FusionKind::Multilayer) => {
                let mut gf = g.clone();
                let mut gd_acc: Option<Tensor> = None;
                for i in (0..4).rev() {
                    let mut parts = gf.split_channels(&[rgb_w[i], dep_w[i]]);
                    let mut gd = parts.pop().expect("depth part");
                    let gr = parts.pop().expect("rgb part");
                    if let Some(acc) = gd_acc.take() {
                        gd.add_assign(&acc);
                    }
                    gd_acc = Some(db.stage_backward(i, gd));
                    gf = self.rgb.stage_backward(i, gr);
                }
                self.rgb.stem_backward(&gf);
                db.stem_backward(&gd_acc.expect("depth gradient"))
            }
            (Some(_), FusionKind::Early) => unreachable!("early fusion has no depth branch"),
        }
    }
}

impl Stateful for Encoder {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.rgb.slots(&join(prefix, "rgb"), out);
        if let Some(d) = &mut self.depth {
            d.slots(&join(prefix, "depth"), out);
        }
    }
}
