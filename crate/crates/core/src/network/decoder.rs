//! UpProj decoder: five x2 up-projection units back to input resolution.

use rand::Rng;

use super::layers::{join, unpool_backward, unpool_forward, BatchNorm2d, Conv2d, Relu, Slot, Stateful};
use super::tensor::Tensor;

/// Number of x2 units; undoes the encoder's stride of 32.
pub const UP_UNITS: usize = 5;

/// Unpool, then `relu(bn(conv3(relu(bn(conv5(x))))) + bn(conv5(x)))`.
#[derive(Clone, Debug)]
struct UpProj {
    conv_a1: Conv2d,
    bn_a1: BatchNorm2d,
    relu_a: Relu,
    conv_a2: Conv2d,
    bn_a2: BatchNorm2d,
    conv_b: Conv2d,
    bn_b: BatchNorm2d,
    relu_out: Relu,
}

impl UpProj {
    fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv_a1: Conv2d::new(in_c, out_c, 5, 1, 2, false, rng),
            bn_a1: BatchNorm2d::new(out_c),
            relu_a: Relu::default(),
            conv_a2: Conv2d::new(out_c, out_c, 3, 1, 1, false, rng),
            bn_a2: BatchNorm2d::new(out_c),
            conv_b: Conv2d::new(in_c, out_c, 5, 1, 2, false, rng),
            bn_b: BatchNorm2d::new(out_c),
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let u = unpool_forward(x);
        let a = self.conv_a1.forward(&u, train);
        let a = self.bn_a1.forward(&a, train);
        let a = self.relu_a.forward(a, train);
        let a = self.conv_a2.forward(&a, train);
        let mut a = self.bn_a2.forward(&a, train);
        let b = self.conv_b.forward(&u, train);
        a.add_assign(&self.bn_b.forward(&b, train));
        self.relu_out.forward(a, train)
    }

    fn backward(&mut self, g: Tensor) -> Tensor {
        let g = self.relu_out.backward(g);
        let ga = self.bn_a2.backward(&g);
        let ga = self.conv_a2.backward(&ga).expect("inner conv");
        let ga = self.relu_a.backward(ga);
        let ga = self.bn_a1.backward(&ga);
        let mut gu = self.conv_a1.backward(&ga).expect("inner conv");
        let gb = self.bn_b.backward(&g);
        gu.add_assign(&self.conv_b.backward(&gb).expect("inner conv"));
        unpool_backward(&gu)
    }
}

impl Stateful for UpProj {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.conv_a1.slots(&join(prefix, "upper.conv1"), out);
        self.bn_a1.slots(&join(prefix, "upper.bn1"), out);
        self.conv_a2.slots(&join(prefix, "upper.conv2"), out);
        self.bn_a2.slots(&join(prefix, "upper.bn2"), out);
        self.conv_b.slots(&join(prefix, "bottom.conv"), out);
        self.bn_b.slots(&join(prefix, "bottom.bn"), out);
    }
}

/// 1x1 bottleneck, five UpProj units halving the width each time, and a
/// 3x3 single-channel head.
#[derive(Clone, Debug)]
pub struct Decoder {
    bottleneck: Conv2d,
    bottleneck_bn: BatchNorm2d,
    ups: Vec<UpProj>,
    head: Conv2d,
}

impl Decoder {
    pub fn new(in_c: usize, width: usize, head_bias: f32, rng: &mut impl Rng) -> Self {
        let mut c = width;
        let ups = (0..UP_UNITS)
            .map(|_| {
                let u = UpProj::new(c, (c / 2).max(1), rng);
                c = (c / 2).max(1);
                u
            })
            .collect();
        let mut head = Conv2d::new(c, 1, 3, 1, 1, true, rng);
        head.bias.as_mut().expect("head bias").value[0] = head_bias;
        Self {
            bottleneck: Conv2d::new(in_c, width, 1, 1, 0, false, rng),
            bottleneck_bn: BatchNorm2d::new(width),
            ups,
            head,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.bottleneck.forward(x, train);
        let mut h = self.bottleneck_bn.forward(&h, train);
        for up in &mut self.ups {
            h = up.forward(&h, train);
        }
        self.head.forward(&h, train)
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.head.backward(g).expect("head input grad");
        for up in self.ups.iter_mut().rev() {
            g = up.backward(g);
        }
        let g = self.bottleneck_bn.backward(&g);
        self.bottleneck.backward(&g).expect("bottleneck input grad")
    }
}

impl Stateful for Decoder {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        self.bottleneck.slots(&join(prefix, "conv2"), out);
        self.bottleneck_bn.slots(&join(prefix, "bn2"), out);
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.slots(&join(prefix, &format!("up{}", i + 1)), out);
        }
        self.head.slots(&join(prefix, "conv3"), out);
    }
}
