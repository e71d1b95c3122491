//! U-Net and SegNet encoder–decoders in planar or volumetric form.

use super::layers::{trace_activation, Builder, Conv, ConvBnRelu, CostTrace, Forward, ParamStore, TransposedConv};
use super::BackboneKind;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, TransposedGeometry, Var};

/// Number of pooling levels; spatial extents must be divisible by `2^LEVELS`.
pub const LEVELS: usize = 3;

/// Spatial rank of a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rank {
    Planar,
    Volumetric,
}

impl Rank {
    fn conv(self) -> ConvGeometry {
        match self {
            Rank::Planar => ConvGeometry::planar(3),
            Rank::Volumetric => ConvGeometry::volumetric(3, [true; 3]),
        }
    }

    fn head(self) -> ConvGeometry {
        ConvGeometry {
            kernel: [1, 1, 1],
            padded: [true; 3],
        }
    }

    fn up(self) -> TransposedGeometry {
        match self {
            Rank::Planar => TransposedGeometry::planar(3),
            Rank::Volumetric => TransposedGeometry::volumetric(3),
        }
    }

    pub fn pool_factor(self) -> [usize; 3] {
        match self {
            Rank::Planar => [1, 2, 2],
            Rank::Volumetric => [2, 2, 2],
        }
    }
}

/// Encoder widths `[b, 2b, 4b]` and bottleneck width `8b`.
pub fn filter_plan(base: usize) -> ([usize; LEVELS], usize) {
    ([base, 2 * base, 4 * base], 8 * base)
}

#[derive(Clone, Debug)]
pub struct UNet {
    encoder: Vec<[ConvBnRelu; 2]>,
    bottleneck: [ConvBnRelu; 2],
    /// Upsampling then one convolution over the skip concatenation.
    decoder: Vec<(TransposedConv, ConvBnRelu)>,
    head: Conv,
    rank: Rank,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    encoder: Vec<[ConvBnRelu; 2]>,
    bottleneck: [ConvBnRelu; 2],
    /// Index unpooling then two convolutions; the last narrows to the next
    /// level's width.
    decoder: Vec<[ConvBnRelu; 2]>,
    head: Conv,
    rank: Rank,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    UNet(UNet),
    SegNet(SegNet),
}

impl Backbone {
    pub(crate) fn build(
        b: &mut Builder,
        kind: BackboneKind,
        rank: Rank,
        in_channels: usize,
        classes: usize,
        base: usize,
    ) -> Self {
        let (widths, bottom) = filter_plan(base);
        let geom = rank.conv();
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = in_channels;
        for (i, &f) in widths.iter().enumerate() {
            encoder.push(b.scoped(&format!("enc{i}"), |b| {
                [
                    b.scoped("0", |b| b.conv_bn_relu(cin, f, geom)),
                    b.scoped("1", |b| b.conv_bn_relu(f, f, geom)),
                ]
            }));
            cin = f;
        }
        match kind {
            BackboneKind::UNet => {
                let bottleneck = b.scoped("bottleneck", |b| {
                    [
                        b.scoped("0", |b| b.conv_bn_relu(cin, bottom, geom)),
                        b.scoped("1", |b| b.conv_bn_relu(bottom, bottom, geom)),
                    ]
                });
                let mut decoder = Vec::with_capacity(LEVELS);
                let mut cin = bottom;
                for (i, &f) in widths.iter().enumerate().rev() {
                    decoder.push(b.scoped(&format!("dec{i}"), |b| {
                        (
                            b.scoped("up", |b| b.transposed(cin, f, rank.up())),
                            b.scoped("0", |b| b.conv_bn_relu(2 * f, f, geom)),
                        )
                    }));
                    cin = f;
                }
                let head = b.scoped("head", |b| b.conv(cin, classes, rank.head()));
                Backbone::UNet(UNet {
                    encoder,
                    bottleneck,
                    decoder,
                    head,
                    rank,
                })
            }
            BackboneKind::SegNet => {
                let bottleneck = b.scoped("bottleneck", |b| {
                    [
                        b.scoped("0", |b| b.conv_bn_relu(cin, bottom, geom)),
                        b.scoped("1", |b| b.conv_bn_relu(bottom, cin, geom)),
                    ]
                });
                let mut decoder = Vec::with_capacity(LEVELS);
                for i in (0..LEVELS).rev() {
                    let f = widths[i];
                    let next = if i == 0 { widths[0] } else { widths[i - 1] };
                    decoder.push(b.scoped(&format!("dec{i}"), |b| {
                        [
                            b.scoped("0", |b| b.conv_bn_relu(f, f, geom)),
                            b.scoped("1", |b| b.conv_bn_relu(f, next, geom)),
                        ]
                    }));
                }
                let head = b.scoped("head", |b| b.conv(widths[0], classes, rank.head()));
                Backbone::SegNet(SegNet {
                    encoder,
                    bottleneck,
                    decoder,
                    head,
                    rank,
                })
            }
        }
    }

    pub fn rank(&self) -> Rank {
        match self {
            Backbone::UNet(n) => n.rank,
            Backbone::SegNet(n) => n.rank,
        }
    }

    fn check_extents(&self, shape: [usize; 5]) -> Result<()> {
        let factor = 1 << LEVELS;
        let pooled = self.rank().pool_factor();
        for (axis, &e) in shape[2..].iter().enumerate() {
            if pooled[axis] > 1 && e % factor != 0 {
                return Err(Error::Extent(format!(
                    "spatial extent {e} must be divisible by {factor} for {LEVELS} pooling levels"
                )));
            }
        }
        Ok(())
    }

    /// Class probabilities over axis 1, same spatial extents as the input.
    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = fw.graph.value(x).dims5()?;
        self.check_extents(shape)?;
        let logits = match self {
            Backbone::UNet(n) => n.forward(fw, x)?,
            Backbone::SegNet(n) => n.forward(fw, x)?,
        };
        fw.graph.softmax(logits)
    }

    pub fn trace(&self, params: &ParamStore, shape: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        self.check_extents(shape)?;
        let out = match self {
            Backbone::UNet(n) => n.trace(params, shape, cost)?,
            Backbone::SegNet(n) => n.trace(params, shape, cost)?,
        };
        trace_activation(cost, out);
        Ok(out)
    }
}

fn pooled(shape: [usize; 5], f: [usize; 3]) -> [usize; 5] {
    [shape[0], shape[1], shape[2] / f[0], shape[3] / f[1], shape[4] / f[2]]
}

impl UNet {
    fn forward(&self, fw: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        let factor = self.rank.pool_factor();
        let mut skips = Vec::with_capacity(LEVELS);
        for [a, b] in &self.encoder {
            x = a.forward(fw, x)?;
            x = b.forward(fw, x)?;
            skips.push(x);
            x = fw.graph.maxpool(x, factor)?.0;
        }
        x = self.bottleneck[0].forward(fw, x)?;
        x = self.bottleneck[1].forward(fw, x)?;
        for ((up, conv), skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let u = up.forward(fw, x)?;
            let cat = fw.graph.concat(u, skip)?;
            x = conv.forward(fw, cat)?;
        }
        self.head.forward(fw, x)
    }

    fn trace(&self, params: &ParamStore, mut s: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        let factor = self.rank.pool_factor();
        let mut skips = Vec::new();
        for [a, b] in &self.encoder {
            s = a.trace(params, s, cost)?;
            s = b.trace(params, s, cost)?;
            skips.push(s);
            s = pooled(s, factor);
            trace_activation(cost, s);
        }
        s = self.bottleneck[0].trace(params, s, cost)?;
        s = self.bottleneck[1].trace(params, s, cost)?;
        for ((up, conv), skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let mut u = up.trace(params, s, cost);
            u[1] += skip[1];
            trace_activation(cost, u);
            s = conv.trace(params, u, cost)?;
        }
        self.head.trace(params, s, cost)
    }
}

impl SegNet {
    fn forward(&self, fw: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        let factor = self.rank.pool_factor();
        let mut indices = Vec::with_capacity(LEVELS);
        for [a, b] in &self.encoder {
            x = a.forward(fw, x)?;
            x = b.forward(fw, x)?;
            let (p, idx) = fw.graph.maxpool(x, factor)?;
            indices.push(idx);
            x = p;
        }
        x = self.bottleneck[0].forward(fw, x)?;
        x = self.bottleneck[1].forward(fw, x)?;
        for ([a, b], idx) in self.decoder.iter().zip(indices.into_iter().rev()) {
            x = fw.graph.unpool(x, idx)?;
            x = a.forward(fw, x)?;
            x = b.forward(fw, x)?;
        }
        self.head.forward(fw, x)
    }

    fn trace(&self, params: &ParamStore, mut s: [usize; 5], cost: &mut CostTrace) -> Result<[usize; 5]> {
        let factor = self.rank.pool_factor();
        let mut pre_pool = Vec::new();
        for [a, b] in &self.encoder {
            s = a.trace(params, s, cost)?;
            s = b.trace(params, s, cost)?;
            pre_pool.push(s);
            s = pooled(s, factor);
            trace_activation(cost, s);
        }
        s = self.bottleneck[0].trace(params, s, cost)?;
        s = self.bottleneck[1].trace(params, s, cost)?;
        for ([a, b], before) in self.decoder.iter().zip(pre_pool.into_iter().rev()) {
            s = [s[0], s[1], before[2], before[3], before[4]];
            trace_activation(cost, s);
            s = a.trace(params, s, cost)?;
            s = b.trace(params, s, cost)?;
        }
        self.head.trace(params, s, cost)
    }
}
