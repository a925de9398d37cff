//! Class-conditional generator, dual-head discriminator and contrastive projection heads.
//!
//! Every network owns a [`ParamStore`] whose tensors are created from a
//! [`LayerSpec`] list, so the architecture tables and the parameters cannot
//! drift apart. Forward passes record onto a caller-supplied [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::config::{InitScheme, LayerId};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::types::{DomainLabel, Image, NUM_DOMAINS};

pub const INIT_STD: f32 = 0.02;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const ENC_RES_BLOCKS: usize = 4;
pub const DEC_RES_BLOCKS: usize = 4;
/// Fan-in init variance factor of the last conv in each decoder residual branch.
pub const DEC_BRANCH_SCALE: f32 = 0.1;
/// Generator inputs are reflect-padded to a multiple of this.
pub const GEN_MULTIPLE: usize = 4;
/// Discriminator inputs are reflect-padded to a multiple of this.
pub const DISC_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

/// One parameterized layer. Linear layers use a `1x1` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub norm: Norm,
    pub act: Act,
    /// Variance multiplier under [`InitScheme::FanIn`]; below 1 on residual branches
    /// that are not followed by a normalization.
    pub init_scale: f32,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, norm: Norm, act: Act) -> Self {
        Self { name: name.into(), c_in, c_out, kernel: (k, k), stride, norm, act, init_scale: 1.0 }
    }

    fn scaled(mut self, init_scale: f32) -> Self {
        self.init_scale = init_scale;
        self
    }
}

fn init_store(specs: &[LayerSpec], linear: bool, seed: u64, init: InitScheme) -> ParamStore {
    let mut rng = seed::rng(seed, Stream::NetInit);
    let mut store = ParamStore::new();
    for s in specs {
        let shape: Vec<usize> =
            if linear { vec![s.c_out, s.c_in] } else { vec![s.c_out, s.c_in, s.kernel.0, s.kernel.1] };
        let std = match init {
            InitScheme::Normal => INIT_STD,
            InitScheme::FanIn => {
                let gain = match s.act {
                    Act::Relu | Act::LeakyRelu => 2.0,
                    Act::None | Act::Tanh => 1.0,
                };
                (gain * s.init_scale / (s.c_in * s.kernel.0 * s.kernel.1) as f32).sqrt()
            }
        };
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        store.insert(format!("{}.weight", s.name), Tensor::new(shape, w));
        store.insert(format!("{}.bias", s.name), Tensor::zeros([s.c_out]));
    }
    store
}

fn weight(g: &mut Graph, store: &ParamStore, layer: &str) -> (Var, Var) {
    let w = store.id(&format!("{layer}.weight")).unwrap_or_else(|| panic!("missing {layer}.weight"));
    let b = store.id(&format!("{layer}.bias")).unwrap_or_else(|| panic!("missing {layer}.bias"));
    (g.param(store, w), g.param(store, b))
}

fn conv(g: &mut Graph, store: &ParamStore, layer: &str, x: Var, stride: usize, pad: usize) -> Var {
    let (w, b) = weight(g, store, layer);
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Symmetric padding amounts `[top, bottom, left, right]` to reach a multiple of `m`.
pub fn pad_to_multiple(h: usize, w: usize, m: usize) -> [usize; 4] {
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    [ph / 2, ph - ph / 2, pw / 2, pw - pw / 2]
}

fn label_planes(labels: &[DomainLabel], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(labels.len() * NUM_DOMAINS * h * w);
    for l in labels {
        for v in l.one_hot() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
    }
    Tensor::new([labels.len(), NUM_DOMAINS, h, w], data)
}

/// Encoder taps of one forward pass, indexed by [`LayerId::depth`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub taps: [Var; 7],
    /// Input size before padding.
    pub size: (usize, usize),
    pub pads: [usize; 4],
}

impl Encoded {
    pub fn tap(&self, layer: LayerId) -> Var {
        self.taps[layer.depth()]
    }

    pub fn bottleneck(&self) -> Var {
        self.taps[LayerId::Res4.depth()]
    }
}

/// Encoder/decoder translator conditioned on the target domain.
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamStore,
    width: usize,
}

impl Generator {
    pub fn new(width: usize, seed: u64) -> Self {
        Self::with_init(width, seed, InitScheme::Normal)
    }

    pub fn with_init(width: usize, seed: u64, init: InitScheme) -> Self {
        Self { params: init_store(&Self::layer_specs(width), false, seed, init), width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channels of each encoder tap for a given base width.
    pub fn tap_channels(width: usize, layer: LayerId) -> usize {
        match layer {
            LayerId::Input => 1,
            LayerId::Conv1 => 2 * width,
            _ => 4 * width,
        }
    }

    pub fn layer_specs(w: usize) -> Vec<LayerSpec> {
        use Act::*;
        let (c2, c4, cd) = (2 * w, 4 * w, 4 * w + NUM_DOMAINS);
        let mut v = vec![
            LayerSpec::conv("gen.enc.conv0", 1, w, 7, 1, Norm::Instance, Relu),
            LayerSpec::conv("gen.enc.conv1", w, c2, 4, 2, Norm::Instance, Relu),
            LayerSpec::conv("gen.enc.conv2", c2, c4, 4, 2, Norm::Instance, Relu),
        ];
        for i in 1..=ENC_RES_BLOCKS {
            v.push(LayerSpec::conv(format!("gen.enc.res{i}.conv_a"), c4, c4, 3, 1, Norm::Instance, Relu));
            v.push(LayerSpec::conv(format!("gen.enc.res{i}.conv_b"), c4, c4, 3, 1, Norm::Instance, None));
        }
        for i in 1..=DEC_RES_BLOCKS {
            v.push(LayerSpec::conv(format!("gen.dec.res{i}.conv_a"), cd, cd, 3, 1, Norm::None, Relu));
            v.push(
                LayerSpec::conv(format!("gen.dec.res{i}.conv_b"), cd, cd, 3, 1, Norm::None, None)
                    .scaled(DEC_BRANCH_SCALE),
            );
        }
        v.push(LayerSpec::conv("gen.dec.up1", cd, c2, 3, 1, Norm::None, Relu));
        v.push(LayerSpec::conv("gen.dec.up2", c2, w, 3, 1, Norm::None, Relu));
        v.push(LayerSpec::conv("gen.dec.out", w, 1, 3, 1, Norm::None, Tanh));
        v
    }

    /// Runs the label-free encoder on `[N, 1, H, W]` input.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Encoded {
        let p = &self.params;
        let (_, _, h, w) = g.value(x).dims4();
        let pads = pad_to_multiple(h, w, GEN_MULTIPLE);
        let input = g.reflect_pad(x, pads);
        let mut taps = [input; 7];

        let y = g.reflect_pad(input, [3; 4]);
        let y = conv(g, p, "gen.enc.conv0", y, 1, 0);
        let y = g.instance_norm(y);
        let y = g.relu(y);
        let y = conv(g, p, "gen.enc.conv1", y, 2, 1);
        let y = g.instance_norm(y);
        let y = g.relu(y);
        taps[LayerId::Conv1.depth()] = y;
        let y = conv(g, p, "gen.enc.conv2", y, 2, 1);
        let y = g.instance_norm(y);
        let mut y = g.relu(y);
        taps[LayerId::Conv2.depth()] = y;
        for i in 1..=ENC_RES_BLOCKS {
            let r = g.reflect_pad(y, [1; 4]);
            let r = conv(g, p, &format!("gen.enc.res{i}.conv_a"), r, 1, 0);
            let r = g.instance_norm(r);
            let r = g.relu(r);
            let r = g.reflect_pad(r, [1; 4]);
            let r = conv(g, p, &format!("gen.enc.res{i}.conv_b"), r, 1, 0);
            let r = g.instance_norm(r);
            y = g.add(y, r);
            taps[LayerId::Conv2.depth() + i] = y;
        }
        Encoded { taps, size: (h, w), pads }
    }

    /// Decodes the bottleneck towards one target label per sample; output is `[N, 1, H, W]`.
    pub fn decode(&self, g: &mut Graph, enc: &Encoded, labels: &[DomainLabel]) -> Var {
        let p = &self.params;
        let z = enc.bottleneck();
        let (n, _, bh, bw) = g.value(z).dims4();
        assert_eq!(n, labels.len(), "one target label per sample");
        let planes = g.constant(label_planes(labels, bh, bw));
        let mut y = g.concat_channels(z, planes);
        for i in 1..=DEC_RES_BLOCKS {
            let r = g.reflect_pad(y, [1; 4]);
            let r = conv(g, p, &format!("gen.dec.res{i}.conv_a"), r, 1, 0);
            let r = g.relu(r);
            let r = g.reflect_pad(r, [1; 4]);
            let r = conv(g, p, &format!("gen.dec.res{i}.conv_b"), r, 1, 0);
            y = g.add(y, r);
        }
        for stage in ["gen.dec.up1", "gen.dec.up2"] {
            y = conv(g, p, stage, y, 1, 1);
            y = g.upsample2x(y);
            y = g.relu(y);
        }
        let y = conv(g, p, "gen.dec.out", y, 1, 1);
        let y = g.tanh(y);
        let (h, w) = enc.size;
        g.crop(y, enc.pads[0], enc.pads[2], h, w)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, labels: &[DomainLabel]) -> (Var, Encoded) {
        let enc = self.encode(g, x);
        let out = self.decode(g, &enc, labels);
        (out, enc)
    }

    /// Inference translation of a single image.
    pub fn translate(&self, x: &Image, target: DomainLabel) -> Result<Image> {
        let mut g = Graph::new();
        g.freeze(&self.params);
        let xv = g.constant(x.to_tensor());
        let (out, _) = self.forward(&mut g, xv, &[target]);
        Image::from_tensor(g.value(out), 0)
    }

    /// Encoder feature maps `[1, C_l, H_l, W_l]` of one image.
    pub fn enc_features(&self, x: &Image, layers: &[LayerId]) -> Vec<Tensor> {
        let mut g = Graph::new();
        g.freeze(&self.params);
        let xv = g.constant(x.to_tensor());
        let enc = self.encode(&mut g, xv);
        layers.iter().map(|&l| g.value(enc.tap(l)).clone()).collect()
    }
}

/// Patch discriminator with an adversarial map head and a domain classifier head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    width: usize,
    /// Padded input size the classifier kernel was built for.
    padded: (usize, usize),
}

/// Discriminator outputs: `[N, 1, Hp/16, Wp/16]` patch map and `[N, 3, 1, 1]` logits.
#[derive(Clone, Copy, Debug)]
pub struct DiscOut {
    pub patch: Var,
    pub logits: Var,
}

impl Discriminator {
    pub fn new(width: usize, image_size: (usize, usize), seed: u64) -> Self {
        Self::with_init(width, image_size, seed, InitScheme::Normal)
    }

    pub fn with_init(width: usize, image_size: (usize, usize), seed: u64, init: InitScheme) -> Self {
        let pads = pad_to_multiple(image_size.0, image_size.1, DISC_MULTIPLE);
        let padded = (image_size.0 + pads[0] + pads[1], image_size.1 + pads[2] + pads[3]);
        Self { params: init_store(&Self::layer_specs(width, padded), false, seed, init), width, padded }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn padded_size(&self) -> (usize, usize) {
        self.padded
    }

    pub fn layer_specs(d: usize, padded: (usize, usize)) -> Vec<LayerSpec> {
        let mut v = vec![
            LayerSpec::conv("disc.conv1", 1, d, 4, 2, Norm::None, Act::LeakyRelu),
            LayerSpec::conv("disc.conv2", d, 2 * d, 4, 2, Norm::None, Act::LeakyRelu),
            LayerSpec::conv("disc.conv3", 2 * d, 4 * d, 4, 2, Norm::None, Act::LeakyRelu),
            LayerSpec::conv("disc.conv4", 4 * d, 8 * d, 4, 2, Norm::None, Act::LeakyRelu),
            LayerSpec::conv("disc.adv", 8 * d, 1, 3, 1, Norm::None, Act::None),
        ];
        v.push(LayerSpec {
            name: "disc.cls".into(),
            c_in: 8 * d,
            c_out: NUM_DOMAINS,
            kernel: (padded.0 / DISC_MULTIPLE, padded.1 / DISC_MULTIPLE),
            stride: 1,
            norm: Norm::None,
            act: Act::None,
            init_scale: 1.0,
        });
        v
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DiscOut> {
        let p = &self.params;
        let (_, _, h, w) = g.value(x).dims4();
        let pads = pad_to_multiple(h, w, DISC_MULTIPLE);
        if (h + pads[0] + pads[1], w + pads[2] + pads[3]) != self.padded {
            return Err(Error::Shape(format!("discriminator built for padded size {:?}, got {h}x{w}", self.padded)));
        }
        let mut y = g.reflect_pad(x, pads);
        for layer in ["disc.conv1", "disc.conv2", "disc.conv3", "disc.conv4"] {
            y = conv(g, p, layer, y, 2, 1);
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let patch = conv(g, p, "disc.adv", y, 1, 1);
        let logits = conv(g, p, "disc.cls", y, 1, 0);
        Ok(DiscOut { patch, logits })
    }
}

/// Per-layer MLPs mapping encoder features to unit-norm embeddings.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub params: ParamStore,
    layers: Vec<LayerId>,
}

impl ProjectionHeads {
    pub fn new(layers: &[LayerId], gen_width: usize, hidden: usize, embed: usize, seed: u64) -> Self {
        Self::with_init(layers, gen_width, hidden, embed, seed, InitScheme::Normal)
    }

    pub fn with_init(
        layers: &[LayerId],
        gen_width: usize,
        hidden: usize,
        embed: usize,
        seed: u64,
        init: InitScheme,
    ) -> Self {
        let params = init_store(&Self::layer_specs(layers, gen_width, hidden, embed), true, seed, init);
        Self { params, layers: layers.to_vec() }
    }

    pub fn layers(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn layer_specs(layers: &[LayerId], gen_width: usize, hidden: usize, embed: usize) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for &l in layers {
            let c = Generator::tap_channels(gen_width, l);
            let name = |k: usize| format!("proj.{}.fc{k}", l.as_str());
            v.push(LayerSpec::conv(name(1), c, hidden, 1, 1, Norm::None, Act::Relu));
            v.push(LayerSpec::conv(name(2), hidden, hidden, 1, 1, Norm::None, Act::Relu));
            v.push(LayerSpec::conv(name(3), hidden, embed, 1, 1, Norm::None, Act::None));
        }
        v
    }

    /// Embeds the features of batch element `sample` at `locs`; rows are unit-norm.
    pub fn project(&self, g: &mut Graph, layer: LayerId, feat: Var, sample: usize, locs: &[usize]) -> Var {
        assert!(self.layers.contains(&layer), "no projection head for layer {}", layer.as_str());
        let p = &self.params;
        let mut y = g.gather(feat, sample, locs);
        for k in 1..=3 {
            let (w, b) = weight(g, p, &format!("proj.{}.fc{k}", layer.as_str()));
            y = g.linear(y, w, b);
            if k < 3 {
                y = g.relu(y);
            }
        }
        g.l2_normalize_rows(y)
    }
}

/// Draws `min(num_patches, H·W)` distinct flat locations for each feature map.
pub fn sample_locations<R: Rng>(
    spatial: &[(usize, usize)],
    num_patches: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if num_patches < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patches per layer for contrastive negatives, got {num_patches}"
        )));
    }
    Ok(spatial
        .iter()
        .map(|&(h, w)| {
            let n = h * w;
            rand::seq::index::sample(rng, n, num_patches.min(n)).into_vec()
        })
        .collect())
}

/// Spatial sizes of the given taps, for [`sample_locations`].
pub fn tap_sizes(g: &Graph, enc: &Encoded, layers: &[LayerId]) -> Vec<(usize, usize)> {
    layers
        .iter()
        .map(|&l| {
            let s = g.shape(enc.tap(l));
            (s[2], s[3])
        })
        .collect()
}
