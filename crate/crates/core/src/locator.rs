//! Attentional encoder-decoder with a limiting layer and a classification branch.
//!
//! The encoder is a stack of conv stages separated by 2x2 max pooling; its
//! deepest stage (the bottleneck) is squashed into `[0, 1]` by the limiting
//! layer. The decoder mirrors the encoder with nearest 2x enlargement and skip
//! connections, and ends in a 1x1 conv plus sigmoid, so the predicted map has
//! exactly the input resolution. The classifier reads the bottleneck.
//!
//! During training a face attention map (blurred region mask) is resized and
//! multiplied channel-wise into one encoder stage; at inference the map is the
//! all-one white map, which is the neutral element.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{convolve_separable, gaussian_kernel, resize_bilinear, BinaryMap, FakenessMap, Image};
use crate::nn::{
    cast, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid_array, sigmoid_backward,
    upsample2, upsample2_backward, Conv2d, Linear, Scalar,
};
use crate::texturegen::Label;

/// Blurred region mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    data: Array2<f32>,
}

impl AttentionMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                what: "attention map",
                value: v as f64,
            });
        }
        Ok(Self { data })
    }

    /// The all-one map used at inference.
    pub fn white(height: usize, width: usize) -> Self {
        Self {
            data: Array2::ones((height, width)),
        }
    }

    pub fn is_white(&self) -> bool {
        self.data.iter().all(|&v| v == 1.0)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Gaussian blur of a region mask (`sigma = radius / 2`), clipped to `[0, 1]`.
/// Radius 0 returns the mask itself.
pub fn build_attention(mask: &BinaryMap, blur_radius: usize) -> AttentionMap {
    let m = mask.to_map().into_data();
    let data = if blur_radius == 0 {
        m
    } else {
        let taps = gaussian_kernel(blur_radius, blur_radius as f64 / 2.0);
        convolve_separable(m.view(), &taps).mapv(|v| v.clamp(0.0, 1.0))
    };
    AttentionMap { data }
}

/// Multiplies every channel by the attention map resized (bilinear) to `h x w`.
pub fn apply_attention<F: Scalar>(features: &Array3<F>, attn: &AttentionMap) -> Array3<F> {
    let (_, h, w) = features.dim();
    let resized = resize_bilinear(attn.data.view(), h, w).mapv(|v| cast::<F>(v as f64));
    multiply_channels(features, &resized)
}

fn multiply_channels<F: Scalar>(features: &Array3<F>, plane: &Array2<F>) -> Array3<F> {
    let mut out = features.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch *= plane;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitingPlacement {
    /// Sigmoid on the bottleneck, between encoder and decoder.
    Encoder,
    /// Bottleneck stays ReLU; only the decoder's output sigmoid limits.
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub conv_channels: [usize; 4],
    pub fc: [usize; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv_channels: [64, 64, 128, 128],
            fc: [256, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_size: usize,
    /// Channels per encoder stage; `len - 1` pooling steps.
    pub enc_channels: Vec<usize>,
    /// Encoder stage receiving the attention multiply; `None` means the deepest.
    pub attention_stage: Option<usize>,
    pub limiting: LimitingPlacement,
    pub classifier: ClassifierConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            enc_channels: vec![16, 32, 64, 96, 128],
            attention_stage: None,
            limiting: LimitingPlacement::Encoder,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl ArchConfig {
    /// Compact 4-down/4-up network for small synthetic runs.
    pub fn compact(input_size: usize) -> Self {
        Self {
            input_size,
            enc_channels: vec![16, 24, 32, 48, 64],
            attention_stage: None,
            limiting: LimitingPlacement::Encoder,
            classifier: ClassifierConfig::default(),
        }
    }

    pub fn depth(&self) -> usize {
        self.enc_channels.len().saturating_sub(1)
    }

    pub fn attention_stage(&self) -> usize {
        self.attention_stage.unwrap_or(self.depth())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.input_size >> self.depth()
    }

    /// Length of the flattened bottleneck feature vector.
    pub fn feature_len(&self) -> usize {
        self.enc_channels.last().copied().unwrap_or(0) * self.bottleneck_side().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.len() < 2 || self.enc_channels.contains(&0) {
            return Err(Error::invalid("enc_channels", "need >= 2 non-zero stages"));
        }
        let div = 1usize << self.depth();
        if self.input_size % div != 0 || self.input_size / div < 2 {
            return Err(Error::invalid(
                "input_size",
                format!("{} must be a multiple of {div} with bottleneck side >= 2", self.input_size),
            ));
        }
        if self.attention_stage() > self.depth() {
            return Err(Error::invalid("attention_stage", "beyond deepest encoder stage"));
        }
        if self.classifier.conv_channels.contains(&0) || self.classifier.fc.contains(&0) {
            return Err(Error::invalid("classifier", "zero-width layer"));
        }
        Ok(())
    }
}

/// Intermediate values kept for the backward pass.
pub struct Trace<F> {
    enc_cols: Vec<Array2<F>>,
    enc_in_dims: Vec<(usize, usize, usize)>,
    pool_idx: Vec<Vec<usize>>,
    /// Stage outputs before the attention multiply.
    enc_act: Vec<Array3<F>>,
    /// Stage outputs after the attention multiply (what flows onward).
    enc_out: Vec<Array3<F>>,
    attn: Option<Array2<F>>,
    dec_cols: Vec<Array2<F>>,
    dec_act: Vec<Array3<F>>,
    head_cols: Array2<F>,
    map: Array3<F>,
    cls_cols: Vec<Array2<F>>,
    cls_act: Vec<Array3<F>>,
    cls_pool_idx: Vec<usize>,
    cls_pool_dims: (usize, usize, usize),
    fc_in: Vec<Array1<F>>,
    fc_act: Vec<Array1<F>>,
    score: F,
}

impl<F: Scalar> Trace<F> {
    /// Predicted map, `H x W`.
    pub fn map(&self) -> Array2<F> {
        self.map.index_axis(Axis(0), 0).to_owned()
    }

    pub fn score(&self) -> F {
        self.score
    }

    /// Flattened bottleneck before attention.
    pub fn features(&self) -> Array1<F> {
        let b = self.enc_act.last().expect("non-empty encoder");
        Array1::from_iter(b.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatorNetwork<F = f32> {
    config: ArchConfig,
    initialized: bool,
    pub(crate) enc: Vec<Conv2d<F>>,
    pub(crate) dec: Vec<Conv2d<F>>,
    pub(crate) head: Conv2d<F>,
    pub(crate) cls_conv: Vec<Conv2d<F>>,
    pub(crate) cls_fc: Vec<Linear<F>>,
}

impl<F: Scalar> LocatorNetwork<F> {
    /// Allocates zeroed parameters; the network refuses to run until initialized or loaded.
    pub fn with_config(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.enc_channels;
        let depth = config.depth();
        let mut enc = Vec::with_capacity(depth + 1);
        let mut cin = 3;
        for &c in ch {
            enc.push(Conv2d::zeros(cin, c, 3));
            cin = c;
        }
        let mut dec = Vec::with_capacity(depth);
        for l in 0..depth {
            dec.push(Conv2d::zeros(ch[l + 1] + ch[l], ch[l], 3));
        }
        let head = Conv2d::zeros(ch[0], 1, 1);
        let cc = config.classifier.conv_channels;
        let mut cls_conv = Vec::with_capacity(4);
        let mut cin = ch[depth];
        for &c in &cc {
            cls_conv.push(Conv2d::zeros(cin, c, 3));
            cin = c;
        }
        let pooled = (config.bottleneck_side() / 2).pow(2) * cc[3];
        let fc = config.classifier.fc;
        let cls_fc = vec![
            Linear::zeros(pooled, fc[0]),
            Linear::zeros(fc[0], fc[1]),
            Linear::zeros(fc[1], 1),
        ];
        Ok(Self {
            config,
            initialized: false,
            enc,
            dec,
            head,
            cls_conv,
            cls_fc,
        })
    }

    /// He-normal initialization from `seed`; the map head starts near zero fakeness.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let mut net = Self::with_config(config)?;
        net.initialize(seed);
        Ok(net)
    }

    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, crate::rng::streams::INIT, 0));
        for c in self
            .enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .chain(self.cls_conv.iter_mut())
        {
            c.init(&mut rng);
        }
        for l in self.cls_fc.iter_mut() {
            l.init(&mut rng);
        }
        self.head.bias.fill(cast(HEAD_BIAS_INIT));
        self.initialized = true;
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Same architecture, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::with_config(self.config.clone()).expect("config already validated")
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Every parameter tensor, in a fixed order, with a stable name.
    pub fn params(&self) -> Vec<(String, &[F])> {
        fn conv<'a, F: Scalar>(out: &mut Vec<(String, &'a [F])>, name: String, c: &'a Conv2d<F>) {
            out.push((format!("{name}.weight"), c.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), c.bias.as_slice().expect("standard layout")));
        }
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            conv(&mut out, format!("enc.{i}"), c);
        }
        for (i, c) in self.dec.iter().enumerate() {
            conv(&mut out, format!("dec.{i}"), c);
        }
        conv(&mut out, "head".into(), &self.head);
        for (i, c) in self.cls_conv.iter().enumerate() {
            conv(&mut out, format!("cls_conv.{i}"), c);
        }
        for (i, l) in self.cls_fc.iter().enumerate() {
            out.push((format!("cls_fc.{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("cls_fc.{i}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for c in self
            .enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .chain(self.cls_conv.iter_mut())
        {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        for l in self.cls_fc.iter_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn scale_params(&mut self, factor: F) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// `C x H x W` tensor from an image, resized to the input size.
    pub fn prepare_input(&self, image: &Image) -> Result<Array3<F>> {
        let n = self.config.input_size;
        let img = image.resized(n, n)?;
        Ok(Array3::from_shape_fn((3, n, n), |(c, y, x)| {
            cast(2.0 * img.data()[[y, x, c]] as f64 - 1.0)
        }))
    }

    fn attention_plane(&self, attn: Option<&AttentionMap>) -> Option<Array2<F>> {
        let attn = attn.filter(|a| !a.is_white())?;
        let side = self.config.input_size >> self.config.attention_stage();
        Some(resize_bilinear(attn.data.view(), side, side).mapv(|v| cast::<F>(v as f64)))
    }

    /// Full forward pass keeping everything the backward pass needs.
    pub fn forward_trace(&self, x: &Array3<F>, attn: Option<&AttentionMap>) -> Result<Trace<F>> {
        if !self.initialized {
            return Err(Error::Runtime("network is not initialized".into()));
        }
        let n = self.config.input_size;
        if x.dim() != (3, n, n) {
            return Err(Error::invalid("input", format!("expected 3x{n}x{n}, got {:?}", x.dim())));
        }
        let depth = self.config.depth();
        let att_stage = self.config.attention_stage();
        let attn = self.attention_plane(attn);

        let mut enc_cols = Vec::with_capacity(depth + 1);
        let mut enc_in_dims = Vec::with_capacity(depth + 1);
        let mut pool_idx = Vec::with_capacity(depth);
        let mut enc_act = Vec::with_capacity(depth + 1);
        let mut enc_out: Vec<Array3<F>> = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let inp = if l == 0 {
                x.clone()
            } else {
                let (p, idx) = maxpool2(&enc_out[l - 1]);
                pool_idx.push(idx);
                p
            };
            enc_in_dims.push(inp.dim());
            let (z, cols) = self.enc[l].forward(&inp);
            enc_cols.push(cols);
            let act = if l == depth && self.config.limiting == LimitingPlacement::Encoder {
                sigmoid_array(z)
            } else {
                relu(z)
            };
            let out = match (&attn, l == att_stage) {
                (Some(a), true) => multiply_channels(&act, a),
                _ => act.clone(),
            };
            enc_act.push(act);
            enc_out.push(out);
        }

        let mut dec_cols = vec![Array2::zeros((0, 0)); depth];
        let mut dec_act = vec![Array3::zeros((0, 0, 0)); depth];
        let mut d = enc_out[depth].clone();
        for l in (0..depth).rev() {
            let u = upsample2(&d);
            let cat = ndarray::concatenate(Axis(0), &[u.view(), enc_out[l].view()]).expect("matching spatial dims");
            let (z, cols) = self.dec[l].forward(&cat);
            dec_cols[l] = cols;
            d = relu(z);
            dec_act[l] = d.clone();
        }
        let (z, head_cols) = self.head.forward(&d);
        let map = sigmoid_array(z);

        let mut c = enc_act[depth].clone();
        let mut cls_cols = Vec::with_capacity(4);
        let mut cls_act = Vec::with_capacity(4);
        for conv in &self.cls_conv {
            let (z, cols) = conv.forward(&c);
            cls_cols.push(cols);
            c = relu(z);
            cls_act.push(c.clone());
        }
        let cls_pool_dims = c.dim();
        let (pooled, cls_pool_idx) = maxpool2(&c);
        let mut v = Array1::from_iter(pooled.iter().cloned());
        let mut fc_in = Vec::with_capacity(3);
        let mut fc_act = Vec::with_capacity(3);
        for (i, fc) in self.cls_fc.iter().enumerate() {
            fc_in.push(v.clone());
            let z = fc.forward(&v);
            v = if i + 1 == self.cls_fc.len() { sigmoid_array(z) } else { relu(z) };
            fc_act.push(v.clone());
        }
        let score = v[0];

        Ok(Trace {
            enc_cols,
            enc_in_dims,
            pool_idx,
            enc_act,
            enc_out,
            attn,
            dec_cols,
            dec_act,
            head_cols,
            map,
            cls_cols,
            cls_act,
            cls_pool_idx,
            cls_pool_dims,
            fc_in,
            fc_act,
            score,
        })
    }

    /// Backpropagates `dL/dmap` and `dL/dscore`, accumulating into `grads`.
    pub fn backward(&self, trace: &Trace<F>, dmap: &Array2<F>, dscore: F, grads: &mut Self) {
        let depth = self.config.depth();
        let att_stage = self.config.attention_stage();
        let ch = &self.config.enc_channels;

        // Map path.
        let dmap3 = dmap.clone().insert_axis(Axis(0));
        let dz = sigmoid_backward(&trace.map, dmap3);
        let mut dd = self.head.backward(&trace.head_cols, &dz, ch[0], &mut grads.head);
        let mut d_enc_out: Vec<Option<Array3<F>>> = vec![None; depth + 1];
        for l in 0..depth {
            let dz = relu_backward(&trace.dec_act[l], dd);
            let cin = self.dec[l].weight.dim().1;
            let dcat = self.dec[l].backward(&trace.dec_cols[l], &dz, cin, &mut grads.dec[l]);
            let up_c = cin - ch[l];
            let du = dcat.slice(s![..up_c, .., ..]).to_owned();
            let dskip = dcat.slice(s![up_c.., .., ..]).to_owned();
            accumulate(&mut d_enc_out[l], dskip);
            dd = upsample2_backward(&du);
        }
        accumulate(&mut d_enc_out[depth], dd);

        // Classifier path, into the bottleneck before attention.
        let mut dv = Array1::from_elem(1, dscore);
        for i in (0..self.cls_fc.len()).rev() {
            let dz = if i + 1 == self.cls_fc.len() {
                sigmoid_backward(&trace.fc_act[i], dv)
            } else {
                relu_backward(&trace.fc_act[i], dv)
            };
            dv = self.cls_fc[i].backward(&trace.fc_in[i], &dz, &mut grads.cls_fc[i]);
        }
        let pooled_dims = {
            let (c, h, w) = trace.cls_pool_dims;
            (c, h / 2, w / 2)
        };
        let dpooled = dv.into_shape_with_order(pooled_dims).expect("pooled size");
        let mut dc = maxpool2_backward(&dpooled, &trace.cls_pool_idx, trace.cls_pool_dims);
        for i in (0..self.cls_conv.len()).rev() {
            let dz = relu_backward(&trace.cls_act[i], dc);
            let cin = self.cls_conv[i].weight.dim().1;
            dc = self.cls_conv[i].backward(&trace.cls_cols[i], &dz, cin, &mut grads.cls_conv[i]);
        }
        let mut d_cls_bottleneck = Some(dc);

        // Encoder.
        for l in (0..=depth).rev() {
            let d_out = d_enc_out[l].take().unwrap_or_else(|| Array3::zeros(trace.enc_out[l].dim()));
            let mut d_act = match (&trace.attn, l == att_stage) {
                (Some(a), true) => multiply_channels(&d_out, a),
                _ => d_out,
            };
            if l == depth {
                if let Some(dc) = d_cls_bottleneck.take() {
                    d_act += &dc;
                }
            }
            let dz = if l == depth && self.config.limiting == LimitingPlacement::Encoder {
                sigmoid_backward(&trace.enc_act[l], d_act)
            } else {
                relu_backward(&trace.enc_act[l], d_act)
            };
            let cin = trace.enc_in_dims[l].0;
            let dinp = self.enc[l].backward(&trace.enc_cols[l], &dz, cin, &mut grads.enc[l]);
            if l > 0 {
                let dprev = maxpool2_backward(&dinp, &trace.pool_idx[l - 1], trace.enc_out[l - 1].dim());
                accumulate(&mut d_enc_out[l - 1], dprev);
            }
        }
    }

    /// Predicted map at the network's input resolution and the fake score.
    pub fn forward(&self, image: &Image, attn: Option<&AttentionMap>) -> Result<(FakenessMap, f64)> {
        let x = self.prepare_input(image)?;
        let t = self.forward_trace(&x, attn)?;
        let map = FakenessMap::from_clamped(t.map().mapv(|v| v.to_f32().unwrap_or(0.0)))?;
        Ok((map, t.score.to_f64().unwrap_or(0.0)))
    }

    /// Flattened bottleneck (encoder output) with the white attention map.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let x = self.prepare_input(image)?;
        let t = self.forward_trace(&x, None)?;
        Ok(t.features().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect())
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Array3<F>>, g: Array3<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Fake iff `score >= cutoff`.
pub fn classify(score: f64, cutoff: f64) -> Label {
    if score >= cutoff {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Initial map-head bias; sigmoid(-9) is far below half an 8-bit level.
pub const HEAD_BIAS_INIT: f64 = -9.0;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

/// JSON sidecar describing a weights blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub attention_stage: usize,
    pub limiting: LimitingPlacement,
    pub training_seed: u64,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl LocatorNetwork<f32> {
    /// Writes `weights.bin` (little-endian f32, tensors in `params()` order) and the sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, training_seed: u64, epoch: Option<usize>, extra: serde_json::Value) -> Result<CheckpointMeta> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let params = self.params();
        let mut blob = Vec::with_capacity(self.param_count() * 4);
        for (_, p) in &params {
            for v in p.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = CheckpointMeta {
            arch: self.config.clone(),
            attention_stage: self.config.attention_stage(),
            limiting: self.config.limiting,
            training_seed,
            epoch,
            tensors: params
                .iter()
                .map(|(n, p)| TensorEntry {
                    name: n.clone(),
                    len: p.len(),
                })
                .collect(),
            weights_sha256: hex_digest(&blob),
            extra,
        };
        fs::File::create(dir.join(WEIGHTS_FILE))?.write_all(&blob)?;
        fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join(SIDECAR_FILE))?)?;
        let mut blob = Vec::new();
        fs::File::open(dir.join(WEIGHTS_FILE))?.read_to_end(&mut blob)?;
        if hex_digest(&blob) != meta.weights_sha256 {
            return Err(Error::Data("checkpoint weights digest mismatch".into()));
        }
        let mut net = Self::with_config(meta.arch.clone())?;
        let names: Vec<(String, usize)> = net.params().iter().map(|(n, p)| (n.clone(), p.len())).collect();
        if names.len() != meta.tensors.len()
            || names.iter().zip(&meta.tensors).any(|((n, l), t)| *n != t.name || *l != t.len)
        {
            return Err(Error::Data("checkpoint tensors do not match architecture".into()));
        }
        let total: usize = names.iter().map(|(_, l)| l).sum();
        if blob.len() != total * 4 {
            return Err(Error::Data(format!("weights blob has {} bytes, expected {}", blob.len(), total * 4)));
        }
        let mut off = 0;
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v = f32::from_le_bytes(blob[off..off + 4].try_into().expect("4 bytes"));
                off += 4;
            }
        }
        net.initialized = true;
        Ok((net, meta))
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Mini architecture used by gradient checks.
pub fn miniature_config() -> ArchConfig {
    ArchConfig {
        input_size: 8,
        enc_channels: vec![2, 3, 3],
        attention_stage: None,
        limiting: LimitingPlacement::Encoder,
        classifier: ClassifierConfig {
            conv_channels: [2, 2, 2, 2],
            fc: [4, 3],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use rand::Rng;

    fn random_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((n, n, 3), |_| rng.gen_range(0.0..=1.0))).unwrap()
    }

    #[test]
    fn attention_examples() {
        let ones = BinaryMap::from_fn(9, 9, |_, _| true);
        for r in [0, 1, 3] {
            assert!(build_attention(&ones, r).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
        let zeros = BinaryMap::from_fn(9, 9, |_, _| false);
        assert!(build_attention(&zeros, 2).data().iter().all(|&v| v == 0.0));

        let dot = BinaryMap::from_fn(9, 9, |y, x| y == 4 && x == 4);
        let a = build_attention(&dot, 2);
        let taps = gaussian_kernel(2, 1.0);
        for y in 0..9 {
            for x in 0..9 {
                let (dy, dx) = (y as isize - 4, x as isize - 4);
                let v = a.data()[[y, x]];
                if dy.abs() <= 2 && dx.abs() <= 2 {
                    let expect = taps[(dy + 2) as usize] * taps[(dx + 2) as usize];
                    assert!(v > 0.0);
                    assert!((v - expect).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        let peak = a.data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(peak, a.data()[[4, 4]]);
        assert_eq!(build_attention(&dot, 0).data(), &dot.to_map().into_data());
    }

    #[test]
    fn apply_attention_examples() {
        let f = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y * 4 + x) as f64 * 0.1);
        assert_eq!(apply_attention(&f, &AttentionMap::white(8, 8)), f);
        let zero = AttentionMap::new(Array2::zeros((8, 8))).unwrap();
        assert!(apply_attention(&f, &zero).iter().all(|&v| v == 0.0));
        let half = AttentionMap::new(Array2::from_elem((8, 8), 0.5)).unwrap();
        assert_eq!(apply_attention(&f, &half), f.mapv(|v| v * 0.5));
    }

    #[test]
    fn classify_cutoff() {
        assert_eq!(classify(0.9, 0.5), Label::Fake);
        assert_eq!(classify(0.1, 0.5), Label::Real);
        assert_eq!(classify(0.5, 0.5), Label::Fake);
    }

    #[test]
    fn forward_contract_and_white_neutrality() {
        let net = LocatorNetwork::<f32>::new(ArchConfig::compact(32), 3).unwrap();
        let img = random_image(1, 40);
        let (map, score) = net.forward(&img, None).unwrap();
        assert_eq!(map.dims(), (32, 32));
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((0.0..=1.0).contains(&score));
        let (map_w, score_w) = net.forward(&img, Some(&AttentionMap::white(32, 32))).unwrap();
        assert_eq!(map, map_w);
        assert_eq!(score.to_bits(), score_w.to_bits());
    }

    #[test]
    fn uninitialized_network_errors() {
        let net = LocatorNetwork::<f32>::with_config(ArchConfig::compact(32)).unwrap();
        assert!(matches!(net.forward(&random_image(0, 32), None), Err(Error::Runtime(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ArchConfig::compact(64);
        c.input_size = 60;
        assert!(LocatorNetwork::<f32>::new(c, 0).is_err());
        let mut c = ArchConfig::compact(64);
        c.attention_stage = Some(9);
        assert!(c.validate().is_err());
        assert!(ArchConfig::default().validate().is_ok());
        assert_eq!(ArchConfig::compact(64).feature_len(), 64 * 16);
    }

    #[test]
    fn attention_changes_training_forward() {
        let net = LocatorNetwork::<f64>::new(miniature_config(), 1).unwrap();
        let x = net.prepare_input(&random_image(2, 8)).unwrap();
        let mask = BinaryMap::from_fn(8, 8, |y, _| y < 4);
        let a = build_attention(&mask, 0);
        let t0 = net.forward_trace(&x, None).unwrap();
        let t1 = net.forward_trace(&x, Some(&a)).unwrap();
        assert_ne!(t0.map(), t1.map());
        // Classifier reads the bottleneck before attention.
        assert_eq!(t0.score(), t1.score());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = LocatorNetwork::<f32>::new(ArchConfig::compact(32), 9).unwrap();
        net.save(dir.path(), 9, Some(1), serde_json::Value::Null).unwrap();
        let (back, meta) = LocatorNetwork::<f32>::load(dir.path()).unwrap();
        assert_eq!(meta.training_seed, 9);
        assert_eq!(back, net);
        let img = random_image(5, 16);
        let (m0, s0) = net.forward(&img, None).unwrap();
        let (m1, s1) = back.forward(&img, None).unwrap();
        assert_eq!(m0, m1);
        assert_eq!(s0.to_bits(), s1.to_bits());
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = LocatorNetwork::<f32>::new(ArchConfig::compact(32), 9).unwrap();
        net.save(dir.path(), 9, None, serde_json::Value::Null).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob[10] ^= 0xff;
        fs::write(&p, blob).unwrap();
        assert!(matches!(LocatorNetwork::<f32>::load(dir.path()), Err(Error::Data(_))));
    }
}
