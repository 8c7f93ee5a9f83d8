//! Forward-only rectification network.
//!
//! Pipeline: a strided convolutional feature extractor (`288 -> 36 x 36 x C`),
//! a three-stage transformer encoder with pooled keys/values (`36, 18, 9`),
//! a foreground segmentation head producing two-class logits at full
//! resolution, a decoder whose self-attention logits carry a rank-1 bias
//! from the smoothed foreground mask, and an upsampler that turns the coarse
//! offsets into a full-resolution backward field.
//!
//! All arithmetic is `f64`; parameters are stored as `f32` in a
//! [`WeightBundle`].

mod layers;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DeformationField, Direction};
use crate::objective::smooth_mask;
use crate::raster::Raster;

pub use layers::AttentionMaps;
pub use weights::{ParamArray, WeightBundle};

use layers::{
    add, attention, avg_pool, conv2d, gelu, layer_norm, linear, pool_to, relu, resize_bilinear, AttentionWeights,
    MaskBias,
};

/// Width of the segmentation head's unified feature maps.
pub(crate) const SEG_CHANNELS: usize = 32;

/// Bound on the coarse offsets: `OFFSET_SCALE * tanh(.)`.
pub const OFFSET_SCALE: f64 = 0.25;

/// Dense `height x width x channels` grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl TensorMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "tensor data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let k = (y * self.width + x) * self.channels;
        &self.data[k..k + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &TensorMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
    Convex,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "convex" => Ok(Self::Convex),
            other => Err(Error::invalid(format!("unknown upsample mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub feat_stride: usize,
    pub feat_channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub spw_window: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    /// Hidden width of the transformer MLPs as a multiple of `feat_channels`.
    pub mlp_ratio: usize,
    pub upsample: UpsampleMode,
    /// When false the decoder's mask-bias term is not evaluated at all.
    pub mask_bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 288,
            feat_stride: 8,
            feat_channels: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 4,
            d_head: 64,
            sigma: 0.005,
            gamma: 0.8,
            spw_window: 2,
            patch_kernel: 3,
            patch_stride: 2,
            mlp_ratio: 2,
            upsample: UpsampleMode::Convex,
            mask_bias: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.feat_stride != 8 {
            return bad(format!("feat_stride must be 8 (three stride-2 stages), got {}", self.feat_stride));
        }
        if self.encoder_layers != 3 || self.decoder_layers != 3 {
            return bad(format!(
                "encoder/decoder depth is fixed at 3, got {}/{}",
                self.encoder_layers, self.decoder_layers
            ));
        }
        if self.patch_kernel != 3 || self.patch_stride != 2 {
            return bad(format!(
                "patch embedding must be kernel 3 stride 2, got {}/{}",
                self.patch_kernel, self.patch_stride
            ));
        }
        let unit = self.feat_stride * 4;
        if self.input_size == 0 || self.input_size % unit != 0 {
            return bad(format!("input_size {} must be a positive multiple of {unit}", self.input_size));
        }
        if self.heads == 0 || self.feat_channels % self.heads != 0 || self.heads * self.d_head != self.feat_channels {
            return bad(format!(
                "feat_channels {} must equal heads {} x d_head {}",
                self.feat_channels, self.heads, self.d_head
            ));
        }
        if self.feat_channels % 4 != 0 {
            return bad(format!("feat_channels {} must be divisible by 4", self.feat_channels));
        }
        if self.spw_window == 0 || self.mlp_ratio == 0 {
            return bad("spw_window and mlp_ratio must be positive".into());
        }
        if !self.sigma.is_finite() {
            return bad(format!("sigma must be finite, got {}", self.sigma));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }

    /// Token-grid sides of the encoder stages, finest first.
    pub fn grid_sizes(&self) -> [usize; 3] {
        let g = self.input_size / self.feat_stride;
        [g, g / 2, g / 4]
    }
}

/// Encoder stages, finest first.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub e1: TensorMap,
    pub e2: TensorMap,
    pub e3: TensorMap,
    /// Attention probabilities of each encoder layer.
    pub attention: Vec<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Coarse offsets, `g x g x 2`, in normalized units.
    pub flow: TensorMap,
    /// Convex-upsampling logits, `g x g x 9 s^2`.
    pub upsample_logits: TensorMap,
    /// Self-attention probabilities of each decoder layer, coarsest first.
    pub attention: Vec<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Two-class segmentation logits at input resolution.
    pub logits: TensorMap,
    /// Smoothed foreground mask.
    pub mask: Raster,
    pub field: DeformationField,
    pub coarse_flow: TensorMap,
    /// Self-attention of the last decoder layer.
    pub attention: AttentionMaps,
    pub encoder_attention: Vec<AttentionMaps>,
    pub decoder_attention: Vec<AttentionMaps>,
}

/// Parameters of one network instance, widened to `f64` once.
struct Params<'a> {
    bundle: &'a WeightBundle,
}

impl Params<'_> {
    fn get(&self, name: &str) -> Result<Vec<f64>> {
        self.bundle.get(name)
    }
}

fn check_image(image: &Raster, cfg: &NetworkConfig) -> Result<()> {
    let n = cfg.input_size;
    if image.height() != n || image.width() != n || image.channels() != 3 {
        return Err(Error::invalid(format!(
            "network input must be {n}x{n}x3, got {}x{}x{}",
            image.height(),
            image.width(),
            image.channels()
        )));
    }
    Ok(())
}

/// Strided convolutional stem plus two bottleneck residual blocks, no biases.
pub fn extract_features(image: &Raster, weights: &WeightBundle, cfg: &NetworkConfig) -> Result<TensorMap> {
    cfg.validate()?;
    check_image(image, cfg)?;
    let p = Params { bundle: weights };
    let d = cfg.feat_channels;
    let x = TensorMap { height: image.height(), width: image.width(), channels: 3, data: image.data().to_vec() };
    let x = relu(conv2d(&x, &p.get("feat.conv1")?, 7, 2, 32));
    let x = relu(conv2d(&x, &p.get("feat.conv2")?, 3, 2, 64));
    let mut x = relu(conv2d(&x, &p.get("feat.conv3")?, 3, 2, d));
    for r in 0..2 {
        let h = relu(linear(&x, &p.get(&format!("feat.res{r}.reduce"))?, d / 4, None));
        let h = relu(conv2d(&h, &p.get(&format!("feat.res{r}.conv"))?, 3, 1, d / 4));
        let h = linear(&h, &p.get(&format!("feat.res{r}.expand"))?, d, None);
        x = relu(add(x, &h));
    }
    Ok(x)
}

fn mlp(x: &TensorMap, p: &Params<'_>, prefix: &str, cfg: &NetworkConfig) -> Result<TensorMap> {
    let d = cfg.feat_channels;
    let h = linear(
        x,
        &p.get(&format!("{prefix}.mlp.fc1"))?,
        d * cfg.mlp_ratio,
        Some(&p.get(&format!("{prefix}.mlp.fc1_bias"))?),
    );
    Ok(linear(&gelu(h), &p.get(&format!("{prefix}.mlp.fc2"))?, d, Some(&p.get(&format!("{prefix}.mlp.fc2_bias"))?)))
}

fn norm(x: &TensorMap, p: &Params<'_>, name: &str) -> Result<TensorMap> {
    Ok(layer_norm(x, &p.get(&format!("{name}.gamma"))?, &p.get(&format!("{name}.beta"))?))
}

struct OwnedAttention {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
}

impl OwnedAttention {
    fn load(p: &Params<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: p.get(&format!("{prefix}.q"))?,
            k: p.get(&format!("{prefix}.k"))?,
            v: p.get(&format!("{prefix}.v"))?,
            o: p.get(&format!("{prefix}.o"))?,
        })
    }

    fn view(&self) -> AttentionWeights<'_> {
        AttentionWeights { q: &self.q, k: &self.k, v: &self.v, o: &self.o }
    }
}

pub fn encode(features: &TensorMap, weights: &WeightBundle, cfg: &NetworkConfig) -> Result<EncoderOutput> {
    cfg.validate()?;
    let sizes = cfg.grid_sizes();
    if features.dims() != (sizes[0], sizes[0], cfg.feat_channels) {
        return Err(Error::invalid(format!(
            "encoder expects {0}x{0}x{1} features, got {2:?}",
            sizes[0],
            cfg.feat_channels,
            features.dims()
        )));
    }
    let p = Params { bundle: weights };
    let mut x = features.clone();
    let mut outs = Vec::with_capacity(3);
    let mut maps = Vec::with_capacity(3);
    for l in 0..cfg.encoder_layers {
        if l > 0 {
            let k = cfg.patch_kernel;
            let y = conv2d(&x, &p.get(&format!("enc.patch{}.conv", l - 1))?, k, cfg.patch_stride, cfg.feat_channels);
            x = norm(&y, &p, &format!("enc.patch{}.norm", l - 1))?;
        }
        let prefix = format!("enc{l}");
        let h = norm(&x, &p, &format!("{prefix}.norm1"))?;
        let aw = OwnedAttention::load(&p, &format!("{prefix}.attn"))?;
        let (a, m) = attention(&h, &h, &aw.view(), cfg.heads, cfg.spw_window, None);
        x = add(x, &a);
        let h = norm(&x, &p, &format!("{prefix}.norm2"))?;
        x = add(x.clone(), &mlp(&h, &p, &prefix, cfg)?);
        outs.push(x.clone());
        maps.push(m);
    }
    let e3 = outs.pop().unwrap();
    let e2 = outs.pop().unwrap();
    let e1 = outs.pop().unwrap();
    Ok(EncoderOutput { e1, e2, e3, attention: maps })
}

/// Two-class logits at input resolution from the three encoder stages.
pub fn segment_foreground(encoded: &EncoderOutput, weights: &WeightBundle, cfg: &NetworkConfig) -> Result<TensorMap> {
    cfg.validate()?;
    let p = Params { bundle: weights };
    let n = cfg.input_size;
    let mut sum = TensorMap::zeros(n, n, SEG_CHANNELS);
    for (i, e) in [&encoded.e1, &encoded.e2, &encoded.e3].into_iter().enumerate() {
        if e.channels != cfg.feat_channels {
            return Err(Error::invalid(format!("encoder stage {i} has {} channels", e.channels)));
        }
        let u =
            linear(e, &p.get(&format!("seg.unify{i}"))?, SEG_CHANNELS, Some(&p.get(&format!("seg.unify{i}_bias"))?));
        sum = add(sum, &resize_bilinear(&u, n, n));
    }
    let h = relu(linear(&sum, &p.get("seg.fuse")?, SEG_CHANNELS, Some(&p.get("seg.fuse_bias")?)));
    Ok(linear(&h, &p.get("seg.out")?, 2, Some(&p.get("seg.out_bias")?)))
}

/// Self-attention over `tokens` whose logits receive `sigma * m_i * m_j`
/// before the `1/sqrt(d_head)` scaling; the bias is shared by all heads.
/// Keys and values are pooled by `spw_window`, and so is the key side of the
/// mask. The projections are read from `{prefix}.q/k/v/o`.
pub fn masked_self_attention(
    tokens: &TensorMap,
    m_tokens: &[f64],
    sigma: f64,
    weights: &WeightBundle,
    prefix: &str,
    cfg: &NetworkConfig,
) -> Result<(TensorMap, AttentionMaps)> {
    if m_tokens.len() != tokens.tokens() {
        return Err(Error::invalid(format!(
            "mask has {} tokens, attention input has {}",
            m_tokens.len(),
            tokens.tokens()
        )));
    }
    if m_tokens.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("mask tokens must lie in [0, 1]"));
    }
    if cfg.heads == 0 || tokens.channels != cfg.heads * cfg.d_head {
        return Err(Error::invalid(format!(
            "attention input has {} channels, expected {} heads x {}",
            tokens.channels, cfg.heads, cfg.d_head
        )));
    }
    let p = Params { bundle: weights };
    let aw = OwnedAttention::load(&p, prefix)?;
    let mq = TensorMap { height: tokens.height, width: tokens.width, channels: 1, data: m_tokens.to_vec() };
    let mk = avg_pool(&mq, cfg.spw_window);
    let bias = MaskBias { sigma, query: &mq.data, key: &mk.data };
    Ok(attention(tokens, tokens, &aw.view(), cfg.heads, cfg.spw_window, cfg.mask_bias.then_some(&bias)))
}

/// Mask averaged over each cell of a `side x side` token grid.
pub fn pool_mask(mask: &Raster, side: usize) -> Result<Vec<f64>> {
    if mask.channels() != 1 || mask.height() != mask.width() || mask.height() % side != 0 {
        return Err(Error::invalid(format!(
            "cannot pool a {}x{}x{} mask onto a {side}x{side} grid",
            mask.height(),
            mask.width(),
            mask.channels()
        )));
    }
    let m = TensorMap { height: mask.height(), width: mask.width(), channels: 1, data: mask.data().to_vec() };
    Ok(pool_to(&m, side, side).data)
}

pub fn decode(
    encoded: &EncoderOutput,
    mask: &Raster,
    weights: &WeightBundle,
    cfg: &NetworkConfig,
) -> Result<DecoderOutput> {
    cfg.validate()?;
    let sizes = cfg.grid_sizes();
    let d = cfg.feat_channels;
    let stages = [&encoded.e3, &encoded.e2, &encoded.e1];
    for (e, &s) in stages.iter().zip(sizes.iter().rev()) {
        if e.dims() != (s, s, d) {
            return Err(Error::invalid(format!("encoder stage {:?} does not match {s}x{s}x{d}", e.dims())));
        }
    }
    if mask.height() != cfg.input_size || mask.width() != cfg.input_size || mask.channels() != 1 {
        return Err(Error::invalid("decoder mask must be a single-channel raster at input resolution"));
    }
    let p = Params { bundle: weights };
    let g = sizes[2];
    let mut x = TensorMap::new(g, g, d, p.get("dec.query")?)?;
    let mut maps = Vec::with_capacity(cfg.decoder_layers);
    for (l, e) in stages.into_iter().enumerate() {
        if x.height != e.height {
            x = resize_bilinear(&x, e.height, e.width);
        }
        let prefix = format!("dec{l}");
        let m = pool_mask(mask, e.height)?;
        let h = norm(&x, &p, &format!("{prefix}.norm1"))?;
        let (a, probs) = masked_self_attention(&h, &m, cfg.sigma, weights, &format!("{prefix}.self"), cfg)?;
        x = add(x, &a);
        let h = norm(&x, &p, &format!("{prefix}.norm2"))?;
        let cw = OwnedAttention::load(&p, &format!("{prefix}.cross"))?;
        let (c, _) = attention(&h, e, &cw.view(), cfg.heads, cfg.spw_window, None);
        x = add(x, &c);
        let h = norm(&x, &p, &format!("{prefix}.norm3"))?;
        x = add(x.clone(), &mlp(&h, &p, &prefix, cfg)?);
        maps.push(probs);
    }
    let h = norm(&x, &p, "dec.head.norm")?;
    let mut flow = linear(&h, &p.get("dec.head.flow")?, 2, Some(&p.get("dec.head.flow_bias")?));
    flow.data.iter_mut().for_each(|v| *v = OFFSET_SCALE * v.tanh());
    let s = cfg.feat_stride;
    let upsample_logits = linear(&h, &p.get("dec.head.upmask")?, 9 * s * s, Some(&p.get("dec.head.upmask_bias")?));
    Ok(DecoderOutput { flow, upsample_logits, attention: maps })
}

/// Full-resolution backward field from coarse offsets.
///
/// Bilinear mode interpolates the offsets directly. Convex mode blends, for
/// every fine pixel, the interpolated offsets found one coarse cell away in
/// each of the nine 3x3 directions (clamped at the border), weighted by a
/// softmax over the matching nine logits of its coarse cell. Logits are laid
/// out `k * s^2 + a * s + b` for neighbour `k` and sub-pixel `(a, b)`.
/// Both modes add the identity grid.
pub fn upsample_flow(
    coarse: &TensorMap,
    mode: UpsampleMode,
    convex_logits: Option<&TensorMap>,
    scale: usize,
) -> Result<DeformationField> {
    if coarse.channels != 2 || coarse.height < 2 || coarse.width < 2 {
        return Err(Error::invalid(format!("coarse flow must be at least 2x2x2, got {:?}", coarse.dims())));
    }
    if scale == 0 {
        return Err(Error::invalid("upsampling scale must be positive"));
    }
    let (h, w) = (coarse.height * scale, coarse.width * scale);
    let base = resize_bilinear(coarse, h, w);
    let offsets = match mode {
        UpsampleMode::Bilinear => base,
        UpsampleMode::Convex => {
            let logits = convex_logits.ok_or_else(|| Error::invalid("convex upsampling needs mask logits"))?;
            if logits.dims() != (coarse.height, coarse.width, 9 * scale * scale) {
                return Err(Error::invalid(format!(
                    "convex logits have dims {:?}, expected {}x{}x{}",
                    logits.dims(),
                    coarse.height,
                    coarse.width,
                    9 * scale * scale
                )));
            }
            convex_blend(&base, logits, scale)
        }
    };
    let coords = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .map(|(i, j)| {
            let o = offsets.at(i, j);
            [j as f64 / (w - 1) as f64 + o[0], i as f64 / (h - 1) as f64 + o[1]]
        })
        .collect();
    let field = DeformationField::from_clamped(h, w, Direction::Backward, coords);
    Ok(field)
}

fn convex_blend(base: &TensorMap, logits: &TensorMap, s: usize) -> TensorMap {
    let (h, w) = (base.height, base.width);
    let mut data = vec![0.0; h * w * 2];
    for y in 0..h {
        for x in 0..w {
            let cell = logits.at(y / s, x / s);
            let sub = (y % s) * s + x % s;
            let mut wts = [0.0; 9];
            for (k, v) in wts.iter_mut().enumerate() {
                *v = cell[k * s * s + sub];
            }
            layers::softmax_in_place(&mut wts);
            let mut acc = [0.0; 2];
            for (k, wt) in wts.iter().enumerate() {
                let yy = (y as isize + (k as isize / 3 - 1) * s as isize).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + (k as isize % 3 - 1) * s as isize).clamp(0, w as isize - 1) as usize;
                let b = base.at(yy, xx);
                acc[0] += wt * b[0];
                acc[1] += wt * b[1];
            }
            data[(y * w + x) * 2..(y * w + x) * 2 + 2].copy_from_slice(&acc);
        }
    }
    TensorMap { height: h, width: w, channels: 2, data }
}

/// Whole pipeline on one `input_size x input_size x 3` image.
pub fn forward(image: &Raster, weights: &WeightBundle, cfg: &NetworkConfig) -> Result<ForwardOutput> {
    weights.validate(cfg)?;
    let features = extract_features(image, weights, cfg)?;
    let encoded = encode(&features, weights, cfg)?;
    let logits = segment_foreground(&encoded, weights, cfg)?;
    let n = cfg.input_size;
    let mask = smooth_mask(n, n, &logits.data, cfg.gamma)?;
    let decoded = decode(&encoded, &mask, weights, cfg)?;
    let field = upsample_flow(&decoded.flow, cfg.upsample, Some(&decoded.upsample_logits), cfg.feat_stride)?;
    if !logits.is_finite() || !decoded.flow.is_finite() {
        return Err(Error::Numerical("network produced non-finite values".into()));
    }
    let attention = decoded.attention.last().cloned().expect("decoder has layers");
    Ok(ForwardOutput {
        logits,
        mask,
        field,
        coarse_flow: decoded.flow,
        attention,
        encoder_attention: encoded.attention,
        decoder_attention: decoded.attention,
    })
}

/// Head-averaged attention of the centre query, resampled to `size x size`
/// and scaled to `[0, 1]` for display.
pub fn attention_image(maps: &AttentionMaps, size: usize) -> Raster {
    let (kh, kw) = maps.key_grid;
    let q = maps.queries / 2;
    let row = maps.query_map(q);
    let peak = row.iter().cloned().fold(0.0, f64::max);
    let norm: Vec<f64> = row.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
    let grid = TensorMap { height: kh, width: kw, channels: 1, data: norm };
    let up = if kh >= 2 && kw >= 2 {
        resize_bilinear(&grid, size, size)
    } else {
        TensorMap { data: vec![grid.data[0]; size * size], height: size, width: size, channels: 1 }
    };
    Raster::new(size, size, 1, up.data.iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("dims match")
}
