//! Patch-transformer image encoder.
//!
//! An image is resized and normalized to `[-1, 1]`, cut into non-overlapping
//! `P x P` patches, linearly projected to `d` dimensions, offset by learnable
//! positional rows, prefixed with a classification token and run through a
//! stack of post-norm transformer blocks. Row 0 of the final token matrix is
//! the image embedding `h_cls`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, mha_backward, mha_forward, MhaCache,
    MhaParams, Matrix, Parameters,
};

/// `H x W x C` image stored row-major with channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageTensor",
                height * width * channels,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if img.height == 0 || img.width == 0 || img.channels == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("zero-sized image"));
    }
    if img.height == out_h && img.width == out_w {
        return Ok(img.clone());
    }
    let mut out = ImageTensor::filled(out_h, out_w, img.channels, 0.0);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, sy, img.height);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, sx, img.width);
            for c in 0..img.channels {
                let top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
                let bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
                *out.at_mut(y, x, c) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean and spread used for normalization.
pub const NORM_CENTER: f64 = 0.5;
pub const NORM_SPREAD: f64 = 0.5;

/// Resizes to `size x size` and maps `[0, 1]` intensities to `[-1, 1]`.
pub fn preprocess(raw: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let mut img = resize_bilinear(raw, size, size)?;
    for v in &mut img.data {
        *v = ((*v - NORM_CENTER) / NORM_SPREAD).clamp(-1.0, 1.0);
    }
    Ok(img)
}

/// Splits into `HW/P^2` flattened patches, each laid out `(row, col, channel)`.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::invalid(format!(
            "patch size {patch} does not divide {}x{}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let mut patches = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut v = Vec::with_capacity(patch * patch * img.channels);
            for y in 0..patch {
                let row = (py * patch + y) * img.width + px * patch;
                let start = row * img.channels;
                v.extend_from_slice(&img.data[start..start + patch * img.channels]);
            }
            patches.push(v);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &[Vec<f64>],
    patch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<ImageTensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid("patch size does not divide image"));
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.len() != gh * gw {
        return Err(Error::shape("unpatchify", gh * gw, patches.len()));
    }
    let mut img = ImageTensor::filled(height, width, channels, 0.0);
    for (i, p) in patches.iter().enumerate() {
        if p.len() != patch * patch * channels {
            return Err(Error::shape("unpatchify patch", patch * patch * channels, p.len()));
        }
        let (py, px) = (i / gw, i % gw);
        for y in 0..patch {
            let row = (py * patch + y) * width + px * patch;
            let start = row * channels;
            img.data[start..start + patch * channels]
                .copy_from_slice(&p[y * patch * channels..(y + 1) * patch * channels]);
        }
    }
    Ok(img)
}

/// Patch tokens with the classification token at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Matrix,
    pub n: usize,
}

impl TokenMatrix {
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Shape settings of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl EncoderShape {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: MhaParams,
    pub norm1_gain: Matrix,
    pub norm1_offset: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Matrix,
    pub ff_w2: Matrix,
    pub ff_b2: Matrix,
    pub norm2_gain: Matrix,
    pub norm2_offset: Matrix,
}

impl EncoderLayer {
    fn init<R: Rng + ?Sized>(dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MhaParams::init(heads, dim, rng)?,
            norm1_gain: Matrix::row_vector(&vec![1.0; dim]),
            norm1_offset: Matrix::zeros(1, dim),
            ff_w1: Matrix::init_fan_in(dim, ff_dim, rng),
            ff_b1: Matrix::zeros(1, ff_dim),
            ff_w2: Matrix::init_fan_in(ff_dim, dim, rng),
            ff_b2: Matrix::zeros(1, dim),
            norm2_gain: Matrix::row_vector(&vec![1.0; dim]),
            norm2_offset: Matrix::zeros(1, dim),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub patch_proj: Matrix,
    pub positions: Matrix,
    pub cls: Matrix,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(shape: EncoderShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let patch_proj = Matrix::init_fan_in(shape.patch_len(), d, rng);
        let positions = Matrix::uniform(shape.num_patches() + 1, d, emb_bound, rng);
        let cls = Matrix::uniform(1, d, emb_bound, rng);
        let layers = (0..shape.layers)
            .map(|_| EncoderLayer::init(d, shape.heads, shape.ff_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            shape,
            patch_proj,
            positions,
            cls,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.patch_proj.cols()
    }
}

impl Parameters for EncoderParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("positions".to_string(), &self.positions),
            ("cls".to_string(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in l.attn.blocks() {
                out.push((format!("layer{i}.attn.{name}"), m));
            }
            out.extend([
                (format!("layer{i}.norm1_gain"), &l.norm1_gain),
                (format!("layer{i}.norm1_offset"), &l.norm1_offset),
                (format!("layer{i}.ff_w1"), &l.ff_w1),
                (format!("layer{i}.ff_b1"), &l.ff_b1),
                (format!("layer{i}.ff_w2"), &l.ff_w2),
                (format!("layer{i}.ff_b2"), &l.ff_b2),
                (format!("layer{i}.norm2_gain"), &l.norm2_gain),
                (format!("layer{i}.norm2_offset"), &l.norm2_offset),
            ]);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.patch_proj, &mut self.positions, &mut self.cls];
        for l in &mut self.layers {
            out.extend(l.attn.blocks_mut());
            out.extend([
                &mut l.norm1_gain,
                &mut l.norm1_offset,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
                &mut l.norm2_gain,
                &mut l.norm2_offset,
            ]);
        }
        out
    }
}

/// Projects patches, adds positions and prepends the classification token.
pub fn embed_patches(patches: &[Vec<f64>], params: &EncoderParams) -> Result<TokenMatrix> {
    let n = patches.len();
    let plen = params.patch_proj.rows();
    if let Some(bad) = patches.iter().find(|p| p.len() != plen) {
        return Err(Error::shape("embed_patches patch length", plen, bad.len()));
    }
    if params.positions.rows() != n + 1 {
        return Err(Error::shape(
            "embed_patches positional rows",
            params.positions.rows(),
            n + 1,
        ));
    }
    let d = params.dim();
    let mut tokens = Matrix::zeros(n + 1, d);
    tokens.row_mut(0).copy_from_slice(params.cls.row(0));
    if n > 0 {
        let stacked = Matrix::new(n, plen, patches.concat())?;
        let proj = stacked.mm(&params.patch_proj);
        for i in 0..n {
            tokens.row_mut(i + 1).copy_from_slice(proj.row(i));
        }
    }
    tokens.add_assign(&params.positions);
    Ok(TokenMatrix { tokens, n })
}

/// Accumulates gradients of the patch projection, positions and cls seed.
pub fn embed_patches_backward(
    patches: &[Vec<f64>],
    d_tokens: &Matrix,
    grads: &mut EncoderParams,
) {
    grads.positions.add_assign(d_tokens);
    for (g, d) in grads.cls.data_mut().iter_mut().zip(d_tokens.row(0)) {
        *g += d;
    }
    for (i, p) in patches.iter().enumerate() {
        let dt = d_tokens.row(i + 1);
        for (r, &x) in p.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (g, &d) in grads.patch_proj.row_mut(r).iter_mut().zip(dt) {
                *g += x * d;
            }
        }
    }
}

struct LayerCache {
    input: Matrix,
    attn: MhaCache,
    y1: Matrix,
    xhat1: Matrix,
    inv_std1: Vec<f64>,
    h_pre: Matrix,
    h: Matrix,
    xhat2: Matrix,
    inv_std2: Vec<f64>,
}

/// Forward activations retained for [`encode_backward`].
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    n_tokens: usize,
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn col_sums_into(m: &Matrix, into: &mut Matrix) {
    for r in 0..m.rows() {
        for (g, v) in into.data_mut().iter_mut().zip(m.row(r)) {
            *g += v;
        }
    }
}

fn layer_forward(x: &Matrix, l: &EncoderLayer) -> Result<(Matrix, LayerCache)> {
    let (a, attn) = mha_forward(x, x, x, &l.attn)?;
    let r1 = x.add(&a);
    let (y1, xhat1, inv_std1) = layer_norm(&r1, l.norm1_gain.data(), l.norm1_offset.data());
    let mut h_pre = y1.mm(&l.ff_w1);
    add_row_bias(&mut h_pre, &l.ff_b1);
    let mut h = h_pre.clone();
    h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut f = h.mm(&l.ff_w2);
    add_row_bias(&mut f, &l.ff_b2);
    let r2 = y1.add(&f);
    let (y2, xhat2, inv_std2) = layer_norm(&r2, l.norm2_gain.data(), l.norm2_offset.data());
    Ok((
        y2,
        LayerCache {
            input: x.clone(),
            attn,
            y1,
            xhat1,
            inv_std1,
            h_pre,
            h,
            xhat2,
            inv_std2,
        },
    ))
}

fn layer_backward(l: &EncoderLayer, c: &LayerCache, dy2: &Matrix, g: &mut EncoderLayer) -> Matrix {
    let dr2 = layer_norm_backward(
        &c.xhat2,
        &c.inv_std2,
        l.norm2_gain.data(),
        dy2,
        g.norm2_gain.data_mut(),
        g.norm2_offset.data_mut(),
    );
    g.ff_w2.add_assign(&c.h.t_mm(&dr2));
    col_sums_into(&dr2, &mut g.ff_b2);
    let mut dh = dr2.mm_t(&l.ff_w2);
    for (d, &x) in dh.data_mut().iter_mut().zip(c.h_pre.data()) {
        *d *= gelu_grad(x);
    }
    g.ff_w1.add_assign(&c.y1.t_mm(&dh));
    col_sums_into(&dh, &mut g.ff_b1);
    let mut dy1 = dr2;
    dy1.add_assign(&dh.mm_t(&l.ff_w1));
    let dr1 = layer_norm_backward(
        &c.xhat1,
        &c.inv_std1,
        l.norm1_gain.data(),
        &dy1,
        g.norm1_gain.data_mut(),
        g.norm1_offset.data_mut(),
    );
    let x = &c.input;
    let (dq, dk, dv) = mha_backward(x, x, x, &l.attn, &c.attn, &dr1, &mut g.attn);
    let mut dx = dr1;
    dx.add_assign(&dq);
    dx.add_assign(&dk);
    dx.add_assign(&dv);
    dx
}

/// Runs the encoder stack and returns row 0 (`h_cls`).
pub fn encode_image(tokens: &TokenMatrix, params: &EncoderParams) -> Result<Vec<f64>> {
    encode_forward(tokens, params).map(|(h, _)| h)
}

pub fn encode_forward(tokens: &TokenMatrix, params: &EncoderParams) -> Result<(Vec<f64>, EncoderCache)> {
    if tokens.tokens.cols() != params.dim() {
        return Err(Error::shape("encode_image dim", params.dim(), tokens.tokens.cols()));
    }
    if tokens.tokens.rows() != tokens.n + 1 {
        return Err(Error::shape("encode_image rows", tokens.n + 1, tokens.tokens.rows()));
    }
    let mut x = tokens.tokens.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let (y, c) = layer_forward(&x, l)?;
        caches.push(c);
        x = y;
    }
    Ok((
        x.row(0).to_vec(),
        EncoderCache {
            layers: caches,
            n_tokens: tokens.tokens.rows(),
        },
    ))
}

/// Backpropagates `d_hcls` through the stack; returns the token-matrix gradient.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_hcls: &[f64],
    grads: &mut EncoderParams,
) -> Matrix {
    let mut d = Matrix::zeros(cache.n_tokens, params.dim());
    d.row_mut(0).copy_from_slice(d_hcls);
    for (i, l) in params.layers.iter().enumerate().rev() {
        d = layer_backward(l, &cache.layers[i], &d, &mut grads.layers[i]);
    }
    d
}

/// Preprocessed image to `h_cls` with everything needed for backprop.
pub struct ImageForward {
    pub h_cls: Vec<f64>,
    pub patches: Vec<Vec<f64>>,
    pub cache: EncoderCache,
}

pub fn forward_image(img: &ImageTensor, params: &EncoderParams) -> Result<ImageForward> {
    let patches = patchify(img, params.shape.patch)?;
    let tokens = embed_patches(&patches, params)?;
    let (h_cls, cache) = encode_forward(&tokens, params)?;
    Ok(ImageForward {
        h_cls,
        patches,
        cache,
    })
}

pub fn backward_image(
    fwd: &ImageForward,
    params: &EncoderParams,
    d_hcls: &[f64],
    grads: &mut EncoderParams,
) {
    let d_tokens = encode_backward(params, &fwd.cache, d_hcls, grads);
    embed_patches_backward(&fwd.patches, &d_tokens, grads);
}
