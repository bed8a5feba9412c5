//! Images, feature maps and the small convolutional feature extractor.

use std::fmt;

use indexmap::IndexMap;
use rand::Rng;

use crate::bytes::ByteReader;
use crate::numerics::{GradTape, NumericsError, Tensor, Var};
use crate::params::{ParamStore, Scope};

/// Backbone names in registration order.
pub const BACKBONES: [&str; 8] = [
    "resnet50",
    "resnet101",
    "efficientnetv2",
    "vgg16",
    "vgg19",
    "efficientnetb4",
    "resnet152",
    "regnetx120",
];

pub const TINYCNN: &str = "tinycnn";

pub const CAPF_MAGIC: &[u8; 4] = b"CAPF";
pub const CAPF_VERSION: u32 = 1;

/// Side length images are resized to before entering the CNN.
pub const IMAGE_SIDE: usize = 32;

const CONV1_CHANNELS: usize = 8;
const CONV2_CHANNELS: usize = 16;

/// Registration index of a feature source, `None` when unregistered.
pub fn source_rank(name: &str) -> Option<usize> {
    BACKBONES.iter().position(|b| *b == name).or(if name == TINYCNN { Some(BACKBONES.len()) } else { None })
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisionError {
    MalformedHeader(String),
    TruncatedPayload { expected: usize, got: usize },
    ImageTooSmall { width: usize, height: usize },
    BadMagic,
    UnsupportedVersion(u32),
    DuplicateImageId(String),
    Truncated,
    BadName,
    UnknownSource(String),
    Numerics(NumericsError),
}

impl fmt::Display for VisionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VisionError::MalformedHeader(why) => write!(f, "malformed PPM header: {why}"),
            VisionError::TruncatedPayload { expected, got } => {
                write!(f, "PPM payload truncated: expected {expected} bytes, got {got}")
            }
            VisionError::ImageTooSmall { width, height } => write!(f, "image {width}x{height} is smaller than 8x8"),
            VisionError::BadMagic => write!(f, "not a CAPF feature file"),
            VisionError::UnsupportedVersion(v) => write!(f, "unsupported CAPF version {v}"),
            VisionError::DuplicateImageId(id) => write!(f, "duplicate image id {id}"),
            VisionError::Truncated => write!(f, "feature file truncated"),
            VisionError::BadName => write!(f, "image id is not valid UTF-8"),
            VisionError::UnknownSource(s) => write!(f, "unregistered feature source {s}"),
            VisionError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for VisionError {}

impl From<NumericsError> for VisionError {
    fn from(e: NumericsError) -> Self {
        VisionError::Numerics(e)
    }
}

/// RGB image with channel-interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Option<Self> {
        (pixels.len() == width * height * 3 && pixels.iter().all(|p| (0.0..=1.0).contains(p)))
            .then_some(Image { width, height, pixels })
    }

    fn px(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * 3;
        &self.pixels[i..i + 3]
    }

    /// Planar `[3, H, W]` layout for the convolution stack.
    pub fn to_chw(&self) -> Vec<f32> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[c * w * h + y * w + x] = self.pixels[(y * w + x) * 3 + c];
                }
            }
        }
        out
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], VisionError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(VisionError::MalformedHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, VisionError> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .ok_or_else(|| VisionError::MalformedHeader(format!("bad {what}")))
}

/// Decodes a binary `P6` PPM with maxval 255.
pub fn load_ppm(bytes: &[u8]) -> Result<Image, VisionError> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(VisionError::MalformedHeader("expected P6 magic".into()));
    }
    let width = ppm_number(bytes, &mut pos, "width")?;
    let height = ppm_number(bytes, &mut pos, "height")?;
    if ppm_number(bytes, &mut pos, "maxval")? != 255 {
        return Err(VisionError::MalformedHeader("maxval must be 255".into()));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(VisionError::MalformedHeader("missing separator after maxval".into()));
    }
    let payload = &bytes[pos + 1..];
    let expected = width * height * 3;
    if payload.len() < expected {
        return Err(VisionError::TruncatedPayload { expected, got: payload.len() });
    }
    let pixels = payload[..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image { width, height, pixels })
}

/// Encodes an image as binary `P6`.
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Mirrors the image left to right.
pub fn augment_hflip(img: &Image) -> Image {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            pixels.extend_from_slice(img.px(x, y));
        }
    }
    Image { width: img.width, height: img.height, pixels }
}

/// Center-crops to a square, then nearest-neighbour resamples to `side`×`side`.
pub fn center_square_resize(img: &Image, side: usize) -> Image {
    let s = img.width.min(img.height);
    let (x0, y0) = ((img.width - s) / 2, (img.height - s) / 2);
    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        let sy = y0 + y * s / side;
        for x in 0..side {
            let sx = x0 + x * s / side;
            pixels.extend_from_slice(img.px(sx, sy));
        }
    }
    Image { width: side, height: side, pixels }
}

/// Feature vector for one image from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub source: String,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(source: &str, values: Vec<f32>) -> Result<Self, VisionError> {
        if source_rank(source).is_none() {
            return Err(VisionError::UnknownSource(source.to_owned()));
        }
        Ok(FeatureMap { source: source.to_owned(), values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Parameter names of the small CNN, relative to its scope.
pub mod cnn_names {
    pub const CONV1_W: &str = "conv1.w";
    pub const CONV1_B: &str = "conv1.b";
    pub const CONV2_W: &str = "conv2.w";
    pub const CONV2_B: &str = "conv2.b";
    pub const PROJ_W: &str = "proj.w";
    pub const PROJ_B: &str = "proj.b";
}

/// Shapes of the TinyCNN parameters for a given output width.
pub fn tinycnn_shapes(d_model: usize) -> Vec<(&'static str, Vec<usize>)> {
    use cnn_names::*;
    vec![
        (CONV1_W, vec![CONV1_CHANNELS, 3, 3, 3]),
        (CONV1_B, vec![CONV1_CHANNELS]),
        (CONV2_W, vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3]),
        (CONV2_B, vec![CONV2_CHANNELS]),
        (PROJ_W, vec![CONV2_CHANNELS, d_model]),
        (PROJ_B, vec![d_model]),
    ]
}

/// Randomly initialised TinyCNN weights (He-uniform kernels, zero biases).
pub fn init_tinycnn(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) {
    for (name, shape) in tinycnn_shapes(d_model) {
        let full = format!("{prefix}{name}");
        if shape.len() == 1 {
            store.insert(&full, Tensor::zeros(shape));
            continue;
        }
        let fan_in: usize = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(&full, Tensor::new(shape, data).expect("finite init"));
    }
}

/// conv3×3 → ReLU → maxpool → conv3×3 → ReLU → maxpool → global average →
/// linear, recorded on `scope`'s tape. Returns a `[1, d_model]` row.
pub fn tinycnn_forward_var(scope: &mut Scope<'_>, img: &Image) -> Result<Var, VisionError> {
    use cnn_names::*;
    if img.width < 8 || img.height < 8 {
        return Err(VisionError::ImageTooSmall { width: img.width, height: img.height });
    }
    let input = Tensor::new(vec![3, img.height, img.width], img.to_chw())?;
    let x = scope.tape.constant(input);
    let (w1, b1) = (scope.p(CONV1_W), scope.p(CONV1_B));
    let h = scope.tape.conv2d_3x3(x, w1, b1)?;
    let h = scope.tape.relu(h)?;
    let h = scope.tape.maxpool2(h)?;
    let (w2, b2) = (scope.p(CONV2_W), scope.p(CONV2_B));
    let h = scope.tape.conv2d_3x3(h, w2, b2)?;
    let h = scope.tape.relu(h)?;
    let h = scope.tape.maxpool2(h)?;
    let pooled = scope.tape.global_avg_pool(h)?;
    let pooled = scope.tape.reshape(pooled, vec![1, CONV2_CHANNELS])?;
    let (pw, pb) = (scope.p(PROJ_W), scope.p(PROJ_B));
    let out = scope.tape.matmul(pooled, pw)?;
    Ok(scope.tape.add_row(out, pb)?)
}

/// Runs the CNN without gradient tracking and returns its feature map.
pub fn tinycnn_forward(img: &Image, store: &ParamStore, prefix: &str) -> Result<FeatureMap, VisionError> {
    let mut tape = GradTape::new();
    let mut scope = Scope::frozen(&mut tape, store, prefix);
    let v = tinycnn_forward_var(&mut scope, img)?;
    Ok(FeatureMap { source: TINYCNN.to_owned(), values: tape.value(v).data().to_vec() })
}

/// Serialises `(image_id → feature map)` as a CAPF file, preserving order.
pub fn write_feature_file(map: &IndexMap<String, FeatureMap>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CAPF_MAGIC);
    out.extend_from_slice(&CAPF_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (id, fm) in map {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(fm.values.len() as u32).to_le_bytes());
        for v in &fm.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a CAPF file; every entry is tagged with `source`.
pub fn read_feature_file(bytes: &[u8], source: &str) -> Result<IndexMap<String, FeatureMap>, VisionError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(CAPF_MAGIC.as_slice()) {
        return Err(VisionError::BadMagic);
    }
    let version = r.u32().ok_or(VisionError::Truncated)?;
    if version != CAPF_VERSION {
        return Err(VisionError::UnsupportedVersion(version));
    }
    let count = r.u32().ok_or(VisionError::Truncated)? as usize;
    let mut map = IndexMap::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16().ok_or(VisionError::Truncated)? as usize;
        let raw_name = r.take(len).ok_or(VisionError::Truncated)?;
        let name = std::str::from_utf8(raw_name).map_err(|_| VisionError::BadName)?.to_owned();
        let dim = r.u32().ok_or(VisionError::Truncated)? as usize;
        let values = r.f32s(dim).ok_or(VisionError::Truncated)?;
        if map.contains_key(&name) {
            return Err(VisionError::DuplicateImageId(name));
        }
        map.insert(name, FeatureMap { source: source.to_owned(), values });
    }
    if !r.at_end() {
        return Err(VisionError::Truncated);
    }
    Ok(map)
}
