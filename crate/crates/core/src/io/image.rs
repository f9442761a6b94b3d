//! 8-bit RGB images: PNG (via the `png` crate) and binary PPM (P6).

use crate::error::{Result, VccError};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFile {
    width: usize,
    height: usize,
    /// Interleaved RGB rows.
    pixels: Vec<u8>,
}

impl ImageFile {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(VccError::InvalidInput("image dimensions must be at least 1".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(VccError::InvalidInput(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-major tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> TensorF32 {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        TensorF32::from_parts(vec![3, self.height, self.width], data)
    }

    /// Inverse of [`ImageFile::to_tensor`], rounding and clamping to `u8`.
    pub fn from_tensor(t: &TensorF32) -> Result<Self> {
        let (c, h, w) = t
            .chw()
            .filter(|&(c, _, _)| c == 3)
            .ok_or_else(|| VccError::InvalidInput(format!("expected 3×H×W tensor, got {:?}", t.shape())))?;
        let plane = h * w;
        let mut pixels = vec![0u8; plane * c];
        for i in 0..plane {
            for ch in 0..3 {
                pixels[i * 3 + ch] = (t.data()[ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Self::new(w, h, pixels)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageFile> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(VccError::Format("unrecognized image signature (expected PNG or P6 PPM)".into()))
    }
}

pub fn encode_png(image: &ImageFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| VccError::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&image.pixels)
            .map_err(|e| VccError::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn encode_ppm(image: &ImageFile) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

fn decode_png(bytes: &[u8]) -> Result<ImageFile> {
    let fmt = |e: png::DecodingError| VccError::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VccError::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(VccError::Format(format!("png: unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        other => return Err(VccError::Format(format!("png: unsupported color type {other:?}"))),
    };
    ImageFile::new(w, h, pixels)
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageFile> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| VccError::Format("ppm: malformed header".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(VccError::Format("ppm: missing whitespace after maxval".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(VccError::Format(format!("ppm: unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| VccError::Format("ppm: truncated pixel data".into()))?;
    ImageFile::new(w, h, data.to_vec())
}
