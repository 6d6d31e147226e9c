//! Float images, binary netpbm I/O and resampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{contract, HifiError, Result};

/// Luma weights applied before any grayscale-only processing.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Row-major `height × width × channels` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return contract(format!("empty image {width}x{height}x{channels}"));
        }
        if data.len() != width * height * channels {
            return contract(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return contract("image contains non-finite values");
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty image");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("from_fn produced an invalid image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn require_gray(&self) -> Result<()> {
        if self.channels != 1 {
            return contract(format!(
                "expected a grayscale plane, got {} channels",
                self.channels
            ));
        }
        Ok(())
    }

    /// Grayscale version; single-channel images are returned unchanged.
    pub fn luma(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => Image::from_fn(self.width, self.height, 1, |x, y, _| {
                LUMA[0] * self.get(x, y, 0)
                    + LUMA[1] * self.get(x, y, 1)
                    + LUMA[2] * self.get(x, y, 2)
            }),
            c => Image::from_fn(self.width, self.height, 1, |x, y, _| {
                (0..c).map(|k| self.get(x, y, k)).sum::<f32>() / c as f32
            }),
        }
    }

    /// Replicates a grayscale plane into `channels` identical channels.
    pub fn expand_channels(&self, channels: usize) -> Result<Image> {
        self.require_gray()?;
        Ok(Image::from_fn(
            self.width,
            self.height,
            channels,
            |x, y, _| self.get(x, y, 0),
        ))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return contract(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            ));
        }
        Ok(Image::from_fn(w, h, self.channels, |x, y, c| {
            self.get(x0 + x, y0 + y, c)
        }))
    }

    /// Rounds every value to the nearest 8-bit level, so that a netpbm round
    /// trip is lossless.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| quantize(v)).collect();
        Image { data, ..*self }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Image { data, ..*self }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return contract(format!("mask {width}x{height} with {} bits", bits.len()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bbox(width: usize, height: usize, b: BBox) -> Result<Self> {
        if b.x1 > width || b.y1 > height || b.x0 > b.x1 || b.y0 > b.y1 {
            return contract(format!("bbox {b:?} outside {width}x{height}"));
        }
        let mut m = Self::empty(width, height);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                m.bits[y * width + x] = true;
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let bb = b.get_or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    bb.x0 = bb.x0.min(x);
                    bb.y0 = bb.y0.min(y);
                    bb.x1 = bb.x1.max(x + 1);
                    bb.y1 = bb.y1.max(y + 1);
                }
            }
        }
        b
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            if self.get(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Pixels at or above one half are set.
    pub fn from_image(img: &Image) -> Result<Self> {
        img.require_gray()?;
        let bits = img.data().iter().map(|&v| v >= 0.5).collect();
        Mask::new(img.width(), img.height(), bits)
    }
}

// ---------------------------------------------------------------------------
// netpbm

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HifiError::io(path, e))?;
    decode_netpbm(&bytes).map_err(|msg| HifiError::format(path, msg))
}

pub fn decode_netpbm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m:?} (need P5 or P6)")),
    };
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster_start = pos + 1;
    let n = width * height * channels;
    if width == 0 || height == 0 || bytes.len() < raster_start + n {
        return Err("truncated raster".into());
    }
    let data = bytes[raster_start..raster_start + n]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(width, height, channels, data).map_err(|e| e.to_string())
}

pub fn encode_netpbm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return contract(format!("netpbm supports 1 or 3 channels, got {c}")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Writes P5 for one channel, P6 for three; atomically.
pub fn write_netpbm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_atomic(path, &encode_netpbm(img)?)
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| HifiError::io(&dir, e))?;
    let name = path.file_name().ok_or_else(|| {
        HifiError::Contract(format!("output path {} has no file name", path.display()))
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| HifiError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| HifiError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HifiError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| HifiError::io(path, e))
}

// ---------------------------------------------------------------------------
// resampling

/// Pads to the aspect ratio `target_w : target_h` (content centered, border
/// filled with `fill`) and then area-resamples to exactly `target_w × target_h`.
/// Returns the image and the affine map `(offset_x, offset_y, scale)` taking
/// source pixel coordinates to output coordinates.
pub fn pad_then_resize(
    img: &Image,
    target_w: usize,
    target_h: usize,
    fill: f32,
) -> Result<(Image, (f64, f64, f64))> {
    if target_w == 0 || target_h == 0 {
        return contract("resize target must be non-empty");
    }
    let (w, h) = (img.width(), img.height());
    // smallest canvas with the target aspect that contains the image
    let (cw, ch) = if w * target_h >= h * target_w {
        (w, (w * target_h).div_ceil(target_w))
    } else {
        ((h * target_w).div_ceil(target_h), h)
    };
    let ox = (cw - w) / 2;
    let oy = (ch - h) / 2;
    let mut canvas = Image::filled(cw, ch, img.channels(), fill);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels() {
                canvas.set(x + ox, y + oy, c, img.get(x, y, c));
            }
        }
    }
    let scale = target_w as f64 / cw as f64;
    let out = resize_area(&canvas, target_w, target_h)?;
    Ok((out, (ox as f64 * scale, oy as f64 * scale, scale)))
}

/// Box-filter resampling: each output pixel averages the source area it covers.
pub fn resize_area(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return contract("resize target must be non-empty");
    }
    let sx = img.width() as f64 / out_w as f64;
    let sy = img.height() as f64 / out_h as f64;
    let wx = spans(img.width(), out_w, sx);
    let wy = spans(img.height(), out_h, sy);
    let c = img.channels();
    let mut data = vec![0f32; out_w * out_h * c];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(y, wyv) in ys {
                    for &(x, wxv) in xs {
                        acc += wyv * wxv * img.get(x, y, ch) as f64;
                    }
                }
                data[(oy * out_w + ox) * c + ch] = acc as f32;
            }
        }
    }
    Image::new(out_w, out_h, c, data)
}

/// Per output index, the source indices and normalized overlap weights.
fn spans(src: usize, out: usize, step: f64) -> Vec<Vec<(usize, f64)>> {
    (0..out)
        .map(|o| {
            let a = o as f64 * step;
            let b = ((o + 1) as f64 * step).min(src as f64);
            let mut v = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < src {
                let lo = a.max(i as f64);
                let hi = b.min(i as f64 + 1.0);
                if hi > lo {
                    v.push((i, (hi - lo) / (b - a)));
                }
                i += 1;
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trip_is_lossless_for_quantized_images() {
        let img =
            Image::from_fn(5, 3, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0).quantized();
        let back = decode_netpbm(&encode_netpbm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let gray = img.luma().quantized();
        assert_eq!(decode_netpbm(&encode_netpbm(&gray).unwrap()).unwrap(), gray);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_other_maxvals_and_truncation() {
        assert!(decode_netpbm(b"P5\n2 2\n65535\n").is_err());
        assert!(decode_netpbm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_netpbm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn area_resize_halves_exactly() {
        let img = Image::from_fn(4, 2, 1, |x, _, _| x as f32);
        let out = resize_area(&img, 2, 1).unwrap();
        assert_eq!(out.data(), &[0.5, 2.5]);
    }

    #[test]
    fn padding_preserves_content_aspect() {
        // 3:1 panel padded to a square before resizing
        let img = Image::from_fn(30, 10, 1, |_, _, _| 1.0);
        let (out, (ox, oy, s)) = pad_then_resize(&img, 12, 12, 0.0).unwrap();
        assert_eq!((out.width(), out.height()), (12, 12));
        assert_eq!(ox, 0.0);
        assert!((s - 0.4).abs() < 1e-12);
        assert!((oy - 4.0).abs() < 1e-12);
        // content occupies rows [4, 8): a 12x4 block, still 3:1
        for y in 0..12 {
            let expect = if (4..8).contains(&y) { 1.0 } else { 0.0 };
            assert!((out.get(6, y, 0) - expect).abs() < 1e-6, "row {y}");
        }
    }

    #[test]
    fn mask_bbox_is_tight() {
        let mut m = Mask::empty(10, 8);
        m.set(3, 2, true);
        m.set(6, 5, true);
        assert_eq!(
            m.bbox(),
            Some(BBox {
                x0: 3,
                y0: 2,
                x1: 7,
                y1: 6
            })
        );
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }
}
