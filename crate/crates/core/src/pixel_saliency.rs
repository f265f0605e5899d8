//! Pixel-level saliency signals that can stand in for hidden-state norms.
//!
//! Each method reduces an image to one nonnegative scalar per square patch.
//! [`saliency_to_scores`] then runs the same standardize + softmax pipeline
//! the norm-based saliency uses.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache_model::{LayerTrace, PromptLayout};
use crate::error::{Error, Result};
use crate::numerics::{softmax_temp, standardize};

pub const DEFAULT_PATCH_SIZE: usize = 28;
pub const DEFAULT_SURROUND_RADIUS: usize = 1;

/// 8-bit image, row-major, 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat(format!("{channels} channels; expected 1 or 3")));
        }
        if width == 0 || height == 0 {
            return Err(Error::ImageFormat("zero-sized image".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::ImageFormat(format!(
                "{} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 3, data)
    }

    /// Gray copy using `0.299 R + 0.587 G + 0.114 B`, rounded half up.
    pub fn to_gray(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                (y + 0.5).floor().min(255.0) as u8
            })
            .collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    #[inline]
    fn gray_at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Binary PGM (P5) or PPM (P6) with maxval <= 255.
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::ImageFormat(format!(
                    "unsupported magic `{other}`; expected P5 or P6"
                )))
            }
        };
        let width = parse_header_int(bytes, &mut pos, "width")?;
        let height = parse_header_int(bytes, &mut pos, "height")?;
        let maxval = parse_header_int(bytes, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::ImageFormat(format!("maxval {maxval}; only 8-bit images")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * channels;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::ImageFormat("raster shorter than header declares".into()))?;
        Self::new(width, height, channels, raster.to_vec())
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(Error::ImageFormat("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::ImageFormat(format!("bad {what} `{tok}`")))
}

/// One scalar per `patch_size` square, row-major. Edge patches may be
/// partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, gx: usize, gy: usize) -> f64 {
        self.values[gy * self.grid_w + gx]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch,row,col,saliency\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{:.9}", i, i / self.grid_w, i % self.grid_w, v);
        }
        out
    }
}

fn grid_dims(img: &ImagePlane, patch_size: usize) -> Result<(usize, usize)> {
    if patch_size == 0 {
        return Err(Error::param("patch_size", "must be >= 1"));
    }
    Ok((img.width.div_ceil(patch_size), img.height.div_ceil(patch_size)))
}

/// Calls `f(gx, gy, xs, ys)` for each patch with its pixel ranges.
fn for_each_patch(
    img: &ImagePlane,
    patch_size: usize,
    mut f: impl FnMut(std::ops::Range<usize>, std::ops::Range<usize>) -> f64,
) -> Result<PatchGrid> {
    let (grid_w, grid_h) = grid_dims(img, patch_size)?;
    let mut values = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let xs = gx * patch_size..((gx + 1) * patch_size).min(img.width);
            let ys = gy * patch_size..((gy + 1) * patch_size).min(img.height);
            values.push(f(xs, ys));
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid_w,
        grid_h,
        values,
    })
}

/// Shannon entropy (bits) of each patch's 256-bin gray histogram.
pub fn histogram_entropy_saliency(img: &ImagePlane, patch_size: usize) -> Result<PatchGrid> {
    let gray = img.to_gray();
    for_each_patch(&gray, patch_size, |xs, ys| {
        let mut hist = [0usize; 256];
        for y in ys.clone() {
            for x in xs.clone() {
                hist[gray.gray_at(x, y) as usize] += 1;
            }
        }
        let total = (xs.len() * ys.len()) as f64;
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.log2()
            })
            .sum()
    })
}

/// Per-pixel 3x3 Sobel gradient magnitude with clamp-to-edge borders.
pub fn sobel_magnitude(img: &ImagePlane) -> Vec<f64> {
    let gray = img.to_gray();
    let (w, h) = (gray.width as isize, gray.height as isize);
    let px = |x: isize, y: isize| -> f64 {
        gray.gray_at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as f64
    };
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Mean Sobel magnitude per patch.
pub fn sobel_saliency(img: &ImagePlane, patch_size: usize) -> Result<PatchGrid> {
    let mag = sobel_magnitude(img);
    let w = img.width;
    for_each_patch(img, patch_size, |xs, ys| {
        let count = (xs.len() * ys.len()) as f64;
        let mut sum = 0.0;
        for y in ys {
            sum += mag[y * w + xs.start..y * w + xs.end].iter().sum::<f64>();
        }
        sum / count
    })
}

/// sRGB (8-bit) to CIELAB under D65.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    fn linear(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }
    let [r, g, b] = rgb.map(linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (f(x / 0.950_47), f(y / 1.0), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Distance in CIELAB between each patch's mean color and the mean of
/// the patches within `surround_radius` (Chebyshev, in patches) around it.
/// Neighbors outside the image are skipped; each neighbor patch counts
/// once regardless of its pixel count.
pub fn center_surround_saliency(
    img: &ImagePlane,
    patch_size: usize,
    surround_radius: usize,
) -> Result<PatchGrid> {
    if img.channels != 3 {
        return Err(Error::ImageFormat("center-surround needs an RGB image".into()));
    }
    if surround_radius == 0 {
        return Err(Error::param("surround_radius", "must be >= 1"));
    }
    let means = for_each_patch_lab(img, patch_size)?;
    let (gw, gh) = (means.grid_w, means.grid_h);
    let r = surround_radius as isize;
    let mut values = Vec::with_capacity(gw * gh);
    for gy in 0..gh as isize {
        for gx in 0..gw as isize {
            let mut acc = [0.0; 3];
            let mut count = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (gx + dx, gy + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= gw as isize || ny >= gh as isize {
                        continue;
                    }
                    let m = means.lab[ny as usize * gw + nx as usize];
                    acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
                    count += 1;
                }
            }
            if count == 0 {
                values.push(0.0);
                continue;
            }
            let center = means.lab[gy as usize * gw + gx as usize];
            let dist = acc
                .iter()
                .zip(center)
                .map(|(a, c)| {
                    let d = a / count as f64 - c;
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            values.push(dist);
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid_w: gw,
        grid_h: gh,
        values,
    })
}

struct LabGrid {
    grid_w: usize,
    grid_h: usize,
    lab: Vec<[f64; 3]>,
}

fn for_each_patch_lab(img: &ImagePlane, patch_size: usize) -> Result<LabGrid> {
    let (grid_w, grid_h) = grid_dims(img, patch_size)?;
    let mut lab = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut acc = [0.0; 3];
            let mut count = 0usize;
            for y in gy * patch_size..((gy + 1) * patch_size).min(img.height) {
                for x in gx * patch_size..((gx + 1) * patch_size).min(img.width) {
                    let o = (y * img.width + x) * 3;
                    let c = srgb_to_lab([img.data[o], img.data[o + 1], img.data[o + 2]]);
                    acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                    count += 1;
                }
            }
            lab.push(acc.map(|a| a / count as f64));
        }
    }
    Ok(LabGrid {
        grid_w,
        grid_h,
        lab,
    })
}

/// Flatten row-major, then standardize + temperature softmax.
pub fn saliency_to_scores(grid: &PatchGrid, tau: f64, epsilon: f64) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::EmptyVector);
    }
    softmax_temp(&standardize(&grid.values, epsilon)?, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelMethod {
    Entropy,
    Sobel,
    CenterSurround,
}

impl PixelMethod {
    pub const ALL: [PixelMethod; 3] = [
        PixelMethod::Entropy,
        PixelMethod::Sobel,
        PixelMethod::CenterSurround,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PixelMethod::Entropy => "entropy",
            PixelMethod::Sobel => "sobel",
            PixelMethod::CenterSurround => "center-surround",
        }
    }

    pub fn compute(self, img: &ImagePlane, patch_size: usize) -> Result<PatchGrid> {
        match self {
            PixelMethod::Entropy => histogram_entropy_saliency(img, patch_size),
            PixelMethod::Sobel => sobel_saliency(img, patch_size),
            PixelMethod::CenterSurround => {
                center_surround_saliency(img, patch_size, DEFAULT_SURROUND_RADIUS)
            }
        }
    }
}

impl FromStr for PixelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PixelMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::param(
                    "method",
                    format!("unknown saliency method `{s}`; valid: entropy, sobel, center-surround"),
                )
            })
    }
}

/// Replaces the hidden norms of one frame's tokens with patch saliency,
/// cell `i` going to the frame's `i`-th token. Counts must match exactly.
pub fn override_frame_norms(
    traces: &[LayerTrace],
    layout: &PromptLayout,
    step: u32,
    grid: &PatchGrid,
) -> Result<Vec<LayerTrace>> {
    let seg = layout
        .visual_segments()
        .find(|s| s.step() == Some(step))
        .ok_or_else(|| Error::param("step", format!("no frame with step {step}")))?;
    if seg.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches for a {}-token frame",
            grid.len(),
            seg.len()
        )));
    }
    traces
        .iter()
        .map(|t| {
            let mut norms = t.hidden_norms().to_vec();
            norms[seg.indices()].copy_from_slice(&grid.values);
            t.with_hidden_norms(norms)
        })
        .collect()
}
