//! Fixed 256-entry colormaps and PNG heatmaps of normalized maps.
//!
//! A value `v` in `[0, 1]` is drawn with entry `round(255 v)`. Every entry
//! is a distinct RGB triple, so a rendered image can be inverted back to
//! values within `1 / 510` by nearest-entry lookup.

use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

pub const LEVELS: usize = 256;
/// Width in pixels of the white gap between compared maps.
pub const SEPARATOR_PX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Viridis,
    Jet,
}

impl FromStr for Colormap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "viridis" => Ok(Colormap::Viridis),
            "jet" => Ok(Colormap::Jet),
            other => Err(format!("unknown colormap `{other}` (expected viridis or jet)")),
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Polynomial fit of viridis.
fn viridis(t: f64) -> [u8; 3] {
    const C: [[f64; 3]; 7] = [
        [
            0.277_727_327_223_417_7,
            0.005_407_344_544_966_578,
            0.334_099_805_335_306_1,
        ],
        [0.105_093_043_108_577_4, 1.404_613_529_898_575, 1.384_590_162_594_685],
        [
            -0.330_861_828_725_556_3,
            0.214_847_559_468_213,
            0.095_095_163_028_236_59,
        ],
        [-4.634_230_498_983_486, -5.799_100_973_351_585, -19.332_440_956_279_87],
        [6.228_269_936_347_081, 14.179_933_366_805_09, 56.690_552_600_681_05],
        [4.776_384_997_670_288, -13.745_145_377_746_01, -65.353_032_633_372_34],
        [-5.435_455_855_934_631, 4.645_852_612_178_535, 26.312_435_249_583_2],
    ];
    let mut rgb = [0u8; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let v = C.iter().rev().fold(0.0, |acc, c| acc * t + c[ch]);
        *out = to_byte(v);
    }
    rgb
}

fn jet(t: f64) -> [u8; 3] {
    let ramp = |x: f64| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
    [to_byte(ramp(3.0)), to_byte(ramp(2.0)), to_byte(ramp(1.0))]
}

impl Colormap {
    pub fn lut(self) -> Vec<[u8; 3]> {
        (0..LEVELS)
            .map(|i| {
                let t = i as f64 / (LEVELS - 1) as f64;
                match self {
                    Colormap::Viridis => viridis(t),
                    Colormap::Jet => jet(t),
                }
            })
            .collect()
    }

    pub fn color(self, v: f64) -> [u8; 3] {
        let i = (v.clamp(0.0, 1.0) * (LEVELS - 1) as f64).round() as usize;
        self.lut()[i]
    }

    /// Value of the nearest LUT entry.
    pub fn invert(self, rgb: [u8; 3]) -> f64 {
        let lut = self.lut();
        let dist = |c: &[u8; 3]| -> i32 { (0..3).map(|k| (c[k] as i32 - rgb[k] as i32).pow(2)).sum() };
        let (i, _) = lut
            .iter()
            .enumerate()
            .min_by_key(|(_, c)| dist(c))
            .expect("non-empty lut");
        i as f64 / (LEVELS - 1) as f64
    }
}

/// RGB raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Each cell becomes a `scale x scale` block; row 0 is drawn at the top.
pub fn heatmap(values: &[f64], width: usize, height: usize, scale: usize, cmap: Colormap) -> Image {
    let lut = cmap.lut();
    let (w, h) = (width * scale, height * scale);
    let mut rgb = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / scale) * width + x / scale];
            let i = (v.clamp(0.0, 1.0) * (LEVELS - 1) as f64).round() as usize;
            rgb.extend_from_slice(&lut[i]);
        }
    }
    Image {
        width: w,
        height: h,
        rgb,
    }
}

/// `left | separator | right`; both images must have the same height.
pub fn side_by_side(left: &Image, right: &Image) -> Image {
    assert_eq!(left.height, right.height, "compared images differ in height");
    let width = left.width + SEPARATOR_PX + right.width;
    let mut rgb = Vec::with_capacity(3 * width * left.height);
    for y in 0..left.height {
        rgb.extend_from_slice(&left.rgb[3 * y * left.width..3 * (y + 1) * left.width]);
        rgb.extend(std::iter::repeat_n(255u8, 3 * SEPARATOR_PX));
        rgb.extend_from_slice(&right.rgb[3 * y * right.width..3 * (y + 1) * right.width]);
    }
    Image {
        width,
        height: left.height,
        rgb,
    }
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), png::EncodingError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&img.rgb)?;
    w.finish()
}

pub fn read_png(path: &Path) -> Result<Image, png::DecodingError> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().expect("bounded image size")];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png::DecodingError::LimitsExceeded);
    }
    Ok(Image {
        width: info.width as usize,
        height: info.height as usize,
        rgb: buf,
    })
}
