//! Synthetic small-object dataset and its on-disk form.
//!
//! Each sample holds one or two thin bright circular arcs on a dark,
//! blotchy background, corrupted by multiplicative speckle. The arcs cover
//! well under one percent of the image.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::roiconv::{BBox, BinaryMask};
use crate::tensor::Tensor;

/// Image, ground-truth mask and the tight boxes of the mask's components.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gt_mask: BinaryMask,
    pub gt_boxes: Vec<BBox>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, gt_mask: BinaryMask) -> Self {
        let gt_boxes = mask_to_boxes(&gt_mask);
        Sample {
            image,
            gt_mask,
            gt_boxes,
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        self.gt_mask.count() as f64 / self.gt_mask.cells().len() as f64
    }

    /// Halves both extents: 2x2 average for the image, 2x2 "any" for the
    /// mask.
    pub fn downsample2(&self) -> Result<Sample> {
        let (_, h, w) = self.image.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "Sample::downsample2",
                "extents must be even",
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.image.data();
        let image = Tensor::from_fn(&[1, ho, wo], |idx| {
            let (i, j) = (2 * (idx / wo), 2 * (idx % wo));
            0.25 * (src[i * w + j]
                + src[i * w + j + 1]
                + src[(i + 1) * w + j]
                + src[(i + 1) * w + j + 1])
        });
        let cells = (0..ho * wo)
            .map(|idx| {
                let (i, j) = (2 * (idx / wo), 2 * (idx % wo));
                self.gt_mask.get(i, j)
                    || self.gt_mask.get(i, j + 1)
                    || self.gt_mask.get(i + 1, j)
                    || self.gt_mask.get(i + 1, j + 1)
            })
            .collect();
        Ok(Sample::new(image, BinaryMask::from_cells(ho, wo, cells)?))
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleParams {
    pub min_arcs: usize,
    pub max_arcs: usize,
    pub radius: (f64, f64),
    /// Arc span in radians.
    pub span: (f64, f64),
    pub thickness: (usize, usize),
    pub arc_intensity: (f64, f64),
    /// Base gray level everywhere.
    pub background: f64,
    /// Multiplicative noise amplitude; `n = speckle * (e - 1)`, `e ~ Exp(1)`.
    pub speckle: f64,
    pub blobs: (usize, usize),
    pub blob_amplitude: (f64, f64),
    pub blob_sigma: (f64, f64),
    /// Accepted range of the positive-pixel fraction.
    pub positive_band: (f64, f64),
    pub max_draws: usize,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            min_arcs: 1,
            max_arcs: 2,
            radius: (6.0, 16.0),
            span: (0.6, 1.6),
            thickness: (1, 3),
            arc_intensity: (0.55, 0.9),
            background: 0.12,
            speckle: 1.0,
            blobs: (2, 5),
            blob_amplitude: (0.15, 0.45),
            blob_sigma: (3.0, 8.0),
            positive_band: (0.001, 0.01),
            max_draws: 100,
        }
    }
}

impl SampleParams {
    /// No noise, no blobs, no background, exactly one arc.
    pub fn noiseless() -> Self {
        SampleParams {
            min_arcs: 1,
            max_arcs: 1,
            background: 0.0,
            speckle: 0.0,
            blobs: (0, 0),
            ..Default::default()
        }
    }
}

fn in_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

struct Arc {
    cx: f64,
    cy: f64,
    radius: f64,
    start: f64,
    span: f64,
    half_thickness: f64,
    intensity: f64,
}

impl Arc {
    fn covers(&self, i: usize, j: usize) -> bool {
        let (dx, dy) = (j as f64 + 0.5 - self.cx, i as f64 + 0.5 - self.cy);
        if ((dx * dx + dy * dy).sqrt() - self.radius).abs() > self.half_thickness {
            return false;
        }
        let angle = dy.atan2(dx);
        (angle - self.start).rem_euclid(std::f64::consts::TAU) <= self.span
    }
}

/// Draws one sample; redraws until the positive fraction falls in the band.
pub fn generate_sample<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    params: &SampleParams,
) -> Result<Sample> {
    if height < 32 || width < 32 {
        return Err(Error::invalid(
            "generate_sample",
            format!("extents must be at least 32x32, got {height}x{width}"),
        ));
    }
    let n = height * width;
    for _ in 0..params.max_draws {
        let n_arcs = rng.gen_range(params.min_arcs..=params.max_arcs.max(params.min_arcs));
        let arcs: Vec<Arc> = (0..n_arcs)
            .map(|_| {
                let radius = in_range(rng, params.radius);
                Arc {
                    cx: rng.gen_range(0.15..0.85) * width as f64,
                    cy: rng.gen_range(0.15..0.85) * height as f64,
                    radius,
                    start: rng.gen_range(0.0..std::f64::consts::TAU),
                    span: in_range(rng, params.span),
                    half_thickness: rng.gen_range(params.thickness.0..=params.thickness.1) as f64
                        / 2.0,
                    intensity: in_range(rng, params.arc_intensity),
                }
            })
            .collect();
        let n_blobs = rng.gen_range(params.blobs.0..=params.blobs.1.max(params.blobs.0));
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
            .map(|_| {
                (
                    rng.gen_range(0.0..width as f64),
                    rng.gen_range(0.0..height as f64),
                    in_range(rng, params.blob_sigma),
                    in_range(rng, params.blob_amplitude),
                )
            })
            .collect();

        let mut cells = vec![false; n];
        let mut pixels = vec![0f64; n];
        for i in 0..height {
            for j in 0..width {
                let idx = i * width + j;
                let mut v = params.background;
                for &(bx, by, sigma, amp) in &blobs {
                    let (dx, dy) = (j as f64 + 0.5 - bx, i as f64 + 0.5 - by);
                    v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                for arc in &arcs {
                    if arc.covers(i, j) {
                        cells[idx] = true;
                        v = v.max(arc.intensity);
                    }
                }
                pixels[idx] = v;
            }
        }
        let frac = cells.iter().filter(|&&c| c).count() as f64 / n as f64;
        let (lo, hi) = params.positive_band;
        if !(lo..=hi).contains(&frac) {
            continue;
        }
        let image = Tensor::from_fn(&[1, height, width], |idx| {
            let v = if params.speckle > 0.0 {
                let e = -(1.0 - rng.gen::<f64>()).ln();
                pixels[idx] * (1.0 + params.speckle * (e - 1.0))
            } else {
                pixels[idx]
            };
            v.clamp(0.0, 1.0) as f32
        });
        return Ok(Sample::new(
            image,
            BinaryMask::from_cells(height, width, cells)?,
        ));
    }
    Err(Error::GenerationExhausted(params.max_draws))
}

/// Per-sample seed derived from the run seed.
pub fn sample_seed(run_seed: u64, index: u64) -> u64 {
    run_seed ^ index
}

/// Deterministic sample for `(run_seed, index)`.
pub fn generate_indexed(
    run_seed: u64,
    index: u64,
    height: usize,
    width: usize,
    params: &SampleParams,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(run_seed, index));
    generate_sample(&mut rng, height, width, params)
}

/// Tight boxes of the 8-connected components, in scan order of each
/// component's first pixel.
pub fn mask_to_boxes(mask: &BinaryMask) -> Vec<BBox> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.cells()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            (y0, x0, y1, x1) = (y0.min(i), x0.min(j), y1.max(i), x1.max(j));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let q = ni as usize * w + nj as usize;
                    if mask.cells()[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        boxes.push(BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32));
    }
    boxes
}

/// Round half up to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn from_image(image: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 1 {
            return Err(Error::invalid("Gray::from_image", "expected one channel"));
        }
        Ok(Gray {
            height: h,
            width: w,
            pixels: image.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Gray {
            height: mask.height(),
            width: mask.width(),
            pixels: mask
                .cells()
                .iter()
                .map(|&c| if c { 255 } else { 0 })
                .collect(),
        }
    }

    pub fn to_image(&self) -> Tensor<f32> {
        Tensor::from_fn(&[1, self.height, self.width], |i| {
            self.pixels[i] as f32 / 255.0
        })
    }

    /// Nonzero pixels are foreground.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_cells(
            self.height,
            self.width,
            self.pixels.iter().map(|&p| p != 0).collect(),
        )
        .expect("extents")
    }
}

pub fn encode_pgm(g: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend_from_slice(&g.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<Gray> {
    let fail = |offset: usize, msg: &str| Error::Format {
        path: origin.to_string(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if !bytes.starts_with(b"P5") {
        return Err(fail(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(pos, "only 8-bit PGM (maxval 1..=255) is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(fail(
            bytes.len(),
            &format!("body holds {} bytes, header promises {need}", body.len()),
        ));
    }
    let pixels = body[..need]
        .iter()
        .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
        .collect();
    Ok(Gray {
        height,
        width,
        pixels,
    })
}

pub fn write_pgm(path: &Path, g: &Gray) -> Result<()> {
    fs::write(path, encode_pgm(g)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Run seed for this split; train and test draw from different seeds.
    pub fn seed(self, run_seed: u64) -> u64 {
        match self {
            Split::Train => run_seed,
            Split::Test => run_seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        }
    }
}

/// Ordered `(image, mask)` pairs of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    /// Paths resolved against the manifest's directory.
    pub entries: Vec<(PathBuf, PathBuf)>,
}

pub fn manifest_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(format!("{}.manifest", split.dir_name()))
}

impl DatasetManifest {
    /// Reads `image<TAB>mask` lines; relative paths are taken relative to
    /// the manifest.
    pub fn read(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if !trimmed.is_empty() {
                let (img, mask) = trimmed.split_once('\t').ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    offset,
                    msg: "expected `image<TAB>mask`".into(),
                })?;
                entries.push((base.join(img), base.join(mask)));
            }
            offset += line.len() as u64;
        }
        Ok(DatasetManifest { split, entries })
    }

    /// Writes the manifest with `rel_entries` as given (relative paths).
    pub fn write(path: &Path, rel_entries: &[(String, String)]) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (img, mask) in rel_entries {
            writeln!(f, "{img}\t{mask}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let (img, mask) = &self.entries[index];
        let gi = read_pgm(img)?;
        let gm = read_pgm(mask)?;
        if (gi.height, gi.width) != (gm.height, gm.width) {
            return Err(Error::ShapeMismatch {
                op: "DatasetManifest::load",
                expected: vec![gi.height, gi.width],
                got: vec![gm.height, gm.width],
            });
        }
        Ok(Sample::new(gi.to_image(), gm.to_mask()))
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.entries.len()).map(|i| self.load(i)).collect()
    }
}
