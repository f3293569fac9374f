//! Image loading, resizing to the network input size, normalization to
//! [0, 1], and assembly of position-aligned triplet batches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use ndarray::{Array2, Array4, ArrayViewMut3, Axis};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::samples::SampleSet;
use crate::vocab::NUM_LABELS;

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 128;

/// Identifies the resampling convention in cache keys.
pub const RESIZE_KERNEL: &str = "bilinear/align_corners=false";

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image {0:?} not found under the image root")]
    NotFound(String),
    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: u64,
        #[source]
        source: Box<ImageError>,
    },
    #[error("image {source_ref:?} is {got}x{got} with {channels} channel(s), expected {want}x{want}")]
    Shape {
        source_ref: String,
        got: usize,
        want: usize,
        channels: usize,
    },
}

/// A decoded single-channel image at source resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Maximum representable value of the source bit depth (255 or 65535).
    pub max_value: u16,
    /// Row-major.
    pub pixels: Vec<u16>,
}

/// Loads an image as grayscale. Colour sources are averaged over RGB; alpha
/// is dropped; 16-bit sources keep their full range.
pub fn load_grayscale(path: &Path) -> Result<RawImage, ImageError> {
    let reader = ImageReader::open(path)
        .map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let decoded = reader.decode().map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(to_raw(decoded))
}

fn average3(r: u32, g: u32, b: u32) -> u16 {
    ((r + g + b + 1) / 3) as u16
}

fn to_raw(img: DynamicImage) -> RawImage {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (max_value, pixels): (u16, Vec<u16>) = match img {
        DynamicImage::ImageLuma8(b) => (255, b.into_raw().into_iter().map(u16::from).collect()),
        DynamicImage::ImageLumaA8(b) => (255, b.pixels().map(|p| u16::from(p.0[0])).collect()),
        DynamicImage::ImageLuma16(b) => (u16::MAX, b.into_raw()),
        DynamicImage::ImageLumaA16(b) => (u16::MAX, b.pixels().map(|p| p.0[0]).collect()),
        DynamicImage::ImageRgb8(b) => (
            255,
            b.pixels()
                .map(|p| average3(p.0[0].into(), p.0[1].into(), p.0[2].into()))
                .collect(),
        ),
        DynamicImage::ImageRgba8(b) => (
            255,
            b.pixels()
                .map(|p| average3(p.0[0].into(), p.0[1].into(), p.0[2].into()))
                .collect(),
        ),
        DynamicImage::ImageRgb16(b) => (
            u16::MAX,
            b.pixels()
                .map(|p| average3(p.0[0].into(), p.0[1].into(), p.0[2].into()))
                .collect(),
        ),
        DynamicImage::ImageRgba16(b) => (
            u16::MAX,
            b.pixels()
                .map(|p| average3(p.0[0].into(), p.0[1].into(), p.0[2].into()))
                .collect(),
        ),
        other => (u16::MAX, other.to_luma16().into_raw()),
    };
    RawImage {
        width,
        height,
        max_value,
        pixels,
    }
}

/// Bilinear resampling with the half-pixel (align_corners = false)
/// convention: output pixel `o` samples source coordinate
/// `(o + 0.5) * in / out - 0.5`, clamped at the borders.
pub fn resize_bilinear(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height, "source buffer does not match its dimensions");
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, width);
    let ys = taps(out_h, height);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, wy) in &ys {
        let (r0, r1) = (&src[y0 * width..][..width], &src[y1 * width..][..width]);
        for &(x0, x1, wx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * wx;
            out.push(top + (bottom - top) * wy);
        }
    }
    out
}

/// A square HWC tensor with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source: String,
}

impl ImageTensor {
    /// Replicates a single channel `channels` times (or returns self).
    pub fn with_channels(self, channels: usize) -> ImageTensor {
        if channels == self.channels {
            return self;
        }
        assert_eq!(self.channels, 1, "can only replicate a single-channel tensor");
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        ImageTensor {
            channels,
            data,
            ..self
        }
    }

    /// Keeps the first channel.
    pub fn first_channel(&self) -> ImageTensor {
        ImageTensor {
            size: self.size,
            channels: 1,
            data: self.data.iter().step_by(self.channels).copied().collect(),
            source: self.source.clone(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.size * self.size * self.channels
            && self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

pub fn resize_normalize(raw: &RawImage) -> ImageTensor {
    resize_normalize_to(raw, INPUT_SIZE)
}

/// Resamples to `size`×`size` then divides by the bit-depth maximum.
pub fn resize_normalize_to(raw: &RawImage, size: usize) -> ImageTensor {
    assert!(raw.width > 0 && raw.height > 0, "empty image");
    let src: Vec<f32> = raw.pixels.iter().map(|&p| f32::from(p)).collect();
    let max = f32::from(raw.max_value);
    let data = resize_bilinear(&src, raw.width, raw.height, size, size)
        .into_iter()
        .map(|v| (v / max).clamp(0.0, 1.0))
        .collect();
    ImageTensor {
        size,
        channels: 1,
        data,
        source: String::new(),
    }
}

/// Content-addressed store of resized single-channel tensors.
#[derive(Debug, Clone)]
pub struct TensorCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 4] = b"CXRT";
const CACHE_VERSION: u32 = 1;

impl TensorCache {
    pub fn new(dir: impl Into<PathBuf>) -> TensorCache {
        TensorCache { dir: dir.into() }
    }

    fn key(bytes: &[u8], size: usize) -> String {
        let mut h = Sha256::new();
        h.update(bytes);
        h.update(RESIZE_KERNEL.as_bytes());
        h.update((size as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn read(path: &Path, size: usize) -> Option<Vec<f32>> {
        let bytes = fs::read(path).ok()?;
        let (head, body) = bytes.split_at_checked(12)?;
        if &head[..4] != CACHE_MAGIC
            || u32::from_le_bytes(head[4..8].try_into().ok()?) != CACHE_VERSION
            || u32::from_le_bytes(head[8..12].try_into().ok()?) as usize != size
            || body.len() != size * size * 4
        {
            return None;
        }
        Some(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    /// Returns the cached tensor for `path`, computing and storing it on a miss.
    pub fn load(&self, path: &Path, size: usize) -> Result<ImageTensor, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entry = self.dir.join(Self::key(&bytes, size));
        if let Some(data) = Self::read(&entry, size) {
            return Ok(ImageTensor {
                size,
                channels: 1,
                data,
                source: path.display().to_string(),
            });
        }
        let mut tensor = resize_normalize_to(&load_grayscale(path)?, size);
        tensor.source = path.display().to_string();
        let mut out = Vec::with_capacity(12 + tensor.data.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(size as u32).to_le_bytes());
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        // A failed cache write only costs a recomputation next time.
        if fs::create_dir_all(&self.dir).is_ok() {
            let tmp = entry.with_extension("tmp");
            if fs::write(&tmp, &out).is_ok() {
                let _ = fs::rename(&tmp, &entry);
            }
        }
        Ok(tensor)
    }
}

/// Resolves sample image references to network-ready tensors.
pub trait ImageSource: Sync {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError>;
    fn channels(&self) -> usize;
    fn size(&self) -> usize {
        INPUT_SIZE
    }
}

/// Images found anywhere below a root directory, looked up by file name
/// (the NIH archive spreads them over `images_NNN/images/`).
#[derive(Debug, Clone)]
pub struct DirectoryImageSource {
    index: HashMap<String, PathBuf>,
    size: usize,
    channels: usize,
    cache: Option<TensorCache>,
}

impl DirectoryImageSource {
    pub fn new(root: &Path, channels: usize) -> Result<DirectoryImageSource, ImageError> {
        if !root.is_dir() {
            return Err(ImageError::Io {
                path: root.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "image root is not a directory"),
            });
        }
        let mut index = HashMap::new();
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| ImageError::Io {
                path: root.to_path_buf(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                index.entry(name).or_insert_with(|| entry.path().to_path_buf());
            }
        }
        Ok(DirectoryImageSource {
            index,
            size: INPUT_SIZE,
            channels,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: TensorCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn path_of(&self, image_ref: &str) -> Option<&Path> {
        self.index.get(image_ref).map(PathBuf::as_path)
    }
}

impl ImageSource for DirectoryImageSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError> {
        let path = self
            .path_of(image_ref)
            .ok_or_else(|| ImageError::NotFound(image_ref.to_string()))?;
        let mut tensor = match &self.cache {
            Some(cache) => cache.load(path, self.size)?,
            None => resize_normalize_to(&load_grayscale(path)?, self.size),
        };
        tensor.source = image_ref.to_string();
        Ok(tensor.with_channels(self.channels))
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn size(&self) -> usize {
        self.size
    }
}

/// Three position-aligned image stacks (batch, H, W, C) and one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub first: Array4<f32>,
    pub second: Array4<f32>,
    pub third: Array4<f32>,
    pub targets: Array2<f32>,
    pub sample_ids: Vec<u64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn positions(&self) -> [&Array4<f32>; 3] {
        [&self.first, &self.second, &self.third]
    }
}

fn copy_into(mut dst: ArrayViewMut3<f32>, t: &ImageTensor) {
    for (d, s) in dst.iter_mut().zip(&t.data) {
        *d = *s;
    }
}

/// Loads every image of `samples` (in parallel) and stacks them in input order.
pub fn assemble_batch(samples: &[SampleSet], source: &dyn ImageSource) -> Result<TripletBatch, ImageError> {
    let (n, size, c) = (samples.len(), source.size(), source.channels());
    let loaded: Vec<[ImageTensor; 3]> = samples
        .par_iter()
        .map(|s| {
            let load = |r: &String| {
                let t = source.load(r).map_err(|e| ImageError::Sample {
                    sample_id: s.sample_id,
                    source: Box::new(e),
                })?;
                if t.size != size || t.channels != c {
                    return Err(ImageError::Shape {
                        source_ref: r.clone(),
                        got: t.size,
                        want: size,
                        channels: t.channels,
                    });
                }
                Ok(t)
            };
            Ok([load(&s.images[0])?, load(&s.images[1])?, load(&s.images[2])?])
        })
        .collect::<Result<_, ImageError>>()?;

    let mut stacks = [
        Array4::<f32>::zeros((n, size, size, c)),
        Array4::<f32>::zeros((n, size, size, c)),
        Array4::<f32>::zeros((n, size, size, c)),
    ];
    for (i, triplet) in loaded.iter().enumerate() {
        for (stack, t) in stacks.iter_mut().zip(triplet) {
            copy_into(stack.index_axis_mut(Axis(0), i), t);
        }
    }
    let mut targets = Array2::<f32>::zeros((n, NUM_LABELS));
    for (i, s) in samples.iter().enumerate() {
        targets[[i, s.target_label.index()]] = 1.0;
    }
    let [first, second, third] = stacks;
    Ok(TripletBatch {
        first,
        second,
        third,
        targets,
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
    })
}

/// In-memory source, mostly for tests and synthetic pipelines.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource {
    pub images: HashMap<String, ImageTensor>,
    pub channels: usize,
}

impl ImageSource for MemoryImageSource {
    fn load(&self, image_ref: &str) -> Result<ImageTensor, ImageError> {
        self.images
            .get(image_ref)
            .cloned()
            .map(|t| t.with_channels(self.channels))
            .ok_or_else(|| ImageError::NotFound(image_ref.to_string()))
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn size(&self) -> usize {
        self.images.values().next().map_or(INPUT_SIZE, |t| t.size)
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::metadata::ViewPosition;
    use crate::samples::fixtures::sample;
    use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
    use proptest::prelude::*;

    fn constant(value: u16, max_value: u16, w: usize, h: usize) -> RawImage {
        RawImage {
            width: w,
            height: h,
            max_value,
            pixels: vec![value; w * h],
        }
    }

    #[test]
    fn constant_images_stay_constant() {
        let t = resize_normalize(&constant(255, 255, 300, 200));
        assert!(t.data.iter().all(|&v| v == 1.0));
        let t = resize_normalize(&constant(0, 255, 7, 7));
        assert!(t.data.iter().all(|&v| v == 0.0));
        assert_eq!(t.data.len(), INPUT_SIZE * INPUT_SIZE);
    }

    #[test]
    fn checkerboard_upsample_matches_reference_resampler() {
        // Reference values from torch.nn.functional.interpolate(mode="bilinear", align_corners=False).
        let raw = RawImage {
            width: 2,
            height: 2,
            max_value: 255,
            pixels: vec![0, 255, 255, 0],
        };
        let t = resize_normalize(&raw);
        let at = |y: usize, x: usize| t.data[y * 128 + x];
        let expected = [
            ((0, 0), 0.0),
            ((0, 127), 1.0),
            ((31, 32), 0.0078125),
            ((63, 63), 0.4998779296875),
            ((63, 64), 0.5001220703125),
            ((64, 64), 0.4998779296875),
            ((10, 100), 1.0),
            ((127, 0), 1.0),
        ];
        for ((y, x), v) in expected {
            assert!((at(y, x) - v).abs() < 1e-6, "({y},{x}): {} vs {v}", at(y, x));
        }
    }

    #[test]
    fn non_square_resample_matches_reference() {
        // torch interpolate of arange(12).view(3,4)/11 to (5,7).
        let expected: [[f32; 7]; 5] = [
            [0.0, 0.032467537, 0.08441559, 0.13636366, 0.18831171, 0.24025975, 0.27272728],
            [0.14545456, 0.17792208, 0.22987016, 0.2818182, 0.33376625, 0.38571432, 0.41818184],
            [0.36363637, 0.39610392, 0.44805196, 0.5, 0.5519481, 0.6038961, 0.6363636],
            [0.5818182, 0.6142858, 0.66623384, 0.7181819, 0.77012998, 0.822078, 0.85454547],
            [0.72727275, 0.7597402, 0.8116883, 0.8636364, 0.91558444, 0.96753246, 1.0],
        ];
        let src: Vec<f32> = (0..12).map(|v| v as f32 / 11.0).collect();
        let out = resize_bilinear(&src, 4, 3, 7, 5);
        for (y, row) in expected.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                assert!((out[y * 7 + x] - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loads_8bit_16bit_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = GrayImage::from_fn(16, 8, |x, y| Luma([(x * 10 + y) as u8]));
        let p8 = dir.path().join("g8.png");
        gray.save(&p8).unwrap();
        let raw = load_grayscale(&p8).unwrap();
        assert_eq!((raw.width, raw.height, raw.max_value), (16, 8, 255));
        assert_eq!(raw.pixels[3 * 16 + 5], 53);

        let rgb = RgbImage::from_fn(16, 8, |x, y| {
            let v = (x * 10 + y) as u8;
            Rgb([v, v, v])
        });
        let prgb = dir.path().join("rgb.png");
        rgb.save(&prgb).unwrap();
        assert_eq!(load_grayscale(&prgb).unwrap().pixels, raw.pixels);

        let g16: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(4, 4, |x, _| Luma([x as u16 * 20000]));
        let p16 = dir.path().join("g16.png");
        g16.save(&p16).unwrap();
        let raw16 = load_grayscale(&p16).unwrap();
        assert_eq!(raw16.max_value, u16::MAX);
        assert_eq!(raw16.pixels[3], 60000);
        let t = resize_normalize_to(&raw16, 4);
        assert!((t.data[3] - 60000.0 / 65535.0).abs() < 1e-6);
    }

    #[test]
    fn large_png_loads_at_full_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(1024, 1024, |x, y| Luma([((x ^ y) & 0xff) as u8]));
        let p = dir.path().join("big.png");
        img.save(&p).unwrap();
        let raw = load_grayscale(&p).unwrap();
        assert_eq!((raw.width, raw.height), (1024, 1024));
        assert!(raw.pixels.iter().all(|&v| v <= 255));
        assert!(resize_normalize(&raw).is_valid());
    }

    #[test]
    fn truncated_file_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        GrayImage::from_fn(64, 64, |x, _| Luma([x as u8])).save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_grayscale(&p), Err(ImageError::Decode { .. })));
        assert!(matches!(
            load_grayscale(&dir.path().join("missing.png")),
            Err(ImageError::Io { .. })
        ));
    }

    #[test]
    fn cache_returns_identical_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        GrayImage::from_fn(40, 30, |x, y| Luma([(x * 3 + y) as u8])).save(&p).unwrap();
        let cache = TensorCache::new(dir.path().join("cache"));
        let a = cache.load(&p, 16).unwrap();
        let b = cache.load(&p, 16).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(fs::read_dir(dir.path().join("cache")).unwrap().count(), 1);
        assert_eq!(a.data, resize_normalize_to(&load_grayscale(&p).unwrap(), 16).data);
    }

    fn memory_source(channels: usize) -> MemoryImageSource {
        let mut images = HashMap::new();
        for pid in 1..=2u32 {
            for f in 0..3u32 {
                let name = format!("{pid:08}_{f:03}.png");
                let v = (pid * 10 + f) as f32 / 100.0;
                images.insert(
                    name.clone(),
                    ImageTensor {
                        size: 8,
                        channels: 1,
                        data: vec![v; 64],
                        source: name,
                    },
                );
            }
        }
        MemoryImageSource { images, channels }
    }

    #[test]
    fn batch_shapes_and_targets() {
        let src = memory_source(3);
        let samples = vec![
            sample(0, 1, "Mass", ViewPosition::PA),
            sample(1, 2, "No Finding", ViewPosition::PA),
        ];
        let batch = assemble_batch(&samples, &src).unwrap();
        assert_eq!(batch.first.shape(), &[2, 8, 8, 3]);
        assert_eq!(batch.targets.shape(), &[2, NUM_LABELS]);
        assert_eq!(batch.targets[[1, 14]], 1.0);
        for row in batch.targets.rows() {
            assert_eq!(row.sum(), 1.0);
        }
        assert!((batch.second[[1, 0, 0, 2]] - 0.21).abs() < 1e-7);
        assert!((batch.third[[0, 3, 3, 0]] - 0.12).abs() < 1e-7);
        assert_eq!(batch, assemble_batch(&samples, &src).unwrap());
    }

    #[test]
    fn missing_image_reports_sample() {
        let src = memory_source(1);
        let samples = vec![sample(42, 9, "Mass", ViewPosition::PA)];
        match assemble_batch(&samples, &src) {
            Err(ImageError::Sample { sample_id: 42, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn same_size_resize_is_identity(vals in prop::collection::vec(0.0f32..=1.0, 64)) {
            let out = resize_bilinear(&vals, 8, 8, 8, 8);
            for (a, b) in out.iter().zip(&vals) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn tensors_stay_in_unit_range(
            w in 1usize..40, h in 1usize..40,
            pixels in prop::collection::vec(any::<u16>(), 1600),
            size in 1usize..64,
        ) {
            let raw = RawImage { width: w, height: h, max_value: u16::MAX, pixels: pixels[..w * h].to_vec() };
            let t = resize_normalize_to(&raw, size);
            prop_assert!(t.is_valid());
        }

        #[test]
        fn channel_replication_round_trips(vals in prop::collection::vec(0.0f32..=1.0, 16)) {
            let t = ImageTensor { size: 4, channels: 1, data: vals, source: String::new() };
            let rgb = t.clone().with_channels(3);
            for px in rgb.data.chunks(3) {
                prop_assert!(px[0] == px[1] && px[1] == px[2]);
            }
            prop_assert_eq!(rgb.first_channel(), t);
        }
    }
}
