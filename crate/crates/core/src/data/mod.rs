//! Class-folder datasets, preprocessing, target selection and the procedural
//! two-domain corpus.

mod synth;
mod targets;

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageReader};
use ndarray::{s, Array3, Array4, Axis};
use sha2::{Digest, Sha256};

use crate::autograd::{kernels, Tensor};
use crate::error::{Error, Result};

pub use synth::{make_synthetic_corpus, SynthConfig, SHAPES, SYNTH_VERSION};
pub use targets::{select_targets, TargetSet};

pub const DEFAULT_INPUT_SIZE: usize = 224;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A batch of RGB images `[batch, 3, height, width]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f64>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(Error::Shape(format!("image batch must have 3 channels, got {:?}", data.shape())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {bad} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != data.shape()[0] {
                return Err(Error::Shape(format!("{} labels for {} images", l.len(), data.shape()[0])));
            }
        }
        Ok(ImageBatch { data, labels })
    }

    /// Stacks `[3, H, W]` images into a batch.
    pub fn stack(images: &[Array3<f64>], labels: Option<Vec<usize>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Validation("cannot build an empty image batch".into()))?;
        let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|_| Error::Shape(format!("images differ in shape from {:?}", first.shape())))?;
        ImageBatch::new(data.as_standard_layout().into_owned(), labels)
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }

    pub fn image(&self, i: usize) -> Array3<f64> {
        self.data.slice(s![i, .., .., ..]).to_owned()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.data.clone().into_dyn()
    }
}

/// Converts a decoded 3-channel image into `[3, size, size]` floats in
/// `[0, 1]`, resizing bilinearly.
pub fn preprocess(image: &DynamicImage, size: usize) -> Result<Array3<f64>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let chw = match image {
        DynamicImage::ImageRgb8(buf) => {
            Array3::from_shape_fn((3, h, w), |(c, y, x)| buf.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }
        DynamicImage::ImageRgb16(buf) => {
            Array3::from_shape_fn((3, h, w), |(c, y, x)| buf.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0)
        }
        DynamicImage::ImageRgb32F(buf) => Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (buf.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0)
        }),
        other => {
            return Err(Error::Validation(format!(
                "expected a 3-channel image, got {:?}",
                other.color()
            )))
        }
    };
    resize_chw(&chw, size)
}

/// Bilinear resize of a `[C, H, W]` image to `size × size`; identity when the
/// image already has that size.
pub fn resize_chw(image: &Array3<f64>, size: usize) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if size == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot resize {h}x{w} image to {size}")));
    }
    let src = image.as_standard_layout();
    let out = kernels::bilinear_forward(src.as_slice().unwrap(), c, (h, w), (size, size));
    Ok(Array3::from_shape_vec((c, size, size), out).expect("resize layout"))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::path(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    reader
        .decode()
        .map_err(|e| Error::Validation(format!("{}: cannot decode image: {e}", path.display())))
}

/// Loads and preprocesses one image file.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f64>> {
    let img = open_image(path)?;
    preprocess(&img, size).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Header-only check that a file is an image we can decode to 3 channels.
fn probe_image(path: &Path) -> Result<()> {
    let invalid = |m: String| Error::Validation(format!("{}: {m}", path.display()));
    let reader = ImageReader::open(path)
        .map_err(|e| Error::path(path, e))?
        .with_guessed_format()
        .map_err(|e| invalid(e.to_string()))?;
    let decoder = reader.into_decoder().map_err(|e| invalid(format!("cannot decode image: {e}")))?;
    match image::ImageDecoder::color_type(&decoder) {
        ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => Ok(()),
        other => Err(invalid(format!("expected a 3-channel image, got {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class_index: usize,
}

/// An image dataset laid out as `root/<class>/<file>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub domain_name: String,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Scans a class-folder tree. Class index is the rank of the folder name in
/// lexicographic order; samples are sorted by path.
pub fn load_image_folder(root: impl AsRef<Path>) -> Result<DomainDataset> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::path(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::path(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !name.starts_with('.') {
            class_dirs.push((name, entry.path()));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Validation(format!("{}: no class subdirectories", root.display())));
    }
    class_dirs.sort();

    let mut samples = Vec::new();
    for (index, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::path(dir, e))? {
            let path = entry.map_err(|e| Error::path(dir, e))?.path();
            if path.is_file() && is_image_file(&path) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::Validation(format!("class `{name}` contains no images")));
        }
        for path in files {
            probe_image(&path)?;
            samples.push(Sample {
                path,
                class_index: index,
            });
        }
    }
    samples.sort_by(|a, b| a.path.cmp(&b.path));

    let domain_name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DomainDataset {
        root: root.to_path_buf(),
        samples,
        class_names: class_dirs.into_iter().map(|(n, _)| n).collect(),
        domain_name,
    })
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Loads `indices` as a labelled batch.
    pub fn load_batch(&self, indices: &[usize], size: usize) -> Result<ImageBatch> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
            images.push(load_image(&s.path, size)?);
            labels.push(s.class_index);
        }
        ImageBatch::stack(&images, Some(labels))
    }

    /// Digest of the dataset listing: relative paths, labels and file sizes.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for s in &self.samples {
            let rel = s.path.strip_prefix(&self.root).unwrap_or(&s.path);
            h.update(rel.to_string_lossy().as_bytes());
            h.update((s.class_index as u64).to_le_bytes());
            let len = fs::metadata(&s.path).map_err(|e| Error::path(&s.path, e))?.len();
            h.update(len.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}
