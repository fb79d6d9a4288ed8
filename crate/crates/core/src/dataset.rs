//! Labelled image collections: PPM directories with a manifest, CIFAR-10
//! binary archives, and conversion to model-ready batches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockcipher::{encrypt, CipherParams};
use crate::error::{invalid, Error, Result};
use crate::image::{RasterImage, CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// CIFAR-10 record: one label byte plus a 32x32 channel-planar image.
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_SIDE: usize = 32;

/// Relative image paths with integer labels, one `path label` pair per line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<(PathBuf, usize)>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, label) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("manifest line {}: expected `path label`", i + 1)))?;
            let label = label
                .parse()
                .map_err(|_| Error::Parse(format!("manifest line {}: bad label {label:?}", i + 1)))?;
            entries.push((PathBuf::from(path.trim()), label));
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(p, l)| format!("{} {l}\n", p.display())).collect()
    }

    /// Loads `dir/manifest.txt`, checking every path exists and, when given,
    /// that labels are below `n_classes`.
    pub fn load(dir: &Path, n_classes: Option<usize>) -> Result<Self> {
        let m = Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        for (p, l) in &m.entries {
            if !dir.join(p).is_file() {
                return Err(Error::Data(format!("manifest entry {} does not exist", p.display())));
            }
            if let Some(k) = n_classes {
                if *l >= k {
                    return Err(Error::Data(format!("label {l} of {} not below {k}", p.display())));
                }
            }
        }
        Ok(m)
    }
}

/// Images with labels, in memory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledImages {
    pub images: Vec<RasterImage>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: RasterImage, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec() }
    }

    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            Self { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec() },
            Self { images: self.images[n..].to_vec(), labels: self.labels[n..].to_vec() },
        )
    }

    pub fn map_images(&self, f: impl Fn(&RasterImage) -> Result<RasterImage>) -> Result<Self> {
        Ok(Self { images: self.images.iter().map(f).collect::<Result<_>>()?, labels: self.labels.clone() })
    }

    pub fn encrypted(&self, params: &CipherParams) -> Result<Self> {
        self.map_images(|img| encrypt(img, params))
    }

    pub fn resized(&self, side: usize) -> Result<Self> {
        self.map_images(|img| img.resize_nearest(side, side))
    }

    /// Reads a directory holding `manifest.txt` and PPM files.
    pub fn load_dir(dir: &Path, n_classes: Option<usize>) -> Result<Self> {
        let manifest = Manifest::load(dir, n_classes)?;
        let mut out = Self::default();
        for (p, l) in &manifest.entries {
            out.push(RasterImage::load_ppm(dir.join(p))?, *l);
        }
        Ok(out)
    }

    /// Writes `00000.ppm, 00001.ppm, ...` plus `manifest.txt` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest::default();
        for (i, (img, &l)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = PathBuf::from(format!("{i:05}.ppm"));
            img.save_ppm(dir.join(&name))?;
            manifest.entries.push((name, l));
        }
        fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
        Ok(())
    }

    pub fn label_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                h[l] += 1;
            }
        }
        h
    }
}

/// Decodes a CIFAR-10 binary archive held in memory.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImages> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 archive of {} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
            bytes.len()
        )));
    }
    let plane = CIFAR10_SIDE * CIFAR10_SIDE;
    let mut out = LabeledImages::default();
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        let (label, pix) = (rec[0] as usize, &rec[1..]);
        let mut data = vec![0u8; plane * CHANNELS];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = pix[c * plane + p];
            }
        }
        out.push(RasterImage::new(CIFAR10_SIDE, CIFAR10_SIDE, data)?, label);
    }
    Ok(out)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<LabeledImages> {
    parse_cifar10(&fs::read(path)?)
}

/// Encodes 32x32 images back into CIFAR-10 records.
pub fn encode_cifar10(set: &LabeledImages) -> Result<Vec<u8>> {
    let plane = CIFAR10_SIDE * CIFAR10_SIDE;
    let mut out = Vec::with_capacity(set.len() * CIFAR10_RECORD);
    for (img, &l) in set.images.iter().zip(&set.labels) {
        if img.width() != CIFAR10_SIDE || img.height() != CIFAR10_SIDE {
            return Err(invalid("CIFAR-10 records hold 32x32 images"));
        }
        out.push(u8::try_from(l).map_err(|_| invalid(format!("label {l} does not fit a byte")))?);
        for c in 0..CHANNELS {
            for p in 0..plane {
                out.push(img.data()[p * CHANNELS + c]);
            }
        }
    }
    Ok(out)
}

/// Maps an 8-bit sample to the model's input range, `(p / 255 - 0.5) / 0.25`.
pub fn normalize_sample(p: u8) -> f64 {
    (p as f64 / 255.0 - 0.5) / 0.25
}

/// A batch ready for the model: `images: B x 3 x S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Normalized, channel-planar features for a whole set of square images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    side: usize,
    features: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_images(set: &LabeledImages) -> Result<Self> {
        let side = set.images.first().map_or(0, |i| i.width());
        let plane = side * side;
        let mut features = Vec::with_capacity(set.len() * plane * CHANNELS);
        let lut: Vec<T> = (0..=255u8).map(|p| T::from_f64_lossy(normalize_sample(p))).collect();
        for img in &set.images {
            if img.width() != side || img.height() != side {
                return Err(invalid("all images in a dataset must share one square size"));
            }
            for c in 0..CHANNELS {
                features.extend((0..plane).map(|p| lut[img.data()[p * CHANNELS + c] as usize]));
            }
        }
        Ok(Self { side, features, labels: set.labels.clone() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let per = self.side * self.side * CHANNELS;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.features[i * per..(i + 1) * per]);
        }
        Batch {
            images: Tensor::new(&[indices.len(), CHANNELS, self.side, self.side], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in index order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Images whose class is the spatial arrangement of a fixed set of block
/// patterns: every class uses the same `grid^2` patterns, each class in its
/// own order, plus per-image noise. Only block positions separate classes.
pub fn synthetic_arrangements(
    count: usize,
    block: usize,
    grid: usize,
    n_classes: usize,
    noise: u8,
    seed: u64,
) -> Result<LabeledImages> {
    if block == 0 || grid == 0 || n_classes == 0 {
        return Err(invalid("synthetic data needs positive block, grid and class count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid * grid;
    let patterns: Vec<[u8; 3]> = (0..n)
        .map(|i| {
            let hue = i as f64 / n as f64;
            let ch = |off: f64| (127.5 + 100.0 * (std::f64::consts::TAU * (hue + off)).cos()) as u8;
            [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
        })
        .collect();
    let arrangements: Vec<Vec<usize>> = (0..n_classes)
        .map(|_| {
            let mut a: Vec<usize> = (0..n).collect();
            a.shuffle(&mut rng);
            a
        })
        .collect();
    let jitter = Uniform::new_inclusive(-(noise as i16), noise as i16);
    let side = block * grid;
    let mut out = LabeledImages::default();
    for i in 0..count {
        let label = i % n_classes;
        let mut img = RasterImage::zeros(side, side);
        for (pos, &pat) in arrangements[label].iter().enumerate() {
            let (bx, by) = (pos % grid, pos / grid);
            for py in 0..block {
                for px in 0..block {
                    let rgb = patterns[pat].map(|v| (v as i16 + jitter.sample(&mut rng)).clamp(0, 255) as u8);
                    img.set_pixel(bx * block + px, by * block + py, rgb);
                }
            }
        }
        out.push(img, label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for p in 0..1024 {
                r.push(fill(c, p));
            }
        }
        r
    }

    #[test]
    fn cifar_empty_and_single_record() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
        let rec = record(7, |c, p| ((c * 100 + p) % 256) as u8);
        let set = parse_cifar10(&rec).unwrap();
        assert_eq!(set.labels, vec![7]);
        let img = &set.images[0];
        assert_eq!(img.pixel(0, 0), [0, 100, 200]);
        assert_eq!(img.pixel(5, 1), [37, 137, 237]);
        assert_eq!(encode_cifar10(&set).unwrap(), rec);
    }

    #[test]
    fn cifar_truncated_is_rejected() {
        let rec = record(1, |_, _| 0);
        assert!(matches!(parse_cifar10(&rec[..rec.len() - 1]), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest { entries: vec![("a b.ppm".into(), 3), ("x/y.ppm".into(), 0)] };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("lonely\n").is_err());
        assert!(Manifest::parse("a.ppm x\n").is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = synthetic_arrangements(5, 2, 2, 3, 10, 1).unwrap();
        set.save_dir(dir.path()).unwrap();
        assert_eq!(LabeledImages::load_dir(dir.path(), Some(3)).unwrap(), set);
        assert!(matches!(LabeledImages::load_dir(dir.path(), Some(2)), Err(Error::Data(_))));
    }

    #[test]
    fn batches_are_channel_planar() {
        let mut set = LabeledImages::default();
        set.push(RasterImage::new(1, 1, vec![0, 255, 51]).unwrap(), 2);
        let ds = Dataset::<f64>::from_images(&set).unwrap();
        let b = ds.batch(&[0, 0]);
        assert_eq!(b.images.shape(), &[2, 3, 1, 1]);
        assert_eq!(b.images.data(), &[-2.0, 2.0, normalize_sample(51), -2.0, 2.0, normalize_sample(51)]);
        assert_eq!(b.labels, vec![2, 2]);
    }

    #[test]
    fn synthetic_classes_share_block_multisets() {
        let set = synthetic_arrangements(4, 2, 3, 4, 0, 5).unwrap();
        let blocks = |img: &RasterImage| {
            let mut v: Vec<Vec<u8>> = (0..9).map(|i| crate::blockcipher::extract_block(img, 2, i)).collect();
            v.sort();
            v
        };
        assert_eq!(blocks(&set.images[0]), blocks(&set.images[1]));
        assert_ne!(set.images[0], set.images[1]);
    }
}
