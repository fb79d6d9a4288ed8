//! Block-wise scrambling cipher for 8-bit RGB images.
//!
//! Encryption runs four keyed stages on an image split into `M x M` blocks:
//! block permutation (`k1`), a pixel shuffle shared by every block (`k2`),
//! a negative-positive mask shared by every block (`k3`), and reassembly.
//! Blocks are indexed row-major and each block is flattened row-major,
//! pixel-interleaved, so sample `(py * M + px) * 3 + c` of a block is
//! channel `c` of pixel `(px, py)`.

use crate::error::{invalid, Result};
use crate::image::{RasterImage, CHANNELS};
use crate::keystream::{gen_mask, gen_permutation, BitMask, PermutationVec, SecretKey};

/// Which keyed stages are active. All on is the full cipher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub block_permutation: bool,
    pub pixel_shuffle: bool,
    pub negative_positive: bool,
}

impl Stages {
    pub const ALL: Stages = Stages { block_permutation: true, pixel_shuffle: true, negative_positive: true };
    pub const NONE: Stages = Stages { block_permutation: false, pixel_shuffle: false, negative_positive: false };
    pub const PERMUTATION_ONLY: Stages =
        Stages { block_permutation: true, pixel_shuffle: false, negative_positive: false };
}

impl Default for Stages {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CipherOptions {
    pub stages: Stages,
    /// Shuffle all `3 M^2` samples of a block instead of whole pixels.
    pub shuffle_channels: bool,
    /// Draw one negative-positive bit per sample instead of per pixel.
    pub per_sample_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherParams {
    pub block_size: usize,
    pub key: SecretKey,
    pub options: CipherOptions,
}

impl CipherParams {
    pub fn new(block_size: usize, key: SecretKey) -> Self {
        Self { block_size, key, options: CipherOptions::default() }
    }

    pub fn with_stages(mut self, stages: Stages) -> Self {
        self.options.stages = stages;
        self
    }

    pub fn with_options(mut self, options: CipherOptions) -> Self {
        self.options = options;
        self
    }

    fn samples_per_block(&self) -> usize {
        self.block_size * self.block_size * CHANNELS
    }

    /// Block grid `(columns, rows)` for a `width x height` image.
    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let m = self.block_size;
        if m == 0 {
            return Err(invalid("block size must be at least 1"));
        }
        if width % m != 0 || height % m != 0 {
            return Err(invalid(format!("image {width}x{height} is not divisible by block size {m}")));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image has no blocks"));
        }
        Ok((width / m, height / m))
    }

    /// Block permutation for an image with `n_blocks` blocks.
    pub fn block_permutation(&self, n_blocks: usize) -> Result<PermutationVec> {
        if self.options.stages.block_permutation {
            gen_permutation(self.key.k1, n_blocks)
        } else {
            Ok(PermutationVec::identity(n_blocks))
        }
    }

    /// Within-block permutation lifted to sample indices.
    pub fn sample_permutation(&self) -> Result<PermutationVec> {
        let m2 = self.block_size * self.block_size;
        if !self.options.stages.pixel_shuffle {
            return Ok(PermutationVec::identity(m2 * CHANNELS));
        }
        if self.options.shuffle_channels {
            return gen_permutation(self.key.k2, m2 * CHANNELS);
        }
        let pixels = gen_permutation(self.key.k2, m2)?;
        let lifted = (0..m2 * CHANNELS).map(|s| pixels.dest(s / CHANNELS) * CHANNELS + s % CHANNELS).collect();
        PermutationVec::from_vec(lifted)
    }

    /// Negative-positive mask lifted to sample indices (indexed by the
    /// position after shuffling).
    pub fn sample_mask(&self) -> Result<BitMask> {
        let m2 = self.block_size * self.block_size;
        if !self.options.stages.negative_positive {
            return Ok(BitMask::zeros(m2 * CHANNELS));
        }
        if self.options.per_sample_mask {
            return gen_mask(self.key.k3, m2 * CHANNELS);
        }
        let pixels = gen_mask(self.key.k3, m2)?;
        Ok(BitMask::from_bits((0..m2 * CHANNELS).map(|s| pixels.get(s / CHANNELS)).collect()))
    }
}

struct Schedule {
    cols: usize,
    block_perm: PermutationVec,
    sample_perm: PermutationVec,
    mask: BitMask,
}

impl Schedule {
    fn new(img: &RasterImage, params: &CipherParams) -> Result<Self> {
        let (cols, rows) = params.grid(img.width(), img.height())?;
        Ok(Self {
            cols,
            block_perm: params.block_permutation(cols * rows)?,
            sample_perm: params.sample_permutation()?,
            mask: params.sample_mask()?,
        })
    }
}

/// Copies block `index` out of `img` as a flat, row-major, interleaved vector.
pub fn extract_block(img: &RasterImage, block_size: usize, index: usize) -> Vec<u8> {
    let cols = img.width() / block_size;
    let (bx, by) = (index % cols, index / cols);
    let row_len = block_size * CHANNELS;
    let mut out = Vec::with_capacity(block_size * row_len);
    for py in 0..block_size {
        let o = ((by * block_size + py) * img.width() + bx * block_size) * CHANNELS;
        out.extend_from_slice(&img.data()[o..o + row_len]);
    }
    out
}

fn write_block(img: &mut RasterImage, block_size: usize, index: usize, block: &[u8]) {
    let width = img.width();
    let cols = width / block_size;
    let (bx, by) = (index % cols, index / cols);
    let row_len = block_size * CHANNELS;
    for py in 0..block_size {
        let o = ((by * block_size + py) * width + bx * block_size) * CHANNELS;
        img.data_mut()[o..o + row_len].copy_from_slice(&block[py * row_len..(py + 1) * row_len]);
    }
}

pub fn encrypt(img: &RasterImage, params: &CipherParams) -> Result<RasterImage> {
    let sched = Schedule::new(img, params)?;
    let m = params.block_size;
    let mut out = RasterImage::zeros(img.width(), img.height());
    let mut enc = vec![0u8; params.samples_per_block()];
    for src in 0..sched.block_perm.len() {
        let block = extract_block(img, m, src);
        for (s, &v) in block.iter().enumerate() {
            let d = sched.sample_perm.dest(s);
            enc[d] = if sched.mask.get(d) { 255 - v } else { v };
        }
        write_block(&mut out, m, sched.block_perm.dest(src), &enc);
    }
    debug_assert_eq!(sched.cols * m, img.width());
    Ok(out)
}

pub fn decrypt(img: &RasterImage, params: &CipherParams) -> Result<RasterImage> {
    let sched = Schedule::new(img, params)?;
    let m = params.block_size;
    let mut out = RasterImage::zeros(img.width(), img.height());
    let mut plain = vec![0u8; params.samples_per_block()];
    for src in 0..sched.block_perm.len() {
        let block = extract_block(img, m, sched.block_perm.dest(src));
        for (s, p) in plain.iter_mut().enumerate() {
            let d = sched.sample_perm.dest(s);
            let v = block[d];
            *p = if sched.mask.get(d) { 255 - v } else { v };
        }
        write_block(&mut out, m, src, &plain);
    }
    Ok(out)
}

/// The fixed affine map one encrypted block is of its source block:
/// `enc_block[t] = a * img_block[block_perm^-1(t)] + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAffineMap {
    /// Side of `a`, `3 M^2`.
    pub dim: usize,
    /// Row-major signed permutation matrix, entries in `{-1, 0, 1}`.
    pub a: Vec<i8>,
    /// Offsets, entries in `{0, 255}`.
    pub b: Vec<u8>,
    pub block_perm: PermutationVec,
}

impl BlockAffineMap {
    pub fn entry(&self, row: usize, col: usize) -> i8 {
        self.a[row * self.dim + col]
    }

    /// Dense evaluation of `a x + b`.
    pub fn apply(&self, block: &[u8]) -> Vec<u8> {
        assert_eq!(block.len(), self.dim);
        (0..self.dim)
            .map(|r| {
                let row = &self.a[r * self.dim..(r + 1) * self.dim];
                let acc: i32 = row.iter().zip(block).map(|(&a, &x)| a as i32 * x as i32).sum::<i32>() + self.b[r] as i32;
                u8::try_from(acc).expect("affine block map left the 8-bit range")
            })
            .collect()
    }
}

pub fn block_affine_map(params: &CipherParams, width: usize, height: usize) -> Result<BlockAffineMap> {
    let (cols, rows) = params.grid(width, height)?;
    let dim = params.samples_per_block();
    let sample_perm = params.sample_permutation()?;
    let mask = params.sample_mask()?;
    let mut a = vec![0i8; dim * dim];
    let mut b = vec![0u8; dim];
    for s in 0..dim {
        let d = sample_perm.dest(s);
        if mask.get(d) {
            a[d * dim + s] = -1;
            b[d] = 255;
        } else {
            a[d * dim + s] = 1;
        }
    }
    Ok(BlockAffineMap { dim, a, b, block_perm: params.block_permutation(cols * rows)? })
}
