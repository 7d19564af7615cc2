//! Dataset ingestion and preprocessing: bit-depth quantization,
//! binarization, seeded train/valid splits, synthetic desk-scale image
//! generators, a packed uint8 array format and a PNG directory reader.

use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Arr;

/// Floor-quantize an 8-bit value onto a `2^num_bits`-level grid.
pub fn quantize_to_bits(x: u8, num_bits: u8) -> Result<u8> {
    if !(1..=8).contains(&num_bits) {
        return Err(Error::config(format!(
            "quantization depth must be in 1..=8, got {num_bits}"
        )));
    }
    Ok(x >> (8 - num_bits))
}

/// Map a quantized level back to 8-bit for display: `level * step + step/2`.
/// Identity at 8 bits; at 5 bits this reproduces the banding appearance of
/// low-depth targets.
pub fn dequantize_for_display(level: u8, num_bits: u8) -> u8 {
    let step = 1u16 << (8 - num_bits);
    (u16::from(level) * step + step / 2).min(255) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BinarizeMode {
    /// Pixel is 1 when the normalized intensity is at least 0.5.
    #[default]
    Threshold,
    /// Per-pixel Bernoulli draw with the intensity as probability.
    Stochastic { seed: u64 },
}

/// Binarize intensities normalized to `[0, 1]`.
pub fn binarize(x: &Arr, mode: BinarizeMode) -> Result<Arr> {
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::data("binarize input must lie in [0, 1]".to_string()));
    }
    Ok(match mode {
        BinarizeMode::Threshold => x.mapv(|v| f64::from(v >= 0.5)),
        BinarizeMode::Stochastic { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Arr::zeros(IxDyn(x.shape()));
            for (o, &p) in out.iter_mut().zip(x.iter()) {
                *o = f64::from(rng.gen::<f64>() < p);
            }
            out
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs,
    Checkerboards,
    GradientRamps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// PNG files, lexicographic order.
    Directory { path: PathBuf },
    /// Packed uint8 array file (see [`write_packed`]).
    PackedFile { path: PathBuf },
    Synthetic {
        generator: SyntheticKind,
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: SourceSpec,
    pub resolution: usize,
    pub channels: usize,
    /// 1 (Bernoulli targets), 5 or 8.
    pub num_bits: u8,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub binarize: BinarizeMode,
}

fn default_train_fraction() -> f64 {
    0.9
}

/// In-memory dataset of identically shaped integer images.
#[derive(Clone)]
pub struct Dataset {
    levels: Vec<u8>,
    pub count: usize,
    pub channels: usize,
    pub resolution: usize,
    pub num_bits: u8,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
        if !matches!(spec.num_bits, 1 | 5 | 8) {
            return Err(Error::config(format!(
                "dataset bit depth must be 1, 5 or 8, got {}",
                spec.num_bits
            )));
        }
        if !matches!(spec.channels, 1 | 3) {
            return Err(Error::config(format!(
                "datasets are 1- or 3-channel, got {}",
                spec.channels
            )));
        }
        if spec.num_bits == 1 && spec.channels != 1 {
            return Err(Error::config("binary datasets must be 1-channel"));
        }
        if spec.resolution == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        if !(0.0 < spec.train_fraction && spec.train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie in (0, 1], got {}",
                spec.train_fraction
            )));
        }
        let raw = match &spec.source {
            SourceSpec::Synthetic {
                generator,
                count,
                seed,
            } => {
                if *count == 0 {
                    return Err(Error::data(
                        "synthetic dataset needs count >= 1".to_string(),
                    ));
                }
                synthesize(*generator, *count, spec.resolution, spec.channels, *seed)
            }
            SourceSpec::PackedFile { path } => {
                let packed = read_packed(path)?;
                if packed.resolution != spec.resolution || packed.channels != spec.channels {
                    return Err(Error::data(format!(
                        "packed file is {}x{} c{}, requested {}x{} c{}",
                        packed.resolution,
                        packed.resolution,
                        packed.channels,
                        spec.resolution,
                        spec.resolution,
                        spec.channels
                    )));
                }
                // already at the requested depth: pass through below
                if packed.num_bits == spec.num_bits && spec.num_bits != 8 {
                    if packed
                        .levels
                        .iter()
                        .any(|&v| v as usize >= (1 << spec.num_bits))
                    {
                        return Err(Error::data(format!(
                            "packed payload exceeds {}-bit levels",
                            spec.num_bits
                        )));
                    }
                    return Ok(Dataset {
                        count: packed.levels.len()
                            / (spec.channels * spec.resolution * spec.resolution),
                        levels: packed.levels,
                        channels: spec.channels,
                        resolution: spec.resolution,
                        num_bits: spec.num_bits,
                    });
                }
                if packed.num_bits != 8 {
                    return Err(Error::data(format!(
                        "packed file holds {}-bit data, cannot derive {}-bit targets",
                        packed.num_bits, spec.num_bits
                    )));
                }
                packed.levels
            }
            SourceSpec::Directory { path } => {
                read_png_directory(path, spec.resolution, spec.channels)?
            }
        };
        if raw.is_empty() {
            return Err(Error::data("dataset is empty".to_string()));
        }
        let count = raw.len() / (spec.channels * spec.resolution * spec.resolution);

        let levels = match spec.num_bits {
            8 => raw,
            5 => raw
                .into_iter()
                .map(|v| quantize_to_bits(v, 5))
                .collect::<Result<Vec<u8>>>()?,
            1 => {
                let norm = Arr::from_shape_vec(
                    IxDyn(&[raw.len()]),
                    raw.iter().map(|&v| v as f64 / 255.0).collect(),
                )
                .unwrap();
                let bin = binarize(&norm, spec.binarize)?;
                bin.iter().map(|&v| v as u8).collect()
            }
            _ => unreachable!(),
        };
        Ok(Dataset {
            levels,
            count,
            channels: spec.channels,
            resolution: spec.resolution,
            num_bits: spec.num_bits,
        })
    }

    fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn raw_levels(&self) -> &[u8] {
        &self.levels
    }

    /// Assemble `[len(indices), C, H, W]` float targets (integer levels).
    pub fn batch(&self, indices: &[usize]) -> Arr {
        let il = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * il);
        for &i in indices {
            assert!(i < self.count, "index {i} out of range");
            data.extend(self.levels[i * il..(i + 1) * il].iter().map(|&v| v as f64));
        }
        Arr::from_shape_vec(
            IxDyn(&[
                indices.len(),
                self.channels,
                self.resolution,
                self.resolution,
            ]),
            data,
        )
        .unwrap()
    }
}

/// Seeded Fisher-Yates permutation; the epoch index advances the stream so
/// every epoch is a fresh deterministic shuffle.
pub fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(shuffle_seed, epoch, u64::from(STREAM_SHUFFLE)));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Stream tags keeping independent RNG uses from colliding on one seed.
pub const STREAM_SHUFFLE: u8 = 1;
pub const STREAM_NOISE: u8 = 2;
pub const STREAM_EVAL: u8 = 3;
pub const STREAM_SAMPLE: u8 = 4;

/// Fresh deterministic RNG for `(seed, counter)` on the given stream.
pub fn stream_rng(seed: u64, counter: u64, stream: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, counter, u64::from(stream)))
}

/// Mix a base seed with stream identifiers; used everywhere a fresh
/// deterministic RNG stream is derived.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h = h.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    }
    h
}

/// Deterministic train/valid split over image indices.
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

pub fn split_indices(count: usize, train_fraction: f64, shuffle_seed: u64) -> SplitIndices {
    let perm = epoch_permutation(count, shuffle_seed, u64::MAX);
    let n_train = ((count as f64 * train_fraction).round() as usize).clamp(1, count);
    SplitIndices {
        train: perm[..n_train].to_vec(),
        valid: perm[n_train..].to_vec(),
    }
}

/// Training batch for a global step: consecutive positions of the per-epoch
/// permutation stream, so one pass touches every element exactly once.
pub fn batch_indices(
    train: &[usize],
    batch_size: usize,
    step: u64,
    shuffle_seed: u64,
) -> Vec<usize> {
    let n = train.len() as u64;
    let start = step * batch_size as u64;
    let mut epoch = start / n;
    let mut perm = epoch_permutation(train.len(), shuffle_seed, epoch);
    let mut out = Vec::with_capacity(batch_size);
    for j in 0..batch_size as u64 {
        let cursor = start + j;
        if cursor / n != epoch {
            epoch = cursor / n;
            perm = epoch_permutation(train.len(), shuffle_seed, epoch);
        }
        out.push(train[perm[(cursor % n) as usize]]);
    }
    out
}

fn synthesize(
    kind: SyntheticKind,
    count: usize,
    resolution: usize,
    channels: usize,
    seed: u64,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(count * channels * resolution * resolution);
    for img in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, img as u64, kind as u64));
        match kind {
            SyntheticKind::GaussianBlobs => {
                let n_blobs = rng.gen_range(2..=4);
                let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
                    .map(|_| {
                        let cx = rng.gen_range(0.0..resolution as f64);
                        let cy = rng.gen_range(0.0..resolution as f64);
                        let s = rng.gen_range(0.08..0.35) * resolution as f64;
                        let amp = [
                            rng.gen_range(0.4..1.0),
                            rng.gen_range(0.4..1.0),
                            rng.gen_range(0.4..1.0),
                        ];
                        (cx, cy, s, amp)
                    })
                    .collect();
                let bg = rng.gen_range(0.0..0.2);
                for c in 0..channels {
                    for y in 0..resolution {
                        for x in 0..resolution {
                            let mut v = bg;
                            for (cx, cy, s, amp) in &blobs {
                                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                                v += amp[c] * (-d2 / (2.0 * s * s)).exp();
                            }
                            out.push((v.min(1.0) * 255.0).round() as u8);
                        }
                    }
                }
            }
            SyntheticKind::Checkerboards => {
                let cell = 1usize << rng.gen_range(0..=2);
                let (ox, oy) = (rng.gen_range(0..cell.max(1)), rng.gen_range(0..cell.max(1)));
                let hi: u8 = rng.gen_range(170..=255);
                let lo: u8 = rng.gen_range(0..=85);
                for _c in 0..channels {
                    for y in 0..resolution {
                        for x in 0..resolution {
                            let parity = (((x + ox) / cell) + ((y + oy) / cell)) % 2;
                            out.push(if parity == 0 { hi } else { lo });
                        }
                    }
                }
            }
            SyntheticKind::GradientRamps => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let lo = rng.gen_range(0.0..80.0);
                let hi = rng.gen_range(175.0..255.0);
                let (dx, dy) = (theta.cos(), theta.sin());
                let diag = (resolution as f64 - 1.0).max(1.0) * std::f64::consts::SQRT_2;
                for _c in 0..channels {
                    for y in 0..resolution {
                        for x in 0..resolution {
                            let t = ((x as f64 * dx + y as f64 * dy) / diag + 0.5).clamp(0.0, 1.0);
                            out.push((lo + (hi - lo) * t).round() as u8);
                        }
                    }
                }
            }
        }
    }
    out
}

const PACKED_MAGIC: &[u8; 4] = b"HVDA";

pub struct PackedArray {
    pub levels: Vec<u8>,
    pub count: usize,
    pub channels: usize,
    pub resolution: usize,
    pub num_bits: u8,
    pub seed: u64,
}

/// Write the packed array format: magic, version, shape, bit depth, seed,
/// then the row-major uint8 payload.
pub fn write_packed(path: &Path, arr: &PackedArray) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + arr.levels.len());
    buf.extend_from_slice(PACKED_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(arr.count as u32).to_le_bytes());
    buf.extend_from_slice(&(arr.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(arr.resolution as u32).to_le_bytes());
    buf.push(arr.num_bits);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&arr.seed.to_le_bytes());
    buf.extend_from_slice(&arr.levels);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<PackedArray> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 32 || &bytes[..4] != PACKED_MAGIC {
        return Err(Error::data(format!(
            "{} is not a packed array file",
            path.display()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != 1 {
        return Err(Error::data(format!("unsupported packed version {version}")));
    }
    let (count, channels, resolution) = (u32_at(8), u32_at(12), u32_at(16));
    let num_bits = bytes[20];
    let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let expect = count * channels * resolution * resolution;
    let levels = bytes[32..].to_vec();
    if levels.len() != expect {
        return Err(Error::data(format!(
            "packed payload holds {} bytes, header implies {expect}",
            levels.len()
        )));
    }
    Ok(PackedArray {
        levels,
        count,
        channels,
        resolution,
        num_bits,
        seed,
    })
}

fn read_png_directory(dir: &Path, resolution: usize, channels: usize) -> Result<Vec<u8>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no .png files in {}", dir.display())));
    }
    let mut out = Vec::new();
    for f in &files {
        let (w, h, c, interleaved) = crate::image_io::read_png(f)?;
        if w != resolution || h != resolution || c != channels {
            return Err(Error::data(format!(
                "{}: {w}x{h} c{c}, expected {resolution}x{resolution} c{channels}",
                f.display()
            )));
        }
        // interleaved HWC to planar CHW
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(interleaved[(y * w + x) * c + ci]);
                }
            }
        }
    }
    Ok(out)
}
