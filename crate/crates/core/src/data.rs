//! Procedural compound-domain benchmark, its binary container and
//! leave-one-domain-out splits.
//!
//! Class identity lives only in the spatial structure of an image; domain
//! identity lives only in global style (per-channel colors, contrast,
//! background grating and noise level). Channel statistics therefore carry
//! the domain signal.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 8] = b"COMENDS1";
const HEADER_FIELDS: usize = 6;

/// Fraction of source samples held back for validation.
pub const VAL_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// One labeled image with its hidden domain id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `C×H×W` row-major, every value in `[0, 1]` and exactly representable
    /// as `f32`.
    pub pixels: Vec<f64>,
    pub class_label: usize,
    pub true_domain: usize,
}

/// Training-side view of a sample: the domain id is not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Position of the sample in its bundle.
    pub index: usize,
    pub pixels: Vec<f64>,
    pub class_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub domains: usize,
    pub shape: ImageShape,
    /// Generator seed; the file format does not store it, so bundles read
    /// from disk carry `None`.
    pub seed: Option<u64>,
}

/// Benchmark defaults: 4 domains, 5 classes, 3×16×16, 40 per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub domains: usize,
    pub classes: usize,
    pub per_cell: usize,
    pub shape: ImageShape,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            domains: 4,
            classes: 5,
            per_cell: 40,
            shape: ImageShape::new(3, 16, 16),
        }
    }
}

#[derive(Debug, Clone)]
struct DomainStyle {
    /// Per-channel multiplier of the class structure, always positive.
    gain: Vec<f64>,
    /// Per-channel background level.
    offset: Vec<f64>,
    contrast: f64,
    grating_amp: f64,
    grating_freq: f64,
    grating_angle: f64,
    noise: f64,
}

fn cell_seed(master: u64, domain: usize, class: usize) -> u64 {
    // splitmix64 finalizer over a packed key
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((domain as u64) << 32 | class as u64)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn domain_styles(seed: u64, domains: usize, channels: usize) -> Vec<DomainStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, usize::MAX >> 1, 0));
    let contrast_levels = [1.0, 0.55, 0.8, 0.4];
    (0..domains)
        .map(|m| {
            let hue = 2.0 * PI * m as f64 / domains as f64 + rng.gen_range(-0.2..0.2);
            let wave = |offset: f64, c: usize| {
                0.5 * (1.0 + (hue + offset - 2.0 * PI * c as f64 / channels.max(3) as f64).cos())
            };
            DomainStyle {
                gain: (0..channels).map(|c| 0.35 + 0.4 * wave(0.0, c)).collect(),
                offset: (0..channels).map(|c| 0.05 + 0.35 * wave(PI, c)).collect(),
                contrast: contrast_levels[m % contrast_levels.len()] * rng.gen_range(0.9..1.1),
                grating_amp: rng.gen_range(0.0..0.1),
                grating_freq: rng.gen_range(5.0..7.0),
                grating_angle: rng.gen_range(0.0..PI),
                noise: 0.01 + 0.05 * ((m * 7 + 3) % domains.max(2)) as f64 / domains.max(2) as f64,
            }
        })
        .collect()
}

/// Shape intensity in `[0, 1]` for class `k` at centered coordinates.
fn class_pattern(k: usize, u: f64, v: f64, thickness: f64) -> f64 {
    let family = k % 5;
    let turn = (k / 5) as f64 * 0.6;
    let (s, c) = turn.sin_cos();
    let (u, v) = (c * u - s * v, s * u + c * v);
    let bar = |d: f64| (-(d / thickness).powi(2)).exp();
    let r = (u * u + v * v).sqrt();
    match family {
        0 => bar(v),
        1 => bar(u),
        2 => bar((u - v) / 2f64.sqrt()),
        3 => bar(r - 0.28),
        _ => bar(u).max(bar(v)),
    }
}

fn render(
    rng: &mut ChaCha8Rng,
    class: usize,
    style: &DomainStyle,
    shape: ImageShape,
    noise: &Normal<f64>,
) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let dx = rng.gen_range(-0.1..0.1);
    let dy = rng.gen_range(-0.1..0.1);
    let zoom = rng.gen_range(0.85..1.15);
    let rot: f64 = rng.gen_range(-0.15..0.15);
    let thickness = rng.gen_range(0.08..0.12);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let shift = rng.gen_range(-0.03..0.03);
    let contrast = style.contrast * rng.gen_range(0.85..1.15);
    let jitter: Vec<(f64, f64)> = (0..shape.channels)
        .map(|_| (rng.gen_range(0.8..1.2), rng.gen_range(-0.06..0.06)))
        .collect();
    let (rs, rc) = rot.sin_cos();
    let (gs, gc) = style.grating_angle.sin_cos();
    let mut structure = vec![0.0; h * w];
    let mut grating = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u0 = (x as f64 + 0.5) / w as f64 - 0.5 - dx;
            let v0 = (y as f64 + 0.5) / h as f64 - 0.5 - dy;
            let (u, v) = ((rc * u0 - rs * v0) / zoom, (rs * u0 + rc * v0) / zoom);
            structure[y * w + x] = class_pattern(class, u, v, thickness);
            let t = gc * u0 + gs * v0;
            grating[y * w + x] = (2.0 * PI * style.grating_freq * t + phase).sin();
        }
    }
    let mut pixels = Vec::with_capacity(shape.numel());
    for c in 0..shape.channels {
        let (gain, bg) = (style.gain[c] * jitter[c].0, style.offset[c] + jitter[c].1);
        for i in 0..h * w {
            let v = bg
                + contrast * gain * structure[i]
                + style.grating_amp * grating[i]
                + style.noise * noise.sample(rng)
                + shift;
            pixels.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    pixels
}

/// Generates the benchmark. Pure function of `spec`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<DatasetBundle> {
    let BenchmarkSpec {
        seed,
        domains,
        classes,
        per_cell,
        shape,
    } = *spec;
    if domains < 2 || classes < 2 || per_cell < 4 {
        return Err(Error::InvalidDimension(format!(
            "need domains >= 2, classes >= 2, per_cell >= 4; got {domains}, {classes}, {per_cell}"
        )));
    }
    if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::InvalidDimension(format!(
            "empty image shape {shape:?}"
        )));
    }
    if domains > u16::MAX as usize || classes > u16::MAX as usize {
        return Err(Error::InvalidDimension(
            "domain/class ids must fit in u16".into(),
        ));
    }
    let styles = domain_styles(seed, domains, shape.channels);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(domains * classes * per_cell);
    for (m, style) in styles.iter().enumerate() {
        for k in 0..classes {
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, m, k));
            for _ in 0..per_cell {
                samples.push(Sample {
                    pixels: render(&mut rng, k, style, shape, &unit),
                    class_label: k,
                    true_domain: m,
                });
            }
        }
    }
    Ok(DatasetBundle {
        samples,
        classes,
        domains,
        shape,
        seed: Some(seed),
    })
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn view(&self, index: usize) -> LabeledImage {
        let s = &self.samples[index];
        LabeledImage {
            index,
            pixels: s.pixels.clone(),
            class_label: s.class_label,
        }
    }

    /// Hidden domain ids for `indices`; only evaluation code calls this.
    pub fn true_domains(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| self.samples[i].true_domain)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let record = 4 + 4 * self.shape.numel();
        let mut out = Vec::with_capacity(8 + 4 * HEADER_FIELDS + record * self.len() + 4);
        out.extend_from_slice(BUNDLE_MAGIC);
        for v in [
            self.domains,
            self.classes,
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&(s.class_label as u16).to_le_bytes());
            out.extend_from_slice(&(s.true_domain as u16).to_le_bytes());
            for &p in &s.pixels {
                out.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header_end = 8 + 4 * HEADER_FIELDS;
        if bytes.len() < 8 || &bytes[..8] != BUNDLE_MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        if bytes.len() < header_end + 4 {
            return Err(Error::TruncatedPayload {
                expected: header_end + 4,
                found: bytes.len(),
            });
        }
        let field = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (domains, classes, channels, height, width, n) =
            (field(0), field(1), field(2), field(3), field(4), field(5));
        if domains == 0 || classes == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::MalformedHeader(format!(
                "zero dimension in M={domains} K={classes} C={channels} H={height} W={width}"
            )));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[8..body]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let shape = ImageShape::new(channels, height, width);
        let record = 4 + 4 * shape.numel();
        let expected = header_end + n * record + 4;
        if bytes.len() != expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        let mut samples = Vec::with_capacity(n);
        for r in 0..n {
            let base = header_end + r * record;
            let class_label = u16::from_le_bytes([bytes[base], bytes[base + 1]]) as usize;
            let true_domain = u16::from_le_bytes([bytes[base + 2], bytes[base + 3]]) as usize;
            if class_label >= classes || true_domain >= domains {
                return Err(Error::MalformedHeader(format!(
                    "record {r} has class {class_label} / domain {true_domain} outside K={classes} M={domains}"
                )));
            }
            let pixels = bytes[base + 4..base + record]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            samples.push(Sample {
                pixels,
                class_label,
                true_domain,
            });
        }
        Ok(Self {
            samples,
            classes,
            domains,
            shape,
            seed: None,
        })
    }
}

pub fn write_bundle(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    DatasetBundle::from_bytes(&fs::read(path)?)
}

/// One leave-one-domain-out fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub held_out: usize,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl FoldSplit {
    /// Source samples (train then val), the order used for assignment files.
    pub fn source(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(&self.val)
    }

    pub fn source_indices(&self) -> Vec<usize> {
        self.source().map(|s| s.index).collect()
    }
}

/// Holds out domain `held_out` as test; shuffles the remaining samples with
/// `split_seed` and cuts 70/30 into train/val.
pub fn leave_one_domain_out(
    bundle: &DatasetBundle,
    held_out: usize,
    split_seed: u64,
) -> Result<FoldSplit> {
    if held_out >= bundle.domains {
        return Err(Error::DomainOutOfRange {
            id: held_out,
            count: bundle.domains,
        });
    }
    let (test_idx, mut source): (Vec<usize>, Vec<usize>) =
        (0..bundle.len()).partition(|&i| bundle.samples[i].true_domain == held_out);
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(split_seed, held_out, usize::MAX >> 2));
    source.shuffle(&mut rng);
    let n_val = (VAL_FRACTION * source.len() as f64).round() as usize;
    let val_idx = source.split_off(source.len() - n_val);
    Ok(FoldSplit {
        held_out,
        train: source.iter().map(|&i| bundle.view(i)).collect(),
        val: val_idx.iter().map(|&i| bundle.view(i)).collect(),
        test: test_idx.iter().map(|&i| bundle.view(i)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetBundle {
        generate_benchmark(&BenchmarkSpec {
            seed: 3,
            domains: 2,
            classes: 3,
            per_cell: 4,
            shape: ImageShape::new(3, 8, 8),
        })
        .unwrap()
    }

    #[test]
    fn counts_and_ranges() {
        let b = generate_benchmark(&BenchmarkSpec::default()).unwrap();
        assert_eq!(b.len(), 800);
        assert_eq!(b.domains, 4);
        for s in &b.samples {
            assert!(s.class_label < 5 && s.true_domain < 4);
            assert!(s
                .pixels
                .iter()
                .all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
            assert_eq!(s.pixels.len(), 3 * 16 * 16);
        }
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let mut spec = BenchmarkSpec { domains: 1, ..Default::default() };
        assert!(matches!(
            generate_benchmark(&spec),
            Err(Error::InvalidDimension(_))
        ));
        spec = BenchmarkSpec::default();
        spec.per_cell = 3;
        assert!(matches!(
            generate_benchmark(&spec),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn split_is_a_partition() {
        let b = small();
        let f = leave_one_domain_out(&b, 1, 9).unwrap();
        assert!(f.test.iter().all(|s| b.samples[s.index].true_domain == 1));
        let mut all: Vec<usize> = f.source_indices();
        all.extend(f.test.iter().map(|s| s.index));
        all.sort_unstable();
        assert_eq!(all, (0..b.len()).collect::<Vec<_>>());
        assert!(matches!(
            leave_one_domain_out(&b, 2, 9),
            Err(Error::DomainOutOfRange { id: 2, count: 2 })
        ));
    }

    #[test]
    fn header_with_zero_domains_is_malformed() {
        let mut bytes = small().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[8..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            DatasetBundle::from_bytes(&bytes),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = small().to_bytes();
        let cut = &bytes[..bytes.len() - 37];
        assert!(matches!(
            DatasetBundle::from_bytes(cut),
            Err(Error::ChecksumMismatch { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(
            DatasetBundle::from_bytes(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            DatasetBundle::from_bytes(&bytes[..20]),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            DatasetBundle::from_bytes(b"NOTMAGIC"),
            Err(Error::MalformedHeader(_))
        ));
    }
}
