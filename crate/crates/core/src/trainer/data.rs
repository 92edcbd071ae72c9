use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::tensor::{Scalar, Tensor};

pub const TLDS_MAGIC: &[u8; 4] = b"TLDS";
pub const TLDS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic { seed: u64 },
    Memory,
}

/// Labelled images stored as f32, `[C, H, W]` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<usize>,
    pixels: Vec<f32>,
    source: DatasetSource,
}

impl Dataset {
    pub fn new(sample_shape: [usize; 3], num_classes: usize, labels: Vec<usize>, pixels: Vec<f32>) -> Result<Self> {
        let [c, h, w] = sample_shape;
        if c == 0 || h == 0 || w == 0 || num_classes == 0 {
            return Err(Error::value("dataset dimensions and class count must be positive"));
        }
        if pixels.len() != labels.len() * c * h * w {
            return Err(Error::shape(format!(
                "{} samples of {c}x{h}x{w} need {} values, got {}",
                labels.len(),
                labels.len() * c * h * w,
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::value(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            channels: c,
            height: h,
            width: w,
            num_classes,
            labels,
            pixels,
            source: DatasetSource::Memory,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source(&self) -> &DatasetSource {
        &self.source
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Stacks the samples at `indices` into `[B, C, H, W]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::value(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend(
                self.pixels[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| T::from_f64(f64::from(v))),
            );
            labels.push(self.labels[i]);
        }
        let x = Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((x, labels))
    }

    /// Deterministic shuffled 80/20 split into (train, held-out) indices.
    pub fn split(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = self.len() * 4 / 5;
        let test = idx.split_off(n_train);
        (idx, test)
    }
}

/// Gaussian blobs: each class has a random prototype image (a per-channel
/// offset plus a per-pixel pattern) and samples are the prototype plus
/// isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
    pub sample_shape: [usize; 3],
    /// Standard deviation of the prototype's channel offsets and pixels.
    pub separation: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(samples: usize, classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            samples,
            classes,
            seed,
            sample_shape: [3, 16, 16],
            separation: 1.0,
            noise: 1.0,
        }
    }

    pub fn with_shape(mut self, sample_shape: [usize; 3]) -> Self {
        self.sample_shape = sample_shape;
        self
    }

    pub fn with_noise(mut self, separation: f64, noise: f64) -> Self {
        self.separation = separation;
        self.noise = noise;
        self
    }

    /// Parses `n,classes,seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("expected n,classes,seed, got {text:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n = parts[0].parse().map_err(|_| bad())?;
        let classes = parts[1].parse().map_err(|_| bad())?;
        let seed = parts[2].parse().map_err(|_| bad())?;
        Ok(Self::new(n, classes, seed))
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 {
        return Err(Error::value("synthetic data needs at least one class"));
    }
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::value(format!("bad standard deviation: {e}")));
    let proto_dist = normal(spec.separation)?;
    let noise = normal(spec.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len: usize = spec.sample_shape.iter().product();
    let plane = spec.sample_shape[1] * spec.sample_shape[2];
    let protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let offsets: Vec<f64> = (0..spec.sample_shape[0]).map(|_| proto_dist.sample(&mut rng)).collect();
            (0..len)
                .map(|i| offsets[i / plane] + proto_dist.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(spec.samples);
    let mut pixels = Vec::with_capacity(spec.samples * len);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        labels.push(label);
        pixels.extend(protos[label].iter().map(|&p| (p + noise.sample(&mut rng)) as f32));
    }
    let mut d = Dataset::new(spec.sample_shape, spec.classes, labels, pixels)?;
    d.source = DatasetSource::Synthetic { seed: spec.seed };
    Ok(d)
}

pub fn encode_tlds(d: &Dataset) -> Result<Vec<u8>> {
    if d.num_classes > usize::from(u16::MAX) + 1 {
        return Err(Error::value("TLDS labels are 16-bit"));
    }
    let mut out = Vec::with_capacity(28 + d.len() * (2 + 4 * d.sample_len()));
    out.extend_from_slice(TLDS_MAGIC);
    for v in [
        TLDS_VERSION as usize,
        d.len(),
        d.channels,
        d.height,
        d.width,
        d.num_classes,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::value("TLDS header field exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let n = d.sample_len();
    for (i, &label) in d.labels.iter().enumerate() {
        out.extend_from_slice(&(label as u16).to_le_bytes());
        for v in &d.pixels[i * n..(i + 1) * n] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tlds(bytes: &[u8]) -> Result<Dataset> {
    let fmt = |m: &str| Error::Format(format!("TLDS: {m}"));
    if bytes.len() < 28 {
        return Err(fmt("truncated header"));
    }
    if &bytes[..4] != TLDS_MAGIC {
        return Err(fmt("bad magic"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, count, c, h, w, classes) = (field(0), field(1), field(2), field(3), field(4), field(5));
    if version as u32 != TLDS_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    if c == 0 || h == 0 || w == 0 || classes == 0 {
        return Err(fmt("zero dimension or class count"));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fmt("sample size overflows"))?;
    let record = 2 + 4 * n;
    let body = &bytes[28..];
    if count.checked_mul(record) != Some(body.len()) {
        return Err(fmt(&format!(
            "expected {count} records of {record} bytes, found {} bytes",
            body.len()
        )));
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * n);
    for rec in body.chunks_exact(record) {
        let label = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        if label >= classes {
            return Err(fmt(&format!("label {label} outside [0, {classes})")));
        }
        labels.push(label);
        pixels.extend(
            rec[2..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    Dataset::new([c, h, w], classes, labels, pixels)
}

pub fn write_tlds(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    write_atomic(path, &encode_tlds(d)?)
}

pub fn read_tlds(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut d = decode_tlds(&bytes)?;
    d.source = DatasetSource::File(path.to_path_buf());
    Ok(d)
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::File(p) => read_tlds(p),
        DataSpec::Synthetic(s) => synthetic(s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_is_deterministic() {
        let s = SyntheticSpec::new(64, 2, 7);
        assert_eq!(synthetic(&s).unwrap(), synthetic(&s).unwrap());
        assert_ne!(
            synthetic(&s).unwrap().pixels,
            synthetic(&SyntheticSpec::new(64, 2, 8)).unwrap().pixels
        );
    }

    #[test]
    fn tlds_round_trip() {
        let d = synthetic(&SyntheticSpec::new(10, 3, 1).with_shape([2, 3, 4])).unwrap();
        let back = decode_tlds(&encode_tlds(&d).unwrap()).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.pixels(), d.pixels());
        assert_eq!(back.sample_shape(), [2, 3, 4]);
    }

    #[test]
    fn tlds_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tlds");
        let d = synthetic(&SyntheticSpec::new(5, 2, 3)).unwrap();
        write_tlds(&p, &d).unwrap();
        let back = read_tlds(&p).unwrap();
        assert_eq!(back.pixels(), d.pixels());
        assert_eq!(back.source(), &DatasetSource::File(p));
    }

    #[test]
    fn tlds_rejects_corruption() {
        let d = synthetic(&SyntheticSpec::new(4, 2, 3).with_shape([1, 2, 2])).unwrap();
        let bytes = encode_tlds(&d).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tlds(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_tlds(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_tlds(&bytes[..10]), Err(Error::Format(_))));
        let mut label = bytes.clone();
        label[28] = 9;
        assert!(matches!(decode_tlds(&label), Err(Error::Format(_))));
    }

    #[test]
    fn empty_tlds_is_valid() {
        let d = Dataset::new([1, 2, 2], 2, vec![], vec![]).unwrap();
        let back = decode_tlds(&encode_tlds(&d).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn batch_stacks_samples() {
        let d = Dataset::new([1, 1, 2], 2, vec![0, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (x, y) = d.batch::<f64>(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(y, vec![1, 0]);
    }

    #[test]
    fn parse_synthetic_flag() {
        let s = SyntheticSpec::parse("64,2,7").unwrap();
        assert_eq!((s.samples, s.classes, s.seed), (64, 2, 7));
        assert!(SyntheticSpec::parse("64,2").is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_indices(n in 0usize..200, seed in any::<u64>()) {
            let d = synthetic(&SyntheticSpec::new(n, 2, 1).with_shape([1, 1, 1])).unwrap();
            let (a, b) = d.split(seed);
            prop_assert_eq!(a.len(), n * 4 / 5);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(d.split(seed), (a, b));
        }
    }
}
