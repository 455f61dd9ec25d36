//! Synthetic multimodal data and the on-disk dataset format.
//!
//! Every sample starts from one latent draw. The continuous label is a fixed
//! linear functional of the latent, and each modality sequence mixes the
//! latent through its own matrix under a per-step sinusoidal gain, plus
//! Gaussian noise that is partly shared across time. Video gets the widest
//! noise by default so the video-only task stays strictly harder than the
//! trimodal one.
//!
//! On disk a dataset is a directory: `meta.json`, one raw little-endian
//! 32-bit file per modality, `labels.bin`, and `manifest.bin` ("MMKD", a
//! version byte, then name/size entries) for integrity checking. The
//! binaries have no headers; shapes live in the meta file, so externally
//! produced features can be dropped in with any writer.

use crate::network::{Batch, ModalityDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MMKD";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported dataset version {found}, expected {VERSION}")]
    BadVersion { found: u8 },
    #[error("manifest is truncated or malformed: {detail}")]
    BadManifest { detail: String },
    #[error("integrity check failed: {detail}")]
    Integrity { detail: String },
    #[error("shape mismatch: {detail}")]
    Shape { detail: String },
    #[error("invalid spec: {detail}")]
    BadSpec { detail: String },
    #[error("label {0} is not finite")]
    BadLabel(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub dims: ModalityDims,
    pub classes: usize,
    /// Present when the data came from the synthetic generator.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub video: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub language: Tensor<f32>,
    /// Continuous sentiment in [-3, 3]; discretize for classes.
    pub labels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Latent width shared by all modalities.
    pub latent: usize,
    pub dims: ModalityDims,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub sigma_l: f64,
    /// Share of noise variance drawn once per sample instead of per step.
    pub rho: f64,
    /// Gain on the latent functional before clamping into [-3, 3].
    pub label_scale: f64,
    /// Constant shift of the continuous label; leaves class balance skewed.
    pub skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(n: usize, seed: u64) -> Self {
        Self {
            n,
            latent: 4,
            dims: ModalityDims { d_v: 8, d_a: 12, d_l: 16, t_v: 24, t_a: 12, t_l: 6 },
            sigma_v: 1.0,
            sigma_a: 0.5,
            sigma_l: 0.5,
            rho: 0.5,
            label_scale: 1.5,
            skew: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| DataError::BadSpec { detail };
        if self.n == 0 || self.latent == 0 {
            return Err(bad("n and latent width must be positive".into()));
        }
        for (name, v) in [("sigma_v", self.sigma_v), ("sigma_a", self.sigma_a), ("sigma_l", self.sigma_l)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(format!("{name} {v} must be nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(bad(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !self.label_scale.is_finite() || !self.skew.is_finite() {
            return Err(bad("label_scale and skew must be finite".into()));
        }
        Ok(())
    }
}

/// Round half away from zero, clamp to [-3, 3], shift to 0..=6.
pub fn discretize_label(y: f64) -> Result<usize> {
    if !y.is_finite() {
        return Err(DataError::BadLabel(y));
    }
    Ok((y.round().clamp(-3.0, 3.0) + 3.0) as usize)
}

/// Per-step gain `1 + 0.5 sin(2π t / T + φ)`; a full period, so the time
/// mean is exactly 1 and mean-pooled features keep the latent.
fn gain(t: usize, period: usize, phase: f64) -> f64 {
    1.0 + 0.5 * (2.0 * std::f64::consts::PI * t as f64 / period as f64 + phase).sin()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent;
    let d = spec.dims;
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    // Fixed generator geometry, drawn before any sample.
    let w: Vec<f64> = {
        let v: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let mix = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<f64> {
        (0..rows * k).map(|_| normal(rng) / (k as f64).sqrt()).collect()
    };
    let a_v = mix(&mut rng, d.d_v);
    let a_a = mix(&mut rng, d.d_a);
    let a_l = mix(&mut rng, d.d_l);

    let mut video = Tensor::<f32>::zeros(vec![spec.n, d.t_v, d.d_v]);
    let mut audio = Tensor::<f32>::zeros(vec![spec.n, d.t_a, d.d_a]);
    let mut language = Tensor::<f32>::zeros(vec![spec.n, d.t_l, d.d_l]);
    let mut labels = Vec::with_capacity(spec.n);

    let phases = [0.0, std::f64::consts::PI / 3.0, 2.0 * std::f64::consts::PI / 3.0];
    for i in 0..spec.n {
        let z: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let y = (spec.label_scale * w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            + spec.skew)
            .clamp(-3.0, 3.0);
        labels.push(y as f32);

        let fill = |out: &mut Tensor<f32>,
                        a: &[f64],
                        dm: usize,
                        tm: usize,
                        sigma: f64,
                        phase: f64,
                        rng: &mut ChaCha8Rng| {
            let shared: Vec<f64> = (0..dm).map(|_| normal(rng)).collect();
            let base: Vec<f64> = (0..dm)
                .map(|r| a[r * k..(r + 1) * k].iter().zip(&z).map(|(x, y)| x * y).sum())
                .collect();
            let (c_shared, c_step) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
            for t in 0..tm {
                let gt = gain(t, tm, phase);
                for r in 0..dm {
                    let noise = sigma * (c_shared * shared[r] + c_step * normal(rng));
                    out.data_mut()[(i * tm + t) * dm + r] = (gt * base[r] + noise) as f32;
                }
            }
        };
        fill(&mut video, &a_v, d.d_v, d.t_v, spec.sigma_v, phases[0], &mut rng);
        fill(&mut audio, &a_a, d.d_a, d.t_a, spec.sigma_a, phases[1], &mut rng);
        fill(&mut language, &a_l, d.d_l, d.t_l, spec.sigma_l, phases[2], &mut rng);
    }

    Ok(Dataset {
        meta: DatasetMeta { n: spec.n, dims: d, classes: 7, seed: Some(spec.seed) },
        video,
        audio,
        language,
        labels,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn class_of(&self, i: usize) -> Result<usize> {
        discretize_label(self.labels[i] as f64)
    }

    fn validate(&self) -> Result<()> {
        let d = self.meta.dims;
        let n = self.meta.n;
        let checks = [
            ("video", self.video.shape(), [n, d.t_v, d.d_v]),
            ("audio", self.audio.shape(), [n, d.t_a, d.d_a]),
            ("language", self.language.shape(), [n, d.t_l, d.d_l]),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(DataError::Shape {
                    detail: format!("{name} is {got:?}, meta says {want:?}"),
                });
            }
        }
        if self.labels.len() != n {
            return Err(DataError::Shape {
                detail: format!("{} labels for n={n}", self.labels.len()),
            });
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if !(-3.0..=3.0).contains(&y) {
                return Err(DataError::Shape {
                    detail: format!("label[{i}] = {y} outside [-3, 3]"),
                });
            }
        }
        Ok(())
    }

    /// Copy the rows `idx` into a fresh dataset, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.meta.dims;
        let take = |t: &Tensor<f32>, tm: usize, dm: usize| {
            let row = tm * dm;
            let mut out = Tensor::<f32>::zeros(vec![idx.len(), tm, dm]);
            for (j, &i) in idx.iter().enumerate() {
                out.data_mut()[j * row..(j + 1) * row]
                    .copy_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            out
        };
        Dataset {
            meta: DatasetMeta { n: idx.len(), ..self.meta },
            video: take(&self.video, d.t_v, d.d_v),
            audio: take(&self.audio, d.t_a, d.d_a),
            language: take(&self.language, d.t_l, d.d_l),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Network inputs plus class labels for the rows `idx`.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> Result<(Batch<S>, Vec<usize>)> {
        let sub = self.subset(idx);
        let classes = (0..sub.len()).map(|i| sub.class_of(i)).collect::<Result<_>>()?;
        Ok((
            Batch {
                video: sub.video.cast(),
                audio: Some(sub.audio.cast()),
                language: Some(sub.language.cast()),
            },
            classes,
        ))
    }
}

/// Seeded shuffle, then contiguous cuts. Fractions must sum to 1 and every
/// part must be nonempty.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (f0, f1, f2) = fractions;
    if (f0 + f1 + f2 - 1.0).abs() > 1e-9 || f0 < 0.0 || f1 < 0.0 || f2 < 0.0 {
        return Err(DataError::BadSpec {
            detail: format!("fractions {fractions:?} do not sum to 1"),
        });
    }
    let n = ds.len();
    let n0 = (n as f64 * f0).round() as usize;
    let n1 = (n as f64 * f1).round() as usize;
    if n0 == 0 || n1 == 0 || n0 + n1 >= n {
        return Err(DataError::BadSpec {
            detail: format!("split {n0}/{n1}/{} of {n} has an empty part", n.saturating_sub(n0 + n1)),
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, back to front.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    Ok((
        ds.subset(&idx[..n0]),
        ds.subset(&idx[n0..n0 + n1]),
        ds.subset(&idx[n0 + n1..]),
    ))
}

// ---- persistence -------------------------------------------------------------

const FILES: [&str; 5] = ["meta.json", "video.bin", "audio.bin", "language.bin", "labels.bin"];

fn write_f32s(path: &Path, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f32s(path: &Path, expect: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(DataError::Shape {
            detail: format!("{what}: {} bytes, meta implies {}", bytes.len(), expect * 4),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta)?)?;
    write_f32s(&dir.join("video.bin"), ds.video.data())?;
    write_f32s(&dir.join("audio.bin"), ds.audio.data())?;
    write_f32s(&dir.join("language.bin"), ds.language.data())?;
    write_f32s(&dir.join("labels.bin"), &ds.labels)?;

    let mut manifest = Vec::new();
    manifest.extend_from_slice(&MAGIC);
    manifest.push(VERSION);
    manifest.extend_from_slice(&(FILES.len() as u32).to_le_bytes());
    for name in FILES {
        let size = fs::metadata(dir.join(name))?.len();
        manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.extend_from_slice(&size.to_le_bytes());
    }
    fs::write(dir.join("manifest.bin"), manifest)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Vec<(String, u64)>> {
    let mut f = fs::File::open(dir.join("manifest.bin"))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| DataError::BadManifest { detail: "shorter than the magic".into() })?;
    if magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let mut version = [0u8; 1];
    f.read_exact(&mut version)
        .map_err(|_| DataError::BadManifest { detail: "missing version byte".into() })?;
    if version[0] != VERSION {
        return Err(DataError::BadVersion { found: version[0] });
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > rest.len() {
            return Err(DataError::BadManifest {
                detail: format!("entry list cut off at byte {at}"),
            });
        }
        let s = &rest[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| DataError::BadManifest { detail: "file name is not UTF-8".into() })?;
        let size = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        entries.push((name, size));
    }
    Ok(entries)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    for (name, size) in read_manifest(dir)? {
        let meta = fs::metadata(dir.join(&name))
            .map_err(|_| DataError::Integrity { detail: format!("{name} is missing") })?;
        if meta.len() != size {
            return Err(DataError::Integrity {
                detail: format!("{name}: {} bytes on disk, manifest says {size}", meta.len()),
            });
        }
    }
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let d = meta.dims;
    let n = meta.n;
    let ds = Dataset {
        video: Tensor::new(
            vec![n, d.t_v, d.d_v],
            read_f32s(&dir.join("video.bin"), n * d.t_v * d.d_v, "video.bin")?,
        )
        .map_err(|e| DataError::Shape { detail: e.to_string() })?,
        audio: Tensor::new(
            vec![n, d.t_a, d.d_a],
            read_f32s(&dir.join("audio.bin"), n * d.t_a * d.d_a, "audio.bin")?,
        )
        .map_err(|e| DataError::Shape { detail: e.to_string() })?,
        language: Tensor::new(
            vec![n, d.t_l, d.d_l],
            read_f32s(&dir.join("language.bin"), n * d.t_l * d.d_l, "language.bin")?,
        )
        .map_err(|e| DataError::Shape { detail: e.to_string() })?,
        labels: read_f32s(&dir.join("labels.bin"), n, "labels.bin")?,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
