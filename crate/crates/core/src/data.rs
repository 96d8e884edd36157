//! Dataset ingestion (IDX container files, optionally gzipped),
//! normalization to [0,1], deterministic splits, and synthetic datasets
//! for fast tests and desk-scale runs.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Immutable labelled image set. Pixels live in [0,1]; labels in [0,k).
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, dim] images, row per example.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub k: usize,
    pub split: String,
    /// Hash of the raw source bytes (or generator parameters).
    pub fingerprint: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (self.images.row(i), self.labels[i])
    }

    /// Gather rows into a new dataset (used for batching and subsets).
    pub fn subset(&self, idx: &[usize], split: &str) -> Dataset {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.images.row(i)).collect();
        let images = Tensor::stack_rows(&rows);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            images,
            labels,
            k: self.k,
            split: split.to_string(),
            fingerprint: format!("{}#{}", self.fingerprint, hash_indices(idx)),
        }
    }

    /// Deterministic subset of the first `n` examples of a seeded shuffle.
    pub fn sample(&self, n: usize, seed: u64, split: &str) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n.min(self.len()));
        self.subset(&idx, split)
    }

    fn validate(self) -> Result<Self> {
        for &v in self.images.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel {v} outside [0,1]")));
            }
        }
        for &l in &self.labels {
            if l >= self.k {
                return Err(Error::LabelRange { label: l, k: self.k });
            }
        }
        Ok(self)
    }
}

fn hash_indices(idx: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in idx {
        h.update((i as u64).to_le_bytes());
    }
    hex_prefix(&h.finalize())
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_prefix(&Sha256::digest(bytes))
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Corrupt(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Load an IDX image/label file pair; pixels scale to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file_maybe_gz(images_path)?;
    let lbl_bytes = read_file_maybe_gz(labels_path)?;
    let fingerprint = {
        let mut h = Sha256::new();
        h.update(&img_bytes);
        h.update(&lbl_bytes);
        hex_prefix(&h.finalize())
    };

    let mut cur = std::io::Cursor::new(&img_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Corrupt("image file too short".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Corrupt(format!("image magic 0x{magic:08x}")));
    }
    let n = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; n * dim];
    cur.read_exact(&mut pixels)
        .map_err(|_| Error::Corrupt("image file truncated".into()))?;

    let mut cur = std::io::Cursor::new(&lbl_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Corrupt("label file too short".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Corrupt(format!("label magic 0x{magic:08x}")));
    }
    let nl = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    if nl != n {
        return Err(Error::Data(format!("{n} images but {nl} labels")));
    }
    let mut labels_raw = vec![0u8; nl];
    cur.read_exact(&mut labels_raw)
        .map_err(|_| Error::Corrupt("label file truncated".into()))?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset {
        images: Tensor::new(vec![n, dim], data)?,
        labels,
        k,
        split: "full".into(),
        fingerprint,
    }
    .validate()
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Well-separated Gaussian blobs in a low-dimensional space.
    Blobs,
    /// Concentric rings, 2-D, not linearly separable.
    Rings,
    /// Procedural 28x28 digit-like glyphs with affine jitter and noise.
    Digits,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "rings" => Ok(SyntheticKind::Rings),
            "digits" => Ok(SyntheticKind::Digits),
            other => Err(Error::Data(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Deterministic synthetic dataset with known class structure.
pub fn make_synthetic(kind: SyntheticKind, n: usize, k: usize, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k {
        return Err(Error::Data(format!("need n >= k >= 2, got n={n}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, gen): (usize, Box<dyn Fn(usize, &mut ChaCha8Rng) -> Vec<f64>>) = match kind {
        SyntheticKind::Blobs => {
            let dim = 8;
            // class centers on coordinate-ish directions, well separated
            let centers: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    (0..dim)
                        .map(|d| if d % k == c { 0.85 } else { 0.15 })
                        .collect()
                })
                .collect();
            (
                dim,
                Box::new(move |class, rng: &mut ChaCha8Rng| {
                    centers[class]
                        .iter()
                        .map(|&m| {
                            (m + 0.04 * crate::autodiff::tensor::standard_normal(rng))
                                .clamp(0.0, 1.0)
                        })
                        .collect()
                }),
            )
        }
        SyntheticKind::Rings => (
            2,
            Box::new(move |class, rng: &mut ChaCha8Rng| {
                let radius = 0.12 + 0.3 * (class as f64 / k as f64);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius + 0.02 * crate::autodiff::tensor::standard_normal(rng);
                vec![
                    (0.5 + r * theta.cos()).clamp(0.0, 1.0),
                    (0.5 + r * theta.sin()).clamp(0.0, 1.0),
                ]
            }),
        ),
        SyntheticKind::Digits => (
            784,
            Box::new(move |class, rng: &mut ChaCha8Rng| render_digit(class % 10, rng)),
        ),
    };

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        data.extend(gen(class, &mut rng));
        labels.push(class);
    }
    // deterministic shuffle so classes are interleaved arbitrarily
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut sdata = Vec::with_capacity(n * dim);
    let mut slabels = Vec::with_capacity(n);
    for &i in &order {
        sdata.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        slabels.push(labels[i]);
    }

    let fingerprint = {
        let mut h = Sha256::new();
        h.update(format!("{kind:?}/{n}/{k}/{seed}").as_bytes());
        hex_prefix(&h.finalize())
    };
    Dataset {
        images: Tensor::new(vec![n, dim], sdata)?,
        labels: slabels,
        k,
        split: "full".into(),
        fingerprint,
    }
    .validate()
}

/// Polyline strokes per digit on a unit box, seven-segment-like with
/// diagonals; rasterized with jittered affine placement below.
fn digit_strokes(d: usize) -> &'static [[f64; 4]] {
    // segments as [x0,y0,x1,y1] in a 0..1 box, y growing downward
    const S: [&[[f64; 4]]; 10] = [
        // 0: rectangle
        &[
            [0.2, 0.1, 0.8, 0.1],
            [0.8, 0.1, 0.8, 0.9],
            [0.8, 0.9, 0.2, 0.9],
            [0.2, 0.9, 0.2, 0.1],
        ],
        // 1: vertical with serif
        &[[0.5, 0.1, 0.5, 0.9], [0.35, 0.25, 0.5, 0.1]],
        // 2
        &[
            [0.2, 0.25, 0.5, 0.1],
            [0.5, 0.1, 0.8, 0.25],
            [0.8, 0.25, 0.2, 0.9],
            [0.2, 0.9, 0.8, 0.9],
        ],
        // 3
        &[
            [0.2, 0.1, 0.8, 0.1],
            [0.8, 0.1, 0.45, 0.45],
            [0.45, 0.45, 0.8, 0.65],
            [0.8, 0.65, 0.6, 0.9],
            [0.6, 0.9, 0.2, 0.85],
        ],
        // 4
        &[
            [0.65, 0.1, 0.2, 0.6],
            [0.2, 0.6, 0.85, 0.6],
            [0.65, 0.1, 0.65, 0.9],
        ],
        // 5
        &[
            [0.8, 0.1, 0.25, 0.1],
            [0.25, 0.1, 0.25, 0.5],
            [0.25, 0.5, 0.7, 0.5],
            [0.7, 0.5, 0.75, 0.85],
            [0.75, 0.85, 0.25, 0.9],
        ],
        // 6
        &[
            [0.7, 0.1, 0.3, 0.4],
            [0.3, 0.4, 0.25, 0.75],
            [0.25, 0.75, 0.5, 0.9],
            [0.5, 0.9, 0.75, 0.75],
            [0.75, 0.75, 0.7, 0.55],
            [0.7, 0.55, 0.3, 0.6],
        ],
        // 7
        &[[0.2, 0.1, 0.8, 0.1], [0.8, 0.1, 0.4, 0.9]],
        // 8
        &[
            [0.5, 0.1, 0.75, 0.3],
            [0.75, 0.3, 0.3, 0.6],
            [0.3, 0.6, 0.3, 0.85],
            [0.3, 0.85, 0.7, 0.85],
            [0.7, 0.85, 0.7, 0.6],
            [0.7, 0.6, 0.25, 0.3],
            [0.25, 0.3, 0.5, 0.1],
        ],
        // 9
        &[
            [0.7, 0.45, 0.3, 0.4],
            [0.3, 0.4, 0.3, 0.15],
            [0.3, 0.15, 0.7, 0.1],
            [0.7, 0.1, 0.7, 0.45],
            [0.7, 0.45, 0.55, 0.9],
        ],
    ];
    S[d]
}

/// Rasterize one jittered glyph to a 28x28 grayscale image in [0,1].
fn render_digit(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let strokes = digit_strokes(class);
    // random affine: scale, rotation, shift
    let scale = rng.gen_range(0.8..1.1);
    let rot = rng.gen_range(-0.22..0.22f64);
    let (dx, dy) = (rng.gen_range(-2.2..2.2), rng.gen_range(-2.2..2.2));
    let thick = rng.gen_range(1.1..1.8f64);
    let (cosr, sinr) = (rot.cos(), rot.sin());
    let map = |x: f64, y: f64| -> (f64, f64) {
        // unit box -> centered pixel coords
        let (ux, uy) = ((x - 0.5) * 20.0 * scale, (y - 0.5) * 20.0 * scale);
        let (rx, ry) = (ux * cosr - uy * sinr, ux * sinr + uy * cosr);
        (rx + 14.0 + dx, ry + 14.0 + dy)
    };
    let segs: Vec<(f64, f64, f64, f64)> = strokes
        .iter()
        .map(|s| {
            let (x0, y0) = map(s[0], s[1]);
            let (x1, y1) = map(s[2], s[3]);
            (x0, y0, x1, y1)
        })
        .collect();
    let mut img = vec![0.0f64; 784];
    for py in 0..28 {
        for px in 0..28 {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut dist = f64::INFINITY;
            for &(x0, y0, x1, y1) in &segs {
                dist = dist.min(point_segment_distance(fx, fy, x0, y0, x1, y1));
            }
            // soft stroke profile
            let v = 1.0 / (1.0 + ((dist - thick) * 2.2).exp());
            img[py * 28 + px] = v;
        }
    }
    // pixel noise, clamped back into range
    for v in img.iter_mut() {
        let noisy = *v + 0.06 * crate::autodiff::tensor::standard_normal(rng);
        *v = noisy.clamp(0.0, 1.0);
    }
    img
}

fn point_segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let (wx, wy) = (px - x0, py - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (x0 + t * vx, y0 + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn short(_: std::io::Error) -> Error {
    Error::Corrupt("file truncated".into())
}

/// Disjoint, exhaustive, seed-deterministic split by fractions.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("fractions sum to {total}, not 1")));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = (fractions.1 * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let train = ds.subset(&idx[..n_train], "train");
    let val = ds.subset(&idx[n_train..n_train + n_val], "val");
    let test = ds.subset(&idx[n_train + n_val..], "test");
    Ok((train, val, test))
}
