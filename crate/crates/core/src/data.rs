//! Deterministic synthetic image-classification data and pixel-space
//! corruptions.
//!
//! Eight procedurally rendered shape classes on a 16x16 grayscale canvas,
//! with per-sample jitter in position, scale, phase and intensity. Same
//! (seed, split, index) always renders the same image, so every experiment
//! is exactly replayable. Corruptions act on pixels only and never touch
//! labels; outputs are clamped to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::IMAGE_SIZE;
use crate::tensor::Tensor;
use crate::util::{mix_seed, seeded_rng};

pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceHoldout,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::SourceHoldout => 2,
            Split::Test => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source_train" => Ok(Split::SourceTrain),
            "source_holdout" => Ok(Split::SourceHoldout),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Contrast,
    Pixelate,
    SpeckleNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::SpeckleNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::SpeckleNoise => "speckle_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{s}'")))
    }

    fn tag(self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 11,
            CorruptionKind::BoxBlur => 12,
            CorruptionKind::Contrast => 13,
            CorruptionKind::Pixelate => 14,
            CorruptionKind::SpeckleNoise => 15,
        }
    }
}

/// A corruption kind at a severity level 1..=5, with its own seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!(
                "severity {severity} outside 1..=5"
            )));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }

    // severity tables; monotone in perturbation strength
    fn gauss_sigma(severity: u8) -> f64 {
        [0.10, 0.20, 0.32, 0.46, 0.62][severity as usize - 1]
    }
    fn blur_radius(severity: u8) -> usize {
        [1, 1, 2, 3, 4][severity as usize - 1]
    }
    fn blur_passes(severity: u8) -> usize {
        [1, 2, 2, 2, 3][severity as usize - 1]
    }
    fn contrast_factor(severity: u8) -> f64 {
        [0.75, 0.55, 0.40, 0.28, 0.18][severity as usize - 1]
    }
    fn pixelate_block(severity: u8) -> usize {
        [2, 2, 4, 4, 8][severity as usize - 1]
    }
    fn speckle_sigma(severity: u8) -> f64 {
        [0.20, 0.40, 0.65, 0.95, 1.30][severity as usize - 1]
    }

    /// Corrupt one image in place. `sample_id` keys the per-sample noise
    /// stream so the same stream position always gets the same corruption.
    pub fn apply(&self, image: &mut [f64], sample_id: u64) {
        let h = IMAGE_SIZE;
        let w = IMAGE_SIZE;
        let mut rng = seeded_rng(mix_seed(&[
            self.seed,
            self.kind.tag(),
            self.severity as u64,
            sample_id,
        ]));
        match self.kind {
            CorruptionKind::GaussianNoise => {
                let normal = Normal::new(0.0, Self::gauss_sigma(self.severity)).expect("sigma > 0");
                for p in image.iter_mut() {
                    *p += normal.sample(&mut rng);
                }
            }
            CorruptionKind::SpeckleNoise => {
                let normal =
                    Normal::new(0.0, Self::speckle_sigma(self.severity)).expect("sigma > 0");
                for p in image.iter_mut() {
                    *p += *p * normal.sample(&mut rng);
                }
            }
            CorruptionKind::Contrast => {
                let f = Self::contrast_factor(self.severity);
                let mean: f64 = image.iter().sum::<f64>() / image.len() as f64;
                for p in image.iter_mut() {
                    *p = (*p - mean) * f + mean;
                }
            }
            CorruptionKind::BoxBlur => {
                let r = Self::blur_radius(self.severity) as isize;
                for _ in 0..Self::blur_passes(self.severity) {
                    let src = image.to_vec();
                    for i in 0..h as isize {
                        for j in 0..w as isize {
                            let mut acc = 0.0;
                            let mut cnt = 0.0;
                            for di in -r..=r {
                                for dj in -r..=r {
                                    let (y, x) = (i + di, j + dj);
                                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                        acc += src[(y * w as isize + x) as usize];
                                        cnt += 1.0;
                                    }
                                }
                            }
                            image[(i * w as isize + j) as usize] = acc / cnt;
                        }
                    }
                }
            }
            CorruptionKind::Pixelate => {
                let b = Self::pixelate_block(self.severity);
                for bi in (0..h).step_by(b) {
                    for bj in (0..w).step_by(b) {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for i in bi..(bi + b).min(h) {
                            for j in bj..(bj + b).min(w) {
                                acc += image[i * w + j];
                                cnt += 1.0;
                            }
                        }
                        let v = acc / cnt;
                        for i in bi..(bi + b).min(h) {
                            for j in bj..(bj + b).min(w) {
                                image[i * w + j] = v;
                            }
                        }
                    }
                }
            }
        }
        for p in image.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// Procedural shape dataset: class-specific renderers plus jitter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Label of the `index`-th sample of a split. Classes are balanced:
    /// labels cycle through 0..8 by index.
    pub fn label(&self, _split: Split, index: usize) -> usize {
        index % NUM_CLASSES
    }

    /// Render the clean `index`-th image of a split as 256 pixels in [0,1].
    pub fn render(&self, split: Split, index: usize) -> Vec<f64> {
        let label = self.label(split, index);
        let mut rng = seeded_rng(mix_seed(&[self.seed, split.tag(), index as u64]));
        let h = IMAGE_SIZE;
        let w = IMAGE_SIZE;

        let bg = rng.gen_range(0.00..0.12);
        let fg = rng.gen_range(0.78..1.00);
        let mut img = vec![bg; h * w];
        let set = |img: &mut [f64], i: isize, j: isize, v: f64| {
            if i >= 0 && i < h as isize && j >= 0 && j < w as isize {
                img[(i * w as isize + j) as usize] = v;
            }
        };

        match label {
            0 => {
                // horizontal bars
                let phase = rng.gen_range(0..4) as isize;
                for i in 0..h as isize {
                    if (i + phase).rem_euclid(4) < 2 {
                        for j in 0..w as isize {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            1 => {
                // vertical bars
                let phase = rng.gen_range(0..4) as isize;
                for j in 0..w as isize {
                    if (j + phase).rem_euclid(4) < 2 {
                        for i in 0..h as isize {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            2 => {
                // diagonal stripes
                let phase = rng.gen_range(0..6) as isize;
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        if (i + j + phase).rem_euclid(6) < 3 {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            3 => {
                // upright cross
                let ci = 7 + rng.gen_range(-2..=2);
                let cj = 7 + rng.gen_range(-2..=2);
                let t = rng.gen_range(1..=2) as isize;
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        if (i - ci).abs() <= t || (j - cj).abs() <= t {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            4 => {
                // filled disk
                let ci = 7.5 + rng.gen_range(-2.0..2.0);
                let cj = 7.5 + rng.gen_range(-2.0..2.0);
                let r = rng.gen_range(3.4..5.2);
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                        if d2 <= r * r {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            5 => {
                // ring
                let ci = 7.5 + rng.gen_range(-1.5..1.5);
                let cj = 7.5 + rng.gen_range(-1.5..1.5);
                let router = rng.gen_range(5.0..6.4);
                let rinner = router - rng.gen_range(2.0..2.8);
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                        if d2 <= router * router && d2 >= rinner * rinner {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            6 => {
                // coarse checkerboard
                let pi = rng.gen_range(0..8) as isize;
                let pj = rng.gen_range(0..8) as isize;
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        if (((i + pi) / 4) + ((j + pj) / 4)).rem_euclid(2) == 0 {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
            _ => {
                // diagonal X cross
                let c = 7 + rng.gen_range(-2..=2);
                let t = rng.gen_range(1..=2) as isize;
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        if (i - j + c - 7).abs() <= t || (i + j - c - 8).abs() <= t {
                            set(&mut img, i, j, fg);
                        }
                    }
                }
            }
        }

        // mild per-pixel jitter so the task is not pixel-exact
        let jitter = Normal::new(0.0, 0.02).expect("sigma > 0");
        for p in img.iter_mut() {
            *p = (*p + jitter.sample(&mut rng)).clamp(0.0, 1.0);
        }
        img
    }

    /// Deterministic batch of `size` samples starting at `offset` within a
    /// split, with an optional corruption. Labels are returned separately;
    /// the adaptation engine never receives them.
    pub fn batch_at(
        &self,
        split: Split,
        offset: usize,
        size: usize,
        corruption: Option<&Corruption>,
    ) -> Result<(Tensor, Vec<usize>)> {
        if size == 0 {
            return Err(Error::Input("batch size must be >= 1".into()));
        }
        let mut data = Vec::with_capacity(size * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(size);
        for idx in offset..offset + size {
            let mut img = self.render(split, idx);
            if let Some(c) = corruption {
                c.apply(&mut img, idx as u64);
            }
            data.extend_from_slice(&img);
            labels.push(self.label(split, idx));
        }
        let inputs = Tensor::new(vec![size, 1, IMAGE_SIZE, IMAGE_SIZE], data)?;
        Ok((inputs, labels))
    }

    /// Batch sampled with a seeded shuffle position (first `size` samples of
    /// a seeded permutation window). Deterministic in (split, size, seed).
    pub fn sample_batch(
        &self,
        split: Split,
        corruption: Option<&Corruption>,
        size: usize,
        seed: u64,
    ) -> Result<(Tensor, Vec<usize>)> {
        if size == 0 {
            return Err(Error::Input("batch size must be >= 1".into()));
        }
        let mut rng = seeded_rng(mix_seed(&[self.seed, split.tag(), seed, 0xba7c]));
        let mut data = Vec::with_capacity(size * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let idx = rng.gen_range(0..1_000_000usize);
            let mut img = self.render(split, idx);
            if let Some(c) = corruption {
                c.apply(&mut img, idx as u64);
            }
            data.extend_from_slice(&img);
            labels.push(self.label(split, idx));
        }
        let inputs = Tensor::new(vec![size, 1, IMAGE_SIZE, IMAGE_SIZE], data)?;
        Ok((inputs, labels))
    }

    /// The two small sets DRLS clusters: clean holdout samples as the
    /// in-distribution side, a corrupted batch as the out-of-distribution
    /// side. The corruption here must differ from the test corruption.
    pub fn make_drls_sets(
        &self,
        n_per_domain: usize,
        ood_corruption: &Corruption,
        seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        if n_per_domain == 0 {
            return Err(Error::Input("n_per_domain must be >= 1".into()));
        }
        let base = 100_000 + (seed as usize % 1000) * 1000;
        let (id, _) = self.batch_at(Split::SourceHoldout, base, n_per_domain, None)?;
        let (ood, _) = self.batch_at(
            Split::SourceHoldout,
            base + n_per_domain,
            n_per_domain,
            Some(ood_corruption),
        )?;
        Ok((id, ood))
    }
}
