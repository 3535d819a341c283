use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

use super::idx::read_idx_images;

fn default_jitter() -> [f32; 2] {
    [0.8, 1.2]
}

/// One augmentation step. Steps run in declared order on raw `[0, 1]` pixels,
/// each followed by a clamp back to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugStep {
    Hflip {
        p: f64,
    },
    Vflip {
        p: f64,
    },
    /// Zero-pad by `pad` on every side, then crop back at a random offset.
    PadCrop {
        pad: usize,
    },
    /// Bilinear rotation by an angle uniform in `[-max_deg, max_deg]`.
    Rotate {
        max_deg: f32,
    },
    /// Brightness then contrast factors, each uniform in its range.
    Jitter {
        #[serde(default = "default_jitter")]
        brightness: [f32; 2],
        #[serde(default = "default_jitter")]
        contrast: [f32; 2],
    },
    /// In-batch mixing with a seeded derangement partner. One λ per batch,
    /// uniform on `[0, 1]` unless forced.
    Mixup {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f32>,
    },
    /// Each image is replaced by uniform pixel noise with probability `p`.
    NoiseReplace {
        p: f64,
    },
    /// Appends `ceil(B * ratio)` images drawn from an external image source.
    ExternalMix {
        source: PathBuf,
        ratio: f64,
    },
    /// As `ExternalMix`, for an out-of-distribution source dataset.
    OodMix {
        source: PathBuf,
        ratio: f64,
    },
}

impl AugStep {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("augmentation: {m}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        match self {
            AugStep::Hflip { p } | AugStep::Vflip { p } | AugStep::NoiseReplace { p }
                if !prob(*p) =>
            {
                bad(format!("probability {p} outside [0, 1]"))
            }
            AugStep::Rotate { max_deg } if !(*max_deg >= 0.0) => {
                bad(format!("rotation degrees {max_deg} < 0"))
            }
            AugStep::Jitter {
                brightness,
                contrast,
            } if [brightness, contrast]
                .iter()
                .any(|r| !(r[0] >= 0.0 && r[0] <= r[1])) =>
            {
                bad("jitter ranges need 0 <= lo <= hi".into())
            }
            AugStep::Mixup { lambda: Some(l) } if !(0.0..=1.0).contains(l) => {
                bad(format!("mixup λ {l} outside [0, 1]"))
            }
            AugStep::ExternalMix { ratio, .. } | AugStep::OodMix { ratio, .. }
                if !(*ratio > 0.0) =>
            {
                bad(format!("mix ratio {ratio} must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Whether the step leaves images whose dataset label no longer applies.
    pub fn destroys_labels(&self) -> bool {
        matches!(
            self,
            AugStep::Mixup { .. }
                | AugStep::NoiseReplace { .. }
                | AugStep::ExternalMix { .. }
                | AugStep::OodMix { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: Vec<AugStep>,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.iter().try_for_each(AugStep::validate)
    }

    pub fn destroys_labels(&self) -> bool {
        self.steps.iter().any(AugStep::destroys_labels)
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Images read from an IDX file or from a directory of little-endian f32 arrays
/// described by `manifest.json` (`{"shape": [C, H, W], "files": [...]}`).
#[derive(Debug, Clone)]
pub struct ImageSource {
    pub shape: [usize; 3],
    pub pixels: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    shape: [usize; 3],
    files: Vec<PathBuf>,
}

impl ImageSource {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let src = if path.is_dir() {
            let mpath = path.join("manifest.json");
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let m: RawManifest = serde_json::from_str(&text)?;
            let per: usize = m.shape.iter().product();
            let mut pixels = Vec::new();
            for f in &m.files {
                let fp = path.join(f);
                let bytes = std::fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
                if bytes.len() % 4 != 0 || (bytes.len() / 4) % per.max(1) != 0 {
                    return Err(Error::Parse {
                        path: fp,
                        offset: bytes.len() as u64,
                        reason: format!("length is not a whole number of {per}-float images"),
                    });
                }
                pixels.extend(
                    bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                );
            }
            ImageSource {
                shape: m.shape,
                pixels,
            }
        } else {
            let (shape, pixels) = read_idx_images(path)?;
            ImageSource { shape, pixels }
        };
        if src.pixels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "image source {} is empty",
                path.display()
            )));
        }
        if src.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { op: "image source" });
        }
        Ok(src)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixInfo {
    pub lambda: f32,
    pub partners: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    /// Raw pixels of all `n` images, including appended ones.
    pub pixels: Vec<f32>,
    pub n: usize,
    /// Dataset labels, or `None` once a label-destroying step ran.
    pub labels: Option<Vec<usize>>,
    pub mix: Option<MixInfo>,
    /// Images appended by external or out-of-distribution mixing.
    pub appended: usize,
}

/// A validated policy with its image sources loaded.
#[derive(Debug, Clone)]
pub struct Augmenter {
    policy: AugmentationPolicy,
    shape: [usize; 3],
    sources: Vec<Option<ImageSource>>,
}

impl Augmenter {
    /// Relative source paths are resolved against `base_dir`.
    pub fn new(
        policy: &AugmentationPolicy,
        shape: [usize; 3],
        base_dir: Option<&Path>,
    ) -> Result<Self> {
        policy.validate()?;
        let sources = policy
            .steps
            .iter()
            .map(|s| match s {
                AugStep::ExternalMix { source, .. } | AugStep::OodMix { source, .. } => {
                    let p = match base_dir {
                        Some(b) if source.is_relative() => b.join(source),
                        _ => source.clone(),
                    };
                    let src = ImageSource::load(&p)?;
                    if src.shape != shape {
                        return Err(Error::InvalidArgument(format!(
                            "image source {} has shape {:?}, dataset images are {shape:?}",
                            p.display(),
                            src.shape
                        )));
                    }
                    Ok(Some(src))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Augmenter {
            policy: policy.clone(),
            shape,
            sources,
        })
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }

    /// Applies the policy to one batch. The result is a pure function of
    /// `(policy, batch, run_seed, epoch, batch_index)`.
    pub fn apply(
        &self,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        run_seed: u64,
        epoch: usize,
        batch_index: usize,
    ) -> AugmentedBatch {
        let per: usize = self.shape.iter().product();
        let mut out = AugmentedBatch {
            n: labels.len(),
            pixels,
            labels: Some(labels),
            mix: None,
            appended: 0,
        };
        for (k, step) in self.policy.steps.iter().enumerate() {
            let mut rng = Stream::tagged(
                run_seed,
                "augment",
                &[self.policy.seed, epoch as u64, batch_index as u64, k as u64],
            );
            let imgs = &mut out.pixels;
            match step {
                AugStep::Hflip { p } => {
                    for img in imgs.chunks_mut(per) {
                        if rng.bernoulli(*p) {
                            flip(img, self.shape, true);
                        }
                    }
                }
                AugStep::Vflip { p } => {
                    for img in imgs.chunks_mut(per) {
                        if rng.bernoulli(*p) {
                            flip(img, self.shape, false);
                        }
                    }
                }
                AugStep::PadCrop { pad } => {
                    for img in imgs.chunks_mut(per) {
                        let (ox, oy) = crop_offsets(&mut rng, *pad);
                        let shifted = shift(
                            img,
                            self.shape,
                            ox as isize - *pad as isize,
                            oy as isize - *pad as isize,
                        );
                        img.copy_from_slice(&shifted);
                    }
                }
                AugStep::Rotate { max_deg } => {
                    for img in imgs.chunks_mut(per) {
                        let deg = rng.uniform_range(-max_deg, *max_deg);
                        let r = rotate_image(img, self.shape, deg);
                        img.copy_from_slice(&r);
                    }
                }
                AugStep::Jitter {
                    brightness,
                    contrast,
                } => {
                    for img in imgs.chunks_mut(per) {
                        let b = rng.uniform_range(brightness[0], brightness[1]);
                        let c = rng.uniform_range(contrast[0], contrast[1]);
                        img.iter_mut().for_each(|v| *v *= b);
                        let mean =
                            img.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / per as f32;
                        img.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
                    }
                }
                AugStep::Mixup { lambda } => {
                    let lam = lambda.unwrap_or_else(|| rng.uniform_f32());
                    let partners = rng.derangement(out.n);
                    let orig = imgs.clone();
                    for (i, &j) in partners.iter().enumerate() {
                        let (a, b) = (&orig[i * per..(i + 1) * per], &orig[j * per..(j + 1) * per]);
                        for (o, (x, y)) in
                            imgs[i * per..(i + 1) * per].iter_mut().zip(a.iter().zip(b))
                        {
                            *o = lam * x + (1.0 - lam) * y;
                        }
                    }
                    out.mix = Some(MixInfo {
                        lambda: lam,
                        partners,
                    });
                }
                AugStep::NoiseReplace { p } => {
                    for img in imgs.chunks_mut(per) {
                        if rng.bernoulli(*p) {
                            img.iter_mut().for_each(|v| *v = rng.uniform_f32());
                        }
                    }
                }
                AugStep::ExternalMix { ratio, .. } | AugStep::OodMix { ratio, .. } => {
                    let src = self.sources[k]
                        .as_ref()
                        .expect("source loaded in Augmenter::new");
                    let extra = (out.n as f64 * ratio).ceil() as usize;
                    for _ in 0..extra {
                        let j = rng.below(src.len() as u64) as usize;
                        imgs.extend_from_slice(&src.pixels[j * per..(j + 1) * per]);
                    }
                    out.n += extra;
                    out.appended += extra;
                }
            }
            out.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            if step.destroys_labels() {
                out.labels = None;
            }
        }
        out
    }
}

fn crop_offsets(rng: &mut Stream, pad: usize) -> (usize, usize) {
    let span = 2 * pad as u64 + 1;
    (rng.below(span) as usize, rng.below(span) as usize)
}

fn flip(img: &mut [f32], [c, h, w]: [usize; 3], horizontal: bool) {
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        if horizontal {
            plane.chunks_mut(w).for_each(<[f32]>::reverse);
        } else {
            for y in 0..h / 2 {
                for x in 0..w {
                    plane.swap(y * w + x, (h - 1 - y) * w + x);
                }
            }
        }
    }
}

/// `out[y][x] = in[y + dy][x + dx]`, zero outside.
fn shift(img: &[f32], [c, h, w]: [usize; 3], dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Counter-clockwise rotation by `deg` about the image center `((W-1)/2, (H-1)/2)`
/// with bilinear resampling; samples outside the image read as 0.
pub fn rotate_image(img: &[f32], [c, h, w]: [usize; 3], deg: f32) -> Vec<f32> {
    let theta = f64::from(deg).to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let at = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                f64::from(plane[y as usize * w + x as usize])
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + cos * dx - sin * dy;
                let sy = cy + sin * dx + cos * dy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                    + fx * (1.0 - fy) * at(x0 + 1, y0)
                    + (1.0 - fx) * fy * at(x0, y0 + 1)
                    + fx * fy * at(x0 + 1, y0 + 1);
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}
