//! Synthetic co-registered multi-contrast phantom generator, persistence,
//! and normalization.
//!
//! Each sample is built from one randomized anatomy (smooth elliptical head,
//! cortical rim, ventricles, optional lesion) rendered into three contrasts
//! by fixed per-contrast mixing vectors over the tissue fields, plus a mild
//! smooth bias field and Gaussian pixel noise. The mixes are chosen so the
//! contrasts carry complementary information:
//!
//! - in `c1` the lesion coefficient equals white matter (lesions invisible),
//! - in `c2` gray and white matter coincide (cortex invisible), csf is bright,
//! - `c3` separates everything and equals `0.65*c1 + 0.55*c2` pixelwise at
//!   zero noise, so the pair of conditions determines the target while no
//!   single contrast does.
//!
//! Everything is a pure function of the manifest: anatomy and rendering draws
//! come from per-sample ChaCha8 streams keyed by `seed + global_index`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TISSUES: [&str; 5] = ["background", "gray-matter", "white-matter", "csf", "lesion"];
pub const BG: usize = 0;
pub const GM: usize = 1;
pub const WM: usize = 2;
pub const CSF: usize = 3;
pub const LESION: usize = 4;

pub const CONTRAST_IDS: [&str; 3] = ["c1", "c2", "c3"];

/// Mixing coefficients per contrast over [bg, gm, wm, csf, lesion].
/// c3 = 0.65*c1 + 0.55*c2 componentwise.
pub const MIX: [[f64; 5]; 3] = [
    [0.02, 0.55, 0.85, 0.55, 0.85],
    [0.03, 0.35, 0.35, 0.95, 0.75],
    [0.0295, 0.55, 0.745, 0.88, 0.965],
];

const BIAS_AMPLITUDE: f64 = 0.1;
const PIXEL_NOISE_STD: f64 = 0.03;
const RENDER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Soft tissue fields of one phantom, `[5, H, W]` in tissue order, each in
/// [0, 1] with pointwise sum 1 up to float rounding.
#[derive(Debug, Clone)]
pub struct AnatomyMap {
    pub fields: Array3<f64>,
    pub seed: u64,
    pub size: usize,
}

/// One sample split into its conditioning and target roles.
#[derive(Debug, Clone)]
pub struct ContrastStack {
    pub target: Array3<f32>,     // [1, H, W]
    pub conditions: Array3<f32>, // [K, H, W]
    pub contrast_ids: Vec<String>,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn blob_name(self) -> &'static str {
        match self {
            Split::Train => "train.f32",
            Split::Val => "val.f32",
            Split::Test => "test.f32",
        }
    }
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}', expected train|val|test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Index into [`CONTRAST_IDS`] of the synthesis target.
    pub target_contrast: usize,
    pub with_lesion: bool,
    pub noise_level: f64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} too small, need >= 16",
                self.image_size
            )));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("need at least one train and one val sample".into()));
        }
        if self.target_contrast >= CONTRAST_IDS.len() {
            return Err(Error::Config(format!(
                "target_contrast {} out of range 0..{}",
                self.target_contrast,
                CONTRAST_IDS.len()
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config(format!(
                "noise_level must be >= 0, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Global sample-index range of a split; ranges are disjoint by
    /// construction, which keeps per-sample seeds disjoint too.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.n_train + self.n_val + self.n_test,
        }
    }

    /// Condition contrast indices (ascending) and the target index.
    pub fn roles(&self) -> ([usize; 2], usize) {
        let t = self.target_contrast;
        let mut conds = [0usize; 2];
        let mut j = 0;
        for c in 0..CONTRAST_IDS.len() {
            if c != t {
                conds[j] = c;
                j += 1;
            }
        }
        (conds, t)
    }
}

fn smoothstep_ellipse(
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    sharp: f64,
) -> Array2<f64> {
    let (sin_r, cos_r) = rot.sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let xn = (x as f64 + 0.5) / w as f64 - cx;
        let yn = (y as f64 + 0.5) / h as f64 - cy;
        let u = (xn * cos_r + yn * sin_r) / rx;
        let v = (-xn * sin_r + yn * cos_r) / ry;
        let d = u * u + v * v;
        let a = sharp * (1.0 - d);
        // logistic in stable form
        if a >= 0.0 {
            1.0 / (1.0 + (-a).exp())
        } else {
            let e = a.exp();
            e / (1.0 + e)
        }
    })
}

/// Smooth union of soft masks: 1 - prod(1 - m_i).
fn soft_union(masks: &[Array2<f64>], h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::from_elem((h, w), 1.0);
    for m in masks {
        ndarray::Zip::from(&mut out).and(m).for_each(|o, &v| *o *= 1.0 - v);
    }
    out.mapv_inplace(|v| 1.0 - v);
    out
}

/// Builds one randomized phantom. Deterministic in `seed`; `size` must be at
/// least 16 so structures stay resolvable.
pub fn make_anatomy(seed: u64, size: usize, with_lesion: bool) -> Result<AnatomyMap> {
    if size < 16 {
        return Err(Error::Config(format!("anatomy size {size} too small, need >= 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (size, size);
    let u01 = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();

    let cx = u01(&mut rng, 0.46, 0.54);
    let cy = u01(&mut rng, 0.46, 0.54);
    let head_rx = u01(&mut rng, 0.30, 0.38);
    let head_ry = u01(&mut rng, 0.34, 0.42);
    let head_rot = u01(&mut rng, -0.3, 0.3);
    let head = smoothstep_ellipse(h, w, cx, cy, head_rx, head_ry, head_rot, u01(&mut rng, 18.0, 26.0));

    let inner_scale = u01(&mut rng, 0.70, 0.80);
    let inner = smoothstep_ellipse(
        h,
        w,
        cx + u01(&mut rng, -0.015, 0.015),
        cy + u01(&mut rng, -0.015, 0.015),
        head_rx * inner_scale,
        head_ry * inner_scale,
        head_rot,
        u01(&mut rng, 16.0, 22.0),
    );

    // two mirrored ventricle lobes near the midline
    let vent_dx = u01(&mut rng, 0.04, 0.07);
    let vent_cy = cy + u01(&mut rng, -0.03, 0.02);
    let vent_rx = u01(&mut rng, 0.030, 0.055);
    let vent_ry = u01(&mut rng, 0.06, 0.11);
    let vent_sharp = u01(&mut rng, 20.0, 28.0);
    let vent = soft_union(
        &[
            smoothstep_ellipse(h, w, cx - vent_dx, vent_cy, vent_rx, vent_ry, 0.15, vent_sharp),
            smoothstep_ellipse(h, w, cx + vent_dx, vent_cy, vent_rx, vent_ry, -0.15, vent_sharp),
        ],
        h,
        w,
    );

    let lesion_mask = if with_lesion {
        let n_blobs = 1 + (rng.gen::<f64>() < 0.4) as usize;
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            let ang = u01(&mut rng, 0.0, std::f64::consts::TAU);
            let dist = u01(&mut rng, 0.10, 0.22);
            let lr = u01(&mut rng, 0.035, 0.075);
            blobs.push(smoothstep_ellipse(
                h,
                w,
                cx + dist * ang.cos(),
                cy + dist * ang.sin(),
                lr,
                lr * u01(&mut rng, 0.8, 1.2),
                u01(&mut rng, -0.5, 0.5),
                u01(&mut rng, 20.0, 30.0),
            ));
        }
        soft_union(&blobs, h, w)
    } else {
        Array2::zeros((h, w))
    };

    // hierarchical soft partition; the last field absorbs rounding so the
    // pointwise sum stays at 1 up to float error
    let mut fields = Array3::zeros((5, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = head[[y, x]];
            let v = inner[[y, x]];
            let t = vent[[y, x]];
            let l = lesion_mask[[y, x]];
            let bg = 1.0 - u;
            let gm = u * (1.0 - v);
            let csf = u * v * t;
            let les = u * v * (1.0 - t) * l;
            let wm = (1.0 - bg - gm - csf - les).max(0.0);
            fields[[BG, y, x]] = bg;
            fields[[GM, y, x]] = gm;
            fields[[WM, y, x]] = wm;
            fields[[CSF, y, x]] = csf;
            fields[[LESION, y, x]] = les;
        }
    }
    Ok(AnatomyMap { fields, seed, size })
}

/// Renders the three contrasts of one anatomy: fixed linear tissue mixes,
/// a smooth multiplicative bias field, and additive Gaussian noise, both
/// scaled by `noise_level` (0 gives the exact mixes). Output `[3, H, W]`
/// clamped to [0, 1]. Noise draws are keyed by the anatomy seed, so the
/// render is deterministic too.
pub fn render_contrasts(a: &AnatomyMap, noise_level: f64) -> Result<Array3<f32>> {
    if !(noise_level >= 0.0) {
        return Err(Error::Config(format!("noise_level must be >= 0, got {noise_level}")));
    }
    let (h, w) = (a.size, a.size);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ RENDER_SALT);
    let mut out = Array3::zeros((3, h, w));
    for (k, mix) in MIX.iter().enumerate() {
        let (b0, b1, b2) = (
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for ti in 0..5 {
                    v += mix[ti] * a.fields[[ti, y, x]];
                }
                if noise_level > 0.0 {
                    let xn = (x as f64 + 0.5) / w as f64 - 0.5;
                    let yn = (y as f64 + 0.5) / h as f64 - 0.5;
                    let bias = b0 * xn + b1 * yn + b2 * xn * yn;
                    let noise: f64 = rng.sample(StandardNormal);
                    v = v * (1.0 + noise_level * BIAS_AMPLITUDE * bias)
                        + noise_level * PIXEL_NOISE_STD * noise;
                    v = v.clamp(0.0, 1.0);
                }
                out[[k, y, x]] = v as f32;
            }
        }
    }
    Ok(out)
}

/// Generates one split as `[N, 3, H, W]` in [0, 1].
pub fn generate_split(manifest: &DatasetManifest, split: Split) -> Result<Array4<f32>> {
    manifest.validate()?;
    let range = manifest.split_range(split);
    let n = range.len();
    let hw = manifest.image_size;
    let mut out = Array4::zeros((n, 3, hw, hw));
    for (row, global_idx) in range.enumerate() {
        let sample_seed = manifest.seed.wrapping_add(global_idx as u64);
        let anatomy = make_anatomy(sample_seed, hw, manifest.with_lesion)?;
        let imgs = render_contrasts(&anatomy, manifest.noise_level)?;
        out.slice_mut(s![row, .., .., ..]).assign(&imgs);
    }
    Ok(out)
}

fn blob_bytes(images: &Array4<f32>) -> Vec<u8> {
    let flat = images.as_slice().expect("generated arrays are contiguous");
    let mut bytes = vec![0u8; flat.len() * 4];
    LittleEndian::write_f32_into(flat, &mut bytes);
    bytes
}

/// Writes `manifest.json` plus one little-endian f32 blob per split.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    for split in Split::ALL {
        let images = generate_split(manifest, split)?;
        let mut f = fs::File::create(dir.join(split.blob_name()))?;
        f.write_all(&blob_bytes(&images))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads one split blob, checking its size against the manifest.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Array4<f32>> {
    let n = manifest.split_len(split);
    let hw = manifest.image_size;
    let expected = n * 3 * hw * hw * 4;
    let mut f = fs::File::open(dir.join(split.blob_name()))?;
    let mut bytes = Vec::with_capacity(expected);
    f.read_to_end(&mut bytes)?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest implies {expected} ({} samples of {hw}x{hw}x3)",
            split.blob_name(),
            bytes.len(),
            n,
        )));
    }
    let mut flat = vec![0f32; expected / 4];
    LittleEndian::read_f32_into(&bytes, &mut flat);
    Ok(Array4::from_shape_vec((n, 3, hw, hw), flat).expect("shape/product mismatch"))
}

/// Splits a loaded `[N, 3, H, W]` split into condition and target batches
/// per the manifest's role assignment: `([N, 2, H, W], [N, 1, H, W])`.
/// `single_contrast` keeps only the first condition: `[N, 1, H, W]`.
pub fn assemble_roles(
    images: &Array4<f32>,
    manifest: &DatasetManifest,
    single_contrast: bool,
) -> (Array4<f32>, Array4<f32>) {
    let (conds, target) = manifest.roles();
    let n_cond = if single_contrast { 1 } else { 2 };
    let (n, _, h, w) = images.dim();
    let mut cond = Array4::zeros((n, n_cond, h, w));
    for (j, &c) in conds.iter().take(n_cond).enumerate() {
        cond.index_axis_mut(Axis(1), j).assign(&images.index_axis(Axis(1), c));
    }
    let tgt = images
        .slice(s![.., target..target + 1, .., ..])
        .to_owned();
    (cond, tgt)
}

/// Builds the per-sample view type from one row of a loaded split.
pub fn contrast_stack(
    images: &Array4<f32>,
    idx: usize,
    manifest: &DatasetManifest,
    normalized: bool,
) -> ContrastStack {
    let (conds, target) = manifest.roles();
    let (_, _, h, w) = images.dim();
    let mut cond = Array3::zeros((2, h, w));
    let mut ids = Vec::with_capacity(3);
    for (j, &c) in conds.iter().enumerate() {
        cond.index_axis_mut(Axis(0), j).assign(&images.slice(s![idx, c, .., ..]));
        ids.push(CONTRAST_IDS[c].to_string());
    }
    ids.push(CONTRAST_IDS[target].to_string());
    let mut tgt = Array3::zeros((1, h, w));
    tgt.index_axis_mut(Axis(0), 0).assign(&images.slice(s![idx, target, .., ..]));
    let (mut tgt, mut cond) = (tgt, cond);
    if normalized {
        tgt.mapv_inplace(|v| v * 2.0 - 1.0);
        cond.mapv_inplace(|v| v * 2.0 - 1.0);
    }
    ContrastStack { target: tgt, conditions: cond, contrast_ids: ids, normalized }
}

/// [0,1] -> [-1,1]
pub fn normalize<D: ndarray::Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v * 2.0 - 1.0)
}

/// [-1,1] -> [0,1]; exact inverse of [`normalize`], no clamping.
pub fn denormalize<D: ndarray::Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| (v + 1.0) * 0.5)
}

/// Clamp to display range; used before metrics and image export.
pub fn clamp01<D: ndarray::Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v.clamp(0.0, 1.0))
}
