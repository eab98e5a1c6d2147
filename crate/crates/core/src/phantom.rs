//! Synthetic tumor phantoms, block cropping and intensity normalization.
//!
//! Each tumor is three concentric ellipsoids sharing one per-axis
//! anisotropy: a necrotic core (class 1) inside an enhancing shell
//! (class 3) inside an edema halo (class 2).

use brainformer_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::sequentializer::VolumeBlock;

pub const MODALITIES: usize = 4;

/// Mean intensity per tissue class (rows: background, NCR/NET, ED, ET) and
/// modality (columns: T1, T1ce, T2, FLAIR).
pub const DEFAULT_CONTRAST: [[f64; MODALITIES]; 4] = [
    [0.40, 0.40, 0.35, 0.35],
    [0.25, 0.30, 0.70, 0.50],
    [0.35, 0.38, 0.65, 0.80],
    [0.40, 0.90, 0.55, 0.60],
];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub tumors: usize,
    /// Radius ranges `[lo, hi]` in voxels for core, shell and halo.
    pub core_radius: [f64; 2],
    pub shell_radius: [f64; 2],
    pub halo_radius: [f64; 2],
    /// Per-axis radius scale range, shared by the three shells of a tumor.
    pub anisotropy: [f64; 2],
    pub contrast: [[f64; MODALITIES]; 4],
    pub noise: f64,
}

impl PhantomSpec {
    /// 32³ volume with one tumor.
    pub fn new(seed: u64) -> Self {
        PhantomSpec {
            seed,
            extents: [32, 32, 32],
            tumors: 1,
            core_radius: [2.5, 3.5],
            shell_radius: [4.5, 5.5],
            halo_radius: [7.0, 9.0],
            anisotropy: [0.85, 1.15],
            contrast: DEFAULT_CONTRAST,
            noise: 0.05,
        }
    }

    /// 16³ volume sized so one tumor fits inside a training block.
    pub fn toy(seed: u64) -> Self {
        PhantomSpec {
            extents: [16, 16, 16],
            core_radius: [2.0, 2.5],
            shell_radius: [3.5, 4.0],
            halo_radius: [5.0, 6.0],
            ..Self::new(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < 16) {
            return Err(Error::Config(format!(
                "phantom extents {:?} must each be at least 16",
                self.extents
            )));
        }
        let ranges = [self.core_radius, self.shell_radius, self.halo_radius, self.anisotropy];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite())) {
            return Err(Error::Config("radius ranges must satisfy 0 < lo <= hi".into()));
        }
        if !(self.core_radius[1] < self.shell_radius[0] && self.shell_radius[1] < self.halo_radius[0]) {
            return Err(Error::Config(
                "radii must be strictly nested: core < shell < halo".into(),
            ));
        }
        let widest = self.halo_radius[1] * self.anisotropy[1];
        if let Some(e) = self.extents.iter().find(|&&e| 2.0 * widest + 1.0 > e as f64) {
            return Err(Error::Config(format!(
                "halo radius up to {widest:.2} does not fit in extent {e}"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Geometry of one generated tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tumor {
    pub center: [f64; 3],
    /// Per-axis radii of core, shell and halo.
    pub radii: [[f64; 3]; 3],
}

impl Tumor {
    fn inside(&self, shell: usize, p: [usize; 3]) -> bool {
        let r = self.radii[shell];
        (0..3)
            .map(|i| ((p[i] as f64 - self.center[i]) / r[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Class at `p` for this tumor alone.
    pub fn label_at(&self, p: [usize; 3]) -> u8 {
        if self.inside(0, p) {
            1
        } else if self.inside(1, p) {
            3
        } else if self.inside(2, p) {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub block: VolumeBlock,
    pub tumors: Vec<Tumor>,
}

/// Priority when tumors overlap: core over shell over halo over background.
fn rank(label: u8) -> u8 {
    [0, 3, 1, 2][label as usize]
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [eh, ew, ed] = spec.extents;
    let mut tumors = Vec::with_capacity(spec.tumors);
    for _ in 0..spec.tumors {
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.anisotropy[0]..=spec.anisotropy[1]));
        let base = [spec.core_radius, spec.shell_radius, spec.halo_radius]
            .map(|r| rng.random_range(r[0]..=r[1]));
        let radii = base.map(|b| scale.map(|s| b * s));
        let center = std::array::from_fn(|i| {
            let r = radii[2][i];
            let hi = spec.extents[i] as f64 - 1.0 - r;
            rng.random_range(r..=hi)
        });
        tumors.push(Tumor { center, radii });
    }

    let mut labels = vec![0u8; eh * ew * ed];
    for h in 0..eh {
        for w in 0..ew {
            for d in 0..ed {
                let slot = &mut labels[(h * ew + w) * ed + d];
                for t in &tumors {
                    let l = t.label_at([h, w, d]);
                    if rank(l) > rank(*slot) {
                        *slot = l;
                    }
                }
            }
        }
    }

    let n = labels.len();
    let mut data = Vec::with_capacity(MODALITIES * n);
    for m in 0..MODALITIES {
        for &l in &labels {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(spec.contrast[l as usize][m] + spec.noise * noise);
        }
    }
    let intensities = Tensor::new(vec![MODALITIES, eh, ew, ed], data)?;
    let labels = LabelVolume::new(spec.extents, labels)?;
    Ok(Phantom {
        block: VolumeBlock::new(intensities, Some(labels))?,
        tumors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Offset uniform over all valid positions.
    Uniform,
    /// Half of the crops are centered around a random tumor voxel.
    Training,
}

/// Copies the sub-block at `offset` with extents `size`.
pub fn crop_at(volume: &VolumeBlock, offset: [usize; 3], size: [usize; 3]) -> Result<VolumeBlock> {
    let e = volume.extents();
    if (0..3).any(|i| size[i] == 0 || offset[i] + size[i] > e[i]) {
        return Err(Error::Config(format!(
            "block {size:?} at {offset:?} does not fit in volume {e:?}"
        )));
    }
    let c = volume.modality_count();
    let src = volume.intensities.data();
    let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
    let mut labels = Vec::new();
    for ch in 0..c {
        for h in 0..size[0] {
            for w in 0..size[1] {
                let start = ((ch * e[0] + offset[0] + h) * e[1] + offset[1] + w) * e[2] + offset[2];
                data.extend_from_slice(&src[start..start + size[2]]);
            }
        }
    }
    if let Some(l) = &volume.labels {
        for h in 0..size[0] {
            for w in 0..size[1] {
                let start = ((offset[0] + h) * e[1] + offset[1] + w) * e[2] + offset[2];
                labels.extend_from_slice(&l.voxels()[start..start + size[2]]);
            }
        }
    }
    let mut intensities = Tensor::new(vec![c, size[0], size[1], size[2]], data)?;
    intensities.set_precision(volume.intensities.precision());
    let labels = match &volume.labels {
        Some(_) => Some(LabelVolume::new(size, labels)?),
        None => None,
    };
    VolumeBlock::new(intensities, labels)
}

/// Seeded axis-aligned crop.
pub fn crop_block(volume: &VolumeBlock, size: [usize; 3], seed: u64, mode: CropMode) -> Result<VolumeBlock> {
    let e = volume.extents();
    if (0..3).any(|i| size[i] == 0 || size[i] > e[i]) {
        return Err(Error::Config(format!(
            "block {size:?} is larger than volume {e:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tumor_voxels: Vec<usize> = match (&volume.labels, mode) {
        (Some(l), CropMode::Training) => l
            .voxels()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect(),
        _ => Vec::new(),
    };
    let offset: [usize; 3] = if !tumor_voxels.is_empty() && rng.random_bool(0.5) {
        let i = tumor_voxels[rng.random_range(0..tumor_voxels.len())];
        let v = [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]];
        std::array::from_fn(|a| {
            let lo = (v[a] + 1).saturating_sub(size[a]);
            let hi = v[a].min(e[a] - size[a]);
            rng.random_range(lo..=hi)
        })
    } else {
        std::array::from_fn(|a| rng.random_range(0..=e[a] - size[a]))
    };
    crop_at(volume, offset, size)
}

/// Per channel: standardize the nonzero voxels (std floored at 1e-6) and
/// keep zeros at zero.
pub fn normalize(block: &VolumeBlock) -> VolumeBlock {
    let mut out = block.clone();
    let c = block.modality_count();
    let n = block.intensities.len() / c;
    for chan in out.intensities.data_mut().chunks_mut(n) {
        let nonzero: Vec<f64> = chan.iter().copied().filter(|&x| x != 0.0).collect();
        if nonzero.is_empty() {
            continue;
        }
        let m = nonzero.len() as f64;
        let mean = nonzero.iter().sum::<f64>() / m;
        let var = nonzero.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
        let std = var.sqrt().max(1e-6);
        for x in chan.iter_mut() {
            if *x != 0.0 {
                *x = (*x - mean) / std;
            }
        }
    }
    let precision = out.intensities.precision();
    out.intensities.set_precision(precision);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_radii_are_required() {
        let mut s = PhantomSpec::new(0);
        s.shell_radius = [3.0, 3.2];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_halo_is_rejected() {
        let mut s = PhantomSpec::toy(0);
        s.halo_radius = [7.5, 9.0];
        assert!(matches!(generate_phantom(&s), Err(Error::Config(_))));
    }

    #[test]
    fn small_extents_are_rejected() {
        let mut s = PhantomSpec::toy(0);
        s.extents = [8, 16, 16];
        assert!(s.validate().is_err());
    }

    #[test]
    fn crop_rejects_oversized_block() {
        let p = generate_phantom(&PhantomSpec::toy(1)).unwrap();
        assert!(crop_block(&p.block, [17, 16, 16], 0, CropMode::Uniform).is_err());
    }

    #[test]
    fn zero_channel_is_left_alone() {
        let t = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
        let b = VolumeBlock::new(t.clone(), None).unwrap();
        assert_eq!(normalize(&b).intensities, t);
    }
}
