//! Synthetic 2D shape images for pre-training and labelled 3D volumes for
//! segmentation, plus the optional `MTVD` volume cache.

use std::path::Path;

use rayon::prelude::*;

use crate::codec::{atomic_write, Reader};
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: usize = 4;
pub const SHAPE_NAMES: [&str; SHAPE_CLASSES] = ["disk", "square", "cross", "stripes"];
/// Disk radius as a fraction of the image side.
pub const DISK_RADIUS: (f64, f64) = (0.2, 0.28);
/// Square half-side; larger than any disk so the two never share an area.
pub const SQUARE_HALF_SIDE: (f64, f64) = (0.32, 0.42);
pub const IMAGE_NOISE: f64 = 0.1;

/// Half-width of the per-class intensity band before noise.
pub const BAND_HALF_WIDTH: f32 = 0.05;
pub const VOLUME_NOISE: f64 = 0.15;
pub const MIN_VOLUME_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    /// `n` images of `size × size`, row-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[len, 1, size, size]` images and their labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let px = self.size * self.size;
        let mut data = Vec::with_capacity(idx.len() * px);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("image index {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.pixels[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&[idx.len(), 1, self.size, self.size], data)?, labels))
    }
}

fn draw_shape(class: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let s = size as f64;
    let fg = rng.uniform(0.6, 1.0) as f32;
    let mut img = vec![0.0f32; size * size];
    let (cy, cx) = (rng.uniform(0.35, 0.65) * s, rng.uniform(0.35, 0.65) * s);
    let r = rng.uniform(DISK_RADIUS.0, DISK_RADIUS.1) * s;
    let half = rng.uniform(SQUARE_HALF_SIDE.0, SQUARE_HALF_SIDE.1) * s;
    let thick = rng.uniform(0.03, 0.05) * s;
    let arm = rng.uniform(0.3, 0.45) * s;
    let period = 4 + rng.below(5) as usize;
    let vertical = rng.below(2) == 1;
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match class {
                0 => dy * dy + dx * dx <= r * r,
                1 => dy.abs() <= half && dx.abs() <= half,
                2 => (dy.abs() <= thick && dx.abs() <= arm) || (dx.abs() <= thick && dy.abs() <= arm),
                _ => (if vertical { x } else { y }) % period < period / 2,
            };
            if inside {
                img[y * size + x] = fg;
            }
        }
    }
    for p in &mut img {
        *p += (rng.normal() * IMAGE_NOISE) as f32;
    }
    img
}

/// `n` noisy images of one shape each; labels cycle through the shape
/// classes. Image `i` depends only on `(rng, i)`.
pub fn synth_classification_set(rng: &Rng, n: usize, size: usize) -> Result<ImageSet> {
    if n == 0 || size < MIN_VOLUME_DIM {
        return Err(Error::Config(format!(
            "need n >= 1 and size >= {MIN_VOLUME_DIM}, got {n}, {size}"
        )));
    }
    let base = rng.derive("cls");
    let images: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| draw_shape(i % SHAPE_CLASSES, size, &mut base.derive_index(i as u64)))
        .collect();
    Ok(ImageSet {
        size,
        pixels: images.concat(),
        labels: (0..n).map(|i| (i % SHAPE_CLASSES) as u8).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// `[1, D, H, W]` intensities in `[0, 1]`.
    pub volume: Tensor,
    pub labels: LabelVolume,
}

/// Mean intensity of class `c` among `classes`.
pub fn class_mean(c: usize, classes: usize) -> f32 {
    0.15 + 0.7 * c as f32 / (classes - 1) as f32
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn random(dims: [usize; 3], scale: (f64, f64), rng: &mut Rng) -> Ellipsoid {
        let mut centre = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let n = dims[a] as f64;
            radii[a] = rng.uniform(scale.0, scale.1) * n;
            centre[a] = rng.uniform(radii[a], n - radii[a]);
        }
        Ellipsoid { centre, radii }
    }

    fn level(&self, p: [usize; 3], shrink: f64) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 + 0.5 - self.centre[a]) / (self.radii[a] * shrink);
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

/// Labels plus noise-free intensities of sample `(rng, index)`. Every voxel of
/// class `c` lies within `class_mean(c) ± BAND_HALF_WIDTH`.
pub fn clean_volume(rng: &Rng, index: usize, dims: [usize; 3], classes: usize) -> Result<(Vec<f32>, LabelVolume)> {
    if classes < 2 || classes > usize::from(u8::MAX) {
        return Err(Error::Config(format!("classes must be in 2..=255, got {classes}")));
    }
    if dims.iter().any(|&d| d < MIN_VOLUME_DIM) {
        return Err(Error::Config(format!(
            "volume dims {dims:?} too small for the ellipsoid bodies (minimum {MIN_VOLUME_DIM})"
        )));
    }
    let mut r = rng.derive("vol").derive_index(index as u64);
    let main = Ellipsoid::random(dims, (0.2, 0.32), &mut r);
    let core = r.uniform(0.45, 0.65);
    let extras: Vec<(u8, Ellipsoid)> = (3..classes)
        .filter_map(|c| {
            let e = Ellipsoid::random(dims, (0.12, 0.2), &mut r);
            (r.next_f64() < 0.75).then_some((c as u8, e))
        })
        .collect();
    let [d, h, w] = dims;
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let l = &mut labels[(z * h + y) * w + x];
                if main.level(p, 1.0) {
                    *l = if classes > 2 && main.level(p, core) { 2 } else { 1 };
                } else if let Some((c, _)) = extras.iter().find(|(_, e)| e.level(p, 1.0)) {
                    *l = *c;
                }
            }
        }
    }
    let intensity = labels
        .iter()
        .map(|&c| class_mean(usize::from(c), classes) + BAND_HALF_WIDTH * (2.0 * r.next_f64() as f32 - 1.0))
        .collect();
    Ok((intensity, LabelVolume::new(dims, labels)?))
}

/// `n` labelled volumes; sample `i` depends only on `(rng, i)`.
pub fn synth_volume_set(rng: &Rng, n: usize, dims: [usize; 3], classes: usize) -> Result<Vec<VolumeSample>> {
    if n == 0 {
        return Err(Error::Config("volume set needs n >= 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut v, labels) = clean_volume(rng, i, dims, classes)?;
            let mut noise = rng.derive("vol.noise").derive_index(i as u64);
            for x in &mut v {
                *x = (*x + (noise.normal() * VOLUME_NOISE) as f32).clamp(0.0, 1.0);
            }
            Ok(VolumeSample {
                volume: Tensor::from_vec(&[1, dims[0], dims[1], dims[2]], v)?,
                labels,
            })
        })
        .collect()
}

/// `[len, 1, D, H, W]` volumes and flattened labels for the given samples.
pub fn volume_batch(samples: &[&VolumeSample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty volume batch".into()))?;
    let dims = first.labels.dims;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.labels.dims != dims {
            return Err(Error::Data(format!(
                "mixed volume dims {dims:?} and {:?}",
                s.labels.dims
            )));
        }
        data.extend_from_slice(s.volume.data());
        labels.extend_from_slice(&s.labels.data);
    }
    Ok((
        Tensor::from_vec(&[samples.len(), 1, dims[0], dims[1], dims[2]], data)?,
        labels,
    ))
}

const VOLUME_MAGIC: &[u8; 4] = b"MTVD";
const VOLUME_VERSION: u32 = 1;

pub fn write_volume_set(path: &Path, samples: &[VolumeSample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        for d in s.labels.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in s.volume.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.labels.data);
    }
    atomic_write(path, &buf)
}

pub fn read_volume_set(path: &Path) -> Result<Vec<VolumeSample>> {
    let buf = crate::codec::read(path)?;
    let mut r = Reader::new(&buf);
    if r.take(4)? != VOLUME_MAGIC {
        return Err(Error::Format(format!("{} is not a volume set", path.display())));
    }
    let version = r.u32()?;
    if version != VOLUME_VERSION {
        return Err(Error::Format(format!(
            "volume set version {version}, expected {VOLUME_VERSION}"
        )));
    }
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let len = dims.iter().product::<usize>();
        let v = r.f32s(len)?;
        let labels = r.take(len)?.to_vec();
        out.push(VolumeSample {
            volume: Tensor::from_vec(&[1, dims[0], dims[1], dims[2]], v)?,
            labels: LabelVolume::new(dims, labels)?,
        });
    }
    if !r.finished() {
        return Err(Error::Format("trailing bytes after volume set".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_set_is_balanced_and_deterministic() {
        let rng = Rng::new(11);
        let a = synth_classification_set(&rng, 10, 16).unwrap();
        let b = synth_classification_set(&rng, 10, 16).unwrap();
        assert_eq!(a, b);
        let hist = (0..4)
            .map(|c| a.labels.iter().filter(|&&l| l == c).count())
            .collect::<Vec<_>>();
        assert_eq!(hist, vec![3, 3, 2, 2]);
        let (t, l) = a.batch(&[4, 1]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 16, 16]);
        assert_eq!(l, vec![0, 1]);
    }

    #[test]
    fn disk_has_documented_radius() {
        let size = 32;
        let mut r = Rng::new(5).derive("cls").derive_index(0);
        let fg = r.uniform(0.6, 1.0);
        let mut clean = Rng::new(5).derive("cls").derive_index(0);
        let img = draw_shape(0, size, &mut clean);
        let area = img.iter().filter(|&&p| f64::from(p) > fg / 2.0).count() as f64;
        let radius = (area / std::f64::consts::PI).sqrt() / size as f64;
        assert!(radius > DISK_RADIUS.0 * 0.8 && radius < DISK_RADIUS.1 * 1.2, "{radius}");
    }

    #[test]
    fn clean_intensities_lie_in_class_bands() {
        let rng = Rng::new(2);
        for i in 0..5 {
            let (v, l) = clean_volume(&rng, i, [8, 16, 16], 4).unwrap();
            for (x, &c) in v.iter().zip(&l.data) {
                assert!((x - class_mean(usize::from(c), 4)).abs() <= BAND_HALF_WIDTH + 1e-6);
            }
        }
        assert!(matches!(clean_volume(&rng, 0, [4, 16, 16], 4), Err(Error::Config(_))));
    }

    #[test]
    fn volume_set_determinism_and_cache_round_trip() {
        let rng = Rng::new(9);
        let a = synth_volume_set(&rng, 3, [8, 8, 8], 4).unwrap();
        assert_eq!(a, synth_volume_set(&rng, 3, [8, 8, 8], 4).unwrap());
        assert!(a
            .iter()
            .all(|s| s.volume.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mtvd");
        write_volume_set(&p, &a).unwrap();
        assert_eq!(read_volume_set(&p).unwrap(), a);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_volume_set(&p), Err(Error::Format(_))));
    }
}
