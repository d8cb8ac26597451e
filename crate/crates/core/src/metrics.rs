//! Volumetric segmentation metrics: Dice overlap and the 95th-percentile
//! symmetric surface (Hausdorff-95) distance.
//!
//! HD95 details: boundary voxels are foreground voxels with at least one
//! background 6-neighbour or lying on the volume border. Distances are
//! Euclidean in voxel units from every boundary voxel of one mask to the
//! nearest boundary voxel of the other, in both directions; the pooled
//! multiset is sorted and the 95th percentile is taken with the inclusive
//! linear-interpolation rule (see [`percentile`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `[D, H, W]` integer label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "label volume {dims:?} with {} values",
                data.len()
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn mask(&self, class: u8) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }
}

/// Binary `[D, H, W]` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::InvalidShape(format!("mask {dims:?} with {} values", data.len())));
        }
        Ok(Mask { dims, data })
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Boundary voxel coordinates in row-major order.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let at = |z: usize, y: usize, x: usize| self.data[(z * h + y) * w + x];
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !at(z, y, x) {
                        continue;
                    }
                    let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    if edge
                        || !at(z - 1, y, x)
                        || !at(z + 1, y, x)
                        || !at(z, y - 1, x)
                        || !at(z, y + 1, x)
                        || !at(z, y, x - 1)
                        || !at(z, y, x + 1)
                    {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// `2|A∩B| / (|A|+|B|)` for class `k`; 1.0 when both are empty.
pub fn dice_score(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::mismatch("dice_score", &pred.dims, &truth.dims));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (pa, tb) = (p == class, t == class);
        a += usize::from(pa);
        b += usize::from(tb);
        both += usize::from(pa && tb);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Inclusive linear-interpolation percentile of ascending `sorted`:
/// `r = q·(n−1)`, `i = ⌊r⌋`, result `v[i] + (r−i)·(v[i+1]−v[i])`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of an empty set");
    let rank = q * (n - 1) as f64;
    let i = rank.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let frac = rank - i as f64;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

const INF: i64 = i64::MAX / 4;

/// Exact squared distance transform of one line (lower envelope of
/// parabolas, integer arithmetic). `f[i] == INF` marks a non-site.
fn edt_line(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i] < INF).collect();
    if sites.is_empty() {
        out.fill(INF);
        return;
    }
    // Intersection abscissa of parabolas at p < q as the fraction num/den.
    let cross = |p: usize, q: usize| -> (i128, i128) {
        let (p, q) = (p as i128, q as i128);
        (
            (f[q as usize] as i128 + q * q) - (f[p as usize] as i128 + p * p),
            2 * (q - p),
        )
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    // z[k] is the left boundary of v[k]'s region; None is −∞.
    let mut z: Vec<Option<(i128, i128)>> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(None);
                    break;
                }
                Some(&p) => {
                    let s = cross(p, q);
                    let k = v.len() - 1;
                    let drop = match z[k] {
                        None => false,
                        Some(zk) => s.0 * zk.1 <= zk.0 * s.1,
                    };
                    if drop {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(Some(s));
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() {
            let (num, den) = z[k + 1].expect("interior boundaries are finite");
            if num < (x as i128) * den {
                k += 1;
            } else {
                break;
            }
        }
        let dx = x as i64 - v[k] as i64;
        *o = dx * dx + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
fn squared_edt(dims: [usize; 3], sites: &[[usize; 3]]) -> Vec<i64> {
    let [d, h, w] = dims;
    let mut g = vec![INF; d * h * w];
    for &[z, y, x] in sites {
        g[(z * h + y) * w + x] = 0;
    }
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0i64; n];
        let mut out = vec![0i64; n];
        for base in 0..d * h * w {
            if (base / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[base + i * stride];
            }
            edt_line(&line, &mut out);
            for i in 0..n {
                g[base + i * stride] = out[i];
            }
        }
    }
    g
}

/// Symmetric 95th-percentile surface distance. `Ok(None)` when either mask
/// is empty.
pub fn hausdorff95(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    if a.dims != b.dims {
        return Err(Error::mismatch("hausdorff95", &a.dims, &b.dims));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let [_, h, w] = a.dims;
    let to_b = squared_edt(a.dims, &bb);
    let to_a = squared_edt(a.dims, &ba);
    let mut dists: Vec<f64> = ba
        .iter()
        .map(|&[z, y, x]| to_b[(z * h + y) * w + x])
        .chain(bb.iter().map(|&[z, y, x]| to_a[(z * h + y) * w + x]))
        .map(|d2| (d2 as f64).sqrt())
        .collect();
    dists.sort_by(f64::total_cmp);
    Ok(Some(percentile(&dists, 0.95)))
}

/// Per-class evaluation summary. Index `k` of `dice`/`hd95` is class `k`;
/// `mean_dice` averages the foreground classes `1..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dice: Vec<f64>,
    /// `None` is the "undefined" sentinel (a class empty in either mask).
    pub hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
}

impl MetricsRecord {
    /// Scores one predicted volume.
    pub fn score(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<Self> {
        let mut dice = Vec::with_capacity(classes);
        let mut hd95 = Vec::with_capacity(classes);
        for k in 0..classes {
            let k8 = u8::try_from(k).map_err(|_| Error::Data(format!("class {k} exceeds u8")))?;
            dice.push(dice_score(pred, truth, k8)?);
            hd95.push(hausdorff95(&pred.mask(k8), &truth.mask(k8))?);
        }
        Ok(Self::from_parts(dice, hd95))
    }

    fn from_parts(dice: Vec<f64>, hd95: Vec<Option<f64>>) -> Self {
        let fg = &dice[1.min(dice.len())..];
        let mean_dice = if fg.is_empty() {
            dice.iter().sum::<f64>() / dice.len().max(1) as f64
        } else {
            fg.iter().sum::<f64>() / fg.len() as f64
        };
        MetricsRecord { dice, hd95, mean_dice }
    }

    /// Averages records over volumes; undefined HD95 entries are excluded.
    pub fn average(records: &[MetricsRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Data("no records to average".into()));
        };
        let k = first.dice.len();
        let mut dice = vec![0.0; k];
        let mut hd = vec![(0.0, 0usize); k];
        for r in records {
            if r.dice.len() != k {
                return Err(Error::Data("records disagree on class count".into()));
            }
            for c in 0..k {
                dice[c] += r.dice[c];
                if let Some(v) = r.hd95[c] {
                    hd[c].0 += v;
                    hd[c].1 += 1;
                }
            }
        }
        let n = records.len() as f64;
        let dice = dice.into_iter().map(|d| d / n).collect();
        let hd95 = hd.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect();
        Ok(Self::from_parts(dice, hd95))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(dims: [usize; 3], at: [usize; 3]) -> Mask {
        let mut data = vec![false; dims.iter().product()];
        data[(at[0] * dims[1] + at[1]) * dims[2] + at[2]] = true;
        Mask::new(dims, data).unwrap()
    }

    #[test]
    fn dice_hand_cases() {
        let a = LabelVolume::new([1, 1, 10], vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        let b = LabelVolume::new([1, 1, 10], vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.6);
        let c = LabelVolume::new([1, 1, 10], vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &a, 7).unwrap(), 1.0);
        let other = LabelVolume::new([1, 2, 5], vec![0; 10]).unwrap();
        assert!(dice_score(&a, &other, 1).is_err());
    }

    #[test]
    fn hd95_hand_cases() {
        let dims = [1, 4, 5];
        let a = single(dims, [0, 0, 0]);
        let b = single(dims, [0, 3, 4]);
        assert_eq!(hausdorff95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hausdorff95(&a, &a).unwrap(), Some(0.0));
        let empty = Mask::new(dims, vec![false; 20]).unwrap();
        assert_eq!(hausdorff95(&a, &empty).unwrap(), None);
    }

    #[test]
    fn boundary_excludes_interior() {
        let dims = [3, 3, 3];
        let m = Mask::new(dims, vec![true; 27]).unwrap();
        assert_eq!(m.boundary().len(), 26);
        let mut data = vec![false; 125];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    data[(z * 5 + y) * 5 + x] = true;
                }
            }
        }
        assert_eq!(Mask::new([5, 5, 5], data).unwrap().boundary().len(), 26);
    }

    #[test]
    fn percentile_rule() {
        assert_eq!(percentile(&[1.0], 0.95), 1.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5), 2.0);
    }

    #[test]
    fn edt_line_matches_brute_force() {
        let f = [INF, 0, INF, INF, 4, INF, 0, INF];
        let mut out = [0; 8];
        edt_line(&f, &mut out);
        for x in 0..8i64 {
            let want = (0..8i64)
                .filter(|&i| f[i as usize] < INF)
                .map(|i| (x - i) * (x - i) + f[i as usize])
                .min()
                .unwrap();
            assert_eq!(out[x as usize], want);
        }
    }

    #[test]
    fn average_skips_undefined() {
        let r1 = MetricsRecord::from_parts(vec![1.0, 0.5], vec![Some(0.0), None]);
        let r2 = MetricsRecord::from_parts(vec![0.5, 1.0], vec![Some(2.0), Some(4.0)]);
        let avg = MetricsRecord::average(&[r1, r2]).unwrap();
        assert_eq!(avg.dice, vec![0.75, 0.75]);
        assert_eq!(avg.hd95, vec![Some(1.0), Some(4.0)]);
        assert_eq!(avg.mean_dice, 0.75);
    }
}
