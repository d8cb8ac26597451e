//! Slow reference implementations for the self-test suites and tests.
//!
//! Nothing here shares code with the fast paths it is compared against.

use std::f64::consts::PI;

use crate::metrics::Mask;
use crate::spectral::ComplexField;
use crate::tensor::Tensor;

/// Triple-sum 3D DFT of a rank-3 field; `sign = -1` forward, `+1` inverse
/// (the inverse also divides by the element count).
pub fn dft3d_triple_sum(x: &ComplexField, sign: f64) -> ComplexField {
    let s = x.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let n = d * h * w;
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for kd in 0..d {
        for kh in 0..h {
            for kw in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for a in 0..d {
                    for b in 0..h {
                        for c in 0..w {
                            let phase = sign
                                * 2.0
                                * PI
                                * ((kd * a) as f64 / d as f64
                                    + (kh * b) as f64 / h as f64
                                    + (kw * c) as f64 / w as f64);
                            let j = (a * h + b) * w + c;
                            let (xr, xi) = (x.re[j], x.im[j]);
                            sr += xr * phase.cos() - xi * phase.sin();
                            si += xr * phase.sin() + xi * phase.cos();
                        }
                    }
                }
                let o = (kd * h + kh) * w + kw;
                let scale = if sign > 0.0 { 1.0 / n as f64 } else { 1.0 };
                re[o] = sr * scale;
                im[o] = si * scale;
            }
        }
    }
    ComplexField::new(s, re, im).expect("same shape")
}

/// `Re(IDFT(w_c·DFT(x_c) + b_c))` per `(batch, channel)` slab of a
/// `[B, C, D, H, W]` tensor, with complex `w` and `b` given as `(re, im)`.
pub fn spectral_filter(x: &Tensor, w: &[(f64, f64)], b: Option<&[(f64, f64)]>) -> Vec<f64> {
    let s = x.shape();
    let (batch, ch, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let vol = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..batch {
        for c in 0..ch {
            let start = (bi * ch + c) * vol;
            let slab: Vec<f64> = x.data()[start..start + vol].iter().map(|&v| f64::from(v)).collect();
            let f = dft3d_triple_sum(&ComplexField::new(&dims, slab, vec![0.0; vol]).expect("shape"), -1.0);
            let (wr, wi) = w[c];
            let (br, bim) = b.map_or((0.0, 0.0), |b| b[c]);
            let mut re = vec![0.0; vol];
            let mut im = vec![0.0; vol];
            for k in 0..vol {
                re[k] = wr * f.re[k] - wi * f.im[k] + br;
                im[k] = wr * f.im[k] + wi * f.re[k] + bim;
            }
            let back = dft3d_triple_sum(&ComplexField::new(&dims, re, im).expect("shape"), 1.0);
            out.extend(back.re);
        }
    }
    out
}

/// Depthwise 3D correlation of `[B, C, D, H, W]` with a full `[C, K, K, K]`
/// kernel, zero same-padding, plus per-channel bias.
pub fn depthwise_conv3d(x: &Tensor, kernel: &[f64], k: usize, bias: &[f64]) -> Vec<f64> {
    let s = x.shape();
    let (batch, ch, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let r = (k / 2) as isize;
    let at = |b: usize, c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            f64::from(x.data()[(((b * ch + c) * d + z as usize) * h + y as usize) * w + xx as usize])
        }
    };
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[c];
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    let kv = kernel[((c * k + i) * k + j) * k + l];
                                    acc += kv
                                        * at(
                                            b,
                                            c,
                                            z as isize + i as isize - r,
                                            y as isize + j as isize - r,
                                            xx as isize + l as isize - r,
                                        );
                                }
                            }
                        }
                        out[(((b * ch + c) * d + z) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn boundary(m: &Mask) -> Vec<[i64; 3]> {
    let [d, h, w] = m.dims;
    let on = |z: i64, y: i64, x: i64| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m.data[((z as usize) * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !on(z, y, x) {
                    continue;
                }
                let neighbours = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if neighbours.iter().any(|&(a, b, c)| !on(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// All-pairs HD95 with 6-connected boundaries (volume edge counts as
/// background) and inclusive linear-interpolation percentile.
pub fn hausdorff95_brute(a: &Mask, b: &Mask) -> Option<f64> {
    let (pa, pb) = (boundary(a), boundary(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                let best = to
                    .iter()
                    .map(|q| (0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum::<i64>())
                    .min()
                    .expect("non-empty");
                (best as f64).sqrt()
            })
            .collect()
    };
    let mut all = nearest(&pa, &pb);
    all.extend(nearest(&pb, &pa));
    all.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    Some(if lo + 1 < all.len() {
        all[lo] + frac * (all[lo + 1] - all[lo])
    } else {
        all[lo]
    })
}

/// Boundary voxel count under the same rule as [`hausdorff95_brute`].
pub fn boundary_len(m: &Mask) -> usize {
    boundary(m).len()
}
