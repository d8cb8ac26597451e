//! Dense kernels shared by the primitives and the neural ops.
//!
//! Parallel kernels split work by output row only; each output element is
//! accumulated in a fixed sequential order, so results are bit-identical
//! for any thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f32])| {
        crow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f32])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f32])| {
        crow.fill(0.0);
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `data` (laid out as `shape`) into the axis order `perm`:
/// output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return data.to_vec();
    }
    // The innermost output axis is walked in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_stride[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer_count = n / inner_len;
    for _ in 0..outer_count {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(data[off]);
                off += inner_stride;
            }
        }
        // odometer over axes [0, last)
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// For every input element, the flat index of the output element it reduces
/// into when `axes` are summed out.
pub fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let mut out_stride_per_axis = vec![0usize; shape.len()];
    {
        let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
        let kept_shape: Vec<usize> = kept.iter().map(|&i| shape[i]).collect();
        let ks = strides(&kept_shape);
        for (j, &i) in kept.iter().enumerate() {
            out_stride_per_axis[i] = ks[j];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut ax = shape.len();
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += out_stride_per_axis[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= out_stride_per_axis[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (map, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
        permute(a, &[r, c], &[1, 0])
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
        gemm_nt(&a, &transpose(&b, k, n), &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
        gemm_tn(&transpose(&a, m, k), &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f32> = (0..120).map(|i| i as f32).collect();
        let perm = [2, 0, 3, 1];
        let p = permute(&data, &shape, &perm);
        let pshape: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
        // spot check: out[c, a, d, b] == in[a, b, c, d]
        let s = strides(&shape);
        let ps = strides(&pshape);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        let src = a * s[0] + b * s[1] + c * s[2] + d * s[3];
                        let dst = c * ps[0] + a * ps[1] + d * ps[2] + b * ps[3];
                        assert_eq!(p[dst], data[src]);
                    }
                }
            }
        }
        let back = permute(&p, &pshape, &inverse_permutation(&perm));
        assert_eq!(back, data);
    }

    #[test]
    fn reduce_map_shapes() {
        let (map, out) = reduce_index_map(&[2, 3, 4], &[1]);
        assert_eq!(out, vec![2, 4]);
        assert_eq!(map[0], 0);
        assert_eq!(map[4], 0); // (0,1,0)
        assert_eq!(map[12], 4); // (1,0,0)
        let (_, out) = reduce_index_map(&[2, 3], &[0, 1]);
        assert_eq!(out, vec![1]);
    }
}
