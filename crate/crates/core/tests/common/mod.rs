#![allow(dead_code)]

use std::collections::HashSet;

use brainformer::metrics::Mask;
use brainformer::params::{Ctx, ParamStore};
use brainformer_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).unwrap()
}

pub fn eye(n: usize) -> Tensor {
    Tensor::eye(n).unwrap()
}

/// Row-major 2D product on plain vectors.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax of each `n`-long row.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Evaluates `f` once on a fresh tape with `params` recorded as constants.
pub fn eval_with(params: &ParamStore, f: impl FnOnce(&mut Ctx) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let mut ctx = Ctx::frozen(&mut tape, params);
    let out = f(&mut ctx);
    tape.value(out).clone()
}

/// Direct stride-1 zero-padded 3D convolution; `x` is `[ci, h, w, d]`,
/// `k` is `[co, ci, ks, ks, ks]`.
pub fn conv3d_oracle(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
    let (xs, ks) = (x.shape(), k.shape());
    let (ci, h, w, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kz) = (ks[0], ks[2]);
    let (oh, ow, od) = (h + 2 * pad + 1 - kz, w + 2 * pad + 1 - kz, d + 2 * pad + 1 - kz);
    let mut out = Tensor::zeros(&[co, oh, ow, od]).unwrap();
    for o in 0..co {
        for a in 0..oh {
            for b in 0..ow {
                for c in 0..od {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for u in 0..kz {
                            for v in 0..kz {
                                for t in 0..kz {
                                    let (p, q, r) = (a + u, b + v, c + t);
                                    if p < pad || q < pad || r < pad || p - pad >= h || q - pad >= w || r - pad >= d {
                                        continue;
                                    }
                                    acc += x.get(&[i, p - pad, q - pad, r - pad]) * k.get(&[o, i, u, v, t]);
                                }
                            }
                        }
                    }
                    out.set(&[o, a, b, c], acc);
                }
            }
        }
    }
    out
}

pub fn to_tensor_err(e: brainformer::Error) -> brainformer_tensor::TensorError {
    brainformer_tensor::TensorError::Usage(e.to_string())
}

pub type P = [usize; 3];

pub fn mask_of(extents: P, pts: &HashSet<P>) -> Mask {
    let mut data = vec![false; extents.iter().product()];
    for &[h, w, d] in pts {
        data[(h * extents[1] + w) * extents[2] + d] = true;
    }
    Mask::new(extents, data)
}

/// Voxels with a 6-neighbor outside the set or the volume.
pub fn surface_oracle(extents: P, pts: &HashSet<P>) -> Vec<P> {
    pts.iter()
        .copied()
        .filter(|p| {
            (0..3).any(|a| {
                let mut lo = *p;
                let mut hi = *p;
                if p[a] == 0 || p[a] + 1 == extents[a] {
                    return true;
                }
                lo[a] -= 1;
                hi[a] += 1;
                !pts.contains(&lo) || !pts.contains(&hi)
            })
        })
        .collect()
}

/// All-pairs directed nearest distances, nearest-rank 95th percentile.
pub fn hd95_oracle(extents: P, a: &HashSet<P>, b: &HashSet<P>) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let (sa, sb) = (surface_oracle(extents, a), surface_oracle(extents, b));
    let dist = |p: &P, q: &P| -> f64 { (0..3).map(|i| (p[i] as f64 - q[i] as f64).powi(2)).sum::<f64>().sqrt() };
    let directed = |from: &[P], to: &[P]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        d.sort_by(f64::total_cmp);
        let rank = ((0.95 * d.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        d[rank - 1]
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

pub fn random_set(rng: &mut impl Rng, extents: P, max: usize) -> HashSet<P> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| [0, 1, 2].map(|a| rng.random_range(0..extents[a])))
        .collect()
}

/// Random blobs: a box plus scattered voxels, so surfaces are not trivial.
pub fn random_blob(rng: &mut impl Rng, extents: P) -> HashSet<P> {
    let mut s = random_set(rng, extents, 30);
    let lo = [0, 1, 2].map(|a| rng.random_range(0..extents[a] - 3));
    let size = [0, 1, 2].map(|_| rng.random_range(1..4));
    for h in lo[0]..lo[0] + size[0] {
        for w in lo[1]..lo[1] + size[1] {
            for d in lo[2]..lo[2] + size[2] {
                s.insert([h, w, d]);
            }
        }
    }
    s
}
