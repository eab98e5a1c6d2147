//! Adjoint rules, one per recorded [`Op`].

use crate::kernels::{broadcast_index, mm_nt, mm_tn};
use crate::ops::nn::{gelu_grad, split_axis};
use crate::tape::{Op, Tape, Var};

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Folds a gradient of the broadcast output shape back onto `src`'s shape.
fn unbroadcast(tape: &Tape, src: Var, out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let shape = tape.shape(src);
    if shape == out_shape {
        return g.to_vec();
    }
    let idx = broadcast_index(shape, out_shape);
    let mut acc = vec![0.0; tape.value(src).len()];
    for (&i, &gv) in idx.iter().zip(g) {
        acc[i] += gv;
    }
    acc
}

/// Same-shape view of an operand broadcast to the output shape.
fn expanded<'a>(tape: &'a Tape, v: Var, out_shape: &[usize]) -> std::borrow::Cow<'a, [f64]> {
    let shape = tape.shape(v);
    let data = tape.data(v);
    if shape == out_shape {
        std::borrow::Cow::Borrowed(data)
    } else {
        let idx = broadcast_index(shape, out_shape);
        std::borrow::Cow::Owned(idx.iter().map(|&i| data[i]).collect())
    }
}

pub(crate) fn propagate(tape: &Tape, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out_shape = tape.nodes[node].value.shape();
    let out = tape.nodes[node].value.data();
    let wants = |v: Var| tape.requires_grad(v);

    match &tape.nodes[node].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, unbroadcast(tape, *a, out_shape, g));
            }
            if wants(*b) {
                accumulate(grads, *b, unbroadcast(tape, *b, out_shape, g));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, unbroadcast(tape, *a, out_shape, g));
            }
            if wants(*b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, unbroadcast(tape, *b, out_shape, &neg));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = expanded(tape, *b, out_shape);
                let ga: Vec<f64> = g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, unbroadcast(tape, *a, out_shape, &ga));
            }
            if wants(*b) {
                let av = expanded(tape, *a, out_shape);
                let gb: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                accumulate(grads, *b, unbroadcast(tape, *b, out_shape, &gb));
            }
        }
        Op::Div(a, b) => {
            let bv = expanded(tape, *b, out_shape);
            if wants(*a) {
                let ga: Vec<f64> = g.iter().zip(bv.iter()).map(|(x, y)| x / y).collect();
                accumulate(grads, *a, unbroadcast(tape, *a, out_shape, &ga));
            }
            if wants(*b) {
                // d(a/b)/db = -(a/b)/b
                let gb: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .zip(bv.iter())
                    .map(|((gv, q), y)| -gv * q / y)
                    .collect();
                accumulate(grads, *b, unbroadcast(tape, *b, out_shape, &gb));
            }
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
        Op::Offset(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        Op::MatMul(a, b) => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                let mut ga = vec![0.0; m * k];
                mm_nt(g, tape.data(*b), &mut ga, m, n, k);
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * n];
                mm_tn(tape.data(*a), g, &mut gb, k, m, n);
                accumulate(grads, *b, gb);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (da, db) = (tape.data(*a), tape.data(*b));
            if wants(*a) {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &db[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    mm_tn(
                        &da[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let gt = crate::Tensor::from_parts(out_shape.to_vec(), g.to_vec());
            let back = gt.permute(&inverse).expect("inverse permutation is valid");
            accumulate(grads, *x, back.into_data());
        }
        Op::Concat(xs, axis) => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &v in xs {
                let n = tape.shape(v)[*axis];
                if wants(v) {
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g[start..start + n * inner]);
                    }
                    accumulate(grads, v, part);
                }
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = tape.shape(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let (n, len) = (in_shape[*axis], out_shape[*axis]);
            let mut gx = vec![0.0; tape.value(*x).len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, gx);
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(tape.data(*x))
                .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Gelu(x) => {
            let gx = g
                .iter()
                .zip(tape.data(*x))
                .map(|(gv, &v)| gv * gelu_grad(v))
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(out_shape, *axis);
            let mut gx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                    for j in 0..n {
                        gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Standardize { x, rstd } => {
            let n = *out_shape.last().expect("standardize has rank >= 1");
            let mut gx = vec![0.0; out.len()];
            for (r, rs) in rstd.iter().enumerate() {
                let y = &out[r * n..(r + 1) * n];
                let gy = &g[r * n..(r + 1) * n];
                let mean_g = gy.iter().sum::<f64>() / n as f64;
                let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    gx[r * n + j] = rs * (gy[j] - mean_g - y[j] * mean_gy);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Sum(x) => accumulate(grads, *x, vec![g[0]; tape.value(*x).len()]),
        Op::SumAxis { x, axis } => {
            let in_shape = tape.shape(*x);
            let (outer, n, inner) = split_axis(in_shape, *axis);
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Conv3d { x, k, geom } => {
            if wants(*x) {
                accumulate(grads, *x, geom.conv_adjoint(g, tape.data(*k)));
            }
            if wants(*k) {
                accumulate(grads, *k, geom.kernel_grad(g, tape.data(*x)));
            }
        }
        Op::ConvTranspose3d { x, k, geom } => {
            // out = Aᵀx where A is the forward conv: dx = A·g, dK from ⟨g, Aᵀx⟩ = ⟨A g, x⟩.
            if wants(*x) {
                accumulate(grads, *x, geom.conv(g, tape.data(*k)));
            }
            if wants(*k) {
                accumulate(grads, *k, geom.kernel_grad(tape.data(*x), g));
            }
        }
    }
}
