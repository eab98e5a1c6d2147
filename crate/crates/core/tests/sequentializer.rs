mod common;

use brainformer::params::{Ctx, Init, ParamStore};
use brainformer::sequentializer::*;
use brainformer_tensor::{Tape, Tensor};
use common::*;
use proptest::prelude::*;

#[test]
fn zero_volume_gives_zero_patches() {
    let p = partition(&Tensor::zeros(&[2, 4, 4, 4]).unwrap(), 2).unwrap();
    assert!(p.data().iter().all(|&x| x == 0.0));
    let back = departition(&p, [2, 2, 2], 2, 2).unwrap();
    assert_eq!(back, Tensor::zeros(&[2, 4, 4, 4]).unwrap());
}

/// Patch `i` of grid (gh, gw, gd) read straight from the block by index.
fn patch_oracle(x: &Tensor, p: usize, i: usize) -> Vec<f64> {
    let s = x.shape();
    let (gw, gd) = (s[2] / p, s[3] / p);
    let (a, b, c) = (i / (gw * gd), (i / gd) % gw, i % gd);
    let mut out = Vec::new();
    for ch in 0..s[0] {
        for u in 0..p {
            for v in 0..p {
                for w in 0..p {
                    out.push(x.get(&[ch, a * p + u, b * p + v, c * p + w]));
                }
            }
        }
    }
    out
}

#[test]
fn patches_match_index_oracle() {
    let x = randn(&[3, 4, 6, 4], 1);
    let p = partition(&x, 2).unwrap();
    assert_eq!(p.shape(), &[12, 24]);
    for i in 0..12 {
        assert_eq!(&p.data()[i * 24..(i + 1) * 24], patch_oracle(&x, 2, i).as_slice());
    }
}

fn embedding(c: usize, p: usize, n: usize, k: usize) -> (ParamStore, EmbeddingParams) {
    let mut store = ParamStore::new();
    let params = EmbeddingParams::init(&mut store, &mut Init::new(5), c * p * p * p, n, k);
    (store, params)
}

#[test]
fn embed_of_zero_patches_is_positions() {
    let (mut store, params) = embedding(1, 2, 8, 4);
    let patches = Tensor::zeros(&[8, 8]).unwrap();
    let out = eval_with(&store, |ctx| {
        let x = ctx.tape.constant(patches.clone());
        embed(ctx, x, &params, [2, 2, 2], 2).unwrap().tokens
    });
    assert_eq!(&out, store.get(params.positions));

    *store.get_mut(params.positions) = Tensor::zeros(&[8, 4]).unwrap();
    let out = eval_with(&store, |ctx| {
        let x = ctx.tape.constant(patches.clone());
        embed(ctx, x, &params, [2, 2, 2], 2).unwrap().tokens
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn embed_is_projection_plus_positions() {
    let (store, params) = embedding(2, 2, 8, 5);
    let patches = randn(&[8, 16], 2);
    let out = eval_with(&store, |ctx| {
        let x = ctx.tape.constant(patches.clone());
        embed(ctx, x, &params, [2, 2, 2], 2).unwrap().tokens
    });
    let proj = matmul(patches.data(), store.get(params.projection).data(), 8, 16, 5);
    let pos = store.get(params.positions).data();
    let delta: Vec<f64> = out.data().iter().zip(pos).map(|(a, b)| a - b).collect();
    assert!(max_abs_diff(&delta, &proj) < 1e-12);
}

#[test]
fn embed_rejects_wrong_patch_count() {
    let (store, params) = embedding(1, 2, 8, 4);
    let mut tape = Tape::new();
    let mut ctx = Ctx::frozen(&mut tape, &store);
    let x = ctx.tape.constant(Tensor::zeros(&[4, 8]).unwrap());
    assert!(embed(&mut ctx, x, &params, [2, 2, 2], 2).is_err());
}

#[test]
fn tokens_to_block_places_rows_on_grid() {
    let tokens = randn(&[12, 3], 4);
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let seq = TokenSequence { tokens: t, patch: 2, grid: [2, 3, 2] };
    let block = tokens_to_block(&mut tape, &seq).unwrap();
    let b = tape.value(block).clone();
    assert_eq!(b.shape(), &[3, 2, 3, 2]);
    for i in 0..12 {
        let (h, w, d) = (i / 6, (i / 2) % 3, i % 2);
        for c in 0..3 {
            assert_eq!(b.get(&[c, h, w, d]), tokens.get(&[i, c]));
        }
    }
}

#[test]
fn single_token_block() {
    let mut tape = Tape::new();
    let t = tape.constant(randn(&[1, 4], 6));
    let seq = TokenSequence { tokens: t, patch: 4, grid: [1, 1, 1] };
    let block = tokens_to_block(&mut tape, &seq).unwrap();
    assert_eq!(tape.shape(block), &[4, 1, 1, 1]);
    assert_eq!(tape.value(block).data(), tape.value(t).data());
}

fn dims() -> impl Strategy<Value = (usize, usize, [usize; 3])> {
    (1usize..4, 1usize..4, [1usize..4, 1usize..4, 1usize..4])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_round_trip_is_exact((c, p, g) in dims(), seed in any::<u64>()) {
        let x = randn(&[c, g[0] * p, g[1] * p, g[2] * p], seed);
        let patches = partition(&x, p).unwrap();
        prop_assert_eq!(patches.shape()[0], g.iter().product::<usize>());
        prop_assert_eq!(departition(&patches, g, p, c).unwrap(), x);
    }

    #[test]
    fn token_block_round_trip_is_exact(g in [1usize..4, 1usize..4, 1usize..4], k in 1usize..6, seed in any::<u64>()) {
        let n = g.iter().product();
        let tokens = randn(&[n, k], seed);
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let block = tokens_to_block(&mut tape, &TokenSequence { tokens: t, patch: 1, grid: g }).unwrap();
        let back = block_to_tokens(&mut tape, block, 1).unwrap();
        prop_assert_eq!(back.grid, g);
        prop_assert_eq!(tape.value(back.tokens), &tokens);
    }

    #[test]
    fn embed_is_affine(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let (store, params) = embedding(1, 2, 8, 4);
        let (p1, p2) = (randn(&[8, 8], seed), randn(&[8, 8], seed ^ 1));
        let mix = Tensor::new(vec![8, 8], p1.data().iter().zip(p2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let run = |p: &Tensor| {
            let out = eval_with(&store, |ctx| {
                let x = ctx.tape.constant(p.clone());
                embed(ctx, x, &params, [2, 2, 2], 2).unwrap().tokens
            });
            out.data().iter().zip(store.get(params.positions).data()).map(|(t, q)| t - q).collect::<Vec<_>>()
        };
        let (e1, e2, em) = (run(&p1), run(&p2), run(&mix));
        let combo: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(max_abs_diff(&em, &combo) < 1e-10);
    }
}
