//! Block ↔ token conversion: cubic patches, linear embedding and learned
//! positions, and the reshape of token sequences back into feature blocks.

use brainformer_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::params::{Ctx, Init, ParamId, ParamStore};

/// A `C×H×W×D` intensity block with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBlock {
    pub intensities: Tensor,
    pub labels: Option<LabelVolume>,
}

impl VolumeBlock {
    pub fn new(intensities: Tensor, labels: Option<LabelVolume>) -> Result<Self> {
        if intensities.ndim() != 4 {
            return Err(Error::Data(format!(
                "intensities must be C×H×W×D, got {:?}",
                intensities.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.extents() != &intensities.shape()[1..] {
                return Err(Error::Data(format!(
                    "label extents {:?} differ from intensity extents {:?}",
                    l.extents(),
                    &intensities.shape()[1..]
                )));
            }
        }
        Ok(VolumeBlock {
            intensities,
            labels,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.intensities.shape()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.intensities.shape();
        [s[1], s[2], s[3]]
    }
}

/// Token grid `(H/p, W/p, D/p)`.
pub type Grid = [usize; 3];

fn grid_of(extents: &[usize], p: usize) -> Result<Grid> {
    if p == 0 || extents.iter().any(|&e| e == 0 || e % p != 0) {
        return Err(Error::Config(format!(
            "extents {extents:?} are not positive multiples of patch size {p}"
        )));
    }
    Ok([extents[0] / p, extents[1] / p, extents[2] / p])
}

/// Splits a `C×H×W×D` tensor into `N×(C·p³)` patch rows, ordered by grid
/// coordinate (h, then w, then d). Each row is laid out `C, p_h, p_w, p_d`.
pub fn partition(block: &Tensor, p: usize) -> Result<Tensor> {
    let s = block.shape();
    if s.len() != 4 {
        return Err(Error::Config(format!("partition needs C×H×W×D, got {s:?}")));
    }
    let c = s[0];
    let [gh, gw, gd] = grid_of(&s[1..], p)?;
    let split = block.reshape(&[c, gh, p, gw, p, gd, p])?;
    let moved = split.permute(&[1, 3, 5, 0, 2, 4, 6])?;
    Ok(moved.reshape(&[gh * gw * gd, c * p * p * p])?)
}

/// Inverse of [`partition`].
pub fn departition(patches: &Tensor, grid: Grid, p: usize, c: usize) -> Result<Tensor> {
    let n: usize = grid.iter().product();
    if patches.shape() != [n, c * p * p * p] {
        return Err(Error::Config(format!(
            "departition: {:?} patches do not match grid {grid:?}, p={p}, C={c}",
            patches.shape()
        )));
    }
    let [gh, gw, gd] = grid;
    let split = patches.reshape(&[gh, gw, gd, c, p, p, p])?;
    let moved = split.permute(&[3, 0, 4, 1, 5, 2, 6])?;
    Ok(moved.reshape(&[c, gh * p, gw * p, gd * p])?)
}

/// Trainable patch projection `F_X` and positional embeddings.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingParams {
    /// `(C·p³)×k`
    pub projection: ParamId,
    /// `N×k`
    pub positions: ParamId,
}

impl EmbeddingParams {
    pub fn init(store: &mut ParamStore, init: &mut Init, patch_len: usize, tokens: usize, width: usize) -> Self {
        EmbeddingParams {
            projection: store.add(
                "embed.projection",
                init.fan_in(&[patch_len, width], patch_len),
            ),
            positions: store.add("embed.positions", init.normal(&[tokens, width], 0.02)),
        }
    }
}

/// An `N×k` token matrix on the tape together with its grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub patch: usize,
    pub grid: Grid,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `tokens = patches · projection + positions`.
pub fn embed(ctx: &mut Ctx, patches: Var, params: &EmbeddingParams, grid: Grid, patch: usize) -> Result<TokenSequence> {
    let n: usize = grid.iter().product();
    if ctx.tape.shape(patches)[0] != n {
        return Err(Error::Config(format!(
            "embed: {} patches for a grid of {n}",
            ctx.tape.shape(patches)[0]
        )));
    }
    let projected = ctx.tape.matmul(patches, ctx.p(params.projection))?;
    let tokens = ctx.tape.add(projected, ctx.p(params.positions))?;
    Ok(TokenSequence { tokens, patch, grid })
}

/// `N×k` tokens to a `k×gh×gw×gd` feature block.
pub fn tokens_to_block(tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
    let k = tape.shape(seq.tokens)[1];
    let [gh, gw, gd] = seq.grid;
    let grid = tape.reshape(seq.tokens, &[gh, gw, gd, k])?;
    Ok(tape.permute(grid, &[3, 0, 1, 2])?)
}

/// Inverse of [`tokens_to_block`].
pub fn block_to_tokens(tape: &mut Tape, block: Var, patch: usize) -> Result<TokenSequence> {
    let s = tape.shape(block).to_vec();
    if s.len() != 4 {
        return Err(Error::Config(format!("block_to_tokens needs k×h×w×d, got {s:?}")));
    }
    let grid = [s[1], s[2], s[3]];
    let moved = tape.permute(block, &[1, 2, 3, 0])?;
    let tokens = tape.reshape(moved, &[s[1] * s[2] * s[3], s[0]])?;
    Ok(TokenSequence {
        tokens,
        patch,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arange(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn counts_patches() {
        let x = arange(&[1, 4, 4, 4]);
        let p = partition(&x, 2).unwrap();
        assert_eq!(p.shape(), &[8, 8]);
    }

    #[test]
    fn single_patch_is_flattened_block() {
        let x = arange(&[2, 3, 3, 3]);
        let p = partition(&x, 3).unwrap();
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn first_patch_holds_the_corner() {
        let x = arange(&[1, 4, 4, 4]);
        let p = partition(&x, 2).unwrap();
        // voxel (h,w,d) has value 16h + 4w + d
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        // second patch steps along d
        assert_eq!(p.data()[8], 2.0);
    }

    #[test]
    fn indivisible_extent_is_a_config_error() {
        let x = arange(&[1, 4, 4, 5]);
        assert!(matches!(partition(&x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn departition_rejects_count_mismatch() {
        let p = arange(&[3, 8]);
        assert!(departition(&p, [2, 1, 1], 2, 1).is_err());
    }

    #[test]
    fn departition_inverts_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 4, 8, 6], 1.0, &mut rng).unwrap();
        let p = partition(&x, 2).unwrap();
        assert_eq!(departition(&p, [2, 4, 3], 2, 3).unwrap(), x);
    }
}
