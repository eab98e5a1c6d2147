//! Multi-class softmax dice loss.

use brainformer_tensor::{Tape, Tensor, Var};

use crate::config::CLASSES;
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;

pub const DICE_EPS: f64 = 1e-5;

/// One-hot `[4, H, W, D]` encoding of a label volume.
pub fn one_hot(labels: &LabelVolume) -> Tensor {
    let n = labels.voxels().len();
    let mut data = vec![0.0; CLASSES * n];
    for (i, &l) in labels.voxels().iter().enumerate() {
        data[l as usize * n + i] = 1.0;
    }
    let e = labels.extents();
    Tensor::new(vec![CLASSES, e[0], e[1], e[2]], data).expect("label extents are positive")
}

/// `1 − mean_c (2Σp_c g_c + ε) / (Σp_c + Σg_c + ε)` over all four classes,
/// with `p` the class-axis softmax of `logits` and `g` the one-hot labels.
///
/// Background is part of the mean. Without it nothing in a background voxel
/// favors class 0, and a small foreground class whose overlap collapses can
/// take over large background regions with a vanishing gradient.
pub fn softmax_dice_loss(tape: &mut Tape, logits: Var, labels: &LabelVolume) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 || shape[0] != CLASSES || shape[1..] != labels.extents()[..] {
        return Err(Error::Config(format!(
            "logits {shape:?} do not match {CLASSES} classes over labels {:?}",
            labels.extents()
        )));
    }
    let voxels = labels.voxels().len();
    let target = one_hot(labels).reshape(&[CLASSES, voxels])?;
    let target_sum = Tensor::new(vec![CLASSES], target_sums(&target))?;

    let probs = tape.softmax(logits, 0)?;
    let probs = tape.reshape(probs, &[CLASSES, voxels])?;
    let g = tape.constant(target);
    let overlap = tape.mul(probs, g)?;
    let overlap = tape.sum_axis(overlap, 1)?;
    let num = tape.scale(overlap, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let psum = tape.sum_axis(probs, 1)?;
    let gsum = tape.constant(target_sum);
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio)?;
    let neg = tape.scale(mean, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

fn target_sums(target: &Tensor) -> Vec<f64> {
    let n = target.shape()[1];
    target.data().chunks(n).map(|c| c.iter().sum()).collect()
}
