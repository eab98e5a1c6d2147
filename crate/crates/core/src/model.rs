//! The full network: sequentializer, encoder and decoder.

use brainformer_tensor::{Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::decoder::{decoder_forward, Decoder};
use crate::encoder::{encoder_forward, Encoder};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamStore};
use crate::sequentializer::{embed, partition, EmbeddingParams};

#[derive(Debug, Clone)]
pub struct Brainformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingParams,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Brainformer {
    /// Validates `config` and draws every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let p = config.patch;
        let embedding = EmbeddingParams::init(
            &mut params,
            &mut init,
            config.in_channels * p * p * p,
            config.tokens(),
            config.width,
        );
        let encoder = Encoder::init(&mut params, &mut init, &config);
        let decoder = Decoder::init(&mut params, &mut init, &config);
        Ok(Brainformer {
            config,
            params,
            embedding,
            encoder,
            decoder,
        })
    }

    fn check_input(&self, block: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.block[0], c.block[1], c.block[2]];
        if block.shape() != want {
            return Err(Error::Config(format!(
                "model expects a {want:?} block, got {:?}",
                block.shape()
            )));
        }
        Ok(())
    }

    /// `[C, H, W, D]` block to `[4, H, W, D]` logits.
    pub fn forward(&self, ctx: &mut Ctx, block: &Tensor) -> Result<Var> {
        self.check_input(block)?;
        let c = &self.config;
        let patches = partition(block, c.patch)?;
        let patches = ctx.tape.constant(patches);
        let input = ctx.tape.constant(block.clone());
        ctx.note(|| "input".into(), input);
        ctx.note(|| "patches".into(), patches);
        let s0 = embed(ctx, patches, &self.embedding, c.grid(), c.patch)?;
        ctx.note(|| "tokens".into(), s0.tokens);
        let taps = encoder_forward(ctx, &s0, &self.encoder)?;
        decoder_forward(ctx, &taps, input, &self.decoder)
    }

    /// Logits without recording gradients.
    pub fn infer(&self, block: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.params);
        let out = self.forward(&mut ctx, block)?;
        Ok(tape.value(out).clone())
    }

    /// `(label, shape)` for every intermediate of one forward pass on zeros.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let c = &self.config;
        let block = Tensor::zeros(&[c.in_channels, c.block[0], c.block[1], c.block[2]])?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.params).with_trace();
        self.forward(&mut ctx, &block)?;
        Ok(ctx.take_trace())
    }
}

/// Class index with the largest logit at every voxel (first wins on ties).
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let classes = logits.shape()[0];
    let n = logits.len() / classes;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
