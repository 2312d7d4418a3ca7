//! Full model assembly: encoder -> channel unification -> BiMamba
//! backbone -> decoder (pre-training) or classifier head (fine-tuning).

use crate::encoder::{
    decode, embed, tokenize, unify, DecoderParams, EncoderDims, EncoderParams, PatchGrid,
};
use crate::mamba::{backbone, BiMambaBlock, ClassifierHead, SsmDims};
use crate::recording::WindowBatch;
use crate::tape::{Binding, Params, Var};
use crate::{Error, Result, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Patch length in samples (250 ms at 256 Hz).
    pub patch_len: usize,
    /// Embedding width E.
    pub embed: usize,
    /// Unification query count Q.
    pub queries: usize,
    /// SSM state width N.
    pub state: usize,
    /// BiMamba blocks in the backbone.
    pub blocks: usize,
    pub dt_rank: usize,
    pub expand: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub temporal_feat: usize,
    pub spectral_feat: usize,
    pub pos_feat: usize,
    pub pos_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_len: 64,
            embed: 64,
            queries: 4,
            state: 16,
            blocks: 2,
            dt_rank: 16,
            expand: 2,
            conv_channels: 8,
            conv_kernel: 5,
            temporal_feat: 32,
            spectral_feat: 16,
            pos_feat: 16,
            pos_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn enc_dims(&self) -> EncoderDims {
        EncoderDims {
            patch_len: self.patch_len,
            embed: self.embed,
            queries: self.queries,
            conv_channels: self.conv_channels,
            conv_kernel: self.conv_kernel,
            temporal_feat: self.temporal_feat,
            spectral_feat: self.spectral_feat,
            pos_feat: self.pos_feat,
            pos_hidden: self.pos_hidden,
        }
    }

    /// Backbone scan dims (input width Q*E).
    pub fn backbone_dims(&self) -> SsmDims {
        SsmDims {
            d: self.queries * self.embed,
            state: self.state,
            dt_rank: self.dt_rank,
            expand: self.expand,
        }
    }

    /// Head scan dims (input width E).
    pub fn head_dims(&self) -> SsmDims {
        SsmDims {
            d: self.embed,
            state: self.state,
            dt_rank: self.dt_rank,
            expand: self.expand,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    pub enc: EncoderParams,
    pub blocks: Vec<BiMambaBlock>,
    pub dec: Option<DecoderParams>,
    pub head: Option<ClassifierHead>,
}

impl Model {
    /// Pre-training variant: encoder + backbone + decoder.
    pub fn pretrain(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true, None)
    }

    /// Fine-tuning variant: encoder + backbone + classifier head, no
    /// decoder.
    pub fn classifier(cfg: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false, Some(classes))
    }

    fn build(cfg: ModelConfig, seed: u64, decoder: bool, classes: Option<usize>) -> Result<Self> {
        let mut params = Params::new();
        let enc = EncoderParams::register(&mut params, &cfg.enc_dims(), seed)?;
        let bdims = cfg.backbone_dims();
        let blocks = (0..cfg.blocks)
            .map(|i| BiMambaBlock::register(&mut params, &format!("block{i}"), &bdims, seed))
            .collect::<Result<Vec<_>>>()?;
        let dec = decoder
            .then(|| DecoderParams::register(&mut params, &cfg.enc_dims(), seed))
            .transpose()?;
        let head = classes
            .map(|k| {
                ClassifierHead::register(
                    &mut params,
                    cfg.queries * cfg.embed,
                    &cfg.head_dims(),
                    k,
                    seed,
                )
            })
            .transpose()?;
        Ok(Model {
            cfg,
            params,
            enc,
            blocks,
            dec,
            head,
        })
    }

    /// Tokenize, embed (optionally masking patch content), unify.
    /// Returns the latent summary `(B*S) x Q x E`, the raw patch grid, and
    /// `(B, S)`.
    pub fn latents(
        &self,
        t: &Tape,
        b: &Binding,
        batch: &WindowBatch,
        mask: Option<&[bool]>,
    ) -> Result<(Var, PatchGrid, usize, usize)> {
        let grid = tokenize(batch, self.cfg.patch_len)?;
        let d = self.cfg.enc_dims();
        let tokens = embed(t, b, &self.enc, &d, &grid, &batch.montage, mask)?;
        let lat = unify(t, b, &self.enc, &d, tokens)?;
        let (bb, ss) = (grid.batch, grid.patches_per_window);
        Ok((lat, grid, bb, ss))
    }

    /// Latents through the backbone: `B x S x (Q*E)` features.
    pub fn features(
        &self,
        t: &Tape,
        b: &Binding,
        batch: &WindowBatch,
        mask: Option<&[bool]>,
    ) -> Result<(Var, PatchGrid, usize, usize)> {
        let (lat, grid, bb, ss) = self.latents(t, b, batch, mask)?;
        let x = backbone(t, b, &self.blocks, &self.cfg.backbone_dims(), lat, bb, ss)?;
        Ok((x, grid, bb, ss))
    }

    /// Masked-reconstruction forward: predicted patches `(B*S) x C x P`
    /// next to the raw target grid.
    pub fn reconstruct(
        &self,
        t: &Tape,
        b: &Binding,
        batch: &WindowBatch,
        mask: Option<&[bool]>,
    ) -> Result<(Var, PatchGrid)> {
        let dec = self
            .dec
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no decoder".to_string()))?;
        let (x, grid, bb, ss) = self.features(t, b, batch, mask)?;
        let lat = t.reshape(x, vec![bb * ss, self.cfg.queries, self.cfg.embed])?;
        let recon = decode(t, b, &self.enc, dec, lat, &batch.montage)?;
        Ok((recon, grid))
    }

    /// Classification forward: `B x K` logits.
    pub fn classify(&self, t: &Tape, b: &Binding, batch: &WindowBatch) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classifier head".to_string()))?;
        let (x, _, _, _) = self.features(t, b, batch, None)?;
        head.forward(t, b, &self.cfg.head_dims(), x)
    }

    /// Mean-pooled embedding of a (possibly cropped) batch: `B x (Q*E)`.
    /// Pooling over S makes views of different lengths comparable.
    pub fn embed_pooled(&self, t: &Tape, b: &Binding, batch: &WindowBatch) -> Result<Var> {
        let (x, _, _, _) = self.features(t, b, batch, None)?;
        t.mean_axis(x, 1)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("head/"))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Cross-entropy of logits against class labels, averaged over the
    /// batch.
    pub fn cross_entropy(&self, t: &Tape, logits: Var, labels: &[i32]) -> Result<Var> {
        let shape = t.shape_of(logits);
        let (bs, k) = (shape[0], shape[1]);
        if labels.len() != bs {
            return Err(Error::invalid(format!(
                "{} labels for batch {bs}",
                labels.len()
            )));
        }
        let probs = t.softmax_last(logits)?;
        let logp = t.ln(probs);
        let mut onehot = vec![0.0f64; bs * k];
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 || l as usize >= k {
                return Err(Error::invalid(format!("label {l} out of range 0..{k}")));
            }
            onehot[i * k + l as usize] = 1.0;
        }
        let oh = t.constant_f64(vec![bs, k], onehot)?;
        let picked = t.mul(logp, oh)?;
        let nll = t.mul_scalar(t.sum_all(picked)?, -1.0 / bs as f64)?;
        Ok(nll)
    }
}

/// Model-level parameter summary used by the CLI.
pub fn parameter_table(model: &Model) -> String {
    let mut out = String::new();
    let mut total = 0usize;
    for p in model.params.iter() {
        total += p.value.numel();
        out.push_str(&format!("{:40} {:?}\n", p.name, p.value.shape()));
    }
    out.push_str(&format!("total parameters: {total}\n"));
    out
}
