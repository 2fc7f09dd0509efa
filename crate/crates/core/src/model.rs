//! The full pre-training model: embedding, encoder stack, final norm and the
//! prediction head, addressed by stable tensor names.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_backward, encoder_forward, prediction_head, AttentionRecord, EncoderCache, EncoderConfig,
    ForwardOptions, Mode, ProxyBlockParams, TokenStates,
};
use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Params};
use crate::patchify::{embed_backward, embed_tokens, EmbedCache, EmbeddingParams, MaskingPlan, PatchGrid};
use crate::rng::{SeedStreams, Stream};
use crate::targets::{HogConfig, TargetKind};
use crate::tensor::{Mat, Real};

/// Architecture and target settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub proxy_count: usize,
    pub mode: Mode,
    pub drop_path: f64,
    pub target: TargetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub kind: TargetKind,
    pub normalize_per_patch: bool,
    pub hog: HogConfig,
    pub codebook_size: usize,
    pub codebook_iterations: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Pixel,
            normalize_per_patch: false,
            hog: HogConfig::default(),
            codebook_size: 64,
            codebook_iterations: 20,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            proxy_count: 8,
            mode: Mode::Proxy,
            drop_path: 0.0,
            target: TargetConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.target.kind == TargetKind::Hog {
            self.target.hog.validate(self.patch_size)?;
        }
        if self.target.kind == TargetKind::Code && self.target.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be positive".into()));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            proxy_count: self.proxy_count,
            mode: self.mode,
            drop_path: self.drop_path,
            record_attention: false,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Prediction width required by the configured target.
    pub fn target_dim(&self) -> usize {
        match self.target.kind {
            TargetKind::Pixel => self.patch_dim(),
            TargetKind::Hog => self.target.hog.dim(self.patch_size),
            TargetKind::Code => self.target.codebook_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub embed: EmbeddingParams<F>,
    pub blocks: Vec<ProxyBlockParams<F>>,
    pub final_norm: LayerNorm<F>,
    /// `None` once the pre-training plugin has been discarded.
    pub head: Option<Linear<F>>,
}

/// Gradients have the same shape as the model.
pub type Gradients<F> = Model<F>;

#[derive(Debug, Clone)]
pub struct ModelOutput<F> {
    pub states: TokenStates<F>,
    /// `batch·|masked| × target_dim`; `None` without a head.
    pub predictions: Option<Mat<F>>,
    pub records: Vec<AttentionRecord>,
    pub hidden: Vec<TokenStates<F>>,
}

#[derive(Debug, Clone)]
pub struct ModelCache<F> {
    embed: EmbedCache<F>,
    encoder: EncoderCache<F>,
    head_input: Mat<F>,
    batch: usize,
    img_rows: usize,
    proxy_rows: usize,
}

/// Upstream gradients for a backward pass.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<F> {
    pub predictions: Option<Mat<F>>,
    pub h_img: Option<Mat<F>>,
    pub h_proxy: Option<Mat<F>>,
}

impl<F: Real> Model<F> {
    /// Fresh weights drawn from the `Init` stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStreams::new(seed).rng(Stream::Init, 0);
        let d = config.dim;
        let embed = EmbeddingParams::init(&mut rng, config.patch_dim(), config.n_patches(), d, config.proxy_count);
        let blocks = (0..config.depth)
            .map(|_| ProxyBlockParams::init(&mut rng, d, config.heads, config.mode))
            .collect();
        let head = Some(Linear::init(&mut rng, d, config.target_dim()));
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            final_norm: LayerNorm::new(d),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.zeros_like(),
            blocks: self.blocks.iter().map(ProxyBlockParams::zeros_like).collect(),
            final_norm: LayerNorm::zeros(self.final_norm.gamma.len()),
            head: self.head.as_ref().map(Linear::zeros_like),
        }
    }

    /// Drops cross-attention, the second MLP and its norms in every block, and
    /// the prediction head. What remains is the downstream encoder.
    pub fn strip_reconstruction(&mut self) {
        for b in &mut self.blocks {
            b.reconstruction = None;
        }
        self.head = None;
    }

    pub fn has_reconstruction(&self) -> bool {
        self.head.is_some()
    }

    pub fn forward(
        &self,
        grids: &[PatchGrid],
        plans: &[MaskingPlan],
        opts: &ForwardOptions<'_, F>,
    ) -> Result<(ModelOutput<F>, ModelCache<F>)> {
        let (states, embed) = embed_tokens(grids, plans, &self.embed)?;
        let batch = states.batch;
        let (img_rows, proxy_rows) = (states.h_img.rows, states.h_proxy.rows);
        let (enc, encoder) = encoder_forward(
            states,
            &self.config.encoder(),
            &self.blocks,
            &self.final_norm,
            plans,
            opts,
        )?;
        let predictions = match &self.head {
            Some(h) => Some(prediction_head(&enc.states.h_mask, h)?),
            None => None,
        };
        let head_input = enc.states.h_mask.clone();
        Ok((
            ModelOutput {
                states: enc.states,
                predictions,
                records: enc.records,
                hidden: enc.hidden,
            },
            ModelCache {
                embed,
                encoder,
                head_input,
                batch,
                img_rows,
                proxy_rows,
            },
        ))
    }

    /// Gradients of every parameter for the given upstream gradients.
    pub fn backward(&self, cache: &ModelCache<F>, upstream: &OutputGrads<F>) -> Result<Gradients<F>> {
        let mut grad = self.zeros_like();
        let d = self.config.dim;
        let mut d_final = TokenStates {
            batch: cache.batch,
            h_img: Mat::zeros(cache.img_rows, d),
            h_proxy: Mat::zeros(cache.proxy_rows, d),
            h_mask: Mat::zeros(cache.head_input.rows, d),
            layer_index: self.config.depth,
        };
        if let Some(dz) = &upstream.predictions {
            let head = self
                .head
                .as_ref()
                .ok_or_else(|| Error::Config("prediction gradient given but the head was stripped".into()))?;
            let gh = grad.head.as_mut().expect("gradient mirrors the model");
            d_final.h_mask = head.backward(&cache.head_input, dz, gh);
        }
        if let Some(g) = &upstream.h_img {
            d_final.h_img.add_assign(g);
        }
        if let Some(g) = &upstream.h_proxy {
            d_final.h_proxy.add_assign(g);
        }
        let d0 = encoder_backward(
            &self.blocks,
            &self.final_norm,
            &cache.encoder,
            &d_final,
            &mut grad.blocks,
            &mut grad.final_norm,
        );
        embed_backward(&self.embed, &cache.embed, &d0, &mut grad.embed);
        Ok(grad)
    }

    /// Names, shapes and total element count of all tensors.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _, _| names.push(n.to_string()));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        let mut out = Model::<G>::init(&self.config, 0).expect("config already validated");
        if !self.has_reconstruction() {
            out.strip_reconstruction();
        }
        let mut flat: Vec<Vec<G>> = Vec::new();
        self.visit("", &mut |_, _, d| flat.push(d.iter().map(|&v| G::lit(v.as_f64())).collect()));
        let mut it = flat.into_iter();
        out.visit_mut("", &mut |_, _, d| d.copy_from_slice(&it.next().expect("same structure")));
        out
    }
}

impl<F: Real> Params<F> for Model<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), f);
        }
    }
}
