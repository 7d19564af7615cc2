//! Model construction and the bidirectional forward passes.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{bottleneck_width, Conv, ParamSet, ParamSink, PassCtx, ResBlock};
use super::{
    BottomUpActivations, LatentHierarchy, LatentMask, LayerLatents, ModelConfig, OutputHeadConfig,
    TemperatureSpec, LEAKY_SLOPE,
};
use crate::distributions::{
    bernoulli_log_prob, bernoulli_sample, gaussian_sample, mol_log_prob, mol_mean_decode,
    mol_sample, BernoulliParams, MoLParams, SmoothedGaussian,
};
use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};

struct EncoderBlock {
    res: ResBlock,
    chi_proj: Conv,
}

struct Pool {
    conv: Conv,
    factor: usize,
}

struct EncoderStage {
    blocks: Vec<EncoderBlock>,
    pool: Option<Pool>,
}

struct Encoder {
    in_conv: Conv,
    stages: Vec<EncoderStage>,
}

struct TopDownBlock {
    posterior: ResBlock,
    prior: ResBlock,
    z_proj: Conv,
    out: ResBlock,
}

struct Unpool {
    conv: Conv,
    factor: usize,
}

struct DecoderStage {
    blocks: Vec<TopDownBlock>,
    unpool: Option<Unpool>,
}

struct Decoder {
    start: super::blocks::ParamId,
    stages: Vec<DecoderStage>,
    head: Conv,
}

/// Output-head parameters produced by one forward pass.
pub enum HeadParams {
    Mol(MoLParams),
    Bernoulli(BernoulliParams),
}

impl HeadParams {
    /// Per-pixel log-likelihood of integer targets, `[N, H, W]`.
    pub fn log_prob(&self, targets: &Arr) -> Result<Tensor> {
        match self {
            HeadParams::Mol(p) => mol_log_prob(p, targets),
            HeadParams::Bernoulli(p) => bernoulli_log_prob(p, targets),
        }
    }

    /// Ancestral sample, integer levels `[N, C, H, W]`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Arr> {
        match self {
            HeadParams::Mol(p) => mol_sample(p, rng),
            HeadParams::Bernoulli(p) => Ok(bernoulli_sample(p, Some(rng))),
        }
    }

    /// Deterministic mean/argmax decode, integer levels `[N, C, H, W]`.
    pub fn mean_decode(&self) -> Result<Arr> {
        match self {
            HeadParams::Mol(p) => mol_mean_decode(p),
            HeadParams::Bernoulli(p) => Ok(bernoulli_sample::<rand::rngs::ThreadRng>(p, None)),
        }
    }
}

/// Structure of a model without allocating its parameters.
pub struct ModelPlan {
    pub resolutions: Vec<usize>,
    pub layers_per_resolution: Vec<usize>,
    pub widths_per_resolution: Vec<usize>,
    pub encoder_activations_per_resolution: Vec<usize>,
    pub total_layers: usize,
    pub parameter_shapes: Vec<(String, Vec<usize>)>,
    pub parameter_count: usize,
}

/// Built bidirectional HVAE. Parameters are owned here and mutated only by
/// the optimizer between forward passes.
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
}

fn head_channels(cfg: &ModelConfig) -> usize {
    match &cfg.output_head {
        OutputHeadConfig::Mol { .. } => cfg
            .output_head
            .mol_config(cfg.gradient_smoothing)
            .unwrap()
            .head_channels(cfg.input_channels),
        OutputHeadConfig::Bernoulli => cfg.input_channels,
    }
}

fn construct(cfg: &ModelConfig, sink: &mut ParamSink<'_>) -> (Encoder, Decoder) {
    let nres = cfg.resolutions.len();
    let widths = &cfg.widths_per_resolution;
    let total_layers = cfg.total_layers();
    let depth_scale = 1.0 / (total_layers as f64).sqrt();

    let in_conv = sink.conv3x3("enc.in", widths[nres - 1], cfg.input_channels, 1.0);
    let mut enc_stages: Vec<Option<EncoderStage>> = (0..nres).map(|_| None).collect();
    for ri in (0..nres).rev() {
        let res = cfg.resolutions[ri];
        let w = widths[ri];
        let mid = bottleneck_width(w, cfg.bottleneck_ratio);
        let layers = cfg.layers_per_resolution[ri];
        let share = cfg.sharing_per_resolution[ri];
        let n_blocks = if layers == 0 {
            0
        } else {
            layers.div_ceil(share)
        };
        let mut blocks = Vec::with_capacity(n_blocks);
        for j in 0..n_blocks {
            let name = format!("enc.r{res}.b{j}");
            blocks.push(EncoderBlock {
                res: ResBlock::build(sink, &name, w, mid, w, true, depth_scale),
                chi_proj: sink.conv1x1(&format!("{name}.chi"), w, w, 1.0),
            });
        }
        let pool = (ri > 0).then(|| Pool {
            conv: sink.conv1x1(&format!("enc.r{res}.pool"), widths[ri - 1], w, 1.0),
            factor: res / cfg.resolutions[ri - 1],
        });
        enc_stages[ri] = Some(EncoderStage { blocks, pool });
    }
    let encoder = Encoder {
        in_conv,
        stages: enc_stages.into_iter().map(Option::unwrap).collect(),
    };

    let d = cfg.latent_dim;
    let start = sink.bias_state(
        "dec.start",
        &[widths[0], cfg.resolutions[0], cfg.resolutions[0]],
    );
    let mut dec_stages = Vec::with_capacity(nres);
    for ri in 0..nres {
        let res = cfg.resolutions[ri];
        let w = widths[ri];
        let mid = bottleneck_width(w, cfg.bottleneck_ratio);
        let mut blocks = Vec::with_capacity(cfg.layers_per_resolution[ri]);
        for j in 0..cfg.layers_per_resolution[ri] {
            let name = format!("dec.r{res}.b{j}");
            blocks.push(TopDownBlock {
                posterior: ResBlock::build(
                    sink,
                    &format!("{name}.post"),
                    2 * w,
                    mid,
                    2 * d,
                    false,
                    depth_scale,
                ),
                prior: ResBlock::build(
                    sink,
                    &format!("{name}.prior"),
                    w,
                    mid,
                    2 * d + w,
                    false,
                    depth_scale,
                ),
                z_proj: sink.conv1x1(&format!("{name}.zproj"), w, d, depth_scale),
                out: ResBlock::build(sink, &format!("{name}.out"), w, mid, w, true, depth_scale),
            });
        }
        let unpool = (ri + 1 < nres).then(|| Unpool {
            conv: sink.conv1x1(&format!("dec.r{res}.unpool"), widths[ri + 1], w, 1.0),
            factor: cfg.resolutions[ri + 1] / res,
        });
        dec_stages.push(DecoderStage { blocks, unpool });
    }
    let head = sink.conv1x1("dec.head", head_channels(cfg), widths[nres - 1], 1.0);
    let decoder = Decoder {
        start,
        stages: dec_stages,
        head,
    };
    (encoder, decoder)
}

/// Enumerate the structure and parameter shapes a config would build.
pub fn plan(config: &ModelConfig) -> Result<ModelPlan> {
    let cfg = config.normalized()?;
    let mut shapes = Vec::new();
    construct(
        &cfg,
        &mut ParamSink::Dry {
            shapes: &mut shapes,
        },
    );
    let acts = cfg
        .layers_per_resolution
        .iter()
        .zip(&cfg.sharing_per_resolution)
        .map(|(&l, &k)| if l == 0 { 0 } else { l.div_ceil(k) })
        .collect();
    Ok(ModelPlan {
        resolutions: cfg.resolutions.clone(),
        layers_per_resolution: cfg.layers_per_resolution.clone(),
        widths_per_resolution: cfg.widths_per_resolution.clone(),
        encoder_activations_per_resolution: acts,
        total_layers: cfg.total_layers(),
        parameter_count: shapes
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum(),
        parameter_shapes: shapes,
    })
}

enum LatentPolicy<'a> {
    Posterior,
    Prior(&'a TemperatureSpec),
    Masked {
        mask: &'a LatentMask,
        temperature: f64,
    },
}

impl Model {
    /// Validate `config` and allocate initialized parameters, seeded.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Model> {
        let cfg = config.normalized()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let (encoder, decoder) = construct(
            &cfg,
            &mut ParamSink::Alloc {
                set: &mut params,
                rng: &mut rng,
            },
        );
        Ok(Model {
            config: cfg,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Exact trainable-parameter count.
    pub fn count_parameters(&self) -> usize {
        self.params.element_count()
    }

    /// Start a forward pass; `trainable` registers parameters as leaves so
    /// gradients can be taken.
    pub fn pass(&self, trainable: bool) -> PassCtx {
        PassCtx::new(&self.params, trainable)
    }

    /// Map integer levels to the `[-1, 1]` network input range.
    fn normalize_input(&self, x: &Arr) -> Arr {
        let max = ((1usize << self.config.output_head.num_bits()) - 1) as f64;
        x.mapv(|v| 2.0 * v / max - 1.0)
    }

    fn validate_input(&self, x: &Arr) -> Result<(usize, usize)> {
        let shape = x.shape();
        let r = self.config.input_resolution();
        let c = self.config.input_channels;
        if shape.len() != 4 || shape[1] != c || shape[2] != r || shape[3] != r {
            return Err(Error::shape(format!(
                "input {:?} does not match [N, {c}, {r}, {r}]",
                shape
            )));
        }
        let max = ((1usize << self.config.output_head.num_bits()) - 1) as f64;
        if x.iter()
            .any(|&v| !(0.0..=max).contains(&v) || v.fract() != 0.0)
        {
            return Err(Error::data(format!(
                "input values must be integers in [0, {max}]"
            )));
        }
        Ok((shape[0], r))
    }

    fn bottom_up(&self, ctx: &PassCtx, x: &Arr) -> BottomUpActivations {
        let nres = self.config.resolutions.len();
        let mut per_resolution: Vec<Vec<Tensor>> = (0..nres).map(|_| Vec::new()).collect();
        let mut h = self
            .encoder
            .in_conv
            .apply(ctx, &ctx.tape.constant(self.normalize_input(x)));
        for ri in (0..nres).rev() {
            let stage = &self.encoder.stages[ri];
            for blk in &stage.blocks {
                h = blk.res.apply(ctx, &h);
                per_resolution[ri].push(blk.chi_proj.apply(ctx, &h));
            }
            if let Some(pool) = &stage.pool {
                h = pool
                    .conv
                    .apply(ctx, &h)
                    .leaky_relu(LEAKY_SLOPE)
                    .avg_pool2d(pool.factor);
            }
        }
        BottomUpActivations { per_resolution }
    }

    fn top_down<R: Rng>(
        &self,
        ctx: &PassCtx,
        acts: Option<&BottomUpActivations>,
        batch: usize,
        policy: &LatentPolicy<'_>,
        rng: &mut R,
    ) -> Result<(Vec<LayerLatents>, Tensor)> {
        let cfg = &self.config;
        let nres = cfg.resolutions.len();
        let d = cfg.latent_dim;
        let act = cfg.scale_activation();
        let w0 = cfg.widths_per_resolution[0];
        let r0 = cfg.resolutions[0];
        let mut h = ctx
            .p(self.decoder.start)
            .reshape(&[1, w0, r0, r0])
            .broadcast_to(&[batch, w0, r0, r0]);

        let mut layers = Vec::with_capacity(cfg.total_layers());
        let mut layer_index = 0usize;
        for ri in 0..nres {
            let res = cfg.resolutions[ri];
            let w = cfg.widths_per_resolution[ri];
            let share = cfg.sharing_per_resolution[ri];
            let n_layers = cfg.layers_per_resolution[ri];
            let n_groups = if n_layers == 0 {
                0
            } else {
                n_layers.div_ceil(share)
            };
            for (i, block) in self.decoder.stages[ri].blocks.iter().enumerate() {
                let pf = block.prior.apply(ctx, &h);
                let prior = SmoothedGaussian::from_raw(
                    &pf.slice_axis(1, 0, d),
                    &pf.slice_axis(1, d, d),
                    act,
                )?;
                h = h.add(&pf.slice_axis(1, 2 * d, w));

                let chi = acts.map(|a| {
                    let group = i / share;
                    &a.per_resolution[ri][n_groups - 1 - group]
                });
                let posterior = match chi {
                    Some(chi) => {
                        let qf = block.posterior.apply(ctx, &Tensor::concat(&[chi, &h], 1));
                        Some(SmoothedGaussian::from_raw(
                            &qf.slice_axis(1, 0, d),
                            &qf.slice_axis(1, d, d),
                            act,
                        )?)
                    }
                    None => None,
                };

                let (z, mask) = match policy {
                    LatentPolicy::Posterior => {
                        let q = posterior.as_ref().expect("posterior policy needs encoder");
                        (gaussian_sample(q, 1.0, rng)?, None)
                    }
                    LatentPolicy::Prior(temps) => {
                        (gaussian_sample(&prior, temps.at(ri), rng)?, None)
                    }
                    LatentPolicy::Masked { mask, temperature } => {
                        let q = posterior.as_ref().expect("masked policy needs encoder");
                        let m = &mask.per_layer[layer_index];
                        if m.shape() != [d, res, res] {
                            return Err(Error::shape(format!(
                                "mask layer {layer_index} has {:?}, want [{d}, {res}, {res}]",
                                m.shape()
                            )));
                        }
                        let zq = gaussian_sample(q, *temperature, rng)?;
                        // a fully kept layer consumes the same noise stream
                        // as the plain posterior pass, so an all-ones mask
                        // reproduces unmasked inference exactly
                        let z = if m.iter().all(|&v| v == 1.0) {
                            zq
                        } else {
                            let zp = gaussian_sample(&prior, *temperature, rng)?;
                            let keep = ctx
                                .tape
                                .constant(m.clone().into_shape(IxDyn(&[1, d, res, res])).unwrap());
                            let drop = keep.neg().add_scalar(1.0);
                            zq.mul(&keep).add(&zp.mul(&drop))
                        };
                        (z, Some(m.clone()))
                    }
                };

                h = h.add(&block.z_proj.apply(ctx, &z));
                h = block.out.apply(ctx, &h);

                layers.push(LayerLatents {
                    z,
                    posterior: posterior.unwrap_or_else(|| SmoothedGaussian {
                        mu: prior.mu.clone(),
                        sigma: prior.sigma.clone(),
                    }),
                    prior,
                    resolution: res,
                    resolution_index: ri,
                    mask,
                    chi_node: chi.map(Tensor::node_id),
                });
                layer_index += 1;
            }
            if let Some(unpool) = &self.decoder.stages[ri].unpool {
                h = unpool.conv.apply(ctx, &h).upsample_nearest(unpool.factor);
            }
        }
        Ok((layers, h))
    }

    fn head_params(&self, ctx: &PassCtx, h: &Tensor) -> Result<HeadParams> {
        let out = self.decoder.head.apply(ctx, h);
        match &self.config.output_head {
            OutputHeadConfig::Mol { .. } => {
                let mol_cfg = self
                    .config
                    .output_head
                    .mol_config(self.config.gradient_smoothing)
                    .unwrap();
                Ok(HeadParams::Mol(MoLParams::from_head(
                    &out,
                    self.config.input_channels,
                    mol_cfg,
                )?))
            }
            OutputHeadConfig::Bernoulli => Ok(HeadParams::Bernoulli(BernoulliParams::new(out)?)),
        }
    }

    /// Bidirectional pass: encode `x`, sample every posterior top-down at
    /// temperature 1, return the full hierarchy and output-head parameters.
    pub fn infer<R: Rng>(
        &self,
        ctx: &PassCtx,
        x: &Arr,
        rng: &mut R,
    ) -> Result<(LatentHierarchy, HeadParams)> {
        let (h, head, _) = self.infer_with_activations(ctx, x, rng)?;
        Ok((h, head))
    }

    /// [`Model::infer`], additionally returning the encoder activations
    /// (used by structural tests of the sharing groups).
    pub fn infer_with_activations<R: Rng>(
        &self,
        ctx: &PassCtx,
        x: &Arr,
        rng: &mut R,
    ) -> Result<(LatentHierarchy, HeadParams, BottomUpActivations)> {
        let (batch, _) = self.validate_input(x)?;
        let acts = self.bottom_up(ctx, x);
        let (entries, h) = self.top_down(ctx, Some(&acts), batch, &LatentPolicy::Posterior, rng)?;
        let head = self.head_params(ctx, &h)?;
        Ok((LatentHierarchy { entries }, head, acts))
    }

    /// Pruned bidirectional pass: masked-off dimensions take the prior
    /// sample instead of the posterior sample, both at `temperature`.
    pub fn infer_pruned<R: Rng>(
        &self,
        ctx: &PassCtx,
        x: &Arr,
        mask: &LatentMask,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(LatentHierarchy, HeadParams)> {
        let (batch, _) = self.validate_input(x)?;
        if mask.per_layer.len() != self.config.total_layers() {
            return Err(Error::shape(format!(
                "mask has {} layers, model has {}",
                mask.per_layer.len(),
                self.config.total_layers()
            )));
        }
        if temperature < 0.0 {
            return Err(Error::config("temperature must be nonnegative"));
        }
        let acts = self.bottom_up(ctx, x);
        let (entries, h) = self.top_down(
            ctx,
            Some(&acts),
            batch,
            &LatentPolicy::Masked { mask, temperature },
            rng,
        )?;
        let head = self.head_params(ctx, &h)?;
        Ok((LatentHierarchy { entries }, head))
    }

    /// Unconditional generation: sample every prior top-down at the given
    /// temperature(s) and draw pixels from the output head. The encoder is
    /// never consulted. A zero temperature at the input resolution decodes
    /// the head mean instead of sampling pixels, so the whole path is
    /// deterministic. Returns integer levels `[batch, C, H, W]`.
    pub fn generate<R: Rng>(
        &self,
        batch: usize,
        temperatures: &TemperatureSpec,
        rng: &mut R,
    ) -> Result<Arr> {
        if batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        let nres = self.config.resolutions.len();
        temperatures.validate(nres)?;
        let ctx = self.pass(false);
        let (_, h) = self.top_down(&ctx, None, batch, &LatentPolicy::Prior(temperatures), rng)?;
        let head = self.head_params(&ctx, &h)?;
        if temperatures.at(nres - 1) == 0.0 {
            head.mean_decode()
        } else {
            head.sample(rng)
        }
    }

    /// Mean/argmax reconstruction of `x`; masked-off dimensions (when a
    /// mask is given) are replaced by prior samples at `temperature`.
    pub fn reconstruct<R: Rng>(
        &self,
        x: &Arr,
        mask: Option<&LatentMask>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Arr> {
        let full;
        let mask = match mask {
            Some(m) => m,
            None => {
                full = LatentMask::all_kept(&self.config)?;
                &full
            }
        };
        let ctx = self.pass(false);
        let (_, head) = self.infer_pruned(&ctx, x, mask, temperature, rng)?;
        head.mean_decode()
    }
}
