//! Convolutional encoder/decoder pair and the reparameterization sampler.
//!
//! Encoder: `[conv -> ReLU -> batch-norm] x L -> flatten -> dense -> ReLU`
//! followed by two dense heads (mean, log-variance). Decoder: `dense -> ReLU
//! -> reshape -> [transposed conv -> ReLU -> batch-norm] x (L-1) -> transposed
//! conv` in the mirror layout. Paddings and output paddings of the decoder are
//! solved from the encoder's intermediate extents so the output closes exactly
//! on the input shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv3d_output_extent, BatchNormMode, ConvGeometry, Graph, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub fn new(kernel: usize, channels: usize, stride: usize) -> Self {
        ConvLayerSpec {
            kernel,
            channels,
            stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderLayout {
    /// One transposed stage per encoder stage; the last stage emits one channel.
    Mirror,
    /// Stages with zero padding, a centre crop to the input shape and a 1x1x1
    /// projection to one channel.
    LiteralCrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Volume extent `[D, H, W]`, W fastest.
    pub input_shape: [usize; 3],
    pub encoder: Vec<ConvLayerSpec>,
    pub hidden_width: usize,
    pub latent_dim: usize,
    /// Channels of the volume the decoder's dense layer reshapes into.
    pub decoder_channels: usize,
    pub decoder: Vec<ConvLayerSpec>,
    pub decoder_layout: DecoderLayout,
    pub output_activation: OutputActivation,
    /// Latent indices steered by the similarity term.
    pub supervised: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(8)
    }
}

impl ModelConfig {
    /// 48x64x48 input, kernels 11/7/5/3 with 32..256 channels, 9216 -> 256 -> d.
    pub fn paper(latent_dim: usize) -> Self {
        ModelConfig {
            input_shape: [48, 64, 48],
            encoder: vec![
                ConvLayerSpec::new(11, 32, 2),
                ConvLayerSpec::new(7, 64, 2),
                ConvLayerSpec::new(5, 128, 2),
                ConvLayerSpec::new(3, 256, 2),
            ],
            hidden_width: 256,
            latent_dim,
            decoder_channels: 128,
            decoder: vec![
                ConvLayerSpec::new(3, 128, 2),
                ConvLayerSpec::new(4, 64, 2),
                ConvLayerSpec::new(11, 32, 2),
                ConvLayerSpec::new(3, 1, 2),
            ],
            decoder_layout: DecoderLayout::Mirror,
            output_activation: OutputActivation::Linear,
            supervised: vec![0],
            seed: 0,
        }
    }

    /// The three transposed stages exactly as listed (kernels 3/4/11), with
    /// strides 2/2/4 so the output overshoots and is cropped.
    pub fn paper_literal(latent_dim: usize) -> Self {
        ModelConfig {
            decoder: vec![
                ConvLayerSpec::new(3, 128, 2),
                ConvLayerSpec::new(4, 64, 2),
                ConvLayerSpec::new(11, 32, 4),
            ],
            decoder_layout: DecoderLayout::LiteralCrop,
            ..Self::paper(latent_dim)
        }
    }

    /// 32^3 input, kernels 5/3 with 8/16 channels.
    pub fn desk(latent_dim: usize) -> Self {
        ModelConfig {
            input_shape: [32, 32, 32],
            encoder: vec![ConvLayerSpec::new(5, 8, 2), ConvLayerSpec::new(3, 16, 2)],
            hidden_width: 64,
            latent_dim,
            decoder_channels: 16,
            decoder: vec![ConvLayerSpec::new(3, 8, 2), ConvLayerSpec::new(5, 1, 2)],
            decoder_layout: DecoderLayout::Mirror,
            output_activation: OutputActivation::Linear,
            supervised: vec![0],
            seed: 0,
        }
    }

    /// Desk architecture at 16^3, for sweeps and quick tests.
    pub fn tiny(latent_dim: usize) -> Self {
        ModelConfig {
            input_shape: [16, 16, 16],
            ..Self::desk(latent_dim)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn voxels(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Checks shape closure and returns the resolved layer plan.
    pub fn plan(&self) -> Result<ModelPlan> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.supervised.iter().any(|&i| i >= self.latent_dim) {
            return Err(Error::Config(format!(
                "supervised indices {:?} out of range for latent_dim {}",
                self.supervised, self.latent_dim
            )));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.hidden_width == 0 || self.decoder_channels == 0 {
            return Err(Error::Config("hidden_width and decoder_channels must be positive".into()));
        }
        let mut extents = vec![self.input_shape];
        let mut encoder = Vec::new();
        let mut channels = 1;
        for (i, l) in self.encoder.iter().enumerate() {
            if l.kernel == 0 || l.channels == 0 || l.stride == 0 {
                return Err(Error::Config(format!("encoder layer {i}: kernel, channels and stride must be positive")));
            }
            // "same" padding
            let geom = ConvGeometry::new(l.stride, (l.kernel - 1) / 2);
            let prev = *extents.last().unwrap();
            let mut next = [0; 3];
            for a in 0..3 {
                next[a] = conv3d_output_extent(prev[a], l.kernel, &geom)
                    .map_err(|e| Error::Config(format!("encoder layer {i}: {e}")))?;
            }
            encoder.push(LayerPlan {
                in_channels: channels,
                out_channels: l.channels,
                kernel: l.kernel,
                geom,
                output: next,
            });
            channels = l.channels;
            extents.push(next);
        }
        let bottleneck = *extents.last().unwrap();
        let flat = channels * bottleneck.iter().product::<usize>();

        let mut decoder = Vec::new();
        let mut dchan = self.decoder_channels;
        let mut cur = bottleneck;
        match self.decoder_layout {
            DecoderLayout::Mirror => {
                if self.decoder.len() != self.encoder.len() {
                    return Err(Error::Config(format!(
                        "mirror decoder needs {} stages to invert the encoder, got {}",
                        self.encoder.len(),
                        self.decoder.len()
                    )));
                }
                if self.decoder.last().unwrap().channels != 1 {
                    return Err(Error::Config("mirror decoder's last stage must emit 1 channel".into()));
                }
                for (i, l) in self.decoder.iter().enumerate() {
                    let target = extents[extents.len() - 2 - i];
                    let geom = solve_transposed(cur, target, l)
                        .ok_or_else(|| Error::Config(format!(
                            "decoder layer {i}: kernel {} stride {} cannot map {cur:?} onto {target:?}",
                            l.kernel, l.stride
                        )))?;
                    decoder.push(LayerPlan {
                        in_channels: dchan,
                        out_channels: l.channels,
                        kernel: l.kernel,
                        geom,
                        output: target,
                    });
                    dchan = l.channels;
                    cur = target;
                }
            }
            DecoderLayout::LiteralCrop => {
                for (i, l) in self.decoder.iter().enumerate() {
                    if l.kernel == 0 || l.channels == 0 || l.stride == 0 {
                        return Err(Error::Config(format!("decoder layer {i}: kernel, channels and stride must be positive")));
                    }
                    let geom = ConvGeometry::new(l.stride, 0);
                    let mut next = [0; 3];
                    for a in 0..3 {
                        next[a] = (cur[a] - 1) * l.stride + l.kernel;
                    }
                    decoder.push(LayerPlan {
                        in_channels: dchan,
                        out_channels: l.channels,
                        kernel: l.kernel,
                        geom,
                        output: next,
                    });
                    dchan = l.channels;
                    cur = next;
                }
                for a in 0..3 {
                    if cur[a] < self.input_shape[a] {
                        return Err(Error::Config(format!(
                            "decoder layer {}: literal decoder output {cur:?} is smaller than input {:?}",
                            self.decoder.len() - 1,
                            self.input_shape
                        )));
                    }
                }
            }
        }
        Ok(ModelPlan {
            encoder,
            bottleneck,
            encoder_channels: channels,
            flat,
            decoder,
            decoder_out: cur,
        })
    }

    /// Stable hash of the serialized config.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("model config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Padding/output padding so a transposed conv maps `from` onto `to` on every
/// axis with one scalar padding.
fn solve_transposed(from: [usize; 3], to: [usize; 3], l: &ConvLayerSpec) -> Option<ConvGeometry> {
    if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
        return None;
    }
    // (e-1)s + k - 2p + op = t  =>  2p - op = q
    let q: Vec<isize> = (0..3)
        .map(|a| (from[a] as isize - 1) * l.stride as isize + l.kernel as isize - to[a] as isize)
        .collect();
    let max_q = *q.iter().max().unwrap();
    let p_lo = if max_q > 0 { (max_q + 1) / 2 } else { 0 };
    // cropping more than k - 1 would discard whole kernel footprints
    for p in p_lo..=(p_lo + l.stride as isize).min(l.kernel as isize - 1) {
        let mut op = [0usize; 3];
        let ok = (0..3).all(|a| {
            let o = 2 * p - q[a];
            op[a] = o.max(0) as usize;
            o >= 0 && o < l.stride as isize
        });
        if ok {
            return Some(ConvGeometry::new(l.stride, p as usize).with_output_padding(op));
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub output: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPlan {
    pub encoder: Vec<LayerPlan>,
    pub bottleneck: [usize; 3],
    pub encoder_channels: usize,
    /// Width of the flattened encoder output.
    pub flat: usize,
    pub decoder: Vec<LayerPlan>,
    /// Extent after the last transposed stage (before any crop).
    pub decoder_out: [usize; 3],
}

/// Parameters, running batch-norm statistics and the config they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    config: ModelConfig,
    plan: ModelPlan,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// Encoder batch-norms first, then decoder batch-norms.
    running: Vec<RunningStats>,
}

/// Handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }
}

impl VaeModel {
    /// Builds a model with He-style fan-in initialization and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let plan = config.plan()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut running = Vec::new();
        let add = |names: &mut Vec<String>, params: &mut Vec<Tensor>, n: String, t: Tensor| {
            names.push(n);
            params.push(t);
        };
        for (i, l) in plan.encoder.iter().enumerate() {
            let k = l.kernel;
            let w = init.he(&[l.out_channels, l.in_channels, k, k, k], l.in_channels * k * k * k);
            add(&mut names, &mut params, format!("encoder.conv{i}.weight"), w);
            add(&mut names, &mut params, format!("encoder.conv{i}.bias"), Tensor::zeros(&[l.out_channels]));
            add(&mut names, &mut params, format!("encoder.bn{i}.scale"), Tensor::full(&[l.out_channels], 1.0));
            add(&mut names, &mut params, format!("encoder.bn{i}.shift"), Tensor::zeros(&[l.out_channels]));
            running.push(RunningStats::new(l.out_channels));
        }
        let h = config.hidden_width;
        let d = config.latent_dim;
        add(&mut names, &mut params, "encoder.fc.weight".into(), init.he(&[h, plan.flat], plan.flat));
        add(&mut names, &mut params, "encoder.fc.bias".into(), Tensor::zeros(&[h]));
        add(&mut names, &mut params, "encoder.mu.weight".into(), init.he(&[d, h], h));
        add(&mut names, &mut params, "encoder.mu.bias".into(), Tensor::zeros(&[d]));
        add(&mut names, &mut params, "encoder.logvar.weight".into(), init.he(&[d, h], h));
        add(&mut names, &mut params, "encoder.logvar.bias".into(), Tensor::zeros(&[d]));
        let dec_flat = config.decoder_channels * plan.bottleneck.iter().product::<usize>();
        add(&mut names, &mut params, "decoder.fc.weight".into(), init.he(&[dec_flat, d], d));
        add(&mut names, &mut params, "decoder.fc.bias".into(), Tensor::zeros(&[dec_flat]));
        let last = plan.decoder.len() - 1;
        let literal = config.decoder_layout == DecoderLayout::LiteralCrop;
        for (i, l) in plan.decoder.iter().enumerate() {
            let k = l.kernel;
            let taps = k.div_ceil(l.geom.stride);
            let w = init.he(&[l.in_channels, l.out_channels, k, k, k], l.in_channels * taps * taps * taps);
            add(&mut names, &mut params, format!("decoder.tconv{i}.weight"), w);
            add(&mut names, &mut params, format!("decoder.tconv{i}.bias"), Tensor::zeros(&[l.out_channels]));
            if i < last || literal {
                add(&mut names, &mut params, format!("decoder.bn{i}.scale"), Tensor::full(&[l.out_channels], 1.0));
                add(&mut names, &mut params, format!("decoder.bn{i}.shift"), Tensor::zeros(&[l.out_channels]));
                running.push(RunningStats::new(l.out_channels));
            }
        }
        if literal {
            let c = plan.decoder[last].out_channels;
            add(&mut names, &mut params, "decoder.proj.weight".into(), init.he(&[1, c, 1, 1, 1], c));
            add(&mut names, &mut params, "decoder.proj.bias".into(), Tensor::zeros(&[1]));
        }
        Ok(VaeModel {
            config,
            plan,
            names,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ModelPlan {
        &self.plan
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Replaces the running statistics, e.g. after a train-mode pass on a copy.
    pub fn set_running_stats(&mut self, running: Vec<RunningStats>) {
        assert_eq!(running.len(), self.running.len(), "running statistics count");
        self.running = running;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Reassembles a model from stored parts, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        named: Vec<(String, Tensor)>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        let mut model = VaeModel::new(config)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    t.shape()
                )));
            }
            model.params[i] = t;
        }
        if running.len() != model.running.len()
            || running.iter().zip(&model.running).any(|(a, b)| a.mean.len() != b.mean.len())
        {
            return Err(Error::Checkpoint("running statistics do not match the architecture".into()));
        }
        model.running = running;
        Ok(model)
    }

    /// Adds every parameter to `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Adds every parameter to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let [d, h, w] = self.config.input_shape;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [d, h, w] {
            return Err(Error::Shape(format!(
                "batch shape {shape:?} does not match model input [N, 1, {d}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    /// Encoder on the graph. `stats` must be this model's running statistics
    /// (or a copy of them).
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        stats: &mut [RunningStats],
        input: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Var)> {
        self.check_batch(g.value(input).shape())?;
        let n = g.value(input).shape()[0];
        let mut p = 0;
        let mut h = input;
        for (i, l) in self.plan.encoder.iter().enumerate() {
            h = g.conv3d(h, params[p], params[p + 1], l.geom)?;
            h = g.relu(h);
            h = g.batchnorm(h, params[p + 2], params[p + 3], &mut stats[i], mode)?;
            p += 4;
        }
        let flat = g.reshape(h, &[n, self.plan.flat])?;
        let hidden = g.dense(flat, params[p], params[p + 1])?;
        let hidden = g.relu(hidden);
        let mu = g.dense(hidden, params[p + 2], params[p + 3])?;
        let logvar = g.dense(hidden, params[p + 4], params[p + 5])?;
        Ok((mu, logvar))
    }

    fn decoder_param_offset(&self) -> usize {
        4 * self.plan.encoder.len() + 6
    }

    pub fn decode_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        stats: &mut [RunningStats],
        z: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch {zs:?} does not match latent_dim {}",
                self.config.latent_dim
            )));
        }
        let n = zs[0];
        let mut p = self.decoder_param_offset();
        let h = g.dense(z, params[p], params[p + 1])?;
        let h = g.relu(h);
        p += 2;
        let b = self.plan.bottleneck;
        let mut h = g.reshape(h, &[n, self.config.decoder_channels, b[0], b[1], b[2]])?;
        let literal = self.config.decoder_layout == DecoderLayout::LiteralCrop;
        let last = self.plan.decoder.len() - 1;
        let mut s = self.plan.encoder.len();
        for (i, l) in self.plan.decoder.iter().enumerate() {
            h = g.conv_transpose3d(h, params[p], params[p + 1], l.geom)?;
            p += 2;
            if i < last || literal {
                h = g.relu(h);
                h = g.batchnorm(h, params[p], params[p + 1], &mut stats[s], mode)?;
                p += 2;
                s += 1;
            }
        }
        if literal {
            let out = self.plan.decoder_out;
            let target = self.config.input_shape;
            let offset = [0, 1, 2].map(|a| (out[a] - target[a]) / 2);
            h = g.crop(h, offset, target)?;
            h = g.conv3d(h, params[p], params[p + 1], ConvGeometry::new(1, 0))?;
        }
        Ok(match self.config.output_activation {
            OutputActivation::Linear => h,
            OutputActivation::Sigmoid => g.sigmoid(h),
        })
    }

    /// Full pass: encode, sample `z = mu + exp(logvar/2) * noise`, decode.
    /// Without noise the decoder receives `mu`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        stats: &mut [RunningStats],
        input: Var,
        noise: Option<Var>,
        mode: BatchNormMode,
    ) -> Result<ForwardVars> {
        let (mu, logvar) = self.encode_graph(g, params, stats, input, mode)?;
        let z = match noise {
            Some(eps) => reparameterize_graph(g, mu, logvar, eps)?,
            None => mu,
        };
        let recon = self.decode_graph(g, params, stats, z, mode)?;
        Ok(ForwardVars { mu, logvar, z, recon })
    }

    /// Running statistics are updated in train mode.
    pub fn encode(&mut self, batch: &Tensor, mode: BatchNormMode) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let mut stats = std::mem::take(&mut self.running);
        let res = self.encode_graph(&mut g, &params, &mut stats, x, mode);
        self.running = stats;
        let (mu, lv) = res?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode(&mut self, z: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let mut stats = std::mem::take(&mut self.running);
        let res = self.decode_graph(&mut g, &params, &mut stats, zv, mode);
        self.running = stats;
        Ok(g.value(res?).clone())
    }

    /// Eval-mode encoder; does not touch the model.
    pub fn encode_eval(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let mut stats = self.running.clone();
        let (mu, lv) = self.encode_graph(&mut g, &params, &mut stats, x, BatchNormMode::Eval)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Eval-mode decoder; does not touch the model.
    pub fn decode_eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let mut stats = self.running.clone();
        let out = self.decode_graph(&mut g, &params, &mut stats, zv, BatchNormMode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Decodes `z = 0`: the origin every latent traversal starts from.
    pub fn baseline_volume(&self) -> Result<Tensor> {
        self.decode_eval(&Tensor::zeros(&[1, self.config.latent_dim]))
    }

    /// Order-sensitive digest of all parameters and running statistics.
    pub fn parameter_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            h.update(n.as_bytes());
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        for s in &self.running {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `z = mu + exp(logvar / 2) * noise` on the graph.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let spread = g.mul(std, noise)?;
    g.add(mu, spread)
}

pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: shapes {:?}, {:?}, {:?} differ",
            mu.shape(),
            logvar.shape(),
            noise.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(noise.data())
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}
