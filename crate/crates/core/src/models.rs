//! The four model variants (plain, label-conditioned, planar-flow and
//! autoregressive-flow) over two posterior families, their training loop,
//! and test-set losses.
//!
//! Flows sit between the latent draw and the dense decoder; the scored and
//! KL-regularized latent is always the pre-flow draw, so the training loss
//! has the same two-term shape for every variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, AdamState, DenseNet, NetGrads};
use crate::posterior::{FullCovPosterior, MeanFieldPosterior};
use crate::rng::Rng;
use crate::tensor::Tensor;

// rng stream tags so that training, evaluation and scoring never collide
pub(crate) const STREAM_TRAIN: u64 = 0xE9;
pub(crate) const STREAM_SHUFFLE: u64 = 0x7E;
pub(crate) const STREAM_EVAL: u64 = 0xEA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    Cvae,
    Nf,
    Iaf,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "cvae" => Ok(ModelKind::Cvae),
            "nf" => Ok(ModelKind::Nf),
            "iaf" => Ok(ModelKind::Iaf),
            other => Err(Error::InvalidArgument {
                context: format!("unknown model kind {other:?}"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Cvae => "cvae",
            ModelKind::Nf => "nf",
            ModelKind::Iaf => "iaf",
        }
    }

    pub fn default_flow_steps(&self) -> usize {
        match self {
            ModelKind::Nf => 2,
            ModelKind::Iaf => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    MeanField,
    FullCov,
}

impl PosteriorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_field" | "mf" => Ok(PosteriorKind::MeanField),
            "full_cov" | "fc" => Ok(PosteriorKind::FullCov),
            other => Err(Error::InvalidArgument {
                context: format!("unknown posterior kind {other:?}"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PosteriorKind::MeanField => "mean_field",
            PosteriorKind::FullCov => "full_cov",
        }
    }

    /// Encoder head width for latent dimension `d`.
    pub fn encoder_out_dim(&self, d: usize) -> usize {
        match self {
            PosteriorKind::MeanField => 2 * d,
            PosteriorKind::FullCov => 2 * d + d * (d - 1) / 2,
        }
    }
}

/// Encoder output for one item.
#[derive(Debug, Clone)]
pub enum Posterior {
    MeanField(MeanFieldPosterior),
    FullCov(FullCovPosterior),
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub z: Tensor,
    pub eps: Tensor,
}

impl Posterior {
    pub fn dim(&self) -> usize {
        match self {
            Posterior::MeanField(p) => p.dim(),
            Posterior::FullCov(p) => p.dim(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> PosteriorSample {
        let eps = rng.sample_standard_normal(vec![self.dim()]);
        let z = self.transform(&eps);
        PosteriorSample { z, eps }
    }

    pub fn transform(&self, eps: &Tensor) -> Tensor {
        match self {
            Posterior::MeanField(p) => p.transform(eps),
            Posterior::FullCov(p) => p.transform(eps, &p.chol_factor()),
        }
    }

    /// KL contribution of one draw: exact for mean-field, the single-sample
    /// unbiased estimate for full covariance.
    pub fn kl_for_sample(&self, s: &PosteriorSample) -> f64 {
        match self {
            Posterior::MeanField(p) => p.kl_closed().0,
            Posterior::FullCov(p) => p.kl_estimate(&s.z, &s.eps),
        }
    }
}

/// One planar flow step `z -> z + scale * tanh(direction . z + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarStep {
    pub scale: Tensor,
    pub direction: Tensor,
    pub bias: Tensor,
}

/// One gated autoregressive step: two strictly-causal linear heads produce
/// `shift` and `gate_logit`, then `z -> g * z + (1 - g) * shift` with
/// `g = sigmoid(gate_logit)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IafStep {
    pub shift_weight: Tensor,
    pub shift_bias: Tensor,
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Flow {
    Planar(Vec<PlanarStep>),
    Iaf(Vec<IafStep>),
}

/// Intermediates of one flow forward pass, enough to backpropagate.
pub struct FlowTrace {
    inputs: Vec<Tensor>,
    planar_tanh: Vec<f64>,
    iaf_shift: Vec<Tensor>,
    iaf_gate: Vec<Tensor>,
}

impl Flow {
    pub fn steps(&self) -> usize {
        match self {
            Flow::Planar(s) => s.len(),
            Flow::Iaf(s) => s.len(),
        }
    }

    /// Applies the flow and accumulates `sum(log |det dz_t/dz_{t-1}|)`.
    pub fn forward(&self, z: &Tensor) -> (Tensor, FlowTrace, f64) {
        let mut trace = FlowTrace {
            inputs: Vec::new(),
            planar_tanh: Vec::new(),
            iaf_shift: Vec::new(),
            iaf_gate: Vec::new(),
        };
        let mut cur = z.clone();
        let mut log_det = 0.0;
        match self {
            Flow::Planar(steps) => {
                for step in steps {
                    trace.inputs.push(cur.clone());
                    let a = step.direction.dot(&cur).unwrap() + step.bias.data()[0];
                    let t = a.tanh();
                    trace.planar_tanh.push(t);
                    let mut next = cur.clone();
                    for (i, v) in next.data_mut().iter_mut().enumerate() {
                        *v += step.scale.data()[i] * t;
                    }
                    let h_prime = 1.0 - t * t;
                    let cp = step.direction.dot(&step.scale).unwrap();
                    log_det += (1.0 + h_prime * cp).abs().max(1e-300).ln();
                    cur = next;
                }
            }
            Flow::Iaf(steps) => {
                for step in steps {
                    trace.inputs.push(cur.clone());
                    let d = cur.len();
                    let mut shift = Tensor::zeros(vec![d]);
                    let mut gate = Tensor::zeros(vec![d]);
                    for i in 0..d {
                        let mut sm = step.shift_bias.data()[i];
                        let mut sg = step.gate_bias.data()[i];
                        for j in 0..i {
                            sm += step.shift_weight.get2(i, j) * cur.data()[j];
                            sg += step.gate_weight.get2(i, j) * cur.data()[j];
                        }
                        shift.data_mut()[i] = sm;
                        gate.data_mut()[i] = sigmoid(sg);
                    }
                    let mut next = Tensor::zeros(vec![d]);
                    for i in 0..d {
                        let c = gate.data()[i];
                        next.data_mut()[i] = c * cur.data()[i] + (1.0 - c) * shift.data()[i];
                        log_det += c.max(1e-300).ln();
                    }
                    trace.iaf_shift.push(shift);
                    trace.iaf_gate.push(gate);
                    cur = next;
                }
            }
        }
        (cur, trace, log_det)
    }

    /// Backpropagates a gradient through the recorded pass; returns the
    /// gradient w.r.t. the flow input and parameter gradients in the same
    /// order as [`VaeModel::param_names_shapes`] lists them.
    pub fn backward(&self, trace: &FlowTrace, out_grad: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut dz = out_grad.clone();
        let mut grads_rev: Vec<Vec<Tensor>> = Vec::new();
        match self {
            Flow::Planar(steps) => {
                for (idx, step) in steps.iter().enumerate().rev() {
                    let z_in = &trace.inputs[idx];
                    let t = trace.planar_tanh[idx];
                    let d = z_in.len();
                    let mut dscale = Tensor::zeros(vec![d]);
                    let mut dt = 0.0;
                    for i in 0..d {
                        dscale.data_mut()[i] = dz.data()[i] * t;
                        dt += dz.data()[i] * step.scale.data()[i];
                    }
                    let da = dt * (1.0 - t * t);
                    let ddirection = z_in.scale(da);
                    let dbias = Tensor::from_vec(vec![da]);
                    let mut dz_in = dz.clone();
                    for i in 0..d {
                        dz_in.data_mut()[i] += da * step.direction.data()[i];
                    }
                    grads_rev.push(vec![dscale, ddirection, dbias]);
                    dz = dz_in;
                }
            }
            Flow::Iaf(steps) => {
                for (idx, step) in steps.iter().enumerate().rev() {
                    let z_in = &trace.inputs[idx];
                    let shift = &trace.iaf_shift[idx];
                    let gate = &trace.iaf_gate[idx];
                    let d = z_in.len();
                    let mut dwm = Tensor::zeros(vec![d, d]);
                    let mut dbm = Tensor::zeros(vec![d]);
                    let mut dws = Tensor::zeros(vec![d, d]);
                    let mut dbs = Tensor::zeros(vec![d]);
                    let mut dz_in = Tensor::zeros(vec![d]);
                    for i in 0..d {
                        let g = dz.data()[i];
                        let c = gate.data()[i];
                        let dm = g * (1.0 - c);
                        let dc = g * (z_in.data()[i] - shift.data()[i]);
                        let ds = dc * c * (1.0 - c);
                        dz_in.data_mut()[i] += g * c;
                        dbm.data_mut()[i] = dm;
                        dbs.data_mut()[i] = ds;
                        for j in 0..i {
                            dwm.set2(i, j, dm * z_in.data()[j]);
                            dws.set2(i, j, ds * z_in.data()[j]);
                            dz_in.data_mut()[j] += dm * step.shift_weight.get2(i, j)
                                + ds * step.gate_weight.get2(i, j);
                        }
                    }
                    grads_rev.push(vec![dwm, dbm, dws, dbs]);
                    dz = dz_in;
                }
            }
        }
        grads_rev.reverse();
        (dz, grads_rev.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub posterior: PosteriorKind,
    pub dim_x: usize,
    pub dim_z: usize,
    pub hidden: Vec<usize>,
    pub label_count: usize,
    pub flow_steps: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, posterior: PosteriorKind, dim_x: usize, dim_z: usize) -> Self {
        Self {
            kind,
            posterior,
            dim_x,
            dim_z,
            hidden: vec![256, 256],
            label_count: 0,
            flow_steps: kind.default_flow_steps(),
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_labels(mut self, label_count: usize) -> Self {
        self.label_count = label_count;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub kind: ModelKind,
    pub posterior_kind: PosteriorKind,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub flow: Option<Flow>,
    pub dim_x: usize,
    pub dim_z: usize,
    /// Number of distinct labels; nonzero only for the conditional variant.
    pub label_count: usize,
}

impl VaeModel {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.dim_z < 1 || cfg.dim_x < 1 {
            return Err(Error::InvalidArgument {
                context: format!("model init: dim_x {}, dim_z {}", cfg.dim_x, cfg.dim_z),
            });
        }
        if cfg.kind == ModelKind::Cvae && cfg.label_count == 0 {
            return Err(Error::InvalidArgument {
                context: "conditional model needs label_count > 0".into(),
            });
        }
        let label_count = if cfg.kind == ModelKind::Cvae { cfg.label_count } else { 0 };

        let mut enc_dims = vec![cfg.dim_x + label_count];
        enc_dims.extend_from_slice(&cfg.hidden);
        enc_dims.push(cfg.posterior.encoder_out_dim(cfg.dim_z));
        let mut enc_acts = vec![Activation::Tanh; cfg.hidden.len()];
        enc_acts.push(Activation::Identity);
        let encoder = DenseNet::init(&enc_dims, &enc_acts, rng)?;

        let mut dec_dims = vec![cfg.dim_z + label_count];
        dec_dims.extend(cfg.hidden.iter().rev());
        dec_dims.push(cfg.dim_x);
        let mut dec_acts = vec![Activation::Tanh; cfg.hidden.len()];
        dec_acts.push(Activation::Sigmoid);
        let decoder = DenseNet::init(&dec_dims, &dec_acts, rng)?;

        let flow = match cfg.kind {
            ModelKind::Nf => {
                let steps = (0..cfg.flow_steps.max(1))
                    .map(|_| {
                        let mut scale = Tensor::zeros(vec![cfg.dim_z]);
                        let mut direction = Tensor::zeros(vec![cfg.dim_z]);
                        for v in scale.data_mut() {
                            *v = 0.01 * rng.next_normal();
                        }
                        for v in direction.data_mut() {
                            *v = 0.01 * rng.next_normal();
                        }
                        PlanarStep { scale, direction, bias: Tensor::zeros(vec![1]) }
                    })
                    .collect();
                Some(Flow::Planar(steps))
            }
            ModelKind::Iaf => {
                let steps = (0..cfg.flow_steps.max(1))
                    .map(|_| {
                        let d = cfg.dim_z;
                        let bound = (6.0 / (2 * d) as f64).sqrt();
                        let mut causal = |rng: &mut Rng| {
                            let mut w = Tensor::zeros(vec![d, d]);
                            for i in 0..d {
                                for j in 0..i {
                                    w.set2(i, j, rng.next_range(-bound, bound));
                                }
                            }
                            w
                        };
                        IafStep {
                            shift_weight: causal(rng),
                            shift_bias: Tensor::zeros(vec![d]),
                            gate_weight: causal(rng),
                            // open gates at start keep the flow near identity
                            gate_bias: Tensor::filled(vec![d], 2.0),
                        }
                    })
                    .collect();
                Some(Flow::Iaf(steps))
            }
            _ => None,
        };

        let model = Self {
            kind: cfg.kind,
            posterior_kind: cfg.posterior,
            encoder,
            decoder,
            flow,
            dim_x: cfg.dim_x,
            dim_z: cfg.dim_z,
            label_count,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let enc_in = self.dim_x + self.label_count;
        if self.encoder.in_dim() != enc_in {
            return Err(Error::InvalidArgument {
                context: format!("encoder in dim {} != {enc_in}", self.encoder.in_dim()),
            });
        }
        let enc_out = self.posterior_kind.encoder_out_dim(self.dim_z);
        if self.encoder.out_dim() != enc_out {
            return Err(Error::InvalidArgument {
                context: format!("encoder out dim {} != {enc_out}", self.encoder.out_dim()),
            });
        }
        if self.decoder.in_dim() != self.dim_z + self.label_count
            || self.decoder.out_dim() != self.dim_x
        {
            return Err(Error::InvalidArgument {
                context: "decoder dims do not match dim_z/dim_x".into(),
            });
        }
        if !self.decoder.layers.last().unwrap().activation.is_bounded_unit() {
            return Err(Error::InvalidArgument {
                context: "decoder output activation must be tanh or sigmoid".into(),
            });
        }
        match (self.kind, &self.flow) {
            (ModelKind::Nf, Some(Flow::Planar(_))) => {}
            (ModelKind::Iaf, Some(Flow::Iaf(_))) => {}
            (ModelKind::Vae | ModelKind::Cvae, None) => {}
            _ => {
                return Err(Error::InvalidArgument {
                    context: "flow does not match model kind".into(),
                })
            }
        }
        Ok(())
    }

    fn with_label(&self, v: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
        if self.label_count == 0 {
            if y.is_some() {
                return Err(Error::InvalidArgument {
                    context: "label passed to an unconditional model".into(),
                });
            }
            return Ok(v.to_vec());
        }
        let y = y.ok_or_else(|| Error::InvalidArgument {
            context: "conditional model needs a label".into(),
        })?;
        if y >= self.label_count {
            return Err(Error::InvalidArgument {
                context: format!("label {y} out of range {}", self.label_count),
            });
        }
        let mut out = Vec::with_capacity(v.len() + self.label_count);
        out.extend_from_slice(v);
        out.extend((0..self.label_count).map(|k| if k == y { 1.0 } else { 0.0 }));
        Ok(out)
    }

    /// Runs the encoder and packs its head into a posterior. The
    /// full-covariance head is `[mu | log_diag | strictly-lower entries]`,
    /// scattered row-major below the diagonal.
    pub fn encode(&self, x: &[f64], y: Option<usize>) -> Result<Posterior> {
        if x.len() != self.dim_x {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![x.len()],
                right: vec![self.dim_x],
            });
        }
        let input = self.with_label(x, y)?;
        let out = self.encoder.forward_single(&input)?;
        self.posterior_from_head(&out)
    }

    pub fn posterior_from_head(&self, head: &[f64]) -> Result<Posterior> {
        let d = self.dim_z;
        match self.posterior_kind {
            PosteriorKind::MeanField => {
                let mu = Tensor::new(vec![d], head[..d].to_vec())?;
                let log_var = Tensor::new(vec![d], head[d..2 * d].to_vec())?;
                Ok(Posterior::MeanField(MeanFieldPosterior::new(mu, log_var)?))
            }
            PosteriorKind::FullCov => {
                let mu = Tensor::new(vec![d], head[..d].to_vec())?;
                let log_diag = Tensor::new(vec![d], head[d..2 * d].to_vec())?;
                let mut l_strict = Tensor::zeros(vec![d, d]);
                let mut k = 2 * d;
                for i in 1..d {
                    for j in 0..i {
                        l_strict.set2(i, j, head[k]);
                        k += 1;
                    }
                }
                Ok(Posterior::FullCov(FullCovPosterior::new(mu, log_diag, l_strict)?))
            }
        }
    }

    /// Decodes a latent vector; the flow (if any) runs first, then the dense
    /// decoder. Returns the reconstruction and the accumulated flow
    /// log-determinant.
    pub fn decode(&self, z: &[f64], y: Option<usize>) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.dim_z {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: vec![z.len()],
                right: vec![self.dim_z],
            });
        }
        let zt = Tensor::new(vec![self.dim_z], z.to_vec())?;
        let (z_dec, log_det) = match &self.flow {
            None => (zt, 0.0),
            Some(flow) => {
                let (out, _, ld) = flow.forward(&zt);
                (out, ld)
            }
        };
        let input = self.with_label(z_dec.data(), y)?;
        Ok((self.decoder.forward_single(&input)?, log_det))
    }

    /// Names and shapes of every trainable tensor, in update order.
    pub fn param_names_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (k, layer) in self.encoder.layers.iter().enumerate() {
            out.push((format!("enc.l{k}.w"), layer.weight.shape().to_vec()));
            out.push((format!("enc.l{k}.b"), layer.bias.shape().to_vec()));
        }
        for (k, layer) in self.decoder.layers.iter().enumerate() {
            out.push((format!("dec.l{k}.w"), layer.weight.shape().to_vec()));
            out.push((format!("dec.l{k}.b"), layer.bias.shape().to_vec()));
        }
        match &self.flow {
            None => {}
            Some(Flow::Planar(steps)) => {
                for (t, s) in steps.iter().enumerate() {
                    out.push((format!("flow.s{t}.scale"), s.scale.shape().to_vec()));
                    out.push((format!("flow.s{t}.direction"), s.direction.shape().to_vec()));
                    out.push((format!("flow.s{t}.bias"), s.bias.shape().to_vec()));
                }
            }
            Some(Flow::Iaf(steps)) => {
                for (t, s) in steps.iter().enumerate() {
                    out.push((format!("flow.s{t}.shift_w"), s.shift_weight.shape().to_vec()));
                    out.push((format!("flow.s{t}.shift_b"), s.shift_bias.shape().to_vec()));
                    out.push((format!("flow.s{t}.gate_w"), s.gate_weight.shape().to_vec()));
                    out.push((format!("flow.s{t}.gate_b"), s.gate_bias.shape().to_vec()));
                }
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for layer in &mut self.decoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        match &mut self.flow {
            None => {}
            Some(Flow::Planar(steps)) => {
                for s in steps {
                    out.push(&mut s.scale);
                    out.push(&mut s.direction);
                    out.push(&mut s.bias);
                }
            }
            Some(Flow::Iaf(steps)) => {
                for s in steps {
                    out.push(&mut s.shift_weight);
                    out.push(&mut s.shift_bias);
                    out.push(&mut s.gate_weight);
                    out.push(&mut s.gate_bias);
                }
            }
        }
        out
    }
}

/// Loss pieces of one item under the training objective.
#[derive(Debug, Clone, Copy)]
pub struct ItemLoss {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Computes the per-item training loss for a fixed noise draw:
/// `recon + kl` with `recon = 1/2 sum (x_hat - x)^2`, `kl` the closed form
/// for mean-field or the single-sample estimate for full covariance.
pub fn item_loss(model: &VaeModel, x: &[f64], y: Option<usize>, eps: &Tensor) -> Result<ItemLoss> {
    let posterior = model.encode(x, y)?;
    let z = posterior.transform(eps);
    let (x_hat, _) = model.decode(z.data(), y)?;
    let recon: f64 = x_hat
        .iter()
        .zip(x)
        .map(|(xh, xv)| 0.5 * (xh - xv) * (xh - xv))
        .sum();
    let sample = PosteriorSample { z, eps: eps.clone() };
    let kl = posterior.kl_for_sample(&sample);
    Ok(ItemLoss { loss: recon + kl, recon, kl })
}

/// Loss pieces plus parameter gradients (flat, in `param_names_shapes`
/// order) for one item and one noise draw.
pub fn item_loss_grads(
    model: &VaeModel,
    x: &[f64],
    y: Option<usize>,
    eps: &Tensor,
) -> Result<(ItemLoss, Vec<Tensor>)> {
    let d = model.dim_z;
    let enc_in = Tensor::new(vec![1, model.dim_x + model.label_count], model.with_label(x, y)?)?;
    let (enc_out, enc_tape) = model.encoder.forward(&enc_in)?;
    let posterior = model.posterior_from_head(enc_out.data())?;
    let z = posterior.transform(eps);

    let (z_dec, flow_trace) = match &model.flow {
        None => (z.clone(), None),
        Some(flow) => {
            let (out, trace, _ld) = flow.forward(&z);
            (out, Some(trace))
        }
    };
    let dec_in = Tensor::new(
        vec![1, d + model.label_count],
        model.with_label(z_dec.data(), y)?,
    )?;
    let (x_hat, dec_tape) = model.decoder.forward(&dec_in)?;

    let mut recon = 0.0;
    let mut d_xhat = Tensor::zeros(vec![1, model.dim_x]);
    for i in 0..model.dim_x {
        let diff = x_hat.data()[i] - x[i];
        recon += 0.5 * diff * diff;
        d_xhat.data_mut()[i] = diff;
    }

    let dec_grads = model.decoder.backward(&dec_tape, &d_xhat)?;
    let dz_dec = Tensor::new(vec![d], dec_grads.input.data()[..d].to_vec())?;
    let (dz_recon, flow_grads) = match (&model.flow, &flow_trace) {
        (Some(flow), Some(trace)) => {
            let (dz, fg) = flow.backward(trace, &dz_dec);
            (dz, fg)
        }
        _ => (dz_dec, Vec::new()),
    };

    // gradient of the encoder head and the kl value, per posterior family
    let (kl, head_grad) = match &posterior {
        Posterior::MeanField(p) => {
            let (kl, _) = p.kl_closed();
            let mut head = Tensor::zeros(vec![1, 2 * d]);
            for i in 0..d {
                let lv = p.log_var.data()[i];
                let mu = p.mu.data()[i];
                let dz = dz_recon.data()[i];
                head.data_mut()[i] = dz + mu;
                head.data_mut()[d + i] =
                    dz * eps.data()[i] * 0.5 * (0.5 * lv).exp() + 0.5 * (lv.exp() - 1.0);
            }
            (kl, head)
        }
        Posterior::FullCov(p) => {
            let sample = PosteriorSample { z: z.clone(), eps: eps.clone() };
            let kl = posterior.kl_for_sample(&sample);
            // loss = recon + 1/2 sum(z^2 - eps^2) - sum(log_diag):
            // z gains +z from the estimator, log_diag gains -1 plus the
            // diagonal chain rule through z = mu + L eps
            let head_w = model.posterior_kind.encoder_out_dim(d);
            let mut head = Tensor::zeros(vec![1, head_w]);
            let dz_total: Vec<f64> =
                (0..d).map(|i| dz_recon.data()[i] + z.data()[i]).collect();
            for i in 0..d {
                head.data_mut()[i] = dz_total[i];
                head.data_mut()[d + i] =
                    dz_total[i] * eps.data()[i] * p.log_diag.data()[i].exp() - 1.0;
            }
            let mut k = 2 * d;
            for i in 1..d {
                for j in 0..i {
                    head.data_mut()[k] = dz_total[i] * eps.data()[j];
                    k += 1;
                }
            }
            (kl, head)
        }
    };

    let enc_grads = model.encoder.backward(&enc_tape, &head_grad)?;
    let grads = collect_grads(model, enc_grads, dec_grads, flow_grads);
    Ok((ItemLoss { loss: recon + kl, recon, kl }, grads))
}

fn collect_grads(
    model: &VaeModel,
    enc: NetGrads,
    dec: NetGrads,
    flow: Vec<Tensor>,
) -> Vec<Tensor> {
    let n_params = model.param_names_shapes().len();
    let mut out = Vec::with_capacity(n_params);
    for (w, b) in enc.weights.into_iter().zip(enc.biases) {
        out.push(w);
        out.push(b);
    }
    for (w, b) in dec.weights.into_iter().zip(dec.biases) {
        out.push(w);
        out.push(b);
    }
    out.extend(flow);
    out
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Mean and standard error of the per-item KL terms within one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchKlStats {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub batch_kl: Vec<BatchKlStats>,
}

/// Trains in place with Adam. Noise streams are split per (epoch, item), so
/// the result is a pure function of the seed and configuration.
pub fn train(
    model: &mut VaeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::InvalidArgument { context: "train: empty dataset".into() });
    }
    if !(1e-5..=1e-3).contains(&cfg.learning_rate) {
        return Err(Error::InvalidArgument {
            context: format!("learning rate {} outside [1e-5, 1e-3]", cfg.learning_rate),
        });
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument {
            context: "train: batch and epochs must be positive".into(),
        });
    }
    if model.kind == ModelKind::Cvae && data.labels.is_none() {
        return Err(Error::InvalidArgument {
            context: "conditional model needs a labeled dataset".into(),
        });
    }

    let shapes: Vec<Vec<usize>> =
        model.param_names_shapes().iter().map(|(_, s)| s.clone()).collect();
    let names: Vec<String> = model.param_names_shapes().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(cfg.learning_rate, &shapes);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = TrainStats { epochs: Vec::with_capacity(cfg.epochs), batch_kl: Vec::new() };

    for epoch in 0..cfg.epochs {
        rng.split(STREAM_SHUFFLE).split(epoch as u64).shuffle(&mut order);
        let noise_root = rng.split(STREAM_TRAIN).split(epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_recon = 0.0;
        let mut epoch_kl = 0.0;

        for (batch_no, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut accum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
            let mut batch_loss = 0.0;
            let mut kl_sum = 0.0;
            let mut kl_sq = 0.0;
            for &item in chunk {
                let eps = noise_root
                    .split(item as u64)
                    .sample_standard_normal(vec![model.dim_z]);
                let y = if model.kind == ModelKind::Cvae { data.label(item) } else { None };
                let (il, grads) = item_loss_grads(model, data.item(item), y, &eps)?;
                if !il.loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("training loss at epoch {epoch}, batch {batch_no}"),
                    });
                }
                batch_loss += il.loss;
                epoch_recon += il.recon;
                kl_sum += il.kl;
                kl_sq += il.kl * il.kl;
                for (a, g) in accum.iter_mut().zip(&grads) {
                    let ad = a.data_mut();
                    for (av, gv) in ad.iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for a in &mut accum {
                for v in a.data_mut() {
                    *v *= inv;
                }
            }
            let mut tensors = model.param_tensors_mut();
            let mut named: Vec<(&str, &mut Tensor)> = names
                .iter()
                .map(String::as_str)
                .zip(tensors.iter_mut().map(|t| &mut **t))
                .collect();
            adam.step(&mut named, &accum)?;

            epoch_loss += batch_loss;
            epoch_kl += kl_sum;
            let kl_mean = kl_sum * inv;
            let kl_var = (kl_sq * inv - kl_mean * kl_mean).max(0.0);
            stats.batch_kl.push(BatchKlStats {
                mean: kl_mean,
                se: (kl_var / chunk.len() as f64).sqrt(),
            });
        }
        let n = data.len() as f64;
        stats.epochs.push(EpochStats {
            loss: epoch_loss / n,
            recon: epoch_recon / n,
            kl: epoch_kl / n,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub neg_elbo: f64,
    pub l2: f64,
}

/// Test-set losses with a single posterior draw per item: `l2` is the mean
/// half-sum of squared errors, `neg_elbo` adds the KL term.
pub fn eval_losses(model: &VaeModel, test: &Dataset, rng: &Rng) -> Result<Losses> {
    if test.is_empty() {
        return Err(Error::InvalidArgument { context: "eval: empty dataset".into() });
    }
    let eval_root = rng.split(STREAM_EVAL);
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..test.len() {
        let y = if model.kind == ModelKind::Cvae { test.label(i) } else { None };
        let posterior = model.encode(test.item(i), y)?;
        let sample = posterior.sample(&mut eval_root.split(i as u64));
        let (x_hat, _) = model.decode(sample.z.data(), y)?;
        recon_sum += x_hat
            .iter()
            .zip(test.item(i))
            .map(|(xh, xv)| 0.5 * (xh - xv) * (xh - xv))
            .sum::<f64>();
        kl_sum += posterior.kl_for_sample(&sample);
    }
    let n = test.len() as f64;
    Ok(Losses { neg_elbo: (recon_sum + kl_sum) / n, l2: recon_sum / n })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: VaeModel,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &VaeModel, path: &Path) -> Result<()> {
    let file = CheckpointFile { version: CHECKPOINT_VERSION, model: model.clone() };
    let json = serde_json::to_string(&file).map_err(|e| Error::Format {
        context: format!("checkpoint encode: {e}"),
    })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VaeModel> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        context: format!("checkpoint decode: {e}"),
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            context: format!("checkpoint version {} unsupported", file.version),
        });
    }
    file.model.validate()?;
    Ok(file.model)
}
