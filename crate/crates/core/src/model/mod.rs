//! A miniature quantized spike-driven transformer.
//!
//! Layout: stride-2 conv stem, stride-2 conv stages, a stride-2 embedding
//! convolution into `dim` channels, then transformer blocks over the token
//! grid, mean pooling and a linear head. The embedding output is a membrane
//! stream `u`; every block reads it through the neuron and adds to it:
//!
//! ```text
//! u += proj(attn(SN(u)))
//! u += mlp2(SN(mlp1(SN(u))))
//! ```
//!
//! Training runs a single pass of multi-level activations per time step.
//! Inference runs on a fused copy and works on integer spike counts, each of
//! which stands for up to `b` binary spikes.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

use serde::Serialize;

use crate::attention::{AttentionKind, AttentionTriple, Qsdsa};
use crate::attention::qsdsa::QsdsaCache;
use crate::energy::{EnergyLedger, LayerCost, LayerKind};
use crate::error::{Error, Result};
use crate::layers::{ActCache, Activation, Synapse, WeightCache, WeightLayer};
use crate::neuron::IeLifParams;
use crate::param::{Mode, Param};
use crate::real::Real;
use crate::rng::Rng;
use crate::ste::ClipRound;
use crate::tensor::{ConvGeom, Tensor};

pub use config::{ModelConfig, NeuronKind, OptimKind, Settings, TrainConfig};

const CONV: Synapse = Synapse::Conv { k: 3, stride: 2, pad: 1 };

#[derive(Clone, Debug)]
pub struct Block<T = f32> {
    pub attn: Qsdsa<T>,
    pub proj: WeightLayer<T>,
    pub mlp1: WeightLayer<T>,
    pub mlp2: WeightLayer<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub stem: WeightLayer<T>,
    pub convs: Vec<WeightLayer<T>>,
    pub embed: WeightLayer<T>,
    pub blocks: Vec<Block<T>>,
    pub head: WeightLayer<T>,
    pub act: Activation,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    act_in: ActCache<T>,
    attn: QsdsaCache<T>,
    proj: WeightCache<T>,
    act_mid: ActCache<T>,
    mlp1: WeightCache<T>,
    act_hidden: ActCache<T>,
    mlp2: WeightCache<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    stem: WeightCache<T>,
    stem_act: ActCache<T>,
    convs: Vec<(WeightCache<T>, ActCache<T>)>,
    embed: WeightCache<T>,
    embed_shape: Vec<usize>,
    blocks: Vec<BlockTrace<T>>,
    final_act: ActCache<T>,
    head: WeightCache<T>,
    batch: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[B, classes]`, averaged over time steps.
    pub logits: Tensor<T>,
    /// One q/k/v record per transformer block.
    pub records: Vec<AttentionTriple<T>>,
    pub trace: Trace<T>,
}

/// Spike totals of one neuron layer over an inference run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFiring {
    pub id: String,
    pub spikes: u64,
    /// Neurons per sample.
    pub neurons: usize,
    pub samples: usize,
    /// Binary steps per sample.
    pub steps: usize,
}

impl LayerFiring {
    pub fn rate(&self) -> Result<f64> {
        crate::energy::record_firing_rate(self.spikes, self.neurons, self.steps, self.samples)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FiringStats {
    pub layers: Vec<LayerFiring>,
}

impl FiringStats {
    /// Accumulate another run over the same model.
    pub fn merge(&mut self, other: &FiringStats) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return Ok(());
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::State("firing statistics of different models".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.spikes += b.spikes;
            a.samples += b.samples;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&LayerFiring> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::Accounting(format!("no firing record for {id}")))
    }

    pub fn rate(&self, id: &str) -> Result<f64> {
        self.get(id)?.rate()
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput<T> {
    pub logits: Tensor<T>,
    pub firing: FiringStats,
    /// q/k/v spike counts per block, `[R·N, D]` each.
    pub attention_counts: Vec<[Tensor<T>; 3]>,
}

fn repeat_steps<T: Real>(x: &Tensor<T>, steps: usize) -> Tensor<T> {
    if steps == 1 {
        return x.clone();
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= steps;
    let mut data = Vec::with_capacity(x.len() * steps);
    for _ in 0..steps {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data).expect("repeated batch")
}

/// `[R, D, h, w]` → `[R·h·w, D]`.
fn to_tokens<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let s = m.shape();
    let (r, d, n) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![T::zero(); m.len()];
    let src = m.data();
    for ri in 0..r {
        for c in 0..d {
            for p in 0..n {
                out[(ri * n + p) * d + c] = src[(ri * d + c) * n + p];
            }
        }
    }
    Tensor::new(vec![r * n, d], out).expect("token layout")
}

fn from_tokens<T: Real>(u: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let (r, d, n) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); u.len()];
    let src = u.data();
    for ri in 0..r {
        for c in 0..d {
            for p in 0..n {
                out[(ri * d + c) * n + p] = src[(ri * n + p) * d + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("grid layout")
}

/// Mean over the tokens of each row group.
fn pool<T: Real>(a: &Tensor<T>, tokens: usize) -> Tensor<T> {
    let d = a.shape()[1];
    let r = a.shape()[0] / tokens;
    let n = T::c(tokens as f64);
    let mut out = vec![T::zero(); r * d];
    for ri in 0..r {
        for t in 0..tokens {
            let row = &a.data()[(ri * tokens + t) * d..(ri * tokens + t + 1) * d];
            for (o, &v) in out[ri * d..(ri + 1) * d].iter_mut().zip(row) {
                *o = *o + v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v / n);
    Tensor::new(vec![r, d], out).expect("pooled")
}

fn pool_backward<T: Real>(dp: &Tensor<T>, tokens: usize) -> Tensor<T> {
    let (r, d) = (dp.shape()[0], dp.shape()[1]);
    let inv = T::one() / T::c(tokens as f64);
    let mut out = Vec::with_capacity(r * tokens * d);
    for ri in 0..r {
        for _ in 0..tokens {
            out.extend(dp.data()[ri * d..(ri + 1) * d].iter().map(|&g| g * inv));
        }
    }
    Tensor::new(vec![r * tokens, d], out).expect("unpooled")
}

/// Mean over the time-major blocks of `[T·B, K]`.
fn time_mean<T: Real>(lt: &Tensor<T>, steps: usize) -> Tensor<T> {
    if steps == 1 {
        return lt.clone();
    }
    let (rows, k) = (lt.shape()[0], lt.shape()[1]);
    let b = rows / steps;
    let mut out = vec![T::zero(); b * k];
    for t in 0..steps {
        for (o, &v) in out.iter_mut().zip(&lt.data()[t * b * k..(t + 1) * b * k]) {
            *o = *o + v;
        }
    }
    let s = T::c(steps as f64);
    out.iter_mut().for_each(|v| *v = *v / s);
    Tensor::new(vec![b, k], out).expect("time mean")
}

fn time_mean_backward<T: Real>(d: &Tensor<T>, steps: usize) -> Tensor<T> {
    if steps == 1 {
        return d.clone();
    }
    let inv = T::one() / T::c(steps as f64);
    let g = d.scale(inv);
    repeat_steps(&g, steps)
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let act = match c.neuron {
            NeuronKind::IeLif => Activation::IeLif {
                p: IeLifParams::new(c.bits)?,
                tau: c.tau,
            },
            NeuronKind::Relu => Activation::Relu,
        };
        let wb = c.weight_bits;
        let stem = WeightLayer::new("stem", CONV, c.in_channels, c.stem_channels, wb, false, true, rng)?;
        let mut convs = Vec::with_capacity(c.conv_dims.len());
        let mut prev = c.stem_channels;
        for (i, &d) in c.conv_dims.iter().enumerate() {
            convs.push(WeightLayer::new(&format!("conv{}", i + 1), CONV, prev, d, wb, false, true, rng)?);
            prev = d;
        }
        let embed = WeightLayer::new("embed", CONV, prev, c.dim, wb, false, true, rng)?;
        let hidden = c.dim * c.mlp_ratio;
        let mut blocks = Vec::with_capacity(c.blocks);
        for l in 0..c.blocks {
            let lin = |name: &str, i: usize, o: usize, bias: bool, norm: bool, rng: &mut Rng| {
                WeightLayer::new(&format!("block{l}.{name}"), Synapse::Linear, i, o, wb, bias, norm, rng)
            };
            let attn = Qsdsa {
                q: lin("q", c.dim, c.dim, !c.mprf, c.mprf, rng)?,
                k: lin("k", c.dim, c.dim, !c.mprf, c.mprf, rng)?,
                v: lin("v", c.dim, c.dim, !c.mprf, c.mprf, rng)?,
                heads: c.heads,
                kind: c.attention,
                neuron: act,
            };
            blocks.push(Block {
                attn,
                proj: lin("proj", c.dim, c.dim, false, true, rng)?,
                mlp1: lin("mlp1", c.dim, hidden, false, true, rng)?,
                mlp2: lin("mlp2", hidden, c.dim, false, true, rng)?,
            });
        }
        let head = WeightLayer::new("head", Synapse::Linear, c.dim, c.classes, wb, true, false, rng)?;
        Ok(Self {
            config: c.clone(),
            stem,
            convs,
            embed,
            blocks,
            head,
            act,
        })
    }

    /// All weight layers in a fixed order.
    pub fn layers(&self) -> Vec<&WeightLayer<T>> {
        let mut v = vec![&self.stem];
        v.extend(self.convs.iter());
        v.push(&self.embed);
        for b in &self.blocks {
            v.extend([&b.attn.q, &b.attn.k, &b.attn.v, &b.proj, &b.mlp1, &b.mlp2]);
        }
        v.push(&self.head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut WeightLayer<T>> {
        let mut v = vec![&mut self.stem];
        v.extend(self.convs.iter_mut());
        v.push(&mut self.embed);
        for b in &mut self.blocks {
            v.extend([&mut b.attn.q, &mut b.attn.k, &mut b.attn.v, &mut b.proj, &mut b.mlp1, &mut b.mlp2]);
        }
        v.push(&mut self.head);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for l in self.layers_mut() {
            l.visit_params(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn is_fused(&self) -> bool {
        self.stem.is_fused()
    }

    /// Fold rectifiers and frozen statistics into the weights of every layer.
    pub fn fuse(&mut self) -> Result<()> {
        if self.is_fused() {
            return Err(Error::State("model is already fused".into()));
        }
        for l in self.layers_mut() {
            l.fuse()?;
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    /// q/k/v records per kind: one per block and head.
    pub fn head_records(&self) -> usize {
        self.blocks.len() * self.config.heads
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match x.shape() {
            [b, ch, h, w] if (*ch, *h, *w) == (c.in_channels, c.height, c.width) => Ok(*b),
            s => Err(Error::shape(format!(
                "model expects [B, {}, {}, {}], got {s:?}",
                c.in_channels, c.height, c.width
            ))),
        }
    }

    /// Training-path forward. With `Mode::Eval` rectifiers use their running
    /// statistics; a fused model runs its deployed affine maps here.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, ctx: &mut ClipRound<T>) -> Result<ForwardOutput<T>> {
        let batch = self.check_input(x)?;
        let steps = self.config.t_train;
        let tokens = self.tokens();
        let act = self.act;
        let xr = repeat_steps(x, steps);
        let (m, stem) = self.stem.forward(&xr, mode, ctx)?;
        let (mut a, stem_act) = act.forward(&m, steps, ctx);
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &mut self.convs {
            let (m, c) = conv.forward(&a, mode, ctx)?;
            let (next, ac) = act.forward(&m, steps, ctx);
            a = next;
            convs.push((c, ac));
        }
        let (m, embed) = self.embed.forward(&a, mode, ctx)?;
        let embed_shape = m.shape().to_vec();
        let mut u = to_tokens(&m);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut records = Vec::with_capacity(self.blocks.len());
        for blk in &mut self.blocks {
            let (a, act_in) = act.forward(&u, steps, ctx);
            let out = blk.attn.forward(&a, tokens, steps, mode, ctx)?;
            let (p, proj) = blk.proj.forward(&out.y, mode, ctx)?;
            u.add_assign(&p)?;
            let (a2, act_mid) = act.forward(&u, steps, ctx);
            let (m1, mlp1) = blk.mlp1.forward(&a2, mode, ctx)?;
            let (h, act_hidden) = act.forward(&m1, steps, ctx);
            let (m2, mlp2) = blk.mlp2.forward(&h, mode, ctx)?;
            u.add_assign(&m2)?;
            records.push(out.records);
            blocks.push(BlockTrace {
                act_in,
                attn: out.cache,
                proj,
                act_mid,
                mlp1,
                act_hidden,
                mlp2,
            });
        }
        let (f, final_act) = act.forward(&u, steps, ctx);
        let pooled = pool(&f, tokens);
        let (lt, head) = self.head.forward(&pooled, mode, ctx)?;
        let logits = time_mean(&lt, steps);
        Ok(ForwardOutput {
            logits,
            records,
            trace: Trace {
                stem,
                stem_act,
                convs,
                embed,
                embed_shape,
                blocks,
                final_act,
                head,
                batch,
            },
        })
    }

    /// Accumulate parameter gradients from `∂L/∂logits` and optional extra
    /// gradients on each block's q/k/v membranes.
    pub fn backward(&mut self, trace: &Trace<T>, dlogits: &Tensor<T>, d_mem: Option<&[[Tensor<T>; 3]]>) -> Result<()> {
        if dlogits.shape() != [trace.batch, self.config.classes] {
            return Err(Error::shape(format!("logit gradient {:?}", dlogits.shape())));
        }
        if let Some(d) = d_mem {
            if d.len() != self.blocks.len() {
                return Err(Error::shape(format!("{} membrane gradients for {} blocks", d.len(), self.blocks.len())));
            }
        }
        let steps = self.config.t_train;
        let tokens = self.tokens();
        let act = self.act;
        let dlt = time_mean_backward(dlogits, steps);
        let dpool = self.head.backward(&trace.head, &dlt, true)?.expect("dx requested");
        let mut du = act.backward(&trace.final_act, &pool_backward(&dpool, tokens));
        for (l, (blk, bt)) in self.blocks.iter_mut().zip(&trace.blocks).enumerate().rev() {
            let dh = blk.mlp2.backward(&bt.mlp2, &du, true)?.expect("dx requested");
            let dm1 = act.backward(&bt.act_hidden, &dh);
            let da2 = blk.mlp1.backward(&bt.mlp1, &dm1, true)?.expect("dx requested");
            du.add_assign(&act.backward(&bt.act_mid, &da2))?;
            let dy = blk.proj.backward(&bt.proj, &du, true)?.expect("dx requested");
            let extra = d_mem.map(|d| [&d[l][0], &d[l][1], &d[l][2]]);
            let da = blk.attn.backward(&bt.attn, &dy, extra)?;
            du.add_assign(&act.backward(&bt.act_in, &da))?;
        }
        let dm = from_tokens(&du, &trace.embed_shape);
        let mut da = self.embed.backward(&trace.embed, &dm, true)?.expect("dx requested");
        for (conv, (c, ac)) in self.convs.iter_mut().zip(&trace.convs).rev() {
            let dm = act.backward(ac, &da);
            da = conv.backward(c, &dm, true)?.expect("dx requested");
        }
        let dm = act.backward(&trace.stem_act, &da);
        self.stem.backward(&trace.stem, &dm, false)?;
        Ok(())
    }

    /// Deployed inference: integer spike counts through fused layers.
    ///
    /// Every count `n ∈ {0..b}` is checked to be a whole number of binary
    /// spikes and tallied for the firing statistics.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<InferOutput<T>> {
        if !self.is_fused() {
            return Err(Error::State("inference requires a fused model".into()));
        }
        let levels = self
            .act
            .levels()
            .ok_or_else(|| Error::State("only spiking models have a spike inference path".into()))?;
        let batch = self.check_input(x)?;
        let steps = self.config.t_train;
        let tokens = self.tokens();
        let virt = steps * levels as usize;
        let b = T::c(levels as f64);
        let mut firing = FiringStats::default();
        let mut record = |id: String, n: &Tensor<T>| -> Result<()> {
            let mut spikes = 0u64;
            for &c in n.data() {
                if c < T::zero() || c > b || c.round_even() != c {
                    return Err(Error::State(format!("{id}: activation {} is not a spike count", c.as_f64())));
                }
                spikes += c.as_f64() as u64;
            }
            firing.layers.push(LayerFiring {
                id,
                spikes,
                neurons: n.len() / (steps * batch),
                samples: batch,
                steps: virt,
            });
            Ok(())
        };
        let fire = |m: &Tensor<T>| self.act.fire_counts(m, steps);
        let xr = repeat_steps(x, steps);
        let mut n = fire(&self.stem.forward_counts(&xr, 1)?)?;
        record("stem".into(), &n)?;
        for conv in &self.convs {
            n = fire(&conv.forward_counts(&n, levels)?)?;
            record(conv.name.clone(), &n)?;
        }
        let mut u = to_tokens(&self.embed.forward_counts(&n, levels)?);
        let mut attention_counts = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let nin = fire(&u)?;
            record(format!("block{l}.in"), &nin)?;
            let (o, qkv) = blk.attn.forward_counts(&nin, tokens, steps)?;
            for (p, c) in ["q", "k", "v"].iter().zip(&qkv) {
                record(format!("block{l}.{p}"), c)?;
            }
            record(format!("block{l}.attn"), &o)?;
            u.add_assign(&blk.proj.forward_counts(&o, levels)?)?;
            let n2 = fire(&u)?;
            record(format!("block{l}.mlp_in"), &n2)?;
            let hc = fire(&blk.mlp1.forward_counts(&n2, levels)?)?;
            record(format!("block{l}.hidden"), &hc)?;
            u.add_assign(&blk.mlp2.forward_counts(&hc, levels)?)?;
            attention_counts.push(qkv);
        }
        let nf = fire(&u)?;
        record("final".into(), &nf)?;
        let lt = self.head.forward_counts(&pool(&nf, tokens), levels)?;
        Ok(InferOutput {
            logits: time_mean(&lt, steps),
            firing,
            attention_counts,
        })
    }

    /// Convolution geometries of stem, conv stages and embedding.
    fn conv_geoms(&self) -> Result<Vec<(String, ConvGeom)>> {
        let c = &self.config;
        let (mut h, mut w) = (c.height, c.width);
        let mut out = Vec::new();
        let mut layers = vec![&self.stem];
        layers.extend(self.convs.iter());
        layers.push(&self.embed);
        for l in layers {
            let g = ConvGeom::new(l.c_in(), h, w, l.weight.value.shape(), 2, 1)?;
            (h, w) = (g.h_out, g.w_out);
            out.push((l.name.clone(), g));
        }
        Ok(out)
    }

    /// Per-layer operation counts with inference-time firing rates.
    pub fn energy_ledger(&self, firing: &FiringStats) -> Result<EnergyLedger> {
        let c = &self.config;
        let virt = c.t_infer();
        let (n, d) = (self.tokens() as f64, c.dim as f64);
        let hidden = d * c.mlp_ratio as f64;
        let row = |id: String, kind: LayerKind, flops: f64, fr: f64| LayerCost {
            id,
            kind,
            flops,
            fr: Some(fr),
            timesteps: virt,
            weight_bits: c.weight_bits,
            mac: false,
            lowbit_mult: None,
        };
        let mut ledger = EnergyLedger::default();
        let geoms = self.conv_geoms()?;
        let mut prev = String::new();
        for (i, (name, g)) in geoms.iter().enumerate() {
            if i == 0 {
                ledger.push(LayerCost {
                    id: name.clone(),
                    kind: LayerKind::Conv,
                    flops: g.macs() as f64,
                    fr: None,
                    timesteps: c.t_train,
                    weight_bits: c.weight_bits,
                    mac: true,
                    lowbit_mult: c.weight_bits.filter(|b| (2..=4).contains(b)),
                });
            } else {
                ledger.push(row(name.clone(), LayerKind::Conv, g.macs() as f64, firing.rate(&prev)?));
            }
            prev = name.clone();
        }
        for l in 0..self.blocks.len() {
            let fr_in = firing.rate(&format!("block{l}.in"))?;
            let fr_qkv = (firing.rate(&format!("block{l}.q"))?
                + firing.rate(&format!("block{l}.k"))?
                + firing.rate(&format!("block{l}.v"))?)
                / 3.0;
            ledger.push(row(format!("block{l}.qkv"), LayerKind::Attention, 3.0 * n * d * d, fr_in));
            ledger.push(row(format!("block{l}.attn"), LayerKind::Attention, n * d * d, fr_qkv));
            ledger.push(row(format!("block{l}.proj"), LayerKind::Fc, n * d * d, firing.rate(&format!("block{l}.attn"))?));
            ledger.push(row(format!("block{l}.mlp1"), LayerKind::Fc, n * d * hidden, firing.rate(&format!("block{l}.mlp_in"))?));
            ledger.push(row(format!("block{l}.mlp2"), LayerKind::Fc, n * hidden * d, firing.rate(&format!("block{l}.hidden"))?));
        }
        ledger.push(row("head".into(), LayerKind::Fc, d * c.classes as f64, firing.rate("final")?));
        Ok(ledger)
    }

    pub fn is_spiking(&self) -> bool {
        matches!(self.config.attention, AttentionKind::Spike { .. }) && self.act.levels().is_some()
    }
}
