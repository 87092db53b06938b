//! Four-branch attention U-Net with learned softmax fusion of branch logits.

use hmsv_tensor::ops::BatchNormStats;
use hmsv_tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FUSION_PRIOR: [f64; 4] = [0.40, 0.25, 0.20, 0.15];
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub dropout: f64,
    pub in_channels: usize,
}

impl BranchConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config(
                format!("{name}.channels"),
                "at least one level",
            ));
        }
        let levels = 1usize << self.channels.len();
        if self.resolution == 0 || !self.resolution.is_multiple_of(levels) {
            return Err(Error::config(
                format!("{name}.resolution"),
                format!("{} is not divisible by {levels}", self.resolution),
            ));
        }
        let mut all = self.channels.clone();
        all.push(self.bottleneck);
        if all[0] < 2 || all.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                format!("{name}.channels"),
                "channels must be strictly increasing and at least 2",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(
                format!("{name}.dropout"),
                "must lie in [0, 1)",
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::config(
                format!("{name}.in_channels"),
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub full_resolution: usize,
    pub branches: [BranchConfig; 4],
    pub fusion_prior: [f64; 4],
}

impl ModelConfig {
    /// Branch resolutions `R, R/2, R/4, R/8` sharing one channel schedule.
    pub fn uniform(full: usize, channels: &[usize], bottleneck: usize, dropout: f64) -> Self {
        let branch = |k: usize| BranchConfig {
            resolution: full >> k,
            channels: channels.to_vec(),
            bottleneck,
            dropout,
            in_channels: 4,
        };
        ModelConfig {
            full_resolution: full,
            branches: [branch(0), branch(1), branch(2), branch(3)],
            fusion_prior: FUSION_PRIOR,
        }
    }

    pub fn paper() -> Self {
        Self::uniform(512, &[64, 128, 256], 512, 0.4)
    }

    pub fn toy() -> Self {
        Self::uniform(64, &[8, 16, 32], 64, 0.4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.full_resolution == 0 {
            return Err(Error::config("model.resolution", "must be positive"));
        }
        for (k, b) in self.branches.iter().enumerate() {
            b.validate(&format!("model.branch{}", k + 1))?;
        }
        let s: f64 = self.fusion_prior.iter().sum();
        if self.fusion_prior.iter().any(|&p| p <= 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "model.fusion_prior",
                "must be positive and sum to 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    ConvBias,
    BnGamma,
    BnBeta,
    FusionLogits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Ordered parameter inventory of a model plus the number of batch-norm
/// layers. The forward pass consumes parameters in exactly this order.
#[derive(Debug, Default)]
struct Schema {
    params: Vec<ParamSpec>,
    bn_channels: Vec<usize>,
}

impl Schema {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            kind: ParamKind::ConvKernel,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            kind: ParamKind::ConvBias,
        });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![c],
            kind: ParamKind::BnGamma,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![c],
            kind: ParamKind::BnBeta,
        });
        self.bn_channels.push(c);
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(name, cin, cout, 3);
        self.bn(&format!("{name}.bn"), cout);
    }

    fn double(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv_bn(&format!("{name}.conv1"), cin, cout);
        self.conv_bn(&format!("{name}.conv2"), cout, cout);
    }

    fn branch(&mut self, p: &str, cfg: &BranchConfig) {
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            self.double(&format!("{p}.enc{i}"), cin, c);
            cin = c;
        }
        self.double(&format!("{p}.bottleneck"), cin, cfg.bottleneck);
        let mut below = cfg.bottleneck;
        for (i, &c) in cfg.channels.iter().enumerate().rev() {
            let inter = (c / 2).max(1);
            self.conv_bn(&format!("{p}.dec{i}.up"), below, c);
            self.conv(&format!("{p}.dec{i}.gate.wg"), c, inter, 1);
            self.conv(&format!("{p}.dec{i}.gate.wx"), c, inter, 1);
            self.conv(&format!("{p}.dec{i}.gate.psi"), inter, 1, 1);
            self.double(&format!("{p}.dec{i}"), 2 * c, c);
            below = c;
        }
        self.conv(&format!("{p}.head"), cfg.channels[0], 1, 1);
    }

    fn model(cfg: &ModelConfig) -> Schema {
        let mut s = Schema::default();
        for (k, b) in cfg.branches.iter().enumerate() {
            s.branch(&format!("s{}", k + 1), b);
        }
        s.params.push(ParamSpec {
            name: "fusion.logits".into(),
            shape: vec![4],
            kind: ParamKind::FusionLogits,
        });
        s
    }
}

/// Ordered parameter inventory (names, shapes, kinds).
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    Schema::model(cfg).params
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub per_branch: [usize; 4],
    pub fusion: usize,
    pub total: usize,
}

/// Exact number of trainable scalars.
pub fn parameter_count(cfg: &ModelConfig) -> ParamCount {
    let mut per_branch = [0; 4];
    for (k, b) in cfg.branches.iter().enumerate() {
        let mut s = Schema::default();
        s.branch("b", b);
        per_branch[k] = s
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
    }
    ParamCount {
        per_branch,
        fusion: 4,
        total: per_branch.iter().sum::<usize>() + 4,
    }
}

/// Trainable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<Tensor<T>>,
    pub bn: Vec<BatchNormStats<T>>,
}

impl<T: Real> Model<T> {
    /// Kaiming-normal kernels, zero biases, unit/zero batch-norm affine
    /// parameters and fusion logits `ln(prior)`.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let schema = Schema::model(config);
        let mut params = Vec::with_capacity(schema.params.len());
        for spec in &schema.params {
            let n: usize = spec.shape.iter().product();
            let t = match spec.kind {
                ParamKind::ConvKernel => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&spec.shape, |_| T::of(normal.sample(rng)))
                }
                ParamKind::ConvBias | ParamKind::BnBeta => Tensor::zeros(&spec.shape),
                ParamKind::BnGamma => Tensor::ones(&spec.shape),
                ParamKind::FusionLogits => {
                    let logits: Vec<f64> = config.fusion_prior.iter().map(|p| p.ln()).collect();
                    Tensor::from_f64(&[n], &logits)?
                }
            };
            params.push(t);
        }
        Ok(Model {
            config: config.clone(),
            specs: schema.params,
            params,
            bn: schema
                .bn_channels
                .iter()
                .map(|&c| BatchNormStats::new(c))
                .collect(),
        })
    }

    /// Reassembles a model from stored tensors, checking them against the
    /// configuration's inventory.
    pub fn from_parts(
        config: &ModelConfig,
        params: Vec<Tensor<T>>,
        bn: Vec<BatchNormStats<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let schema = Schema::model(config);
        if params.len() != schema.params.len() || bn.len() != schema.bn_channels.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters and {} norm layers, got {} and {}",
                schema.params.len(),
                schema.bn_channels.len(),
                params.len(),
                bn.len()
            )));
        }
        for (spec, p) in schema.params.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        for (&c, st) in schema.bn_channels.iter().zip(&bn) {
            if st.mean.len() != c || st.var.len() != c {
                return Err(Error::invalid("norm statistics channel count"));
            }
        }
        Ok(Model {
            config: config.clone(),
            specs: schema.params,
            params,
            bn,
        })
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var<T>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn fusion_logits(&self) -> &Tensor<T> {
        self.params.last().expect("fusion logits")
    }

    /// Softmax of the fusion logits, in `f64`.
    pub fn fusion_weights(&self) -> [f64; 4] {
        softmax4(&self.fusion_logits().to_f64_vec())
    }
}

pub fn softmax4(w: &[f64]) -> [f64; 4] {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s, e[3] / s]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Walks bound parameters and batch-norm statistics in schema order.
pub struct Forward<'a, T: Real> {
    tape: &'a Tape<T>,
    vars: &'a [Var<T>],
    bn: &'a mut [BatchNormStats<T>],
    mode: Mode,
    next_param: usize,
    next_bn: usize,
}

/// Additive attention gate: `sigmoid(psi(relu(Wg gate + Wx skip))) * skip`.
pub fn attention_gate<T: Real>(
    tape: &Tape<T>,
    skip: &Var<T>,
    gate: &Var<T>,
    wg: (&Var<T>, &Var<T>),
    wx: (&Var<T>, &Var<T>),
    psi: (&Var<T>, &Var<T>),
) -> Result<Var<T>> {
    let [n, c, h, w] = skip.value().dims4()?;
    if gate.shape()[2..] != [h, w] || gate.shape()[0] != n {
        return Err(Error::invalid(format!(
            "gate {:?} not aligned with skip {:?}",
            gate.shape(),
            skip.shape()
        )));
    }
    if wx.0.shape()[1] != c || wg.0.shape()[1] != gate.shape()[1] {
        return Err(Error::invalid("attention gate channel mismatch"));
    }
    let g = tape.conv2d(gate, wg.0, wg.1, 0, 1)?;
    let x = tape.conv2d(skip, wx.0, wx.1, 0, 1)?;
    let a = tape.relu(&tape.add(&g, &x)?);
    let alpha = tape.sigmoid(&tape.conv2d(&a, psi.0, psi.1, 0, 1)?);
    Ok(tape.mul(&broadcast_channels(tape, &alpha, c)?, skip)?)
}

/// Repeats a single-channel map `c` times along the channel axis.
fn broadcast_channels<T: Real>(tape: &Tape<T>, x: &Var<T>, c: usize) -> Result<Var<T>> {
    if c == 1 {
        return Ok(x.clone());
    }
    let copies: Vec<Var<T>> = (0..c).map(|_| x.clone()).collect();
    Ok(tape.concat_channels(&copies)?)
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(
        tape: &'a Tape<T>,
        vars: &'a [Var<T>],
        bn: &'a mut [BatchNormStats<T>],
        mode: Mode,
    ) -> Self {
        Forward {
            tape,
            vars,
            bn,
            mode,
            next_param: 0,
            next_bn: 0,
        }
    }

    fn take(&mut self) -> &'a Var<T> {
        let v = &self.vars[self.next_param];
        self.next_param += 1;
        v
    }

    fn conv(&mut self, x: &Var<T>, padding: usize) -> Result<Var<T>> {
        let k = self.take();
        let b = self.take();
        Ok(self.tape.conv2d(x, k, b, padding, 1)?)
    }

    fn conv_bn_relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv(x, 1)?;
        let gamma = self.take();
        let beta = self.take();
        let stats = &mut self.bn[self.next_bn];
        self.next_bn += 1;
        let y = self.tape.batchnorm2d(
            &y,
            gamma,
            beta,
            stats,
            self.mode == Mode::Train,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        Ok(self.tape.relu(&y))
    }

    fn double(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv_bn_relu(x)?;
        self.conv_bn_relu(&y)
    }

    fn gate(&mut self, skip: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
        let (wg, bg) = (self.take(), self.take());
        let (wx, bx) = (self.take(), self.take());
        let (wp, bp) = (self.take(), self.take());
        attention_gate(self.tape, skip, gate, (wg, bg), (wx, bx), (wp, bp))
    }

    fn dropout<R: Rng>(&self, x: &Var<T>, p: f64, rng: &mut R) -> Result<Var<T>> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x.clone());
        }
        let [n, c, h, w] = x.value().dims4()?;
        let keep = 1.0 / (1.0 - p);
        let channel: Vec<T> = (0..n * c)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    T::of(keep)
                }
            })
            .collect();
        let mask = Tensor::from_fn(&[n, c, h, w], |i| channel[i / (h * w)]);
        Ok(self.tape.mul(x, &self.tape.constant(mask))?)
    }

    /// One branch: `[N, C_in, r, r]` to a `[N, 1, r, r]` logit map.
    pub fn branch<R: Rng>(
        &mut self,
        cfg: &BranchConfig,
        x: &Var<T>,
        rng: &mut R,
    ) -> Result<Var<T>> {
        let [_, c, h, w] = x.value().dims4()?;
        if c != cfg.in_channels || h != cfg.resolution || w != cfg.resolution {
            return Err(Error::invalid(format!(
                "branch expects [N,{},{r},{r}], got {:?}",
                cfg.in_channels,
                x.shape(),
                r = cfg.resolution
            )));
        }
        let mut skips = Vec::with_capacity(cfg.channels.len());
        let mut y = x.clone();
        for _ in &cfg.channels {
            let s = self.double(&y)?;
            y = self.tape.max_pool2d(&s, 2)?;
            skips.push(s);
        }
        y = self.double(&y)?;
        y = self.dropout(&y, cfg.dropout, rng)?;
        for skip in skips.iter().rev() {
            let (sh, sw) = (skip.shape()[2], skip.shape()[3]);
            let up = self.tape.upsample_bilinear(&y, sh, sw)?;
            let up = self.conv_bn_relu(&up)?;
            let gated = self.gate(skip, &up)?;
            let cat = self.tape.concat_channels(&[gated, up])?;
            y = self.double(&cat)?;
        }
        self.conv(&y, 0)
    }
}

/// Forward pass results. Branch maps are at native resolution.
#[derive(Debug, Clone)]
pub struct ModelOutputs<T: Real> {
    pub fused: Var<T>,
    pub branches: Vec<Var<T>>,
    pub weights: [f64; 4],
}

/// Fused logits: `sum_k softmax(w)_k * upsample(L_k)`.
pub fn fuse<T: Real>(
    tape: &Tape<T>,
    branch_logits: &[Var<T>],
    logits: &Var<T>,
    full: usize,
) -> Result<Var<T>> {
    let s = tape.softmax(logits)?;
    let mut acc: Option<Var<T>> = None;
    for (k, l) in branch_logits.iter().enumerate() {
        let up = tape.upsample_bilinear(l, full, full)?;
        let term = tape.scale(&up, &tape.select(&s, k)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(&a, &term)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("no branch outputs"))
}

impl<T: Real> Model<T> {
    /// Runs all four branches and the fusion. `vars` must come from
    /// [`Model::bind`] on the same tape.
    pub fn forward<R: Rng>(
        &mut self,
        tape: &Tape<T>,
        vars: &[Var<T>],
        x: &Var<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutputs<T>> {
        let full = self.config.full_resolution;
        let [_, _, h, w] = x.value().dims4()?;
        if h != full || w != full {
            return Err(Error::invalid(format!(
                "input {h}x{w}, model expects {full}x{full}"
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::invalid("bound parameter count mismatch"));
        }
        let mut fwd = Forward::new(tape, vars, &mut self.bn, mode);
        let mut branches = Vec::with_capacity(4);
        for cfg in &self.config.branches {
            let xi = tape.upsample_bilinear(x, cfg.resolution, cfg.resolution)?;
            branches.push(fwd.branch(cfg, &xi, rng)?);
        }
        let logits = fwd.take();
        debug_assert_eq!(fwd.next_param, vars.len());
        debug_assert_eq!(fwd.next_bn, fwd.bn.len());
        let fused = fuse(tape, &branches, logits, full)?;
        Ok(ModelOutputs {
            fused,
            branches,
            weights: softmax4(&logits.value().to_f64_vec()),
        })
    }

    /// Eval-mode fused logits without recording gradients.
    pub fn predict_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let vars = self.bind(&tape);
        let xv = tape.constant(x.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, &vars, &xv, Mode::Eval, &mut rng)?;
        Ok(out.fused.value().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_forward_shapes() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::<f32>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 4, 64, 64], |i| (i % 7) as f32 / 7.0);
        let out = m.predict_logits(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn resolution_must_divide() {
        let mut cfg = ModelConfig::toy();
        cfg.branches[3].resolution = 12;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
