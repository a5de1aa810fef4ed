use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the layer input `x` and output `y`.
    #[inline]
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Same-padded 1-D convolution, activation, then average pooling by two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
}

/// Shared trunk (optional conv blocks, then dense layers) feeding a linear
/// mean head and a linear scale head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    #[serde(default)]
    pub conv: Vec<ConvBlock>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    /// Dense-only trunk.
    pub fn dense(input_len: usize, hidden: &[usize]) -> Self {
        Architecture {
            input_len,
            conv: Vec::new(),
            hidden: hidden.to_vec(),
            activation: Activation::Relu,
        }
    }

    /// Three conv blocks (16, 32, 32 channels, kernel 5) and two dense layers.
    pub fn conv_default(input_len: usize) -> Self {
        Architecture {
            input_len,
            conv: vec![
                ConvBlock { channels: 16, kernel: 5 },
                ConvBlock { channels: 32, kernel: 5 },
                ConvBlock { channels: 32, kernel: 5 },
            ],
            hidden: vec![64, 32],
            activation: Activation::Relu,
        }
    }

    fn compile(&self) -> Result<Plan> {
        if self.input_len == 0 {
            return Err(Error::Config("architecture input_len must be positive".into()));
        }
        let mut ops = Vec::new();
        let mut offset = 0usize;
        let (mut ch, mut len) = (1usize, self.input_len);
        for block in &self.conv {
            if block.channels == 0 || block.kernel == 0 || block.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv blocks need channels > 0 and an odd kernel, got {block:?}"
                )));
            }
            if len < 2 {
                return Err(Error::Config(format!(
                    "input length {} is too short for {} pooled conv blocks",
                    self.input_len,
                    self.conv.len()
                )));
            }
            let w = offset;
            let b = w + block.channels * ch * block.kernel;
            offset = b + block.channels;
            ops.push(Op::Conv {
                cin: ch,
                cout: block.channels,
                k: block.kernel,
                len,
                w,
                b,
            });
            ops.push(Op::Act);
            ops.push(Op::Pool { ch: block.channels, len_in: len });
            ch = block.channels;
            len /= 2;
        }
        let mut width = ch * len;
        for &h in &self.hidden {
            if h == 0 {
                return Err(Error::Config("hidden layer width must be positive".into()));
            }
            let w = offset;
            let b = w + h * width;
            offset = b + h;
            ops.push(Op::Dense { nin: width, nout: h, w, b });
            ops.push(Op::Act);
            width = h;
        }
        let mean_head = offset;
        let scale_head = mean_head + width + 1;
        let n_params = scale_head + width + 1;
        Ok(Plan {
            ops,
            features: width,
            mean_head,
            scale_head,
            n_params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        len: usize,
        w: usize,
        b: usize,
    },
    Act,
    Pool {
        ch: usize,
        len_in: usize,
    },
    Dense {
        nin: usize,
        nout: usize,
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    ops: Vec<Op>,
    features: usize,
    /// Offsets of the heads: `features` weights followed by one bias each.
    mean_head: usize,
    scale_head: usize,
    n_params: usize,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const DEFAULT_EPS_SIGMA: f64 = 1e-4;

/// Two-headed regressor: `(y_hat, sigma_hat)` with
/// `sigma_hat = softplus(raw_scale) + eps_sigma`.
///
/// All weights live in one flat parameter vector; the layout is fixed by the
/// architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    arch: Architecture,
    params: Vec<f64>,
    eps_sigma: f64,
    seed: u64,
    plan: Plan,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct Trace {
    acts: Vec<Vec<f64>>,
    raw_scale: f64,
    pub y_hat: f64,
    pub sigma: f64,
}

impl RegressorModel {
    /// Seeded initialization: He-uniform trunk weights, small mean head, zero
    /// scale head, zero biases.
    pub fn new(arch: Architecture, eps_sigma: f64, seed: u64) -> Result<Self> {
        if !(eps_sigma > 0.0 && eps_sigma.is_finite()) {
            return Err(Error::Config(format!("eps_sigma must be > 0, got {eps_sigma}")));
        }
        let plan = arch.compile()?;
        let mut params = vec![0.0; plan.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match arch.activation {
            Activation::Relu => 6.0,
            Activation::Tanh => 3.0,
        };
        for op in &plan.ops {
            let (w, count, fan_in) = match *op {
                Op::Conv { cin, cout, k, w, .. } => (w, cout * cin * k, cin * k),
                Op::Dense { nin, nout, w, .. } => (w, nout * nin, nin),
                _ => continue,
            };
            let limit = (gain / fan_in as f64).sqrt();
            for p in &mut params[w..w + count] {
                *p = rng.random_range(-limit..limit);
            }
        }
        let limit = (3.0 / plan.features as f64).sqrt();
        for p in &mut params[plan.mean_head..plan.mean_head + plan.features] {
            *p = rng.random_range(-limit..limit);
        }
        Ok(RegressorModel {
            arch,
            params,
            eps_sigma,
            seed,
            plan,
        })
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>, eps_sigma: f64, seed: u64) -> Result<Self> {
        let plan = arch.compile()?;
        if params.len() != plan.n_params {
            return Err(Error::Schema(format!(
                "architecture needs {} parameters, got {}",
                plan.n_params,
                params.len()
            )));
        }
        if !(eps_sigma > 0.0) {
            return Err(Error::Schema(format!("eps_sigma must be > 0, got {eps_sigma}")));
        }
        Ok(RegressorModel {
            arch,
            params,
            eps_sigma,
            seed,
            plan,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.plan.n_params
    }

    pub fn eps_sigma(&self) -> f64 {
        self.eps_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    /// Parameter index range of the scale head (weights then bias).
    pub fn scale_head_range(&self) -> std::ops::Range<usize> {
        self.plan.scale_head..self.plan.scale_head + self.plan.features + 1
    }

    /// Parameter index range of the mean head (weights then bias).
    pub fn mean_head_range(&self) -> std::ops::Range<usize> {
        self.plan.mean_head..self.plan.mean_head + self.plan.features + 1
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, f64)> {
        let t = self.trace(x)?;
        Ok((t.y_hat, t.sigma))
    }

    pub fn predict(&self, xs: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.arch.input_len {
            return Err(Error::Shape {
                expected: self.arch.input_len,
                got: x.len(),
            });
        }
        let p = &self.params;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.plan.ops.len() + 1);
        acts.push(x.to_vec());
        for op in &self.plan.ops {
            let input = acts.last().expect("input pushed above");
            let out = match *op {
                Op::Conv { cin, cout, k, len, w, b } => {
                    let pad = k / 2;
                    let mut out = vec![0.0; cout * len];
                    for o in 0..cout {
                        let row = &mut out[o * len..(o + 1) * len];
                        row.fill(p[b + o]);
                        for i in 0..cin {
                            let src = &input[i * len..(i + 1) * len];
                            let kern = &p[w + (o * cin + i) * k..w + (o * cin + i + 1) * k];
                            for (j, &kw) in kern.iter().enumerate() {
                                // out[t] += kw * src[t + j - pad]
                                let lo = pad.saturating_sub(j);
                                let hi = (len + pad).saturating_sub(j).min(len);
                                for t in lo..hi {
                                    row[t] += kw * src[t + j - pad];
                                }
                            }
                        }
                    }
                    out
                }
                Op::Act => input.iter().map(|&v| self.arch.activation.apply(v)).collect(),
                Op::Pool { ch, len_in } => {
                    let len_out = len_in / 2;
                    let mut out = vec![0.0; ch * len_out];
                    for c in 0..ch {
                        for t in 0..len_out {
                            out[c * len_out + t] =
                                0.5 * (input[c * len_in + 2 * t] + input[c * len_in + 2 * t + 1]);
                        }
                    }
                    out
                }
                Op::Dense { nin, nout, w, b } => (0..nout)
                    .map(|o| {
                        let row = &p[w + o * nin..w + (o + 1) * nin];
                        p[b + o] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>()
                    })
                    .collect(),
            };
            acts.push(out);
        }
        let feats = acts.last().expect("non-empty");
        let nf = self.plan.features;
        let head = |off: usize| {
            p[off + nf] + p[off..off + nf].iter().zip(feats).map(|(a, v)| a * v).sum::<f64>()
        };
        let y_hat = head(self.plan.mean_head);
        let raw_scale = head(self.plan.scale_head);
        let sigma = softplus(raw_scale) + self.eps_sigma;
        Ok(Trace {
            acts,
            raw_scale,
            y_hat,
            sigma,
        })
    }

    /// Accumulates `d_yhat * dy_hat/dθ + d_sigma * dsigma/dθ` into `grads`.
    pub fn backward(&self, trace: &Trace, d_yhat: f64, d_sigma: f64, grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.plan.n_params);
        let p = &self.params;
        let nf = self.plan.features;
        let d_raw = d_sigma * sigmoid(trace.raw_scale);
        let feats = trace.acts.last().expect("non-empty");
        let (mh, sh) = (self.plan.mean_head, self.plan.scale_head);
        let mut g = vec![0.0; nf];
        for i in 0..nf {
            grads[mh + i] += d_yhat * feats[i];
            grads[sh + i] += d_raw * feats[i];
            g[i] = d_yhat * p[mh + i] + d_raw * p[sh + i];
        }
        grads[mh + nf] += d_yhat;
        grads[sh + nf] += d_raw;

        for (idx, op) in self.plan.ops.iter().enumerate().rev() {
            let input = &trace.acts[idx];
            let output = &trace.acts[idx + 1];
            g = match *op {
                Op::Act => g
                    .iter()
                    .zip(input.iter().zip(output))
                    .map(|(gv, (&x, &y))| gv * self.arch.activation.grad(x, y))
                    .collect(),
                Op::Pool { ch, len_in } => {
                    let len_out = len_in / 2;
                    let mut gi = vec![0.0; ch * len_in];
                    for c in 0..ch {
                        for t in 0..len_out {
                            let v = 0.5 * g[c * len_out + t];
                            gi[c * len_in + 2 * t] = v;
                            gi[c * len_in + 2 * t + 1] = v;
                        }
                    }
                    gi
                }
                Op::Dense { nin, nout, w, b } => {
                    let mut gi = vec![0.0; nin];
                    for o in 0..nout {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        grads[b + o] += go;
                        let row = w + o * nin;
                        for i in 0..nin {
                            grads[row + i] += go * input[i];
                            gi[i] += go * p[row + i];
                        }
                    }
                    gi
                }
                Op::Conv { cin, cout, k, len, w, b } => {
                    let pad = k / 2;
                    let mut gi = vec![0.0; cin * len];
                    for o in 0..cout {
                        let go = &g[o * len..(o + 1) * len];
                        grads[b + o] += go.iter().sum::<f64>();
                        for i in 0..cin {
                            let src = &input[i * len..(i + 1) * len];
                            let dst = &mut gi[i * len..(i + 1) * len];
                            let kidx = w + (o * cin + i) * k;
                            for j in 0..k {
                                let lo = pad.saturating_sub(j);
                                let hi = (len + pad).saturating_sub(j).min(len);
                                let kw = p[kidx + j];
                                let mut acc = 0.0;
                                for t in lo..hi {
                                    acc += go[t] * src[t + j - pad];
                                    dst[t + j - pad] += go[t] * kw;
                                }
                                grads[kidx + j] += acc;
                            }
                        }
                    }
                    gi
                }
            };
        }
    }
}
