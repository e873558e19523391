//! The six encoder architectures and their save/load format.
//!
//! Every encoder reads a standardized feature vector as a length-`d`,
//! one-channel sequence and produces an embedding of width `e`.

mod layers;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use layers::{time_step, Conv, Dense, Gru, Layout, Lstm, ParamSpec};

/// Current model file format.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default embedding width.
pub const DEFAULT_EMBED_DIM: usize = 32;

/// Rows per forward pass when embedding a whole dataset.
const INFERENCE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SimpleCnn,
    DeepCnn,
    CnnLstm,
    Abad,
    HybridCnnGru,
    Crnim,
}

impl Architecture {
    /// All architectures in comparison-table order.
    pub const ALL: [Architecture; 6] = [
        Architecture::SimpleCnn,
        Architecture::DeepCnn,
        Architecture::CnnLstm,
        Architecture::Abad,
        Architecture::HybridCnnGru,
        Architecture::Crnim,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::SimpleCnn => "simple-cnn",
            Architecture::DeepCnn => "deep-cnn",
            Architecture::CnnLstm => "cnn-lstm",
            Architecture::Abad => "abad",
            Architecture::HybridCnnGru => "hybrid-cnn-gru",
            Architecture::Crnim => "crnim",
        }
    }

    /// Name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::SimpleCnn => "Simple CNN",
            Architecture::DeepCnn => "Deep CNN",
            Architecture::CnnLstm => "CNN-LSTM",
            Architecture::Abad => "ABAD",
            Architecture::HybridCnnGru => "Hybrid CNN-GRU",
            Architecture::Crnim => "Ours(CRNIM)",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == key)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown architecture `{s}` (expected one of simple-cnn, deep-cnn, cnn-lstm, abad, hybrid-cnn-gru, crnim)"
                ))
            })
    }
}

const SIMPLE_CHANNELS: [usize; 2] = [8, 16];
const DEEP_CHANNELS: [usize; 4] = [8, 16, 32, 32];
const KERNEL: usize = 3;
const RECURRENT_HIDDEN: usize = 32;
const ABAD_HIDDEN: usize = 64;
const CRNIM_FUSION: usize = 64;

/// Two conv layers then a width-2 max pool.
#[derive(Debug, Clone)]
struct SimpleStack([Conv; 2]);

impl SimpleStack {
    fn new(layout: &mut Layout) -> Self {
        let [a, b] = SIMPLE_CHANNELS;
        Self([layout.conv("conv1", 1, a, KERNEL), layout.conv("conv2", a, b, KERNEL)])
    }

    /// `[batch, 1, d] -> [batch, 16, ceil(d / 2)]`
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.0 {
            h = c.forward(g, p, h)?;
            h = g.relu(h);
        }
        g.maxpool2(h)
    }
}

/// Four conv layers with max pooling after the second and fourth.
#[derive(Debug, Clone)]
struct DeepStack([Conv; 4]);

impl DeepStack {
    fn new(layout: &mut Layout) -> Self {
        let [a, b, c, d] = DEEP_CHANNELS;
        Self([
            layout.conv("conv1", 1, a, KERNEL),
            layout.conv("conv2", a, b, KERNEL),
            layout.conv("conv3", b, c, KERNEL),
            layout.conv("conv4", c, d, KERNEL),
        ])
    }

    /// `[batch, 1, d] -> [batch, 32, ceil(ceil(d / 2) / 2)]`
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.0.iter().enumerate() {
            h = c.forward(g, p, h)?;
            h = g.relu(h);
            if i % 2 == 1 {
                h = g.maxpool2(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
enum Net {
    SimpleCnn {
        stack: SimpleStack,
        head: Dense,
    },
    DeepCnn {
        stack: DeepStack,
        head: Dense,
    },
    CnnLstm {
        stack: SimpleStack,
        lstm: Lstm,
        head: Dense,
    },
    Abad {
        enc1: Dense,
        enc2: Dense,
        dec1: Dense,
        dec2: Dense,
    },
    HybridCnnGru {
        stack: SimpleStack,
        gru: Gru,
        head: Dense,
    },
    Crnim {
        stack: DeepStack,
        gru: Gru,
        skip: Dense,
        head: Dense,
    },
}

fn layout(arch: Architecture, d: usize, e: usize) -> (Net, Vec<ParamSpec>) {
    let mut l = Layout::default();
    let net = match arch {
        Architecture::SimpleCnn => Net::SimpleCnn {
            stack: SimpleStack::new(&mut l),
            head: l.dense("head", SIMPLE_CHANNELS[1], e),
        },
        Architecture::DeepCnn => Net::DeepCnn {
            stack: DeepStack::new(&mut l),
            head: l.dense("head", DEEP_CHANNELS[3], e),
        },
        Architecture::CnnLstm => Net::CnnLstm {
            stack: SimpleStack::new(&mut l),
            lstm: l.lstm("lstm", SIMPLE_CHANNELS[1], RECURRENT_HIDDEN),
            head: l.dense("head", RECURRENT_HIDDEN, e),
        },
        Architecture::Abad => Net::Abad {
            enc1: l.dense("enc1", d, ABAD_HIDDEN),
            enc2: l.dense("enc2", ABAD_HIDDEN, e),
            dec1: l.dense("dec1", e, ABAD_HIDDEN),
            dec2: l.dense("dec2", ABAD_HIDDEN, d),
        },
        Architecture::HybridCnnGru => Net::HybridCnnGru {
            stack: SimpleStack::new(&mut l),
            gru: l.gru("gru", SIMPLE_CHANNELS[1], RECURRENT_HIDDEN),
            head: l.dense("head", RECURRENT_HIDDEN, e),
        },
        Architecture::Crnim => Net::Crnim {
            stack: DeepStack::new(&mut l),
            gru: l.gru("gru", 1, RECURRENT_HIDDEN),
            skip: l.dense("skip", d, CRNIM_FUSION),
            head: l.dense("head", CRNIM_FUSION, e),
        },
    };
    (net, l.specs)
}

/// Serialized form of an [`EncoderModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    architecture: Architecture,
    dim: usize,
    embed_dim: usize,
    params: Vec<NamedParam>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// An encoder: architecture plus its parameter tensors.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    arch: Architecture,
    dim: usize,
    embed_dim: usize,
    net: Net,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.dim == other.dim
            && self.embed_dim == other.embed_dim
            && self.params == other.params
    }
}

/// Number of parameters `build(arch, d, e)` would allocate.
pub fn parameter_count(arch: Architecture, d: usize, e: usize) -> usize {
    layout(arch, d, e)
        .1
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

impl EncoderModel {
    /// Fresh model with weights drawn from `rng` and zero biases.
    pub fn build(arch: Architecture, dim: usize, embed_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if dim < 2 || embed_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "encoders need d >= 2 and e >= 2, got d={dim}, e={embed_dim}"
            )));
        }
        let (net, specs) = layout(arch, dim, embed_dim);
        let params = specs.iter().map(|s| s.initialize(rng)).collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Self {
            arch,
            dim,
            embed_dim,
            net,
            names,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `g`, in order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: s.to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(s[0])
    }

    /// Raw embeddings `[batch, e]` for inputs `x: [batch, d]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let batch = self.check_input(g, x)?;
        let seq = g.reshape(x, &[batch, 1, self.dim])?;
        match &self.net {
            Net::SimpleCnn { stack, head } => {
                let h = stack.forward(g, p, seq)?;
                let h = g.mean(h, 2)?;
                head.forward(g, p, h)
            }
            Net::DeepCnn { stack, head } => {
                let h = stack.forward(g, p, seq)?;
                let h = g.mean(h, 2)?;
                head.forward(g, p, h)
            }
            Net::CnnLstm { stack, lstm, head } => {
                let feats = stack.forward(g, p, seq)?;
                let steps = g.shape(feats)[2];
                let mut h = g.input(Tensor::zeros(&[batch, lstm.hidden()]));
                let mut c = g.input(Tensor::zeros(&[batch, lstm.hidden()]));
                for t in 0..steps {
                    let xt = time_step(g, feats, t)?;
                    (h, c) = lstm.step(g, p, xt, h, c)?;
                }
                head.forward(g, p, h)
            }
            Net::Abad { enc1, enc2, .. } => {
                let h = enc1.forward(g, p, x)?;
                let h = g.relu(h);
                enc2.forward(g, p, h)
            }
            Net::HybridCnnGru { stack, gru, head } => {
                let feats = stack.forward(g, p, seq)?;
                let steps = g.shape(feats)[2];
                let mut h = g.input(Tensor::zeros(&[batch, gru.hidden()]));
                for t in 0..steps {
                    let xt = time_step(g, feats, t)?;
                    h = gru.step(g, p, xt, h)?;
                }
                head.forward(g, p, h)
            }
            Net::Crnim { stack, gru, skip, head } => {
                let conv = stack.forward(g, p, seq)?;
                let conv = g.mean(conv, 2)?;
                let mut h = g.input(Tensor::zeros(&[batch, gru.hidden()]));
                for t in 0..self.dim {
                    let xt = time_step(g, seq, t)?;
                    h = gru.step(g, p, xt, h)?;
                }
                let fused = g.concat(&[conv, h], 1)?;
                let residual = skip.forward(g, p, x)?;
                let fused = g.add(fused, residual)?;
                head.forward(g, p, fused)
            }
        }
    }

    /// Reconstruction `[batch, d]` of inputs `x: [batch, d]`; ABAD only.
    pub fn reconstruct_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let Net::Abad { dec1, dec2, .. } = &self.net else {
            return Err(Error::InvalidArgument(format!(
                "reconstruction requires an ABAD model, got {}",
                self.arch
            )));
        };
        let z = self.forward(g, p, x)?;
        let h = dec1.forward(g, p, z)?;
        let h = g.relu(h);
        dec2.forward(g, p, h)
    }

    fn run_rows<F>(&self, rows: &[&[f64]], width: usize, f: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&Self, &mut Graph, &[Var], Var) -> Result<Var>,
    {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(INFERENCE_CHUNK) {
            for r in chunk {
                if r.len() != self.dim {
                    return Err(Error::ShapeMismatch {
                        op: "embed",
                        lhs: vec![r.len()],
                        rhs: vec![self.dim],
                    });
                }
            }
            let mut g = Graph::new();
            let p = self.register(&mut g);
            let x = g.input(Tensor::from_rows(chunk)?);
            let y = f(self, &mut g, &p, x)?;
            out.extend(g.value(y).values().chunks(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Raw embedding of one feature vector.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[features])?.remove(0))
    }

    pub fn embed_batch(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.run_rows(rows, self.embed_dim, Self::forward)
    }

    /// Unit-length embeddings, the space in which rules live.
    pub fn embed_normalized_batch(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.run_rows(rows, self.embed_dim, |m, g, p, x| {
            let z = m.forward(g, p, x)?;
            g.l2_normalize(z, NORMALIZE_FLOOR)
        })
    }

    pub fn reconstruct(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reconstruct_batch(&[features])?.remove(0))
    }

    pub fn reconstruct_batch(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.run_rows(rows, self.dim, Self::reconstruct_graph)
    }

    /// Mean squared error between input and reconstruction; ABAD only.
    pub fn reconstruction_error(&self, features: &[f64]) -> Result<f64> {
        let r = self.reconstruct(features)?;
        mean_squared_error(features, &r)
    }

    pub fn reconstruction_error_batch(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        let recon = self.reconstruct_batch(rows)?;
        rows.iter().zip(&recon).map(|(x, r)| mean_squared_error(x, r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.arch,
            dim: self.dim,
            embed_dim: self.embed_dim,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| NamedParam {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {} is not supported",
                file.format_version
            )));
        }
        let (net, specs) = layout(file.architecture, file.dim, file.embed_dim);
        if specs.len() != file.params.len() {
            return Err(Error::Format(format!(
                "{} expects {} parameter tensors, file has {}",
                file.architecture,
                specs.len(),
                file.params.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, p) in specs.iter().zip(file.params) {
            if spec.name != p.name || spec.shape != p.shape {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name, p.shape, spec.name, spec.shape
                )));
            }
            params.push(Tensor::new(p.shape, p.values)?);
        }
        Ok(Self {
            arch: file.architecture,
            dim: file.dim,
            embed_dim: file.embed_dim,
            net,
            names: specs.into_iter().map(|s| s.name).collect(),
            params,
        })
    }
}

/// Added to a norm before dividing so an all-zero embedding stays finite.
pub const NORMALIZE_FLOOR: f64 = 1e-12;

pub fn mean_squared_error(input: &[f64], reconstruction: &[f64]) -> Result<f64> {
    if input.len() != reconstruction.len() || input.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mean_squared_error",
            lhs: vec![input.len()],
            rhs: vec![reconstruction.len()],
        });
    }
    Ok(input
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / input.len() as f64)
}

#[cfg(test)]
mod tests;
