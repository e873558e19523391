//! Parameter layout and forward passes of the building blocks.

use crate::error::Result;
use crate::numerics::{glorot_uniform, Graph, SeededRng, Tensor, Var};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn initialize(&self, rng: &mut SeededRng) -> Tensor {
        match self.init {
            Init::Glorot { fan_in, fan_out } => glorot_uniform(&self.shape, fan_in, fan_out, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
        }
    }
}

/// Collects parameter specs in declaration order.
#[derive(Debug, Default)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        Dense {
            w: self.add(
                format!("{name}.w"),
                vec![inputs, outputs],
                Init::Glorot {
                    fan_in: inputs,
                    fan_out: outputs,
                },
            ),
            b: self.add(format!("{name}.b"), vec![outputs], Init::Zeros),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, width: usize) -> Conv {
        Conv {
            w: self.add(
                format!("{name}.w"),
                vec![c_out, c_in, width],
                Init::Glorot {
                    fan_in: c_in * width,
                    fan_out: c_out * width,
                },
            ),
            b: self.add(format!("{name}.b"), vec![c_out], Init::Zeros),
        }
    }

    /// Recurrent cell with `gates` stacked gate blocks.
    fn recurrent(&mut self, name: &str, inputs: usize, hidden: usize, gates: usize) -> Recurrent {
        let wi = self.add(
            format!("{name}.wi"),
            vec![inputs, gates * hidden],
            Init::Glorot {
                fan_in: inputs,
                fan_out: hidden,
            },
        );
        let wh = self.add(
            format!("{name}.wh"),
            vec![hidden, gates * hidden],
            Init::Glorot {
                fan_in: hidden,
                fan_out: hidden,
            },
        );
        let bi = self.add(format!("{name}.bi"), vec![gates * hidden], Init::Zeros);
        let bh = self.add(format!("{name}.bh"), vec![gates * hidden], Init::Zeros);
        Recurrent { wi, wh, bi, bh, hidden }
    }

    pub fn gru(&mut self, name: &str, inputs: usize, hidden: usize) -> Gru {
        Gru(self.recurrent(name, inputs, hidden, 3))
    }

    pub fn lstm(&mut self, name: &str, inputs: usize, hidden: usize) -> Lstm {
        Lstm(self.recurrent(name, inputs, hidden, 4))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.dense(x, p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.conv1d(x, p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Recurrent {
    wi: usize,
    wh: usize,
    bi: usize,
    bh: usize,
    hidden: usize,
}

impl Recurrent {
    fn gates(&self, g: &mut Graph, p: &[Var], x: Var, h: Var) -> Result<(Var, Var)> {
        let gi = g.dense(x, p[self.wi], p[self.bi])?;
        let gh = g.dense(h, p[self.wh], p[self.bh])?;
        Ok((gi, gh))
    }

    fn block(&self, g: &mut Graph, v: Var, k: usize) -> Result<Var> {
        g.narrow(v, 1, k * self.hidden, self.hidden)
    }
}

/// Gated recurrent unit (reset, update, candidate).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Gru(Recurrent);

impl Gru {
    pub fn hidden(&self) -> usize {
        self.0.hidden
    }

    /// `x: [batch, in]`, `h: [batch, hidden]`.
    pub fn step(&self, g: &mut Graph, p: &[Var], x: Var, h: Var) -> Result<Var> {
        let c = &self.0;
        let (gi, gh) = c.gates(g, p, x, h)?;
        let (ir, iz, in_) = (c.block(g, gi, 0)?, c.block(g, gi, 1)?, c.block(g, gi, 2)?);
        let (hr, hz, hn) = (c.block(g, gh, 0)?, c.block(g, gh, 1)?, c.block(g, gh, 2)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(in_, rn)?;
        let n = g.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Long short-term memory cell (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lstm(Recurrent);

impl Lstm {
    pub fn hidden(&self) -> usize {
        self.0.hidden
    }

    /// Returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, p: &[Var], x: Var, h: Var, cell: Var) -> Result<(Var, Var)> {
        let c = &self.0;
        let (gi, gh) = c.gates(g, p, x, h)?;
        let pre = g.add(gi, gh)?;
        let i = c.block(g, pre, 0)?;
        let i = g.sigmoid(i);
        let f = c.block(g, pre, 1)?;
        let f = g.sigmoid(f);
        let cand = c.block(g, pre, 2)?;
        let cand = g.tanh(cand);
        let o = c.block(g, pre, 3)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell);
        let h = g.mul(o, squashed)?;
        Ok((h, cell))
    }
}

/// Column `t` of a `[batch, channels, len]` sequence as `[batch, channels]`.
pub(crate) fn time_step(g: &mut Graph, seq: Var, t: usize) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    let col = g.narrow(seq, 2, t, 1)?;
    g.reshape(col, &[shape[0], shape[1]])
}
