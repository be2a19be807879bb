//! Recurrent building blocks shared by the annotator and the matchers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown recurrent cell {other:?}"))),
        }
    }
}

/// Tensor with entries uniform in `[-scale, scale]`.
pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if scale == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("finite uniform samples")
}

/// Sequences padded to a common length, stored time-major.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub batch: usize,
    pub steps: usize,
    /// `ids[t * batch + b]`
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(seqs: &[&[TokenId]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("sequence"));
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let batch = seqs.len();
        let mut ids = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for s in seqs {
                ids.push(s.get(t).copied().unwrap_or(PAD) as usize);
            }
        }
        Ok(Self {
            batch,
            steps,
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn ids_at(&self, t: usize) -> &[usize] {
        &self.ids[t * self.batch..(t + 1) * self.batch]
    }

    /// `[batch, 1]` column: 1 where step `t` is inside the sequence.
    pub fn mask_at(&self, t: usize) -> Tensor {
        let data = self
            .lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect();
        Tensor::column(data).expect("finite mask")
    }

    pub fn all_valid_at(&self, t: usize) -> bool {
        self.lengths.iter().all(|&l| t < l)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct State {
    pub h: Var,
    pub c: Option<Var>,
}

/// Output of running a layer over a padded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Hidden state after each step, `[batch, hidden]`; padded rows carry the
    /// last valid state forward.
    pub states: Vec<Var>,
    pub last: State,
}

/// Single-layer GRU or LSTM with parameters `{prefix}.w`, `{prefix}.u`,
/// `{prefix}.b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentLayer {
    pub prefix: String,
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
}

impl RecurrentLayer {
    pub fn new(prefix: &str, kind: CellKind, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            kind,
            input,
            hidden,
        }
    }

    pub fn init_params(&self, store: &mut ParameterStore, scale: f64, rng: &mut impl Rng) -> Result<()> {
        let width = self.kind.gates() * self.hidden;
        store.insert(self.name("w"), uniform(&[self.input, width], scale, rng), true)?;
        store.insert(self.name("u"), uniform(&[self.hidden, width], scale, rng), true)?;
        store.insert(self.name("b"), Tensor::zeros(&[width]), true)?;
        Ok(())
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn zero_state(&self, g: &mut Graph<'_>, batch: usize) -> State {
        let h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let c = (self.kind == CellKind::Lstm).then(|| g.input(Tensor::zeros(&[batch, self.hidden])));
        State { h, c }
    }

    /// Input projection `x W + b` for a stack of inputs.
    pub fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.name("w"))?;
        let b = g.param(&self.name("b"))?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// One step given the projected input `[batch, gates * hidden]`.
    pub fn step(&self, g: &mut Graph<'_>, projected: Var, state: State) -> Result<State> {
        let u = g.param(&self.name("u"))?;
        let hdim = self.hidden;
        let hu = g.matmul(state.h, u)?;
        match self.kind {
            CellKind::Gru => {
                let xz = g.slice_cols(projected, 0, hdim)?;
                let xr = g.slice_cols(projected, hdim, 2 * hdim)?;
                let xn = g.slice_cols(projected, 2 * hdim, 3 * hdim)?;
                let hz = g.slice_cols(hu, 0, hdim)?;
                let hr = g.slice_cols(hu, hdim, 2 * hdim)?;
                let hn = g.slice_cols(hu, 2 * hdim, 3 * hdim)?;
                let z_in = g.add(xz, hz)?;
                let z = g.sigmoid(z_in);
                let r_in = g.add(xr, hr)?;
                let r = g.sigmoid(r_in);
                let rh = g.mul(r, hn)?;
                let n_in = g.add(xn, rh)?;
                let n = g.tanh(n_in);
                // h' = (1 - z) * n + z * h = n + z * (h - n)
                let diff = g.sub(state.h, n)?;
                let zd = g.mul(z, diff)?;
                let h = g.add(n, zd)?;
                Ok(State { h, c: None })
            }
            CellKind::Lstm => {
                let gates = g.add(projected, hu)?;
                let i_in = g.slice_cols(gates, 0, hdim)?;
                let f_in = g.slice_cols(gates, hdim, 2 * hdim)?;
                let c_in = g.slice_cols(gates, 2 * hdim, 3 * hdim)?;
                let o_in = g.slice_cols(gates, 3 * hdim, 4 * hdim)?;
                let i = g.sigmoid(i_in);
                let f = g.sigmoid(f_in);
                let cand = g.tanh(c_in);
                let o = g.sigmoid(o_in);
                let prev_c = state
                    .c
                    .ok_or_else(|| Error::Contract("LSTM step without a cell state".into()))?;
                let keep = g.mul(f, prev_c)?;
                let write = g.mul(i, cand)?;
                let c = g.add(keep, write)?;
                let tc = g.tanh(c);
                let h = g.mul(o, tc)?;
                Ok(State { h, c: Some(c) })
            }
        }
    }

    /// Runs the layer over embedded inputs `[steps * batch, input]`
    /// (time-major), holding each row's state once its sequence has ended.
    pub fn encode(&self, g: &mut Graph<'_>, embedded: Var, batch: &PaddedBatch) -> Result<Encoded> {
        let projected = self.project(g, embedded)?;
        let mut state = self.zero_state(g, batch.batch);
        let mut states = Vec::with_capacity(batch.steps);
        for t in 0..batch.steps {
            let x_t = if batch.steps == 1 {
                projected
            } else {
                g.slice_rows(projected, t * batch.batch, (t + 1) * batch.batch)?
            };
            let next = self.step(g, x_t, state)?;
            state = if batch.all_valid_at(t) {
                next
            } else {
                let m = g.input(batch.mask_at(t));
                let keep = g.input(Tensor::column(
                    batch.mask_at(t).data().iter().map(|v| 1.0 - v).collect(),
                )?);
                State {
                    h: blend(g, m, keep, next.h, state.h)?,
                    c: match (next.c, state.c) {
                        (Some(nc), Some(oc)) => Some(blend(g, m, keep, nc, oc)?),
                        _ => None,
                    },
                }
            };
            states.push(state.h);
        }
        Ok(Encoded { states, last: state })
    }
}

/// `m * new + (1 - m) * old`, exact for 0/1 masks.
fn blend(g: &mut Graph<'_>, m: Var, keep: Var, new: Var, old: Var) -> Result<Var> {
    let a = g.mul(m, new)?;
    let b = g.mul(keep, old)?;
    g.add(a, b)
}
