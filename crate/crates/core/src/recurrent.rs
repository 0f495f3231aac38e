//! GRU / LSTM layer over the attention output and the sigmoid classifier head.
//!
//! Gate layout follows the common PyTorch convention: for a GRU the `3h`
//! gate columns are `(r, z, n)`, for an LSTM the `4h` columns are
//! `(i, f, g, o)`. Both cells carry separate input and hidden biases.

use serde::{Deserialize, Serialize};
use sehm_autodiff::{Graph, NodeId, Tensor};

use crate::error::{config_err, Result, SehmError};
use crate::rng::{self, uniform_init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = SehmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => config_err(format!("unknown cell kind '{other}' (expected gru or lstm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    /// `[input, G·h]`
    pub w_x: Tensor,
    /// `[h, G·h]`
    pub w_h: Tensor,
    /// `[G·h]`
    pub b_x: Tensor,
    /// `[G·h]`
    pub b_h: Tensor,
}

impl RecurrentParams {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(kind: CellKind, input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return config_err("recurrent layer needs positive input and hidden sizes");
        }
        let gh = kind.gates() * hidden;
        let mut rng = rng::seeded(seed);
        let w_x = Tensor::new(vec![input, gh], uniform_init(&mut rng, input * gh, input))?;
        let w_h = Tensor::new(vec![hidden, gh], uniform_init(&mut rng, hidden * gh, hidden))?;
        let mut b_x = uniform_init(&mut rng, gh, hidden);
        if kind == CellKind::Lstm {
            // Forget gate starts open so early gradients reach distant steps.
            for v in &mut b_x[hidden..2 * hidden] {
                *v += 1.0;
            }
        }
        Ok(Self {
            kind,
            input,
            hidden,
            w_x,
            w_h,
            b_x: Tensor::new(vec![gh], b_x)?,
            b_h: Tensor::new(vec![gh], uniform_init(&mut rng, gh, hidden))?,
        })
    }

    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        let gh = kind.gates() * hidden;
        Self {
            kind,
            input,
            hidden,
            w_x: Tensor::zeros(&[input, gh]),
            w_h: Tensor::zeros(&[hidden, gh]),
            b_x: Tensor::zeros(&[gh]),
            b_h: Tensor::zeros(&[gh]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_x, &self.w_h, &self.b_x, &self.b_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_x, &mut self.w_h, &mut self.b_x, &mut self.b_h]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecurrentNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b_x: NodeId,
    pub b_h: NodeId,
}

/// Runs the recurrence over a `[B, L, input]` sequence, returning the final
/// hidden state `[B, h]`. Initial hidden (and cell) state is zero.
pub fn recurrent_graph(
    g: &mut Graph,
    kind: CellKind,
    hidden: usize,
    p: RecurrentNodes,
    seq: NodeId,
) -> Result<NodeId> {
    let shape = g.value(seq).shape().to_vec();
    let (b, steps) = (shape[0], shape[1]);
    let gh = kind.gates() * hidden;
    // Input contributions for all steps in one product, laid out step-major
    // so each step is a contiguous slice.
    let xw = g.matmul(seq, p.w_x)?;
    let xw = g.add(xw, p.b_x)?;
    let xw = g.transpose(xw, 0, 1)?;
    let mut h = g.constant(Tensor::zeros(&[b, hidden]));
    let mut c = g.constant(Tensor::zeros(&[b, hidden]));
    for t in 0..steps {
        let xt = g.slice(xw, 0, t, 1)?;
        let xt = g.reshape(xt, &[b, gh])?;
        let hw = g.matmul(h, p.w_h)?;
        let hw = g.add(hw, p.b_h)?;
        match kind {
            CellKind::Gru => {
                let gate = |g: &mut Graph, x: NodeId, k: usize| g.slice(x, 1, k * hidden, hidden);
                let (xr, xz, xn) = (gate(g, xt, 0)?, gate(g, xt, 1)?, gate(g, xt, 2)?);
                let (hr, hz, hn) = (gate(g, hw, 0)?, gate(g, hw, 1)?, gate(g, hw, 2)?);
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z)?;
                let rn = g.mul(r, hn)?;
                let n = g.add(xn, rn)?;
                let n = g.tanh(n)?;
                // h' = (1 − z)·n + z·h = n + z·(h − n)
                let diff = g.sub(h, n)?;
                let zd = g.mul(z, diff)?;
                h = g.add(n, zd)?;
            }
            CellKind::Lstm => {
                let pre = g.add(xt, hw)?;
                let i = g.slice(pre, 1, 0, hidden)?;
                let f = g.slice(pre, 1, hidden, hidden)?;
                let gg = g.slice(pre, 1, 2 * hidden, hidden)?;
                let o = g.slice(pre, 1, 3 * hidden, hidden)?;
                let i = g.sigmoid(i)?;
                let f = g.sigmoid(f)?;
                let gg = g.tanh(gg)?;
                let o = g.sigmoid(o)?;
                let fc = g.mul(f, c)?;
                let ig = g.mul(i, gg)?;
                c = g.add(fc, ig)?;
                let tc = g.tanh(c)?;
                h = g.mul(o, tc)?;
            }
        }
    }
    Ok(h)
}

/// Final hidden state after running the cell over an `L × input` sequence.
pub fn recurrent_forward(seq: &Tensor, params: &RecurrentParams) -> Result<Vec<f64>> {
    if seq.ndim() != 2 || seq.shape()[1] != params.input {
        return config_err(format!(
            "recurrent input has shape {:?}, expected [L, {}]",
            seq.shape(),
            params.input
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(seq.reshape(&[1, seq.shape()[0], params.input])?);
    let nodes = RecurrentNodes {
        w_x: g.constant(params.w_x.clone()),
        w_h: g.constant(params.w_h.clone()),
        b_x: g.constant(params.b_x.clone()),
        b_h: g.constant(params.b_h.clone()),
    };
    let h = recurrent_graph(&mut g, params.kind, params.hidden, nodes, x)?;
    Ok(g.value(h).data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[h]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        Ok(Self {
            weight: Tensor::new(vec![hidden], uniform_init(&mut rng, hidden, hidden))?,
            bias: Tensor::scalar(uniform_init(&mut rng, 1, hidden)[0]),
        })
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[hidden]),
            bias: Tensor::scalar(0.0),
        }
    }

    pub fn logit(&self, hidden: &[f64]) -> f64 {
        hidden.iter().zip(self.weight.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias.data()[0]
    }
}

/// Logits `[B, 1]` from hidden states `[B, h]`.
pub fn classifier_graph(g: &mut Graph, weight: NodeId, bias: NodeId, h: NodeId) -> Result<NodeId> {
    let n = g.value(weight).len();
    let w = g.reshape(weight, &[n, 1])?;
    let s = g.matmul(h, w)?;
    Ok(g.add(s, bias)?)
}

/// `σ(w·h + b)`.
pub fn classify(hidden: &[f64], head: &ClassifierHead) -> Result<f64> {
    if hidden.len() != head.weight.len() {
        return Err(SehmError::Dimension {
            context: "classifier input",
            expected: head.weight.len(),
            actual: hidden.len(),
        });
    }
    Ok(sehm_autodiff::sigmoid(head.logit(hidden)))
}

/// Binary cross-entropy with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

pub fn bce_mean(probs: &[f64], labels: &[f64]) -> f64 {
    probs.iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / probs.len().max(1) as f64
}

/// Mean BCE computed from logits as `softplus(s) − y·s`, the form used for
/// training since it never evaluates `log(0)`.
pub fn bce_logits_graph(g: &mut Graph, logits: NodeId, labels: NodeId) -> Result<NodeId> {
    let sp = g.softplus(logits)?;
    let ys = g.mul(labels, logits)?;
    let per = g.sub(sp, ys)?;
    Ok(g.mean(per, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gru_stays_at_zero() {
        let p = RecurrentParams::zeros(CellKind::Gru, 3, 4);
        let h = recurrent_forward(&Tensor::zeros(&[6, 3]), &p).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn classify_examples() {
        let head = ClassifierHead::zeros(3);
        assert_eq!(classify(&[1.0, -2.0, 3.0], &head).unwrap(), 0.5);
        let head = ClassifierHead {
            weight: Tensor::vector(vec![1.0]),
            bias: Tensor::scalar(0.0),
        };
        assert!(classify(&[30.0], &head).unwrap() >= 1.0 - 1e-12);
        assert!(classify(&[1.0, 2.0], &head).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-11);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn cell_kind_parses() {
        assert_eq!("GRU".parse::<CellKind>().unwrap(), CellKind::Gru);
        assert!("rnn".parse::<CellKind>().is_err());
    }
}
