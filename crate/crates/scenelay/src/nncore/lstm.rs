//! Single-direction LSTM with a replay tape for truncated-free BPTT.
//!
//! The encoder only consumes the final hidden state, so `backward` seeds the
//! chain at the last step; earlier steps receive gradient purely through the
//! recurrent path.

use rand::Rng;

use super::init::glorot_uniform;
use super::tensor::Tensor2;

pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_O: usize = 2;
pub const GATE_G: usize = 3;
pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Gate parameters; each W is hidden x (input + hidden) over z = [x; h_prev].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w: [Tensor2; 4],
    pub b: [Vec<f64>; 4],
}

/// Gradient buffer matching an `LstmCell`.
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub w: [Tensor2; 4],
    pub b: [Vec<f64>; 4],
}

/// Per-step activations needed to replay the step backwards.
#[derive(Debug, Clone)]
pub struct LstmStep {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LstmTape {
    steps: Vec<LstmStep>,
}

impl LstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = std::array::from_fn(|_| Tensor2::zeros(hidden, input + hidden));
        let b = std::array::from_fn(|_| vec![0.0; hidden]);
        LstmCell { input, hidden, w, b }
    }

    /// Glorot-uniform weights; biases zero except the forget gate at 1, which
    /// keeps early cell state from washing out.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = std::array::from_fn(|_| glorot_uniform(hidden, input + hidden, rng));
        let mut b: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        b[GATE_F] = vec![1.0; hidden];
        LstmCell { input, hidden, w, b }
    }

    pub fn grads_like(&self) -> LstmGrads {
        LstmGrads {
            w: std::array::from_fn(|_| Tensor2::zeros(self.hidden, self.input + self.hidden)),
            b: std::array::from_fn(|_| vec![0.0; self.hidden]),
        }
    }

    /// One step; returns (h, c) and the cache to replay it.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmStep) {
        assert_eq!(x.len(), self.input, "lstm input width mismatch");
        assert_eq!(h_prev.len(), self.hidden);
        assert_eq!(c_prev.len(), self.hidden);

        let mut z = Vec::with_capacity(self.input + self.hidden);
        z.extend_from_slice(x);
        z.extend_from_slice(h_prev);

        let pre = |gate: usize| -> Vec<f64> {
            let mut v = self.w[gate].matvec(&z);
            for (vi, bi) in v.iter_mut().zip(&self.b[gate]) {
                *vi += bi;
            }
            v
        };
        let i: Vec<f64> = pre(GATE_I).iter().map(|v| sigmoid(*v)).collect();
        let f: Vec<f64> = pre(GATE_F).iter().map(|v| sigmoid(*v)).collect();
        let o: Vec<f64> = pre(GATE_O).iter().map(|v| sigmoid(*v)).collect();
        let g: Vec<f64> = pre(GATE_G).iter().map(|v| v.tanh()).collect();

        let c: Vec<f64> = (0..self.hidden)
            .map(|k| f[k] * c_prev[k] + i[k] * g[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..self.hidden).map(|k| o[k] * tanh_c[k]).collect();

        let cache = LstmStep {
            z,
            i,
            f,
            o,
            g,
            c_prev: c_prev.to_vec(),
            tanh_c,
        };
        (h, c, cache)
    }

    /// Run from zero states; returns the final hidden state and the tape.
    /// An empty sequence yields zeros and an empty tape.
    pub fn run<'a, I>(&self, xs: I) -> (Vec<f64>, LstmTape)
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        let mut tape = LstmTape::default();
        for x in xs {
            let (nh, nc, cache) = self.step(x, &h, &c);
            h = nh;
            c = nc;
            tape.steps.push(cache);
        }
        (h, tape)
    }

    /// BPTT seeded with d loss / d h_final. Accumulates into `grads` and
    /// returns dx for every step, in forward order.
    pub fn backward(&self, tape: &LstmTape, dh_final: &[f64], grads: &mut LstmGrads) -> Vec<Vec<f64>> {
        assert_eq!(dh_final.len(), self.hidden);
        let mut dxs: Vec<Vec<f64>> = Vec::with_capacity(tape.steps.len());
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; self.hidden];

        for s in tape.steps.iter().rev() {
            let n = self.hidden;
            let mut di_pre = vec![0.0; n];
            let mut df_pre = vec![0.0; n];
            let mut do_pre = vec![0.0; n];
            let mut dg_pre = vec![0.0; n];
            for k in 0..n {
                let dck = dc[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                do_pre[k] = dh[k] * s.tanh_c[k] * s.o[k] * (1.0 - s.o[k]);
                df_pre[k] = dck * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                di_pre[k] = dck * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                dg_pre[k] = dck * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                dc[k] = dck * s.f[k];
            }

            let mut dz = vec![0.0; self.input + self.hidden];
            for (gate, d_pre) in [
                (GATE_I, &di_pre),
                (GATE_F, &df_pre),
                (GATE_O, &do_pre),
                (GATE_G, &dg_pre),
            ] {
                grads.w[gate].add_outer(d_pre, &s.z);
                for (gb, d) in grads.b[gate].iter_mut().zip(d_pre) {
                    *gb += d;
                }
                for (dzk, t) in dz.iter_mut().zip(self.w[gate].matvec_t(d_pre)) {
                    *dzk += t;
                }
            }

            dxs.push(dz[..self.input].to_vec());
            dh = dz[self.input..].to_vec();
        }

        dxs.reverse();
        dxs
    }
}
