//! Recurrent actor-critic network with hand-derived backpropagation.
//!
//! Layout: feedforward encoder (tanh) -> LSTM cell -> actor head (softmax
//! over the joint actions) and critic head (scalar value). Forward passes
//! record a tape per timestep so segments can be backpropagated through time.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>, // out x in
    pub b: Array1<f64>,
}

impl Linear {
    fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(outputs),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { w: Array2::zeros((outputs, inputs)), b: Array1::zeros(outputs) }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }
}

/// Standard LSTM cell; gates packed [input, forget, cell, output].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_ih: Array2<f64>, // 4H x I
    pub w_hh: Array2<f64>, // 4H x H
    pub b: Array1<f64>,    // 4H
}

impl LstmCell {
    fn new<R: Rng + ?Sized>(inputs: usize, width: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        LstmCell {
            w_ih: Array2::from_shape_fn((4 * width, inputs), |_| rng.gen_range(-scale..scale)),
            w_hh: Array2::from_shape_fn((4 * width, width), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(4 * width),
        }
    }

    fn zeros(inputs: usize, width: usize) -> Self {
        LstmCell {
            w_ih: Array2::zeros((4 * width, inputs)),
            w_hh: Array2::zeros((4 * width, width)),
            b: Array1::zeros(4 * width),
        }
    }
}

/// Per-agent recurrent state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl HiddenState {
    pub fn zeros(width: usize) -> Self {
        HiddenState { h: Array1::zeros(width), c: Array1::zeros(width) }
    }
}

/// Activation tape for one forward step, consumed by backpropagation.
#[derive(Debug, Clone)]
pub struct StepTape {
    input: Array1<f64>,
    enc_out: Vec<Array1<f64>>, // post-tanh per encoder layer
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    gates: Array1<f64>, // post-activation [i, f, g, o]
    c_new: Array1<f64>,
    h_new: Array1<f64>,
    pub probs: Array1<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub obs_dim: usize,
    pub lstm_width: usize,
    pub action_count: usize,
    pub encoder: Vec<Linear>,
    pub lstm: LstmCell,
    pub actor: Linear,
    pub critic: Linear,
}

/// Gradients shaped like [`PolicyParameters`].
#[derive(Debug, Clone)]
pub struct PolicyGradients {
    pub encoder: Vec<(Array2<f64>, Array1<f64>)>,
    pub lstm_w_ih: Array2<f64>,
    pub lstm_w_hh: Array2<f64>,
    pub lstm_b: Array1<f64>,
    pub actor: (Array2<f64>, Array1<f64>),
    pub critic: (Array2<f64>, Array1<f64>),
}

fn outer(y: &Array1<f64>, x: &Array1<f64>) -> Array2<f64> {
    let y2 = y.view().insert_axis(Axis(1));
    let x2 = x.view().insert_axis(Axis(0));
    y2.dot(&x2)
}

impl PolicyParameters {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        encoder_widths: &[usize],
        lstm_width: usize,
        action_count: usize,
        rng: &mut R,
    ) -> Self {
        let mut encoder = Vec::new();
        let mut inputs = obs_dim;
        for &w in encoder_widths {
            encoder.push(Linear::new(inputs, w, rng));
            inputs = w;
        }
        PolicyParameters {
            obs_dim,
            lstm_width,
            action_count,
            lstm: LstmCell::new(inputs, lstm_width, rng),
            actor: Linear::new(lstm_width, action_count, rng),
            critic: Linear::new(lstm_width, 1, rng),
            encoder,
        }
    }

    /// All-zero parameters; the actor then outputs the uniform distribution.
    pub fn zeros(obs_dim: usize, encoder_widths: &[usize], lstm_width: usize, action_count: usize) -> Self {
        let mut encoder = Vec::new();
        let mut inputs = obs_dim;
        for &w in encoder_widths {
            encoder.push(Linear::zeros(inputs, w));
            inputs = w;
        }
        PolicyParameters {
            obs_dim,
            lstm_width,
            action_count,
            lstm: LstmCell::zeros(inputs, lstm_width),
            actor: Linear::zeros(lstm_width, action_count),
            critic: Linear::zeros(lstm_width, 1),
            encoder,
        }
    }

    pub fn hidden_state(&self) -> HiddenState {
        HiddenState::zeros(self.lstm_width)
    }

    /// One forward step: scaled observation + hidden state in, action
    /// distribution, value, and advanced hidden state out.
    pub fn forward(&self, obs: &[f64], hidden: &HiddenState) -> SimResult<(StepTape, HiddenState)> {
        if obs.len() != self.obs_dim {
            return Err(SimError::Dimension { expected: self.obs_dim, got: obs.len() });
        }
        let input = Array1::from_vec(obs.to_vec());
        let mut x = input.clone();
        let mut enc_out = Vec::with_capacity(self.encoder.len());
        for (li, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(&x).mapv(f64::tanh);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Numeric(format!("non-finite activation in encoder layer {li}")));
            }
            enc_out.push(x.clone());
        }

        let width = self.lstm_width;
        let pre = self.lstm.w_ih.dot(&x) + self.lstm.w_hh.dot(&hidden.h) + &self.lstm.b;
        let mut gates = Array1::zeros(4 * width);
        for k in 0..width {
            gates[k] = sigmoid(pre[k]); // input gate
            gates[width + k] = sigmoid(pre[width + k]); // forget gate
            gates[2 * width + k] = pre[2 * width + k].tanh(); // candidate
            gates[3 * width + k] = sigmoid(pre[3 * width + k]); // output gate
        }
        let mut c_new = Array1::zeros(width);
        let mut h_new = Array1::zeros(width);
        for k in 0..width {
            c_new[k] = gates[width + k] * hidden.c[k] + gates[k] * gates[2 * width + k];
            h_new[k] = gates[3 * width + k] * c_new[k].tanh();
        }
        if h_new.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numeric("non-finite activation in recurrent cell".into()));
        }

        let logits = self.actor.forward(&h_new);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numeric("non-finite activation in actor head".into()));
        }
        // softmax with max-subtraction for overflow safety
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|z| (z - max).exp());
        let sum: f64 = exp.sum();
        let probs = exp / sum;
        let value = self.critic.forward(&h_new)[0];
        if !value.is_finite() {
            return Err(SimError::Numeric("non-finite activation in critic head".into()));
        }

        let tape = StepTape {
            input,
            enc_out,
            h_prev: hidden.h.clone(),
            c_prev: hidden.c.clone(),
            gates,
            c_new: c_new.clone(),
            h_new: h_new.clone(),
            probs,
            value,
        };
        Ok((tape, HiddenState { h: h_new, c: c_new }))
    }

    pub fn zero_gradients(&self) -> PolicyGradients {
        PolicyGradients {
            encoder: self
                .encoder
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
            lstm_w_ih: Array2::zeros(self.lstm.w_ih.raw_dim()),
            lstm_w_hh: Array2::zeros(self.lstm.w_hh.raw_dim()),
            lstm_b: Array1::zeros(self.lstm.b.raw_dim()),
            actor: (Array2::zeros(self.actor.w.raw_dim()), Array1::zeros(self.actor.b.raw_dim())),
            critic: (Array2::zeros(self.critic.w.raw_dim()), Array1::zeros(self.critic.b.raw_dim())),
        }
    }

    /// Backpropagate one contiguous segment of tapes. `d_logits[t]` and
    /// `d_value[t]` are the loss gradients at the actor logits and critic
    /// output for step t. Gradients accumulate into `grads`; the gradient
    /// flowing out of the segment's initial hidden state is discarded
    /// (truncated backpropagation through time).
    pub fn backward_segment(
        &self,
        tapes: &[StepTape],
        d_logits: &[Array1<f64>],
        d_value: &[f64],
        grads: &mut PolicyGradients,
    ) {
        let width = self.lstm_width;
        let mut dh_next: Array1<f64> = Array1::zeros(width);
        let mut dc_next: Array1<f64> = Array1::zeros(width);
        for t in (0..tapes.len()).rev() {
            let tape = &tapes[t];
            // heads
            let dl = &d_logits[t];
            grads.actor.0 += &outer(dl, &tape.h_new);
            grads.actor.1 += dl;
            let dv = d_value[t];
            grads.critic.0 += &(outer(&Array1::from_elem(1, dv), &tape.h_new));
            grads.critic.1[0] += dv;

            let mut dh = self.actor.w.t().dot(dl)
                + self.critic.w.t().dot(&Array1::from_elem(1, dv))
                + &dh_next;
            let mut dc = dc_next.clone();

            // LSTM cell backward
            let gi = tape.gates.slice(s![0..width]);
            let gf = tape.gates.slice(s![width..2 * width]);
            let gg = tape.gates.slice(s![2 * width..3 * width]);
            let go = tape.gates.slice(s![3 * width..4 * width]);
            let mut da = Array1::zeros(4 * width);
            for k in 0..width {
                let tc = tape.c_new[k].tanh();
                dc[k] += dh[k] * go[k] * (1.0 - tc * tc);
                let d_o = dh[k] * tc;
                da[3 * width + k] = d_o * go[k] * (1.0 - go[k]);
                let d_i = dc[k] * gg[k];
                da[k] = d_i * gi[k] * (1.0 - gi[k]);
                let d_g = dc[k] * gi[k];
                da[2 * width + k] = d_g * (1.0 - gg[k] * gg[k]);
                let d_f = dc[k] * tape.c_prev[k];
                da[width + k] = d_f * gf[k] * (1.0 - gf[k]);
            }
            let x = tape.enc_out.last().unwrap_or(&tape.input);
            grads.lstm_w_ih += &outer(&da, x);
            grads.lstm_w_hh += &outer(&da, &tape.h_prev);
            grads.lstm_b += &da;
            dh_next = self.lstm.w_hh.t().dot(&da);
            for k in 0..width {
                dc_next[k] = dc[k] * gf[k];
            }
            dh = self.lstm.w_ih.t().dot(&da);

            // encoder backward
            for li in (0..self.encoder.len()).rev() {
                let out = &tape.enc_out[li];
                let dpre = &dh * &out.mapv(|v| 1.0 - v * v);
                let input = if li == 0 { &tape.input } else { &tape.enc_out[li - 1] };
                grads.encoder[li].0 += &outer(&dpre, input);
                grads.encoder[li].1 += &dpre;
                dh = self.encoder[li].w.t().dot(&dpre);
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// All parameters as one flat vector (stable ordering).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.lstm.w_ih.iter());
        out.extend(self.lstm.w_hh.iter());
        out.extend(self.lstm.b.iter());
        out.extend(self.actor.w.iter());
        out.extend(self.actor.b.iter());
        out.extend(self.critic.w.iter());
        out.extend(self.critic.b.iter());
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.encoder {
            for v in l.w.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in l.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.lstm.w_ih.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.lstm.w_hh.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.lstm.b.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.actor.w.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.actor.b.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.critic.w.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.critic.b.iter_mut() {
            *v = it.next().unwrap();
        }
        assert!(it.next().is_none(), "flat vector longer than parameter count");
    }
}

impl PolicyGradients {
    /// Same flat ordering as [`PolicyParameters::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.lstm_w_ih.iter());
        out.extend(self.lstm_w_hh.iter());
        out.extend(self.lstm_b.iter());
        out.extend(self.actor.0.iter());
        out.extend(self.actor.1.iter());
        out.extend(self.critic.0.iter());
        out.extend(self.critic.1.iter());
        out
    }
}
