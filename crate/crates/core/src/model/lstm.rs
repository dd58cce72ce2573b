//! LSTM gates and the stacked spatial LSTM.
//!
//! ```text
//! i = sigmoid(W_xi x + W_hi h + b_i)
//! f = sigmoid(W_xf x + W_hf h + b_f)
//! o = sigmoid(W_xo x + W_ho h + b_o)
//! g = tanh(W_xg x + W_hg h + b_g)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```

use super::params::LstmLayer;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// One layer's weights as tape variables, gates ordered i, f, o, g.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_x: [Var; 4],
    pub w_h: [Var; 4],
    pub b: [Var; 4],
}

impl LayerVars {
    pub fn register<'p>(tape: &mut Tape<'p>, layer: &LstmLayer<'p>, first_id: usize) -> Self {
        let vars: Vec<Var> = (0..4)
            .flat_map(|g| [layer.w_x[g], layer.w_h[g], layer.b[g]])
            .enumerate()
            .map(|(k, t)| tape.param(first_id + k, t))
            .collect();
        LayerVars::from_params(&vars, 0)
    }

    /// Picks a layer out of the canonical parameter vars.
    pub fn from_params(vars: &[Var], first: usize) -> Self {
        LayerVars {
            w_x: std::array::from_fn(|g| vars[first + 3 * g]),
            w_h: std::array::from_fn(|g| vars[first + 3 * g + 1]),
            b: std::array::from_fn(|g| vars[first + 3 * g + 2]),
        }
    }
}

/// Records one LSTM step on the tape; `x`, `h`, `c` are column vectors.
/// Returns the new `(h, c)`.
pub fn lstm_cell(tape: &mut Tape<'_>, x: Var, h: Var, c: Var, w: &LayerVars) -> Result<(Var, Var)> {
    let mut gates = [x; 4];
    for g in 0..4 {
        let zx = tape.matmul(w.w_x[g], x)?;
        let zh = tape.matmul(w.w_h[g], h)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, w.b[g])?;
        gates[g] = if g == 3 { tape.tanh(z)? } else { tape.sigmoid(z)? };
    }
    let [i, f, o, g] = gates;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs the stack over `seq`; layer `l` consumes the full hidden sequence
/// of layer `l - 1`. Returns the top layer's final hidden state.
pub fn stacked_lstm(tape: &mut Tape<'_>, seq: &[Var], layers: &[LayerVars], hidden: usize) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::shape("stacked_lstm", "empty input sequence"));
    }
    if layers.is_empty() {
        return Err(Error::shape("stacked_lstm", "no layers"));
    }
    let mut inputs: Vec<Var> = seq.to_vec();
    for layer in layers {
        let mut h = tape.constant(Tensor::zeros(&[hidden, 1]));
        let mut c = tape.constant(Tensor::zeros(&[hidden, 1]));
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            (h, c) = lstm_cell(tape, x, h, c, layer)?;
            outputs.push(h);
        }
        inputs = outputs;
    }
    Ok(*inputs.last().expect("non-empty sequence"))
}

fn check_layer(layer: &LstmLayer<'_>, input: usize, hidden: usize) -> Result<()> {
    for g in 0..4 {
        if layer.w_x[g].shape() != [hidden, input]
            || layer.w_h[g].shape() != [hidden, hidden]
            || layer.b[g].shape() != [hidden, 1]
        {
            return Err(Error::shape(
                "lstm_step",
                format!(
                    "gate {g}: w_x {:?}, w_h {:?}, b {:?} for input {input}, hidden {hidden}",
                    layer.w_x[g].shape(),
                    layer.w_h[g].shape(),
                    layer.b[g].shape()
                ),
            ));
        }
    }
    Ok(())
}

/// One step of a single layer on plain vectors.
pub fn lstm_step(x: &[f64], state: &LstmState, layer: &LstmLayer<'_>) -> Result<LstmState> {
    let hidden = state.h.len();
    if state.c.len() != hidden {
        return Err(Error::shape("lstm_step", "h and c differ in length"));
    }
    check_layer(layer, x.len(), hidden)?;
    let mut tape = Tape::new();
    let w = LayerVars::register(&mut tape, layer, 0);
    let xv = tape.constant(Tensor::column(x));
    let hv = tape.constant(Tensor::column(&state.h));
    let cv = tape.constant(Tensor::column(&state.c));
    let (h, c) = lstm_cell(&mut tape, xv, hv, cv, &w)?;
    Ok(LstmState {
        h: tape.value(h).data().to_vec(),
        c: tape.value(c).data().to_vec(),
    })
}

/// Stacked LSTM on plain vectors, zero initial state in every layer.
pub fn stacked_lstm_forward(seq: &[Vec<f64>], layers: &[LstmLayer<'_>]) -> Result<Vec<f64>> {
    let Some(first) = layers.first() else {
        return Err(Error::shape("stacked_lstm", "no layers"));
    };
    let hidden = first.w_x[0].shape()[0];
    let mut width = seq.first().map(Vec::len).unwrap_or(0);
    for layer in layers {
        check_layer(layer, width, hidden)?;
        width = hidden;
    }
    let mut tape = Tape::new();
    let mut id = 0;
    let vars: Vec<LayerVars> = layers
        .iter()
        .map(|l| {
            let v = LayerVars::register(&mut tape, l, id);
            id += 12;
            v
        })
        .collect();
    let xs: Vec<Var> = seq.iter().map(|x| tape.constant(Tensor::column(x))).collect();
    let out = stacked_lstm(&mut tape, &xs, &vars, hidden)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::LstmParams;

    #[test]
    fn zero_weights_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let s = lstm_step(&[1.0, -2.0, 0.5], &LstmState::zeros(2), &p.view()).unwrap();
        assert_eq!(s.c, vec![0.0, 0.0]);
        assert_eq!(s.h, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_weights_with_cell() {
        let p = LstmParams::zeros(1, 1);
        let st = LstmState {
            h: vec![0.0],
            c: vec![2.0],
        };
        let s = lstm_step(&[0.7], &st, &p.view()).unwrap();
        // f = 0.5, i = 0.5, g = 0: c' = 1, h' = 0.5 tanh(1)
        assert_eq!(s.c, vec![1.0]);
        assert!((s.h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((s.h[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn zero_input_kills_input_weights() {
        let mut p = LstmParams::zeros(1, 1);
        for g in 0..4 {
            p.w_x[g] = Tensor::full(&[1, 1], 1.0);
        }
        let s = lstm_step(&[0.0], &LstmState::zeros(1), &p.view()).unwrap();
        assert_eq!(s, LstmState::zeros(1));
    }

    #[test]
    fn single_step_stack_is_one_cell() {
        let mut p = LstmParams::zeros(2, 3);
        p.w_x[0] = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        p.w_x[3] = Tensor::new(vec![3, 2], vec![0.7, 0.2, -0.3, 0.1, 0.5, -0.6]).unwrap();
        p.b[1] = Tensor::column(&[0.1, 0.2, 0.3]);
        let x = vec![0.5, -1.5];
        let step = lstm_step(&x, &LstmState::zeros(3), &p.view()).unwrap();
        let stack = stacked_lstm_forward(&[x], &[p.view()]).unwrap();
        assert_eq!(stack, step.h);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let l0 = LstmParams::zeros(4, 3);
        let l1 = LstmParams::zeros(3, 3);
        let seq: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 4]).collect();
        let out = stacked_lstm_forward(&seq, &[l0.view(), l1.view()]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn shape_errors() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_step(&[1.0, 2.0], &LstmState::zeros(2), &p.view()).is_err());
        assert!(stacked_lstm_forward(&[], &[p.view()]).is_err());
    }
}
