//! Minimal differentiable-network toolkit: tensors, a reverse-mode tape,
//! dense layers, an LSTM cell and Adam. Everything runs in f64 so that
//! finite-difference gradient checks hold to tight tolerances; the wire
//! format is the only place values are narrowed.

mod checkpoint;
mod store;
mod tape;

pub use checkpoint::{load_archive, save_archive};
pub use store::{AdamConfig, ParameterStore, Tensor};
pub use tape::{Activation, Gradients, Tape, ValueId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("bad tensor archive: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `activation(W x + bias)` recorded on the tape.
///
/// `w` must be a `rows x cols` matrix leaf with `cols == len(x)` and
/// `bias` a length-`rows` vector.
pub fn dense(
    tape: &mut Tape,
    x: ValueId,
    w: ValueId,
    bias: ValueId,
    rows: usize,
    cols: usize,
    activation: Activation,
) -> Result<ValueId, NnError> {
    if tape.value(w).len() != rows * cols {
        return Err(NnError::Shape(format!(
            "dense: weight has {} values, expected {rows}x{cols}",
            tape.value(w).len()
        )));
    }
    if tape.value(x).len() != cols {
        return Err(NnError::Shape(format!(
            "dense: input has {} values, expected {cols}",
            tape.value(x).len()
        )));
    }
    if tape.value(bias).len() != rows {
        return Err(NnError::Shape(format!(
            "dense: bias has {} values, expected {rows}",
            tape.value(bias).len()
        )));
    }
    let lin = tape.matvec(w, x, rows, cols);
    let biased = tape.add(lin, bias);
    Ok(tape.activation(biased, activation))
}

/// Tape handles for one LSTM cell's parameters.
///
/// Gate order in the stacked weights is `[input, forget, candidate,
/// output]`; `w_ih` is `4H x in_dim`, `w_hh` is `4H x H`, `bias` is `4H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: ValueId,
    pub w_hh: ValueId,
    pub bias: ValueId,
    pub hidden: usize,
    pub input: usize,
}

/// One step of a standard LSTM cell.
///
/// `i, f, o` are sigmoid gates, `g` the tanh candidate,
/// `c' = f (.) c + i (.) g`, `h' = o (.) tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape,
    x: ValueId,
    h: ValueId,
    c: ValueId,
    params: &LstmParams,
) -> Result<(ValueId, ValueId), NnError> {
    let hid = params.hidden;
    if tape.value(x).len() != params.input {
        return Err(NnError::Shape(format!(
            "lstm: input has {} values, expected {}",
            tape.value(x).len(),
            params.input
        )));
    }
    if tape.value(h).len() != hid || tape.value(c).len() != hid {
        return Err(NnError::Shape(format!(
            "lstm: state has {}/{} values, expected {hid}",
            tape.value(h).len(),
            tape.value(c).len()
        )));
    }
    if tape.value(params.w_ih).len() != 4 * hid * params.input
        || tape.value(params.w_hh).len() != 4 * hid * hid
        || tape.value(params.bias).len() != 4 * hid
    {
        return Err(NnError::Shape("lstm: parameter layout mismatch".into()));
    }

    let from_x = tape.matvec(params.w_ih, x, 4 * hid, params.input);
    let from_h = tape.matvec(params.w_hh, h, 4 * hid, hid);
    let pre = tape.add(from_x, from_h);
    let gates = tape.add(pre, params.bias);

    let i_pre = tape.slice(gates, 0, hid);
    let f_pre = tape.slice(gates, hid, hid);
    let g_pre = tape.slice(gates, 2 * hid, hid);
    let o_pre = tape.slice(gates, 3 * hid, hid);

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, c);
    let write = tape.mul(i, g);
    let c_next = tape.add(keep, write);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -2.0, 3.0]);
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero = tape.constant(vec![0.0; 3]);
        let y = dense(&mut tape, x, eye, zero, 3, 3, Activation::Linear).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_dense_with_tanh_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, 0.7]);
        let w = tape.constant(vec![0.0; 6]);
        let b = tape.constant(vec![0.0; 3]);
        let y = dense(&mut tape, x, w, b, 3, 2, Activation::Tanh).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0]);
        let w = tape.constant(vec![0.0; 5]);
        let b = tape.constant(vec![0.0; 2]);
        assert!(matches!(
            dense(&mut tape, x, w, b, 2, 2, Activation::Linear),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let hid = 4;
        let input = 3;
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; input]);
        let h = tape.constant(vec![0.0; hid]);
        let c = tape.constant(vec![0.0; hid]);
        let params = LstmParams {
            w_ih: tape.constant(vec![0.0; 4 * hid * input]),
            w_hh: tape.constant(vec![0.0; 4 * hid * hid]),
            bias: tape.constant(vec![0.0; 4 * hid]),
            hidden: hid,
            input,
        };
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &params).unwrap();
        assert_eq!(tape.value(h2), &[0.0; 4]);
        assert_eq!(tape.value(c2), &[0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        // Bias of +20 on the forget gate saturates sigmoid to ~1, so with
        // zero input the cell state survives almost unchanged.
        let hid = 2;
        let input = 1;
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0]);
        let h = tape.constant(vec![0.0; hid]);
        let c_val = vec![0.37, -0.8];
        let c = tape.constant(c_val.clone());
        let mut bias = vec![0.0; 4 * hid];
        for slot in bias.iter_mut().skip(hid).take(hid) {
            *slot = 20.0;
        }
        let params = LstmParams {
            w_ih: tape.constant(vec![0.0; 4 * hid * input]),
            w_hh: tape.constant(vec![0.0; 4 * hid * hid]),
            bias: tape.constant(bias),
            hidden: hid,
            input,
        };
        let (_, c2) = lstm_step(&mut tape, x, h, c, &params).unwrap();
        for (before, after) in c_val.iter().zip(tape.value(c2)) {
            assert!((before - after).abs() < 1e-8);
        }
    }
}
