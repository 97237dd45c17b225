//! LSTM cell, unrolling, dense layers, initialization, and parameter
//! serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Gate order inside the fused weight matrix: input, forget, cell candidate,
/// output. The order is part of the serialization format.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "candidate", "output"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softmax,
    Identity,
}

/// Fused-gate LSTM parameters: `w` is [(input+hidden) x 4*hidden], `b` is
/// [1 x 4*hidden].
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

/// Hidden and cell state for one step, as plain tensors.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(batch, hidden),
            c: Tensor::zeros(batch, hidden),
        }
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-r..r)).collect();
    Tensor::from_vec(rows, cols, data)
        .expect("sampled weights are finite")
        .with_grad()
}

impl LstmParams {
    /// Glorot-uniform weights, zero biases except the forget gate bias at 1.0.
    /// Deterministic in `seed`.
    pub fn init(input_size: usize, hidden_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = input_size + hidden_size;
        let cols = 4 * hidden_size;
        let w = glorot_uniform(&mut rng, rows, cols, rows, cols);
        let mut b = Tensor::zeros(1, cols);
        for j in hidden_size..2 * hidden_size {
            b.set(0, j, 1.0);
        }
        let p = LstmParams {
            input_size,
            hidden_size,
            w,
            b: b.with_grad(),
        };
        debug_assert_eq!(p.param_count(), lstm_param_count(input_size, hidden_size));
        p
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    /// The forget-gate bias slice, columns `hidden..2*hidden`.
    pub fn forget_bias(&self) -> &[f64] {
        &self.b.data()[self.hidden_size..2 * self.hidden_size]
    }
}

/// `4 * ((input + hidden) * hidden + hidden)`.
pub fn lstm_param_count(input_size: usize, hidden_size: usize) -> usize {
    4 * ((input_size + hidden_size) * hidden_size + hidden_size)
}

/// `in * out + out`.
pub fn dense_param_count(input_size: usize, output_size: usize) -> usize {
    input_size * output_size + output_size
}

impl DenseParams {
    pub fn init(input_size: usize, output_size: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = glorot_uniform(&mut rng, input_size, output_size, input_size, output_size);
        let b = Tensor::zeros(1, output_size).with_grad();
        let p = DenseParams { w, b, activation };
        debug_assert_eq!(p.param_count(), dense_param_count(input_size, output_size));
        p
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn input_size(&self) -> usize {
        self.w.rows()
    }

    pub fn output_size(&self) -> usize {
        self.w.cols()
    }
}

/// One LSTM step on the tape. `w`/`b` are the bound parameter vars, `x` is
/// [batch x input], and the state tensors are [batch x hidden].
///
/// gates = [x | h] . w + b, split into (i, f, g, o); then
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g) and h' = sigmoid(o) * tanh(c').
pub fn lstm_step(
    tape: &mut Tape,
    w: Var,
    b: Var,
    hidden_size: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xh = tape.concat_cols(x, h)?;
    let z = tape.matmul(xh, w)?;
    let z = tape.add_row_broadcast(z, b)?;
    let hs = hidden_size;
    let i_pre = tape.slice_cols(z, 0, hs)?;
    let f_pre = tape.slice_cols(z, hs, 2 * hs)?;
    let g_pre = tape.slice_cols(z, 2 * hs, 3 * hs)?;
    let o_pre = tape.slice_cols(z, 3 * hs, 4 * hs)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let c_tanh = tape.tanh(c_next);
    let h_next = tape.mul(o, c_tanh)?;
    Ok((h_next, c_next))
}

/// Iterated [`lstm_step`] over a nonempty input sequence; returns every
/// intermediate (h, c) pair for downstream heads.
pub fn lstm_unroll(
    tape: &mut Tape,
    w: Var,
    b: Var,
    hidden_size: usize,
    xs: &[Var],
    h0: Var,
    c0: Var,
) -> Result<Vec<(Var, Var)>> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut states = Vec::with_capacity(xs.len());
    let (mut h, mut c) = (h0, c0);
    for &x in xs {
        let (hn, cn) = lstm_step(tape, w, b, hidden_size, x, h, c)?;
        states.push((hn, cn));
        h = hn;
        c = cn;
    }
    Ok(states)
}

/// `activation(x . w + b)`, softmax applied row-wise.
pub fn dense_forward(tape: &mut Tape, w: Var, b: Var, activation: Activation, x: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row_broadcast(z, b)?;
    Ok(match activation {
        Activation::Identity => z,
        Activation::Tanh => tape.tanh(z),
        Activation::Softmax => tape.softmax_rows(z),
    })
}

// ── Parameter container ─────────────────────────────────────────────────
//
// Text manifest followed by raw 64-bit little-endian data:
//
//   params-v1
//   <count>
//   <name> <rows> <cols> <byte offset into data section>   (count lines)
//   data
//   <raw bytes>
//
// Names must not contain whitespace. Offsets are in bytes, each entry is
// rows*cols little-endian f64 words.

pub fn save_params(path: &Path, named: &[(String, &Tensor)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "params-v1")?;
    writeln!(out, "{}", named.len())?;
    let mut offset = 0usize;
    for (name, t) in named {
        if name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("parameter name {name:?} contains whitespace")));
        }
        writeln!(out, "{} {} {} {}", name, t.rows(), t.cols(), offset)?;
        offset += t.numel() * 8;
    }
    writeln!(out, "data")?;
    for (_, t) in named {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();

    reader.read_line(&mut line)?;
    if line.trim_end() != "params-v1" {
        return Err(Error::Format(format!(
            "{}: expected params-v1 header, got {:?}",
            path.display(),
            line.trim_end()
        )));
    }

    line.clear();
    reader.read_line(&mut line)?;
    let count: usize = line
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad parameter count", path.display())))?;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        reader.read_line(&mut line)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "{}: bad manifest line {:?}",
                path.display(),
                line.trim_end()
            )));
        }
        let name = fields[0].to_string();
        let rows: usize = fields[1].parse().map_err(|_| bad_manifest(path, &line))?;
        let cols: usize = fields[2].parse().map_err(|_| bad_manifest(path, &line))?;
        let offset: usize = fields[3].parse().map_err(|_| bad_manifest(path, &line))?;
        entries.push((name, rows, cols, offset));
    }

    line.clear();
    reader.read_line(&mut line)?;
    if line.trim_end() != "data" {
        return Err(Error::Format(format!(
            "{}: expected data separator",
            path.display()
        )));
    }

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(count);
    for (name, rows, cols, offset) in entries {
        let bytes = rows * cols * 8;
        let end = offset + bytes;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "{}: parameter {} extends past end of data",
                path.display(),
                name
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in blob[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        out.push((name, Tensor::from_vec(rows, cols, data)?.with_grad()));
    }
    Ok(out)
}

fn bad_manifest(path: &Path, line: &str) -> Error {
    Error::Format(format!(
        "{}: bad manifest line {:?}",
        path.display(),
        line.trim_end()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let a = LstmParams::init(300, 512, 42);
        let b = LstmParams::init(300, 512, 42);
        assert_eq!(a.w.data(), b.w.data());
        assert_eq!(a.b.data(), b.b.data());
        assert_eq!(a.param_count(), 1_665_024);

        let c = LstmParams::init(300, 512, 43);
        assert_ne!(a.w.data(), c.w.data());

        assert!(a.forget_bias().iter().all(|&v| v == 1.0));
        let other: f64 = a.b.data()[..512].iter().map(|v| v.abs()).sum();
        assert_eq!(other, 0.0);
    }

    #[test]
    fn zero_params_give_zero_state() {
        let mut p = LstmParams::init(3, 4, 0);
        p.w = Tensor::zeros(7, 16).with_grad();
        p.b = Tensor::zeros(1, 16).with_grad();

        let mut tape = Tape::new();
        let w = tape.leaf(&p.w);
        let b = tape.leaf(&p.b);
        let x = tape.constant(2, 3, vec![0.5; 6]).unwrap();
        let h0 = tape.constant(2, 4, vec![0.0; 8]).unwrap();
        let c0 = tape.constant(2, 4, vec![0.0; 8]).unwrap();
        let (h, c) = lstm_step(&mut tape, w, b, 4, x, h0, c0).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
        assert!(tape.value(c).iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(h), (2, 4));
        assert_eq!(tape.shape(c), (2, 4));
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        // Zero weights, forget bias 100: c' ~ c, h' = 0.5 * tanh(c').
        let hidden = 1;
        let w = Tensor::zeros(2, 4);
        let mut b = Tensor::zeros(1, 4);
        b.set(0, 1, 100.0);

        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let x = tape.constant(1, 1, vec![0.3]).unwrap();
        let h0 = tape.constant(1, 1, vec![0.0]).unwrap();
        let c0 = tape.constant(1, 1, vec![1.0]).unwrap();
        let (h, c) = lstm_step(&mut tape, wv, bv, hidden, x, h0, c0).unwrap();
        assert!((tape.value(c)[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(h)[0] - 0.5 * 1.0_f64.tanh()).abs() < 1e-8);
        assert!((tape.value(h)[0] - 0.380_797_08).abs() < 1e-7);
    }

    #[test]
    fn unroll_length_one_equals_single_step() {
        let p = LstmParams::init(3, 4, 7);
        let x = Tensor::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();

        let mut t1 = Tape::new();
        let (w, b) = (t1.leaf(&p.w), t1.leaf(&p.b));
        let xv = t1.leaf(&x);
        let h0 = t1.constant(2, 4, vec![0.0; 8]).unwrap();
        let c0 = t1.constant(2, 4, vec![0.0; 8]).unwrap();
        let (h, _) = lstm_step(&mut t1, w, b, 4, xv, h0, c0).unwrap();

        let mut t2 = Tape::new();
        let (w2, b2) = (t2.leaf(&p.w), t2.leaf(&p.b));
        let xv2 = t2.leaf(&x);
        let h02 = t2.constant(2, 4, vec![0.0; 8]).unwrap();
        let c02 = t2.constant(2, 4, vec![0.0; 8]).unwrap();
        let states = lstm_unroll(&mut t2, w2, b2, 4, &[xv2], h02, c02).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(t1.value(h), t2.value(states[0].0));

        assert!(matches!(
            lstm_unroll(&mut t2, w2, b2, 4, &[], h02, c02),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn hidden_state_stays_inside_unit_interval() {
        let p = LstmParams::init(5, 6, 11);
        let mut tape = Tape::new();
        let (w, b) = (tape.leaf(&p.w), tape.leaf(&p.b));
        let h0 = tape.constant(3, 6, vec![0.0; 18]).unwrap();
        let c0 = tape.constant(3, 6, vec![0.0; 18]).unwrap();
        let xs: Vec<Var> = (0..10)
            .map(|t| {
                tape.constant(3, 5, (0..15).map(|i| ((t * 17 + i) as f64).sin() * 3.0).collect())
                    .unwrap()
            })
            .collect();
        let states = lstm_unroll(&mut tape, w, b, 6, &xs, h0, c0).unwrap();
        for (h, _) in states {
            assert!(tape.value(h).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        let p = LstmParams::init(2, 3, 5);
        let x0 = Tensor::from_vec(2, 2, vec![0.3, -0.5, 0.8, 0.1]).unwrap();
        let x1 = Tensor::from_vec(2, 2, vec![-0.2, 0.6, 0.4, -0.9]).unwrap();
        let x2 = Tensor::from_vec(2, 2, vec![0.7, 0.2, -0.3, 0.5]).unwrap();
        let leaves = vec![p.w.clone(), p.b.clone(), x0, x1, x2];
        let r = check_gradients("bptt", &leaves, 1e-4, |tape, vars| {
            let h0 = tape.constant(2, 3, vec![0.0; 6])?;
            let c0 = tape.constant(2, 3, vec![0.0; 6])?;
            let states = lstm_unroll(tape, vars[0], vars[1], 3, &vars[2..], h0, c0)?;
            let last = states.last().unwrap().0;
            let sq = tape.mul(last, last)?;
            Ok(tape.sum_all(sq))
        });
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn dense_forward_identity_softmax_tanh() {
        let mut tape = Tape::new();
        let w = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let x = tape.constant(1, 2, vec![0.4, -0.7]).unwrap();
        let y = dense_forward(&mut tape, w, b, Activation::Identity, x).unwrap();
        assert_eq!(tape.value(y), &[0.4, -0.7]);

        let wz = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let bz = tape.constant(1, 3, vec![0.0; 3]).unwrap();
        let s = dense_forward(&mut tape, wz, bz, Activation::Softmax, x).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.constant(1, 2, vec![50.0, -50.0]).unwrap();
        let t = dense_forward(&mut tape, w, b, Activation::Tanh, big).unwrap();
        assert!(tape.value(t).iter().all(|v| v.abs() < 1.0 + 1e-15));
    }

    #[test]
    fn params_round_trip_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.params");
        let p = LstmParams::init(3, 4, 9);
        let d = DenseParams::init(4, 2, Activation::Softmax, 10);
        let named: Vec<(String, &Tensor)> = vec![
            ("lstm1.w".into(), &p.w),
            ("lstm1.b".into(), &p.b),
            ("head.w".into(), &d.w),
            ("head.b".into(), &d.b),
        ];
        save_params(&path, &named).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 4);
        for ((name, t), (lname, lt)) in named.iter().zip(&loaded) {
            assert_eq!(name, lname);
            assert_eq!(t.data(), lt.data());
            assert_eq!((t.rows(), t.cols()), (lt.rows(), lt.cols()));
        }
    }

    #[test]
    fn params_loader_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.params");
        std::fs::write(&path, "not-a-header\n").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format(_))));
    }
}
