use super::Builder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Tensor, Var};

/// LSTM cell. Gate pre-activations are laid out `[input, forget, candidate,
/// output]` along the last axis of the `4·units` projection.
#[derive(Clone, Debug)]
pub struct Lstm {
    inputs: usize,
    units: usize,
    w_input: Param,
    w_hidden: Param,
    bias: Param,
}

impl Lstm {
    pub fn new(b: &mut Builder, name: &str, inputs: usize, units: usize) -> Result<Self> {
        if inputs == 0 || units == 0 {
            return Err(Error::Config("LSTM extents must be positive".into()));
        }
        let w_input = b.glorot_uniform(
            &format!("{name}.w_input"),
            &[inputs, 4 * units],
            inputs,
            4 * units,
        )?;
        let w_hidden = b.glorot_uniform(
            &format!("{name}.w_hidden"),
            &[units, 4 * units],
            units,
            4 * units,
        )?;
        let bias = b.from_fn(&format!("{name}.bias"), &[4 * units], || {
            let mut t = Tensor::zeros(&[4 * units]);
            t.data_mut()[units..2 * units].fill(1.0);
            t
        })?;
        Ok(Self {
            inputs,
            units,
            w_input,
            w_hidden,
            bias,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn param_count(&self) -> usize {
        4 * self.units * (self.inputs + self.units + 1)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w_input.clone(),
            self.w_hidden.clone(),
            self.bias.clone(),
        ]
    }

    /// One step on `x: (b, inputs)` from state `h, c: (b, units)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = g.param(&self.w_input);
        let proj = g.matmul(x, wx)?;
        let bias = g.param(&self.bias);
        let proj = g.add_bias(proj, bias, 1)?;
        self.step_projected(g, proj, h, c)
    }

    fn step_projected(&self, g: &mut Graph, proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let u = self.units;
        if g.shape(h).last() != Some(&u) || g.shape(c) != g.shape(h) {
            return Err(Error::shape("lstm state", g.shape(h), g.shape(c)));
        }
        let wh = g.param(&self.w_hidden);
        let rec = g.matmul(h, wh)?;
        let pre = g.add(proj, rec)?;
        let parts = g.split(pre, 1, &[u, u, u, u])?;
        let i = g.sigmoid(parts[0]);
        let f = g.sigmoid(parts[1]);
        let cand = g.tanh(parts[2]);
        let o = g.sigmoid(parts[3]);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Runs the cell over `seq: (T, b, inputs)` from a zero state and returns
    /// the hidden states `(T, b, units)`.
    pub fn run(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.inputs {
            return Err(Error::shape("lstm input", &s, &[self.inputs]));
        }
        let (steps, batch) = (s[0], s[1]);
        let flat = g.reshape(seq, &[steps * batch, self.inputs])?;
        let wx = g.param(&self.w_input);
        let proj = g.matmul(flat, wx)?;
        let bias = g.param(&self.bias);
        let proj = g.add_bias(proj, bias, 1)?;
        let mut h = g.input(Tensor::zeros(&[batch, self.units]));
        let mut c = g.input(Tensor::zeros(&[batch, self.units]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let p = g.narrow(proj, 0, t * batch, batch)?;
            (h, c) = self.step_projected(g, p, h, c)?;
            outputs.push(h);
        }
        let stacked = g.concat(&outputs, 0)?;
        g.reshape(stacked, &[steps, batch, self.units])
    }
}

/// Bidirectional LSTM: forward pass and time-reversed pass concatenated on
/// the feature axis, `(T, b, in) → (T, b, 2·units)`.
#[derive(Clone, Debug)]
pub struct Blstm {
    forward: Lstm,
    backward: Lstm,
}

impl Blstm {
    pub fn new(b: &mut Builder, name: &str, inputs: usize, units: usize) -> Result<Self> {
        Ok(Self {
            forward: Lstm::new(b, &format!("{name}.fw"), inputs, units)?,
            backward: Lstm::new(b, &format!("{name}.bw"), inputs, units)?,
        })
    }

    pub fn from_cells(forward: Lstm, backward: Lstm) -> Result<Self> {
        if forward.inputs != backward.inputs || forward.units != backward.units {
            return Err(Error::Config(
                "BLSTM directions must have equal extents".into(),
            ));
        }
        Ok(Self { forward, backward })
    }

    pub fn units(&self) -> usize {
        self.forward.units
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        if g.shape(seq).first() == Some(&0) || g.shape(seq).len() != 3 {
            return Err(Error::InvalidArgument(
                "BLSTM needs a (T ≥ 1, b, in) sequence".into(),
            ));
        }
        let fw = self.forward.run(g, seq)?;
        let rev = g.reverse_rows(seq);
        let bw = self.backward.run(g, rev)?;
        let bw = g.reverse_rows(bw);
        g.concat(&[fw, bw], 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParamStore};

    fn cell(store: &mut ParamStore, name: &str, inputs: usize, units: usize) -> Lstm {
        Lstm::new(&mut Builder::new(store, 11), name, inputs, units).unwrap()
    }

    fn set_bias(store: &ParamStore, name: &str, units: usize, gates: [f64; 4]) {
        let mut b = vec![0.0; 4 * units];
        for (k, v) in gates.iter().enumerate() {
            b[k * units..(k + 1) * units].fill(*v);
        }
        store
            .get(&format!("{name}.bias"))
            .unwrap()
            .set_value(Tensor::from_slice(&[4 * units], &b))
            .unwrap();
    }

    fn zero_weights(store: &ParamStore, name: &str) {
        for w in ["w_input", "w_hidden"] {
            let p = store.get(&format!("{name}.{w}")).unwrap();
            p.value_mut().data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_everything_stays_zero() {
        let mut store = ParamStore::new();
        let l = cell(&mut store, "l", 3, 2);
        zero_weights(&store, "l");
        set_bias(&store, "l", 2, [0.0; 4]);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(Tensor::from_slice(&[1, 3], &[0.3, -1.0, 2.0]));
        let h = g.input(Tensor::zeros(&[1, 2]));
        let c = g.input(Tensor::zeros(&[1, 2]));
        let (h2, c2) = l.step(&mut g, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates() {
        let mut store = ParamStore::new();
        let l = cell(&mut store, "l", 1, 1);
        zero_weights(&store, "l");
        // i, f, o open and candidate at +1: c' = f·0 + 1·1, h' = tanh(1)
        set_bias(&store, "l", 1, [40.0, 40.0, 40.0, 40.0]);
        let mut g = Graph::new(Mode::Eval, 0);
        let zero = g.input(Tensor::zeros(&[1, 1]));
        let (h2, c2) = l.step(&mut g, zero, zero, zero).unwrap();
        assert!((g.value(c2).item() - 1.0).abs() < 1e-12);
        assert!((g.value(h2).item() - 1f64.tanh()).abs() < 1e-12);

        // forget open, input closed: the cell carries over unchanged
        set_bias(&store, "l", 1, [-20.0, 20.0, 0.0, 0.0]);
        let mut g = Graph::new(Mode::Eval, 0);
        let zero = g.input(Tensor::zeros(&[1, 1]));
        let c = g.input(Tensor::scalar(0.5).reshape(&[1, 1]).unwrap());
        let (_, c2) = l.step(&mut g, zero, zero, c).unwrap();
        assert!((g.value(c2).item() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn single_frame_blstm_is_two_steps_from_zero() {
        let mut store = ParamStore::new();
        let blstm = Blstm::new(&mut Builder::new(&mut store, 5), "b", 2, 3).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(Tensor::from_slice(&[1, 1, 2], &[0.4, -0.7]));
        let y = blstm.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 6]);
        let out = g.value(y).data().to_vec();
        let x2 = g.input(Tensor::from_slice(&[1, 2], &[0.4, -0.7]));
        let zero = g.input(Tensor::zeros(&[1, 3]));
        let (hf, _) = blstm.forward.step(&mut g, x2, zero, zero).unwrap();
        let (hb, _) = blstm.backward.step(&mut g, x2, zero, zero).unwrap();
        let mut expect = g.value(hf).data().to_vec();
        expect.extend_from_slice(g.value(hb).data());
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut store = ParamStore::new();
        let blstm = Blstm::new(&mut Builder::new(&mut store, 5), "b", 2, 3).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!(blstm.forward(&mut g, x).is_err());
    }
}
