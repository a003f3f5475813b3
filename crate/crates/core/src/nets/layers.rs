use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Result, Tape, Tensor};

/// Ordered, named parameter tensors owned by one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Replaces the value at `index`; the shape must not change.
    pub fn set(&mut self, index: usize, value: Tensor) {
        assert_eq!(self.values[index].shape(), value.shape(), "parameter {}", self.names[index]);
        self.values[index] = value.detach();
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> bool {
        match self.names.iter().position(|n| n == name) {
            Some(i) => {
                self.set(i, value);
                true
            }
            None => false,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; constants on a no-grad tape.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.values.iter().map(|v| tape.leaf(v)).collect()
    }
}

pub(crate) fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("valid shape")
}

/// Square orthogonal matrix via modified Gram-Schmidt on Gaussian columns.
pub(crate) fn orthogonal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = cols[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|a| *a /= norm);
        }
        if ok {
            let mut out = vec![0.0; n * n];
            for (j, col) in cols.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    out[i * n + j] = v;
                }
            }
            return out;
        }
    }
}

/// Affine map `x·W + b` with `W` stored `[input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub(crate) fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[input, output])
        } else {
            uniform_fan_in(rng, &[input, output], input)
        };
        let w = params.push(format!("{name}.weight"), w);
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { w, b, input, output }
    }

    /// Accepts `[input]` or `[n, input]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &p[self.w])?;
        tape.add(&y, &p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: usize,
    pub spec: ConvSpec,
}

impl Conv {
    pub(crate) fn new(params: &mut ParamSet, name: &str, channels: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = channels * spec.kernel * spec.kernel;
        let w = uniform_fan_in(rng, &[spec.filters, channels, spec.kernel, spec.kernel], fan_in);
        let w = params.push(format!("{name}.weight"), w);
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[spec.filters]));
        Self { w, b, spec }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        tape.conv2d(x, &p[self.w], &p[self.b], self.spec.stride)
    }
}

/// Hidden and cell state of an LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            c: self.c.detach(),
        }
    }
}

/// Standard four-gate LSTM cell; gate order is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    wx: usize,
    wh: usize,
    b: usize,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub(crate) fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = uniform_fan_in(rng, &[input, 4 * hidden], input);
        let mut wh = vec![0.0; hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(rng, hidden);
            for i in 0..hidden {
                for j in 0..hidden {
                    wh[i * 4 * hidden + gate * hidden + j] = q[i * hidden + j];
                }
            }
        }
        let wh = Tensor::new(vec![hidden, 4 * hidden], wh).expect("valid shape");
        let wx = params.push(format!("{name}.weight_ih"), wx);
        let wh = params.push(format!("{name}.weight_hh"), wh);
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]));
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    /// Input projection `x·Wx` for `[input]` or `[T, input]`.
    pub fn project(&self, tape: &mut Tape, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        tape.matmul(x, &p[self.wx])
    }

    /// One cell update from an already projected input of shape `[4H]`.
    pub fn cell(&self, tape: &mut Tape, p: &[Tensor], xproj: &Tensor, state: &LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let rec = tape.matmul(&state.h, &p[self.wh])?;
        let z = tape.add(xproj, &rec)?;
        let z = tape.add(&z, &p[self.b])?;
        let i = tape.slice(&z, 0, 0, h)?;
        let f = tape.slice(&z, 0, h, 2 * h)?;
        let g = tape.slice(&z, 0, 2 * h, 3 * h)?;
        let o = tape.slice(&z, 0, 3 * h, 4 * h)?;
        let i = tape.sigmoid(&i)?;
        let f = tape.sigmoid(&f)?;
        let g = tape.tanh(&g)?;
        let o = tape.sigmoid(&o)?;
        let keep = tape.mul(&f, &state.c)?;
        let write = tape.mul(&i, &g)?;
        let c = tape.add(&keep, &write)?;
        let tc = tape.tanh(&c)?;
        let h = tape.mul(&o, &tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, tape: &mut Tape, p: &[Tensor], x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let xp = self.project(tape, p, x)?;
        self.cell(tape, p, &xp, state)
    }
}
