//! Two-input NAND circuits, a small arithmetic combinator library, and the
//! embedding of a circuit's valid traces as the ground states of an Ising model.
//!
//! Vertices are 0-based: inputs `0..n_inputs`, then one vertex per gate in
//! gate order. The last vertex is the circuit output.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::ising::IsingModel;
use crate::spin::SpinConfiguration;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NandCircuit {
    pub n_inputs: usize,
    pub gates: Vec<[usize; 2]>,
}

impl NandCircuit {
    pub fn new(n_inputs: usize, gates: Vec<[usize; 2]>) -> Result<Self> {
        for (g, &[i, j]) in gates.iter().enumerate() {
            let k = n_inputs + g;
            if i >= k || j >= k {
                return Err(Error::InvalidArgument(format!(
                    "gate {g} reads wire {} not below its output {k}",
                    i.max(j)
                )));
            }
        }
        if gates.is_empty() {
            return Err(Error::InvalidArgument("circuit needs at least one gate".into()));
        }
        Ok(NandCircuit { n_inputs, gates })
    }

    /// Total vertex count: inputs plus gate outputs.
    pub fn m(&self) -> usize {
        self.n_inputs + self.gates.len()
    }

    pub fn output(&self) -> usize {
        self.m() - 1
    }

    pub fn eval_trace(&self, input: &[bool]) -> Result<Vec<bool>> {
        check_len(self.n_inputs, input.len())?;
        let mut t = Vec::with_capacity(self.m());
        t.extend_from_slice(input);
        for &[i, j] in &self.gates {
            let v = !(t[i] && t[j]);
            t.push(v);
        }
        Ok(t)
    }

    pub fn eval(&self, input: &[bool]) -> Result<bool> {
        Ok(*self.eval_trace(input)?.last().expect("nonempty"))
    }

    /// Energy per gate is w·A with A = 3 on consistent gates and A ≤ −1 otherwise.
    pub fn embed(&self, w: f64) -> Result<IsingModel> {
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!("embedding weight {w} must be positive")));
        }
        let m = self.m();
        let mut model = IsingModel::zeros(m);
        let pair = |model: &mut IsingModel, a: usize, b: usize, c: f64| {
            if a == b {
                model.add_coupling(a, a, 2.0 * c);
            } else {
                model.add_coupling(a, b, c);
            }
        };
        for (g, &[i, j]) in self.gates.iter().enumerate() {
            let k = self.n_inputs + g;
            pair(&mut model, i, j, -w);
            pair(&mut model, i, k, -2.0 * w);
            pair(&mut model, j, k, -2.0 * w);
            model.add_field(i, w);
            model.add_field(j, w);
            model.add_field(k, 2.0 * w);
        }
        Ok(model)
    }

    pub fn pinning_field(&self, set: &[usize], tau: &[i8], w: f64) -> Result<Vec<f64>> {
        check_len(set.len(), tau.len())?;
        let mut out = vec![0.0; self.m()];
        for (&i, &t) in set.iter().zip(tau) {
            if i >= self.m() {
                return Err(Error::InvalidArgument(format!("pinned vertex {i} out of range")));
            }
            out[i] = w * t as f64;
        }
        Ok(out)
    }

    /// True iff `x` is a consistent trace and agrees with the pinned values.
    pub fn validity_check(&self, x: &SpinConfiguration, pinned: Option<(&[usize], &[i8])>) -> bool {
        if x.len() != self.m() {
            return false;
        }
        for (g, &[i, j]) in self.gates.iter().enumerate() {
            if x.bit(self.n_inputs + g) == (x.bit(i) && x.bit(j)) {
                return false;
            }
        }
        if let Some((set, tau)) = pinned {
            return set.iter().zip(tau).all(|(&i, &t)| i < x.len() && x.get(i) == t);
        }
        true
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: NandCircuit = serde_json::from_str(s)?;
        NandCircuit::new(c.n_inputs, c.gates)
    }
}

/// Gate-level value of a NAND gadget: 3 on consistent (i, j, k), ≤ −1 otherwise.
pub fn gate_energy(xi: i8, xj: i8, xk: i8) -> i32 {
    let (i, j, k) = (xi as i32, xj as i32, xk as i32);
    -i * j - 2 * k * (i + j) + i + j + 2 * k
}

pub fn spins_of_bits(bits: &[bool]) -> SpinConfiguration {
    SpinConfiguration::from_bits(bits)
}

pub type Wire = usize;

/// Incremental circuit construction; every combinator expands to NAND gates.
#[derive(Clone, Debug)]
pub struct CircuitBuilder {
    n_inputs: usize,
    gates: Vec<[usize; 2]>,
    one: Option<Wire>,
    zero: Option<Wire>,
}

impl CircuitBuilder {
    pub fn new(n_inputs: usize) -> Self {
        CircuitBuilder {
            n_inputs,
            gates: Vec::new(),
            one: None,
            zero: None,
        }
    }

    pub fn input(&self, i: usize) -> Wire {
        assert!(i < self.n_inputs);
        i
    }

    pub fn inputs(&self, start: usize, len: usize) -> Vec<Wire> {
        (start..start + len).map(|i| self.input(i)).collect()
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    pub fn nand(&mut self, a: Wire, b: Wire) -> Wire {
        self.gates.push([a, b]);
        self.n_inputs + self.gates.len() - 1
    }

    pub fn not(&mut self, a: Wire) -> Wire {
        self.nand(a, a)
    }

    pub fn and(&mut self, a: Wire, b: Wire) -> Wire {
        let t = self.nand(a, b);
        self.not(t)
    }

    pub fn or(&mut self, a: Wire, b: Wire) -> Wire {
        let na = self.not(a);
        let nb = self.not(b);
        self.nand(na, nb)
    }

    pub fn xor(&mut self, a: Wire, b: Wire) -> Wire {
        let t = self.nand(a, b);
        let l = self.nand(a, t);
        let r = self.nand(b, t);
        self.nand(l, r)
    }

    pub fn xnor(&mut self, a: Wire, b: Wire) -> Wire {
        let x = self.xor(a, b);
        self.not(x)
    }

    /// `s ? a : b`
    pub fn mux(&mut self, s: Wire, a: Wire, b: Wire) -> Wire {
        let ns = self.not(s);
        let l = self.nand(s, a);
        let r = self.nand(ns, b);
        self.nand(l, r)
    }

    pub fn one(&mut self) -> Wire {
        if let Some(w) = self.one {
            return w;
        }
        assert!(self.n_inputs > 0, "constants need an input wire");
        let nx = self.not(0);
        let w = self.nand(0, nx);
        self.one = Some(w);
        w
    }

    pub fn zero(&mut self) -> Wire {
        if let Some(w) = self.zero {
            return w;
        }
        let one = self.one();
        let w = self.not(one);
        self.zero = Some(w);
        w
    }

    /// LSB-first constant of `len` bits.
    pub fn constant(&mut self, value: u64, len: usize) -> Vec<Wire> {
        (0..len)
            .map(|i| if (value >> i) & 1 == 1 { self.one() } else { self.zero() })
            .collect()
    }

    pub fn and_all(&mut self, ws: &[Wire]) -> Wire {
        let mut acc = ws[0];
        for &w in &ws[1..] {
            acc = self.and(acc, w);
        }
        acc
    }

    pub fn full_adder(&mut self, a: Wire, b: Wire, c: Wire) -> (Wire, Wire) {
        let ab = self.nand(a, b);
        let s1 = self.xor(a, b);
        let sum = self.xor(s1, c);
        let sc = self.nand(s1, c);
        let carry = self.nand(ab, sc);
        (sum, carry)
    }

    /// LSB-first ripple-carry addition; output has one extra carry bit.
    pub fn ripple_add(&mut self, a: &[Wire], b: &[Wire]) -> Vec<Wire> {
        assert_eq!(a.len(), b.len());
        let mut carry = self.zero();
        let mut out = Vec::with_capacity(a.len() + 1);
        for (&x, &y) in a.iter().zip(b) {
            let (s, c) = self.full_adder(x, y, carry);
            out.push(s);
            carry = c;
        }
        out.push(carry);
        out
    }

    /// 1 iff the unsigned value of `x` is ≥ `p`; requires p < 2^len.
    pub fn ge_const(&mut self, x: &[Wire], p: u64) -> Wire {
        let len = x.len();
        let comp = (1u64 << len) - p;
        let c = self.constant(comp, len);
        let s = self.ripple_add(x, &c);
        s[len]
    }

    pub fn lt_const(&mut self, x: &[Wire], p: u64) -> Wire {
        let ge = self.ge_const(x, p);
        self.not(ge)
    }

    /// For x < 2p, returns x mod p on `out_len` bits (p < 2^out_len).
    pub fn reduce_once(&mut self, x: &[Wire], p: u64, out_len: usize) -> Vec<Wire> {
        let len = x.len();
        let comp = (1u64 << len) - p;
        let c = self.constant(comp, len);
        let s = self.ripple_add(x, &c);
        let ge = s[len];
        (0..out_len).map(|i| self.mux(ge, s[i], x[i])).collect()
    }

    pub fn mod_add(&mut self, a: &[Wire], b: &[Wire], p: u64) -> Vec<Wire> {
        let k = a.len();
        let s = self.ripple_add(a, b);
        self.reduce_once(&s, p, k)
    }

    /// a·b mod p by shift-and-add; `a` must already be reduced, `b` is any bit string.
    pub fn mod_mul(&mut self, a: &[Wire], b: &[Wire], p: u64) -> Vec<Wire> {
        let k = a.len();
        let mut acc = self.constant(0, k);
        for (step, &bit) in b.iter().rev().enumerate() {
            if step > 0 {
                acc = self.mod_add(&acc.clone(), &acc, p);
            }
            let added = self.mod_add(&acc, a, p);
            acc = (0..k).map(|i| self.mux(bit, added[i], acc[i])).collect();
        }
        acc
    }

    pub fn mask(&mut self, bit: Wire, x: &[Wire]) -> Vec<Wire> {
        x.iter().map(|&w| self.and(bit, w)).collect()
    }

    pub fn equal(&mut self, a: &[Wire], b: &[Wire]) -> Wire {
        let eqs: Vec<Wire> = a.iter().zip(b).map(|(&x, &y)| self.xnor(x, y)).collect();
        self.and_all(&eqs)
    }

    /// Finishes with `out` as the last vertex.
    pub fn finish(mut self, out: Wire) -> Result<NandCircuit> {
        if self.gates.is_empty() || out != self.n_inputs + self.gates.len() - 1 {
            let t = self.not(out);
            self.not(t);
        }
        NandCircuit::new(self.n_inputs, self.gates)
    }
}
