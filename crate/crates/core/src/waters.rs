//! Waters signatures over a toy generic group.
//!
//! Group elements are stored as their discrete logarithms ("labels"), so the
//! pairing is multiplication mod p. This keeps every verification equation
//! checkable but offers no security: it is a structural stand-in only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{CircuitBuilder, NandCircuit};
use crate::error::{check_len, Error, Result};
use crate::ising::IsingModel;
use crate::spin::SpinConfiguration;

pub const MAX_CIRCUIT_P: u64 = 256;

pub fn is_prime(p: u64) -> bool {
    if p < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= p {
        if p % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Exponent-label group of prime order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenericGroup {
    pub p: u64,
}

impl GenericGroup {
    pub fn new(p: u64) -> Result<Self> {
        if !is_prime(p) || p < 3 || p >= 1 << 16 {
            return Err(Error::InvalidArgument(format!("{p} is not a prime in [3, 2^16)")));
        }
        Ok(GenericGroup { p })
    }

    pub fn pair(&self, a: u64, b: u64) -> u64 {
        a % self.p * (b % self.p) % self.p
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        (a % self.p + b % self.p) % self.p
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub p: u64,
    #[serde(rename = "A")]
    pub a: u64,
    #[serde(rename = "B")]
    pub b: u64,
    pub h: Vec<u64>,
}

impl PublicKey {
    pub fn msg_bits(&self) -> usize {
        self.h.len() - 1
    }

    pub fn group(&self) -> GenericGroup {
        GenericGroup { p: self.p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey {
    pub sk: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub s1: u64,
    pub s2: u64,
}

/// Key file; `sk` is omitted for public-only files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFile {
    pub p: u64,
    #[serde(rename = "A")]
    pub a: u64,
    #[serde(rename = "B")]
    pub b: u64,
    pub h: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sk: Option<u64>,
}

impl KeyFile {
    pub fn new(pk: &PublicKey, sk: Option<&SecretKey>) -> Self {
        KeyFile {
            p: pk.p,
            a: pk.a,
            b: pk.b,
            h: pk.h.clone(),
            sk: sk.map(|s| s.sk),
        }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey {
            p: self.p,
            a: self.a,
            b: self.b,
            h: self.h.clone(),
        }
    }

    pub fn secret(&self) -> Option<SecretKey> {
        self.sk.map(|sk| SecretKey { sk })
    }
}

pub fn keygen<R: Rng>(p: u64, ell: usize, rng: &mut R) -> Result<(PublicKey, SecretKey)> {
    let g = GenericGroup::new(p)?;
    if ell == 0 {
        return Err(Error::InvalidArgument("message length must be at least 1".into()));
    }
    let alpha = rng.gen_range(0..p);
    let beta = rng.gen_range(0..p);
    let h = (0..=ell).map(|_| rng.gen_range(0..p)).collect();
    Ok((PublicKey { p, a: alpha, b: beta, h }, SecretKey { sk: g.pair(alpha, beta) }))
}

/// Label of h₀·∏ h_i^{m_i}.
pub fn hash_exponent(pk: &PublicKey, m: &[bool]) -> Result<u64> {
    check_len(pk.msg_bits(), m.len())?;
    let mut acc = pk.h[0] % pk.p;
    for (i, &bit) in m.iter().enumerate() {
        if bit {
            acc = (acc + pk.h[i + 1]) % pk.p;
        }
    }
    Ok(acc)
}

pub fn sign_with<R: Rng>(sk: &SecretKey, pk: &PublicKey, m: &[bool], rng: &mut R) -> Result<Signature> {
    let r = rng.gen_range(0..pk.p);
    sign_deterministic(sk, pk, m, r)
}

pub fn sign_deterministic(sk: &SecretKey, pk: &PublicKey, m: &[bool], r: u64) -> Result<Signature> {
    let hm = hash_exponent(pk, m)?;
    Ok(Signature {
        s1: r % pk.p,
        s2: (sk.sk + r % pk.p * hm) % pk.p,
    })
}

pub fn verify(pk: &PublicKey, m: &[bool], sig: &Signature) -> bool {
    if m.len() != pk.msg_bits() || sig.s1 >= pk.p || sig.s2 >= pk.p {
        return false;
    }
    let g = pk.group();
    let hm = hash_exponent(pk, m).expect("length checked");
    g.mul(g.pair(pk.a, pk.b), g.pair(sig.s1, hm)) == sig.s2
}

/// All signatures accepted for `m`, by exhaustion over Z_p².
pub fn accepting_set(pk: &PublicKey, m: &[bool]) -> Vec<Signature> {
    let mut out = Vec::new();
    for s1 in 0..pk.p {
        for s2 in 0..pk.p {
            let s = Signature { s1, s2 };
            if verify(pk, m, &s) {
                out.push(s);
            }
        }
    }
    out
}

/// Bit layout of verifier inputs: public key, message, signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub p: u64,
    pub k: usize,
    pub ell: usize,
}

impl Layout {
    pub fn new(p: u64, ell: usize) -> Self {
        let k = (64 - (p - 1).leading_zeros()) as usize;
        Layout { p, k, ell }
    }

    pub fn pk_len(&self) -> usize {
        (3 + self.ell) * self.k
    }

    pub fn msg_len(&self) -> usize {
        self.ell
    }

    pub fn sig_len(&self) -> usize {
        2 * self.k
    }

    pub fn n_inputs(&self) -> usize {
        self.pk_len() + self.msg_len() + self.sig_len()
    }

    pub fn msg_start(&self) -> usize {
        self.pk_len()
    }

    pub fn sig_start(&self) -> usize {
        self.pk_len() + self.ell
    }

    fn push_label(&self, out: &mut Vec<bool>, v: u64) {
        out.extend((0..self.k).map(|i| (v >> i) & 1 == 1));
    }

    pub fn encode_pk(&self, pk: &PublicKey) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.pk_len());
        self.push_label(&mut out, pk.a);
        self.push_label(&mut out, pk.b);
        for &h in &pk.h {
            self.push_label(&mut out, h);
        }
        out
    }

    pub fn encode(&self, pk: &PublicKey, m: &[bool], sig: &Signature) -> Vec<bool> {
        let mut out = self.encode_pk(pk);
        out.extend_from_slice(m);
        self.push_label(&mut out, sig.s1);
        self.push_label(&mut out, sig.s2);
        out
    }

    fn label(&self, bits: &[bool]) -> u64 {
        bits.iter().enumerate().map(|(i, &b)| (b as u64) << i).sum()
    }

    /// Raw (unreduced) labels from an input bit string.
    pub fn decode(&self, bits: &[bool]) -> (PublicKey, Vec<bool>, Signature) {
        let k = self.k;
        let lab = |i: usize| self.label(&bits[i * k..(i + 1) * k]);
        let pk = PublicKey {
            p: self.p,
            a: lab(0),
            b: lab(1),
            h: (0..=self.ell).map(|i| lab(2 + i)).collect(),
        };
        let m = bits[self.msg_start()..self.sig_start()].to_vec();
        let s = self.sig_start();
        let sig = Signature {
            s1: self.label(&bits[s..s + k]),
            s2: self.label(&bits[s + k..s + 2 * k]),
        };
        (pk, m, sig)
    }

    /// Verification on raw labels: key labels act mod p, signature labels must be < p.
    pub fn verify_bits(&self, bits: &[bool]) -> bool {
        let (pk, m, sig) = self.decode(bits);
        verify(&pk, &m, &sig)
    }
}

pub fn compile_verifier(p: u64, ell: usize) -> Result<NandCircuit> {
    GenericGroup::new(p)?;
    if p >= MAX_CIRCUIT_P {
        return Err(Error::SizeGuard {
            what: "p",
            value: p as usize,
            limit: MAX_CIRCUIT_P as usize - 1,
        });
    }
    let lay = Layout::new(p, ell);
    let k = lay.k;
    let mut b = CircuitBuilder::new(lay.n_inputs());
    let label = |b: &CircuitBuilder, i: usize| b.inputs(i * k, k);
    let a_raw = label(&b, 0);
    let b_raw = label(&b, 1);
    let a_red = b.reduce_once(&a_raw, p, k);
    let ab = b.mod_mul(&a_red, &b_raw, p);
    let h0 = label(&b, 2);
    let mut hm = b.reduce_once(&h0, p, k);
    for i in 0..ell {
        let hi = label(&b, 3 + i);
        let hr = b.reduce_once(&hi, p, k);
        let bit = b.input(lay.msg_start() + i);
        let masked = b.mask(bit, &hr);
        hm = b.mod_add(&hm, &masked, p);
    }
    let s1 = b.inputs(lay.sig_start(), k);
    let s2 = b.inputs(lay.sig_start() + k, k);
    let t = b.mod_mul(&hm, &s1, p);
    let lhs = b.mod_add(&ab, &t, p);
    let eq = b.equal(&lhs, &s2);
    let r1 = b.lt_const(&s1, p);
    let r2 = b.lt_const(&s2, p);
    let rr = b.and(r1, r2);
    let out = b.and(eq, rr);
    b.finish(out)
}

/// Ising model whose maximal-density configurations are the valid
/// verifier traces under a fixed public key with accepting output.
#[derive(Clone, Debug)]
pub struct MuPk {
    pub model: IsingModel,
    pub circuit: NandCircuit,
    pub layout: Layout,
    pub pinned: Vec<usize>,
    pub pinned_values: Vec<i8>,
    pub w: f64,
}

pub fn default_w(circuit: &NandCircuit) -> f64 {
    (3.0 * circuit.gates.len() as f64).max(12.0)
}

pub fn build_mu_pk(pk: &PublicKey, w: f64) -> Result<MuPk> {
    let circuit = compile_verifier(pk.p, pk.msg_bits())?;
    build_mu_pk_with(pk, w, circuit)
}

pub fn build_mu_pk_with(pk: &PublicKey, w: f64, circuit: NandCircuit) -> Result<MuPk> {
    let layout = Layout::new(pk.p, pk.msg_bits());
    check_len(layout.n_inputs(), circuit.n_inputs)?;
    let base = circuit.embed(w)?;
    let mut pinned: Vec<usize> = (0..layout.pk_len()).collect();
    let mut pinned_values: Vec<i8> = layout.encode_pk(pk).iter().map(|&b| if b { 1 } else { -1 }).collect();
    pinned.push(circuit.output());
    pinned_values.push(1);
    let field = circuit.pinning_field(&pinned, &pinned_values, w)?;
    let mut model = base.tilt(&field)?;
    model.meta.insert("kind".into(), "mu_pk".into());
    model.meta.insert("p".into(), pk.p.into());
    model.meta.insert("msg_bits".into(), pk.msg_bits().into());
    model.meta.insert("w".into(), w.into());
    Ok(MuPk {
        model,
        circuit,
        layout,
        pinned,
        pinned_values,
        w,
    })
}

impl MuPk {
    pub fn trace_config(&self, pk: &PublicKey, m: &[bool], sig: &Signature) -> Result<SpinConfiguration> {
        let bits = self.layout.encode(pk, m, sig);
        Ok(SpinConfiguration::from_bits(&self.circuit.eval_trace(&bits)?))
    }

    pub fn is_valid(&self, x: &SpinConfiguration) -> bool {
        self.circuit.validity_check(x, Some((&self.pinned, &self.pinned_values)))
    }
}

pub fn psi_msg(layout: &Layout, x: &SpinConfiguration) -> Result<Vec<bool>> {
    if x.len() < layout.n_inputs() {
        return Err(Error::Dimension {
            expected: layout.n_inputs(),
            got: x.len(),
        });
    }
    Ok((layout.msg_start()..layout.sig_start()).map(|i| x.bit(i)).collect())
}

pub fn psi_sig(layout: &Layout, x: &SpinConfiguration) -> Result<Vec<bool>> {
    if x.len() < layout.n_inputs() {
        return Err(Error::Dimension {
            expected: layout.n_inputs(),
            got: x.len(),
        });
    }
    Ok((layout.sig_start()..layout.n_inputs()).map(|i| x.bit(i)).collect())
}

/// Training draws: uniform message, fresh signature, full verifier trace.
pub fn draw_training_set<R: Rng>(
    mu: &MuPk,
    pk: &PublicKey,
    sk: &SecretKey,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SpinConfiguration>> {
    (0..count)
        .map(|_| {
            let m: Vec<bool> = (0..pk.msg_bits()).map(|_| rng.gen()).collect();
            let sig = sign_with(sk, pk, &m, rng)?;
            mu.trace_config(pk, &m, &sig)
        })
        .collect()
}
